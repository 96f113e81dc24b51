"""Train a small model on a small synthetic dataset, then evaluate it.

Everything is scaled down (24 cases, 32x32 slices) so the demo finishes
in well under a minute on a laptop CPU. Artifacts land in
demo_out/train_small/.
"""

import os

from shapeprior import ModelConfig, TrainConfig, evaluate, gen_dataset, train

OUT = os.path.join("demo_out", "train_small")


def main():
    data_dir = os.path.join(OUT, "data")
    manifest = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(manifest):
        gen_dataset(data_dir, cases=24, seed=0, extents=(8, 32, 32))
        print(f"generated 24 cases in {data_dir}")

    config = TrainConfig(
        manifest=manifest,
        out_dir=os.path.join(OUT, "run"),
        model=ModelConfig(base_width=8, patch_extents=(8, 32, 32),
                          spm_enabled=True, seed=0),
        epochs=30,
        batch_size=2,
        warmup_epochs=3,
        seed=0,
    )
    result = train(config)
    print(f"best val dice {result.best_val_dice:.3f} "
          f"at epoch {result.best_epoch}")
    print(f"final train loss {result.final_train_loss:.3f}")

    records, rows = evaluate(result.best_checkpoint, manifest, split="test")
    print("\ntest metrics (epoch,split,class,dice,hd95):")
    for row in rows:
        print(" ", row)


if __name__ == "__main__":
    main()
