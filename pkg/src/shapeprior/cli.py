"""Command-line entry points.

Subcommands: gen-data, train, eval, export-attn, baseline-atlas,
baseline-gmm, gradcheck. All of them exit 0 on success and nonzero with a
message on stderr otherwise. Metrics are printed as CSV with the header
``epoch,split,class,dice,hd95``.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .baselines import AtlasBase, atlas_segment, gmm_fit_em, gmm_segment
from .data import gen_dataset, load_manifest, read_mask, read_volume
from .gradcheck import check_op_suite
from .metrics import summarize_case
from .training import (
    METRICS_HEADER,
    TrainConfig,
    _aggregate_rows,
    evaluate,
    export_attention,
    train,
)


def _parse_extents(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(
            f"extents must look like 8x64x64, got {text!r}"
        )
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"extents must be three integers, got {text!r}"
        )


def _cmd_gen_data(args) -> int:
    manifest = gen_dataset(args.out, cases=args.cases, seed=args.seed,
                           extents=args.extents,
                           noise_sigma=args.noise_sigma)
    counts = {s: len(manifest.split_cases(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(manifest.cases)} cases to {args.out} "
          f"(train={counts['train']} val={counts['val']} test={counts['test']})")
    return 0


def _cmd_train(args) -> int:
    config = TrainConfig.from_json_file(args.config)
    result = train(config)
    print(f"finished {config.epochs} epochs; best mean val dice "
          f"{result.best_val_dice:.4f} at epoch {result.best_epoch}")
    print(f"checkpoints: {result.best_checkpoint} {result.last_checkpoint}")
    print(f"logs: {result.train_log_csv} {result.metrics_csv}")
    return 0


def _cmd_eval(args) -> int:
    _, rows = evaluate(args.ckpt, args.manifest, split=args.split,
                       out_csv=args.out)
    print(METRICS_HEADER)
    for row in rows:
        print(row)
    return 0


def _cmd_export_attn(args) -> int:
    written = export_attention(args.ckpt, args.case, args.out)
    print(f"wrote {len(written)} files to {args.out}")
    return 0


def _load_split_pairs(manifest, split):
    entries = manifest.split_cases(split)
    if not entries:
        raise ValueError(f"manifest has no {split!r} cases")
    return [(read_volume(manifest.volume_path(e)),
             read_mask(manifest.mask_path(e))) for e in entries]


def _print_case_table(manifest, preds, split: str) -> None:
    n = manifest.n_classes
    records = []
    for entry, pred in preds:
        gt = read_mask(manifest.mask_path(entry))
        records.append(summarize_case(pred.labels, gt.labels, n,
                                      gt.spacing, epoch=0, split=split))
    print(METRICS_HEADER)
    for row in _aggregate_rows(records, 0, split, n):
        print(row)


def _cmd_baseline_atlas(args) -> int:
    manifest = load_manifest(args.manifest)
    bases = AtlasBase(_load_split_pairs(manifest, "train"))
    preds = []
    for entry in manifest.split_cases("test"):
        test = read_volume(manifest.volume_path(entry))
        preds.append((entry, atlas_segment(test, bases, radius=args.radius,
                                           temperature=args.temperature)))
    _print_case_table(manifest, preds, "test")
    return 0


def _cmd_baseline_gmm(args) -> int:
    # Unsupervised per-case fit; components are matched to classes by
    # majority overlap with the ground truth so Dice is comparable.
    manifest = load_manifest(args.manifest)
    entries = manifest.split_cases("test")
    if not entries:
        raise ValueError("manifest has no 'test' cases")
    n = manifest.n_classes
    records = []
    for entry in entries:
        test = read_volume(manifest.volume_path(entry))
        gt = read_mask(manifest.mask_path(entry))
        mixture = gmm_fit_em(test.voxels.ravel(), args.components,
                             init_seed=args.seed)
        raw = gmm_segment(test, mixture).labels
        mapped = np.zeros_like(raw)
        for comp in range(args.components):
            sel = raw == comp
            if sel.any():
                mapped[sel] = np.bincount(
                    gt.labels[sel].ravel(), minlength=n).argmax()
        records.append(summarize_case(mapped, gt.labels, n, gt.spacing,
                                      epoch=0, split="test"))
    print(METRICS_HEADER)
    for row in _aggregate_rows(records, 0, "test", n):
        print(row)
    return 0


def _cmd_gradcheck(args) -> int:
    results, elapsed = check_op_suite(full=args.full)
    for r in results:
        print(r)
    n_fail = sum(not r.passed for r in results)
    print(f"{len(results) - n_fail}/{len(results)} checks passed "
          f"in {elapsed:.1f}s")
    return 1 if n_fail else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shapeprior",
        description="Shape-prior segmentation: data, training, baselines.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--cases", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--extents", type=_parse_extents, default=(8, 64, 64))
    p.add_argument("--noise-sigma", type=float, default=0.05)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train from a JSON config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test",
                   choices=("train", "val", "test"))
    p.add_argument("--out", default=None, help="also write the CSV here")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("export-attn",
                       help="dump per-stage prior maps for one case")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--case", required=True, help="a .vol.spmv file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export_attn)

    p = sub.add_parser("baseline-atlas",
                       help="atlas label propagation over the test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--radius", type=int, default=4)
    p.add_argument("--temperature", type=float, default=0.0)
    p.set_defaults(func=_cmd_baseline_atlas)

    p = sub.add_parser("baseline-gmm",
                       help="intensity GMM segmentation over the test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--components", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_baseline_gmm)

    p = sub.add_parser("gradcheck",
                       help="finite-difference checks of every operator")
    p.add_argument("--full", action="store_true",
                   help="extended suite (slower)")
    p.set_defaults(func=_cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface a readable one-liner, not a trace
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
