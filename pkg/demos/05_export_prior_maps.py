"""Export per-stage prior maps from a trained checkpoint and measure how
well the enhanced prior localizes each structure.

Reuses the checkpoint from 03_train_small.py (runs it first if needed).
Writes PGM images + raw CSVs to demo_out/prior_maps/.
"""

import importlib
import os

import numpy as np

from shapeprior import export_attention, load_manifest, read_mask

OUT = os.path.join("demo_out", "train_small")


def main():
    ckpt = os.path.join(OUT, "run", "best.spmc")
    if not os.path.exists(ckpt):
        importlib.import_module("03_train_small").main()
    manifest = load_manifest(os.path.join(OUT, "data", "manifest.json"))
    case = manifest.split_cases("test")[0]

    out_dir = os.path.join("demo_out", "prior_maps")
    written = export_attention(ckpt, manifest.volume_path(case), out_dir)
    pgms = sum(1 for p in written if p.endswith(".pgm"))
    print(f"wrote {len(written)} files ({pgms} images) to {out_dir}")

    # localization: compare the enhanced prior's activation inside vs
    # outside each structure, at the prior's coarse grid. A prior cell
    # counts as inside when its block of voxels contains the class at all.
    gt = read_mask(manifest.mask_path(case)).labels
    d, h, w = gt.shape
    for c in (1, 2, 3):
        plane = np.loadtxt(
            os.path.join(out_dir, f"stage3_enhanced_class{c}.csv"),
            delimiter=",", ndmin=2)
        ph, pw = plane.shape
        blocks = (gt == c).reshape(d, ph, h // ph, pw, w // pw)
        coarse = blocks.any(axis=(0, 2, 4))
        if coarse.any() and (~coarse).any():
            inside = plane[coarse].mean()
            outside = plane[~coarse].mean()
            marker = "localized" if inside > outside else "not localized"
            print(f"  class {c}: inside {inside:+.3f} vs outside "
                  f"{outside:+.3f}  -> {marker}")
        else:
            print(f"  class {c}: structure spans every prior cell at this "
                  f"grid, nothing to compare")


if __name__ == "__main__":
    main()
