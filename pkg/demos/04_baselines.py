"""The two classical baselines on the synthetic anatomy.

The atlas approach transfers labels from registered training pairs; the
GMM approach clusters intensities. The scene is built so that intensity
alone cannot separate the two blood pools (classes 1 and 3), which is
exactly what the GMM numbers show.
"""

import numpy as np

from shapeprior import (
    AtlasBase,
    atlas_segment,
    dice_score,
    gen_case,
    gmm_fit_em,
    gmm_segment,
)


def main():
    pairs = [gen_case(seed) for seed in range(6)]
    test_vol, test_gt = gen_case(99)

    atlas = AtlasBase(pairs)
    pred = atlas_segment(test_vol, atlas, radius=3, temperature=0.0)
    print("atlas label propagation:")
    for c in (1, 2, 3):
        print(f"  class {c}: dice {dice_score(pred.labels, test_gt.labels, c):.3f}")

    # the scene has three intensity bands (background, muscle, blood), so
    # fit three components and map each to the ground-truth class it
    # overlaps most, the same convention the CLI uses
    mix = gmm_fit_em(test_vol.voxels.ravel(), n=3)
    raw = gmm_segment(test_vol, mix).labels
    mapped = np.zeros_like(raw)
    for comp in range(3):
        sel = raw == comp
        if sel.any():
            mapped[sel] = np.bincount(test_gt.labels[sel].ravel(),
                                      minlength=4).argmax()
    print("\nintensity GMM (component -> majority class):")
    for c in (1, 2, 3):
        print(f"  class {c}: dice {dice_score(mapped, test_gt.labels, c):.3f}")
    print("\nfitted means:", np.round(np.sort(mix.means), 3))
    print("background is about 7/8 of the voxels, so EM parks two of the "
          "three components inside it and lumps all bright tissue into the "
          "last one, which maps to the largest class it covers. And even a "
          "perfect fit could not tell classes 1 and 3 apart: they share one "
          "intensity by construction, and only shape separates them.")


if __name__ == "__main__":
    main()
