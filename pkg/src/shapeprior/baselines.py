"""Classical segmentation paradigms used as conceptual baselines.

Two approaches bracket the learnable-prior idea:

* atlas label propagation: register (image, mask) base pairs to the test
  image with integer translations, then take a similarity-weighted vote of
  the translated base masks;
* Gaussian-mixture intensity segmentation: fit a 1-D mixture with EM and
  label each voxel by the most likely component.

Both are exact, deterministic desk-scale implementations intended for
comparison and as test oracles, not for performance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import MaskVolume, Volume

VARIANCE_FLOOR = 1e-6


@dataclass
class Registration:
    translation: tuple[int, int, int]
    score: float  # negative SSD over the overlap region


@dataclass
class AtlasBase:
    """Registration base: m co-sized (image, mask) pairs, m >= 1."""

    pairs: list[tuple[Volume, MaskVolume]]

    def __post_init__(self):
        if not self.pairs:
            raise ValueError("atlas base must contain at least one pair")
        ext = self.pairs[0][0].extents
        for vol, mask in self.pairs:
            if vol.extents != ext or mask.extents != ext:
                raise ValueError("all base pairs must share one extent")

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.pairs[0][0].extents


def _overlap_slices(shape, t):
    src, dst = [], []
    for n, ti in zip(shape, t):
        dst.append(slice(max(0, ti), n + min(0, ti)))
        src.append(slice(max(0, -ti), n - max(0, ti)))
    return tuple(src), tuple(dst)


def register_translation(source: Volume, target: Volume,
                         radius: int) -> Registration:
    """Exhaustive integer-translation registration minimizing SSD.

    SSD is computed over the overlap region of the shifted source and the
    target. Ties are broken by smaller L1 norm of the translation, then
    lexicographically.
    """
    if radius < 0:
        raise ValueError("search radius must be non-negative")
    if source.extents != target.extents:
        raise ValueError(
            f"extents differ: {source.extents} vs {target.extents}"
        )
    src = source.voxels.astype(np.float64)
    tgt = target.voxels.astype(np.float64)
    best = None
    r = int(radius)
    for tz in range(-r, r + 1):
        for ty in range(-r, r + 1):
            for tx in range(-r, r + 1):
                t = (tz, ty, tx)
                s_idx, d_idx = _overlap_slices(src.shape, t)
                diff = src[s_idx] - tgt[d_idx]
                ssd = float((diff * diff).sum())
                key = (ssd, abs(tz) + abs(ty) + abs(tx), t)
                if best is None or key < best:
                    best = key
    ssd, _, t = best
    return Registration(translation=t, score=-ssd)


def translate_mask(mask: MaskVolume, t) -> MaskVolume:
    """Shift labels by t voxels; anything moved out of frame becomes
    background and freshly exposed voxels are background."""
    out = np.zeros_like(mask.labels)
    s_idx, d_idx = _overlap_slices(mask.labels.shape, t)
    out[d_idx] = mask.labels[s_idx]
    return MaskVolume(out, mask.spacing)


def atlas_segment(test: Volume, bases: AtlasBase, radius: int,
                  temperature: float) -> MaskVolume:
    """Label propagation: per-voxel argmax of similarity-weighted one-hot
    votes from translated base masks.

    Base weights are softmax(-SSD_i / temperature); at temperature <= 0 the
    single most similar base wins outright. Vote ties go to the lower class
    id.
    """
    if bases.extents != test.extents:
        raise ValueError(
            f"extents differ: base {bases.extents} vs test {test.extents}"
        )
    regs = [register_translation(vol, test, radius) for vol, _ in bases.pairs]
    ssd = np.array([-r.score for r in regs], dtype=np.float64)
    if temperature <= 0:
        weights = np.zeros(len(ssd))
        weights[int(np.argmin(ssd))] = 1.0
    else:
        z = -ssd / float(temperature)
        z -= z.max()
        e = np.exp(z)
        weights = e / e.sum()
    n_classes = int(max(int(m.labels.max()) for _, m in bases.pairs)) + 1
    votes = np.zeros((n_classes,) + test.extents, dtype=np.float64)
    for w, reg, (_, mask) in zip(weights, regs, bases.pairs):
        if w == 0.0:
            continue
        shifted = translate_mask(mask, reg.translation).labels
        for c in range(n_classes):
            votes[c][shifted == c] += w
    labels = np.argmax(votes, axis=0).astype(np.uint8)
    return MaskVolume(labels, test.spacing)


# -- Gaussian mixture --------------------------------------------------------------


@dataclass
class GaussianMixture:
    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    log_likelihood_trace: list[float] = field(default_factory=list)
    converged: bool = False
    degenerate: bool = False

    @property
    def n_components(self) -> int:
        return len(self.means)


def _log_gauss(x: np.ndarray, mean: float, var: float) -> np.ndarray:
    return -0.5 * ((x - mean) ** 2 / var + np.log(2.0 * np.pi * var))


def gmm_fit_em(pixels, n: int, init_seed: int = 0, max_iter: int = 200,
               tol: float = 1e-7) -> GaussianMixture:
    """Fit a 1-D Gaussian mixture by expectation-maximization.

    Means start at the (i+0.5)/n quantiles of the data; the seed only
    matters when quantiles collide, in which case a tiny deterministic
    jitter separates them. Variances are floored at 1e-6; an all-equal
    input with n > 1 yields a floor-variance result flagged as degenerate.
    The log-likelihood trace is recorded per iteration and is non-decreasing.
    """
    x = np.asarray(pixels, dtype=np.float64).reshape(-1)
    if n < 1:
        raise ValueError("need at least one component")
    if x.size < n:
        raise ValueError(f"need at least {n} samples, got {x.size}")

    means = np.quantile(x, (np.arange(n) + 0.5) / n)
    degenerate = np.unique(x).size < n
    if np.unique(means).size < n:
        rng = np.random.default_rng(init_seed)
        scale = max(float(x.std()), 1.0) * 1e-6
        means = means + rng.normal(0.0, scale, size=n)
    var0 = max(float(x.var()) / (n * n), VARIANCE_FLOOR)
    variances = np.full(n, var0)
    weights = np.full(n, 1.0 / n)

    trace: list[float] = []
    converged = False
    for _ in range(max_iter):
        log_p = np.stack([
            np.log(weights[i]) + _log_gauss(x, means[i], variances[i])
            for i in range(n)
        ])  # (n, samples)
        m = log_p.max(axis=0)
        lse = m + np.log(np.exp(log_p - m).sum(axis=0))
        ll = float(lse.sum())
        trace.append(ll)
        if len(trace) > 1 and ll - trace[-2] < tol:
            converged = True
            break
        resp = np.exp(log_p - lse)  # responsibilities, columns sum to 1
        mass = resp.sum(axis=1)
        means = (resp @ x) / mass
        variances = np.maximum(
            (resp * (x[None, :] - means[:, None]) ** 2).sum(axis=1) / mass,
            VARIANCE_FLOOR)
        weights = mass / x.size
    return GaussianMixture(means=means, variances=variances, weights=weights,
                           log_likelihood_trace=trace, converged=converged,
                           degenerate=degenerate or bool(
                               (variances <= VARIANCE_FLOOR).any() and n > 1))


def gmm_segment(test: Volume, mixture: GaussianMixture) -> MaskVolume:
    """Per-voxel argmax of weighted component likelihoods (ties to the
    lower component id)."""
    x = test.voxels.astype(np.float64).reshape(-1)
    scores = np.stack([
        np.log(max(float(mixture.weights[i]), 1e-300))
        + _log_gauss(x, mixture.means[i], mixture.variances[i])
        for i in range(mixture.n_components)
    ])
    labels = np.argmax(scores, axis=0).astype(np.uint8)
    return MaskVolume(labels.reshape(test.extents), test.spacing)
