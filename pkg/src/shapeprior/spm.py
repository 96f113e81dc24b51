"""Learnable explicit shape priors and their attention update blocks.

A shape prior is a small learnable field with one channel per class. Two
blocks refine it inside the network:

* the self-update block lets the class channels attend to each other and
  mixes them through a small per-position MLP, producing a global prior;
* the cross-update block lets skip features attend to the upsampled global
  prior, enhancing the features and distilling a local prior back out of
  them.

The enhanced prior handed to the next stage is the sum of the global and
local parts. All attention affinities are row-stochastic softmax maps.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from math import sqrt

import numpy as np

from .functional import (
    MlpWeights,
    downsample_avg,
    layer_norm,
    mlp,
    softmax,
    upsample_trilinear,
)
from .tensor import Tensor

PRIOR_SHRINK = 16  # prior spatial extent = patch extent / 16 (floored, min 1)
MLP_EXPANSION = 4
INIT_STD = 0.02


class StageMismatchError(ValueError):
    """Feature-map extents are not an integer multiple of the prior extents."""


@dataclass
class ShapePrior:
    """Class-wise prior field, shape (n_classes, h, w, l)."""

    values: Tensor

    def __post_init__(self):
        if self.values.data.ndim != 4:
            raise ValueError(
                f"prior must be (n_classes, h, w, l), got {self.values.data.shape}"
            )

    @property
    def n_classes(self) -> int:
        return self.values.data.shape[0]

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.values.data.shape[1:]


@dataclass
class FeatureMap:
    """Channel-first feature volume at a given downsampling stage.

    ``stage_factor`` records how many times smaller than the input patch the
    spatial extents are (2, 4 or 8 for the skip stages).
    """

    values: Tensor
    stage_factor: int

    def __post_init__(self):
        if self.values.data.ndim != 4:
            raise ValueError(
                f"feature map must be (C, d, h, w), got {self.values.data.shape}"
            )

    @property
    def channels(self) -> int:
        return self.values.data.shape[0]

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.values.data.shape[1:]


@dataclass
class SpmWeights:
    """Parameters of one prior-update stage.

    Projection weights act on the class axis (self path) or the channel axis
    (cross path); they are the matrix form of 1x1x1 convolutions. The MLP
    mixes class channels per spatial position; layer norms act over the
    flattened prior positions.
    """

    wq_s: Tensor
    bq_s: Tensor
    wk_s: Tensor
    bk_s: Tensor
    wv_s: Tensor
    bv_s: Tensor
    ln1_w: Tensor
    ln1_b: Tensor
    mlp: MlpWeights
    ln2_w: Tensor
    ln2_b: Tensor
    wq_c: Tensor
    bq_c: Tensor
    wk_c: Tensor
    bk_c: Tensor
    wv_c: Tensor
    bv_c: Tensor
    out_w: Tensor
    out_b: Tensor

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, MlpWeights):
                out += [(f"mlp.{n}", t) for n, t in
                        zip(("w1", "b1", "w2", "b2"), v.tensors())]
            else:
                out.append((f.name, v))
        return out

    @property
    def n_classes(self) -> int:
        return self.wq_s.data.shape[0]

    @property
    def channels(self) -> int:
        return self.wq_c.data.shape[0]


def prior_extents_for(patch_extents) -> tuple[int, int, int]:
    """Prior spatial extents for a patch: each axis / 16, floored, min 1."""
    e = tuple(int(v) for v in patch_extents)
    if len(e) != 3 or min(e) < 1:
        raise ValueError(f"patch extents must be 3 positive ints, got {patch_extents!r}")
    return tuple(max(1, v // PRIOR_SHRINK) for v in e)


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD,
                 dtype=np.float32) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within two deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def init_shape_prior(n_classes: int, patch_extents, rng: np.random.Generator,
                     dtype=np.float32) -> ShapePrior:
    h, w, l = prior_extents_for(patch_extents)
    vals = trunc_normal(rng, (n_classes, h, w, l), dtype=dtype)
    return ShapePrior(Tensor(vals, requires_grad=True))


def init_spm_weights(n_classes: int, channels: int, prior_extents,
                     rng: np.random.Generator, dtype=np.float32) -> SpmWeights:
    """Initial weights for one prior-update stage.

    Projections start truncated-normal except on the cross path, where the
    value projection and the local-prior head start at zero. The cross
    block therefore leaves the skip features bitwise untouched at
    initialization and opens up through its own gradients, so an untrained
    stage cannot disturb the backbone it wraps. (The self block keeps a
    live value path: its branches sit behind layer norms, and it only
    shapes the prior, which the zeroed cross path gates anyway.)
    """
    n, c = n_classes, channels
    hwl = int(np.prod(prior_extents))
    hid = MLP_EXPANSION * n

    def w(*shape):
        return Tensor(trunc_normal(rng, shape, dtype=dtype), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    return SpmWeights(
        wq_s=w(n, n), bq_s=zeros(n),
        wk_s=w(n, n), bk_s=zeros(n),
        wv_s=w(n, n), bv_s=zeros(n),
        ln1_w=ones(hwl), ln1_b=zeros(hwl),
        mlp=MlpWeights(w1=w(n, hid), b1=zeros(hid), w2=w(hid, n), b2=zeros(n)),
        ln2_w=ones(hwl), ln2_b=zeros(hwl),
        wq_c=w(c, c), bq_c=zeros(c),
        wk_c=w(n, n), bk_c=zeros(n),
        wv_c=zeros(n, n), bv_c=zeros(n),
        out_w=zeros(n, c), out_b=zeros(n),
    )


def spm_parameter_count(n_classes: int, channels: int, prior_extents) -> int:
    """Closed-form parameter count of one SpmWeights instance."""
    n, c = n_classes, channels
    hwl = int(np.prod(prior_extents))
    hid = MLP_EXPANSION * n
    proj_self = 3 * (n * n + n)
    mlp_params = n * hid + hid + hid * n + n
    norms = 2 * 2 * hwl
    proj_cross = (c * c + c) + 2 * (n * n + n)
    head = n * c + n
    return proj_self + mlp_params + norms + proj_cross + head


def _scale_value(mode: str, n_classes: int, d_k: int) -> float:
    if mode == "sqrt_n":
        return sqrt(n_classes)
    if mode == "sqrt_dk":
        return sqrt(d_k)
    raise ValueError(f"unknown attention scale {mode!r}")


def _project(w: Tensor, b: Tensor, x: Tensor) -> Tensor:
    """1x1x1 projection of flattened tokens: w @ x + b per column."""
    return w @ x + b.reshape((b.data.shape[0], 1))


def affinity_self(prior: ShapePrior, weights: SpmWeights,
                  attention_scale: str = "sqrt_n") -> Tensor:
    """Class-to-class attention map of the self-update block, rows sum to 1."""
    n = prior.n_classes
    if weights.n_classes != n:
        raise ValueError(
            f"weights built for {weights.n_classes} classes, prior has {n}"
        )
    hwl = int(np.prod(prior.extents))
    x = prior.values.reshape((n, hwl))
    q = _project(weights.wq_s, weights.bq_s, x)
    k = _project(weights.wk_s, weights.bk_s, x)
    scale = _scale_value(attention_scale, n, hwl)
    return softmax((q @ k.t()) * (1.0 / scale), axis=1)


def self_update_block(prior: ShapePrior, weights: SpmWeights,
                      attention_scale: str = "sqrt_n") -> ShapePrior:
    """Refine the prior by class-wise self-attention and a per-position MLP.

    Both sub-layers are residual; layer norm is applied to the branch before
    the residual add, so zeroed branch weights leave the prior untouched.
    """
    n = prior.n_classes
    hwl = int(np.prod(prior.extents))
    x = prior.values.reshape((n, hwl))
    attn = affinity_self(prior, weights, attention_scale)
    v = _project(weights.wv_s, weights.bv_s, x)
    s1 = layer_norm(attn @ v, weights.ln1_w, weights.ln1_b) + x
    mixed = mlp(s1.t(), weights.mlp).t()
    s2 = layer_norm(mixed, weights.ln2_w, weights.ln2_b) + s1
    return ShapePrior(s2.reshape((n,) + tuple(prior.extents)))


def _stage_factors(feat: FeatureMap, prior: ShapePrior) -> tuple[int, int, int]:
    fe, pe = feat.extents, prior.extents
    factors = []
    for f, p in zip(fe, pe):
        if f % p:
            raise StageMismatchError(
                f"feature extents {tuple(fe)} are not an integer multiple of "
                f"prior extents {tuple(pe)}; check the configured stage factor"
            )
        factors.append(f // p)
    return tuple(factors)


def affinity_cross(feat: FeatureMap, global_prior: ShapePrior, weights: SpmWeights,
                   attention_scale: str = "sqrt_n") -> Tensor:
    """Channel-to-class attention map of the cross-update block, (C, N)."""
    n, c = global_prior.n_classes, feat.channels
    if weights.n_classes != n or weights.channels != c:
        raise ValueError(
            f"weights expect {weights.channels} channels / {weights.n_classes} "
            f"classes, got {c} / {n}"
        )
    factors = _stage_factors(feat, global_prior)
    up = upsample_trilinear(global_prior.values, factors)
    p = int(np.prod(feat.extents))
    ff = feat.values.reshape((c, p))
    uf = up.reshape((n, p))
    q = _project(weights.wq_c, weights.bq_c, ff)
    k = _project(weights.wk_c, weights.bk_c, uf)
    scale = _scale_value(attention_scale, n, p)
    return softmax((q @ k.t()) * (1.0 / scale), axis=1)


def cross_update_block(feat: FeatureMap, global_prior: ShapePrior,
                       weights: SpmWeights, attention_scale: str = "sqrt_n",
                       ) -> tuple[FeatureMap, ShapePrior]:
    """Enhance skip features with the global prior; distill a local prior.

    Returns the enhanced features (same shape as the input, residual add)
    and the local prior pooled back down to the prior extents.
    """
    n, c = global_prior.n_classes, feat.channels
    factors = _stage_factors(feat, global_prior)
    cmap = affinity_cross(feat, global_prior, weights, attention_scale)
    up = upsample_trilinear(global_prior.values, factors)
    p = int(np.prod(feat.extents))
    ff = feat.values.reshape((c, p))
    uf = up.reshape((n, p))
    v = _project(weights.wv_c, weights.bv_c, uf)
    fe_flat = cmap @ v + ff
    fe = fe_flat.reshape((c,) + tuple(feat.extents))
    local_full = _project(weights.out_w, weights.out_b, fe_flat)
    local_full = local_full.reshape((n,) + tuple(feat.extents))
    local = downsample_avg(local_full, factors)
    return FeatureMap(fe, feat.stage_factor), ShapePrior(local)


def spm_forward(feat: FeatureMap, prior: ShapePrior, weights: SpmWeights,
                attention_scale: str = "sqrt_n",
                ) -> tuple[FeatureMap, ShapePrior]:
    """One full prior-update stage.

    The self-update block produces the global prior, the cross-update block
    enhances the features and emits a local prior, and the stage hands
    ``global + local`` to its successor.
    """
    global_prior = self_update_block(prior, weights, attention_scale)
    enhanced, local = cross_update_block(feat, global_prior, weights, attention_scale)
    return enhanced, ShapePrior(local.values + global_prior.values)
