"""Central-difference gradient verification.

Everything here runs in float64; finite differences at h=1e-5 cannot resolve
float32 rounding. ``grad_check`` compares analytic gradients against central
differences element by element and reports the worst relative error, where
the relative error denominator is clamped below at 1e-6 so that near-zero
gradient entries are compared absolutely.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from . import losses, spm
from .tensor import Tensor


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    passed: bool
    n_elements: int

    def __str__(self) -> str:
        tag = "ok" if self.passed else "FAIL"
        return f"{self.name:<28s} {self.max_rel_error:.3e}  [{tag}]"


def grad_check(f: Callable[..., Tensor], inputs, h: float = 1e-5,
               tol: float = 1e-4, name: str = "") -> GradCheckResult:
    """Compare backward() gradients of scalar-valued ``f`` with central
    finite differences over every element of every input.

    ``inputs`` is one Tensor or a sequence of Tensors; all must be float64
    leaves. Inputs are temporarily perturbed in place and restored.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for t in inputs:
        if t.data.dtype != np.float64:
            raise TypeError(
                f"grad_check requires float64 inputs, got {t.data.dtype}"
            )
        t.requires_grad = True
        t.zero_grad()

    out = f(*inputs)
    if out.data.size != 1:
        raise ValueError("grad_check target must be scalar-valued")
    if not np.isfinite(out.data).all():
        raise FloatingPointError("non-finite value in forward pass")
    out.backward()
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
        for t in inputs
    ]

    worst = 0.0
    count = 0
    for t, ana in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(*inputs).data)
            flat[i] = orig - h
            fm = float(f(*inputs).data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            denom = max(abs(ana_flat[i]), abs(num), 1e-6)
            worst = max(worst, abs(ana_flat[i] - num) / denom)
            count += 1
    return GradCheckResult(name=name or getattr(f, "__name__", "fn"),
                           max_rel_error=worst, passed=worst < tol,
                           n_elements=count)


# -- canned suite ---------------------------------------------------------------


def _t(rng: np.random.Generator, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _weighted(x: Tensor, w: np.ndarray) -> Tensor:
    return (x * Tensor(w)).sum()


def _random_weights(rng: np.random.Generator, n: int, c: int, extents):
    """Stage weights at a generic point: the zero-initialised cross value
    path would make several gradient directions vanish identically."""
    weights = spm.init_spm_weights(n, c, extents, rng, dtype=np.float64)
    for _, t in weights.named_tensors():
        t.data[...] = rng.normal(scale=0.2, size=t.data.shape)
    return weights


def _sub_case(rng: np.random.Generator, n: int, extents):
    prior_vals = _t(rng, n, *extents)
    weights = _random_weights(rng, n, 3, extents)
    tensors = [prior_vals] + [t for _, t in weights.named_tensors()]
    w_out = rng.normal(size=(n,) + tuple(extents))

    def run(*args):
        out = spm.self_update_block(spm.ShapePrior(prior_vals), weights)
        return _weighted(out.values, w_out)

    return run, tensors


def _cub_case(rng: np.random.Generator, n: int, c: int, extents, factors):
    feat_extents = tuple(e * f for e, f in zip(extents, factors))
    prior_vals = _t(rng, n, *extents)
    feat_vals = _t(rng, c, *feat_extents)
    weights = _random_weights(rng, n, c, extents)
    tensors = [prior_vals, feat_vals] + [t for _, t in weights.named_tensors()]
    w_f = rng.normal(size=(c,) + feat_extents)
    w_s = rng.normal(size=(n,) + tuple(extents))

    def run(*args):
        feat = spm.FeatureMap(feat_vals, stage_factor=2)
        prior = spm.ShapePrior(prior_vals)
        fe, sl = spm.cross_update_block(feat, prior, weights)
        return _weighted(fe.values, w_f) + _weighted(sl.values, w_s)

    return run, tensors


def _spm_case(rng: np.random.Generator, n: int, c: int, extents, factors):
    feat_extents = tuple(e * f for e, f in zip(extents, factors))
    prior_vals = _t(rng, n, *extents)
    feat_vals = _t(rng, c, *feat_extents)
    weights = _random_weights(rng, n, c, extents)
    tensors = [prior_vals, feat_vals] + [t for _, t in weights.named_tensors()]
    w_f = rng.normal(size=(c,) + feat_extents)
    w_s = rng.normal(size=(n,) + tuple(extents))

    def run(*args):
        feat = spm.FeatureMap(feat_vals, stage_factor=2)
        prior = spm.ShapePrior(prior_vals)
        fe, se = spm.spm_forward(feat, prior, weights)
        return _weighted(fe.values, w_f) + _weighted(se.values, w_s)

    return run, tensors


def suite_cases(full: bool = False, seed: int = 0):
    """(name, fn, inputs) triples for the op suite; three instances per op."""
    rng = np.random.default_rng(seed)
    cases = []

    for i in range(3):
        x = _t(rng, 3, 5)
        w = rng.normal(size=(3, 5))
        cases.append((f"softmax[{i}]",
                      lambda x, w=w: _weighted(F.softmax(x, axis=1), w), [x]))
    for i in range(3):
        x = _t(rng, 2, 4, 6)
        g = _t(rng, 6)
        b = _t(rng, 6)
        w = rng.normal(size=(2, 4, 6))
        cases.append((f"layer_norm[{i}]",
                      lambda x, g, b, w=w: _weighted(F.layer_norm(x, g, b), w),
                      [x, g, b]))
    for i in range(3):
        x = _t(rng, 5, 3)
        mw = F.MlpWeights(w1=_t(rng, 3, 12), b1=_t(rng, 12),
                          w2=_t(rng, 12, 3), b2=_t(rng, 3))
        w = rng.normal(size=(5, 3))
        cases.append((
            f"mlp[{i}]",
            lambda x, w1, b1, w2, b2, mw=mw, w=w: _weighted(F.mlp(x, mw), w),
            [x, *mw.tensors()],
        ))
    conv_shapes = [((2, 3, 4, 5), 3, 3, 1), ((2, 4, 4, 4), 3, 3, 2),
                   ((3, 2, 3, 3), 2, 1, 1)]
    for i, (xs, o, k, s) in enumerate(conv_shapes):
        x = _t(rng, *xs)
        kern = _t(rng, o, xs[0], k, k, k)
        bias = _t(rng, o)
        out_shape = (o,) + tuple((e + 2 * ((k - 1) // 2) - k) // s + 1 for e in xs[1:])
        w = rng.normal(size=out_shape)
        cases.append((
            f"conv3d[{i}]",
            lambda x, kern, bias, s=s, w=w: _weighted(
                F.conv3d(x, kern, bias, stride=s), w),
            [x, kern, bias],
        ))
    up_shapes = [((2, 1, 2, 3), (1, 2, 2)), ((1, 2, 2, 2), (2, 2, 2)),
                 ((3, 1, 3, 2), (2, 1, 3))]
    for i, (xs, f) in enumerate(up_shapes):
        x = _t(rng, *xs)
        w = rng.normal(size=(xs[0],) + tuple(e * ff for e, ff in zip(xs[1:], f)))
        cases.append((
            f"upsample[{i}]",
            lambda x, f=f, w=w: _weighted(F.upsample_trilinear(x, f), w),
            [x],
        ))
    for i in range(3):
        run, tensors = _sub_case(rng, n=2 + i, extents=(1, 2, 2))
        cases.append((f"self_update_block[{i}]", run, tensors))
    for i in range(3):
        run, tensors = _cub_case(rng, n=2, c=2 + i, extents=(1, 2, 2),
                                 factors=(1, 2, 2))
        cases.append((f"cross_update_block[{i}]", run, tensors))
    for i in range(3):
        run, tensors = _spm_case(rng, n=2, c=2 + i, extents=(1, 2, 2),
                                 factors=(2, 2, 2) if i == 2 else (1, 2, 2))
        cases.append((f"spm_forward[{i}]", run, tensors))
    for i in range(3):
        n = 2 + i
        x = _t(rng, n, 2, 2, 1 + i)
        labels = np.random.default_rng(seed + i).integers(0, n, size=(2, 2, 1 + i))
        cases.append((f"dice_loss[{i}]",
                      lambda x, labels=labels: losses.dice_loss(x, labels), [x]))
        cases.append((f"ce_loss[{i}]",
                      lambda x, labels=labels: losses.ce_loss(x, labels), [x]))

    if full:
        for i in range(2):
            x = _t(rng, 2, 3)
            y = _t(rng, 3, 4)
            w = rng.normal(size=(2, 4))
            cases.append((f"matmul[{i}]",
                          lambda a, b, w=w: _weighted(a @ b, w), [x, y]))
        x = _t(rng, 2, 2, 4, 4)
        cases.append(("downsample_avg",
                      lambda x: _weighted(F.downsample_avg(x, (1, 2, 2)),
                                          np.ones((2, 2, 2, 2))), [x]))
        x = _t(rng, 2, 2, 3, 3)
        w = rng.normal(size=(2, 4, 4, 6))
        cases.append(("replicate_pad",
                      lambda x, w=w: _weighted(
                          F.replicate_pad(x, ((1, 1), (0, 1), (1, 2))), w), [x]))
        x = _t(rng, 3, 4)
        w = rng.normal(size=(3, 4))
        cases.append(("gelu", lambda x, w=w: _weighted(F.gelu(x), w), [x]))
        x = Tensor(rng.normal(size=(3, 4)) + np.sign(rng.normal(size=(3, 4))) * 0.2,
                   requires_grad=True)
        cases.append(("relu", lambda x, w=w: _weighted(F.relu(x), w), [x]))
        x = _t(rng, 2, 2, 3, 3)
        labels = rng.integers(0, 2, size=(2, 3, 3))
        cases.append(("total_loss",
                      lambda x, labels=labels: losses.total_loss(x, labels), [x]))
        x = _t(rng, 2, 1, 4, 4)
        w = rng.normal(size=(2, 1, 4, 4))
        cases.append(("log_softmax",
                      lambda x, w=w: _weighted(F.log_softmax(x, axis=0), w),
                      [x]))
    return cases


def check_op_suite(full: bool = False, seed: int = 0, h: float = 1e-5,
                   tol: float = 1e-4) -> tuple[list[GradCheckResult], float]:
    """Run the canned gradient suite; returns (results, elapsed seconds)."""
    start = time.perf_counter()
    results = [grad_check(fn, inputs, h=h, tol=tol, name=name)
               for name, fn, inputs in suite_cases(full=full, seed=seed)]
    return results, time.perf_counter() - start
