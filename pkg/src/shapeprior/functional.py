"""Differentiable building blocks on top of :mod:`shapeprior.tensor`.

Each primitive computes its forward pass with plain numpy and registers a
single fused backward closure, rather than composing many small graph
nodes. That keeps graphs shallow and the per-volume Python overhead
negligible. Convolutions are lowered to im2col matrix products in all
three directions (output, kernel gradient, input gradient), which keeps
the heavy lifting inside BLAS.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor

__all__ = [
    "softmax",
    "log_softmax",
    "layer_norm",
    "relu",
    "gelu",
    "MlpWeights",
    "mlp",
    "conv3d",
    "upsample_trilinear",
    "downsample_avg",
    "replicate_pad",
    "one_hot",
]


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor._result(y, (x,), None)

    def backward():
        g = out.grad
        dot = (g * y).sum(axis=axis, keepdims=True)
        x.accumulate_grad(y * (g - dot))

    out._backward = backward if out._parents else None
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    out = Tensor._result(y, (x,), None)

    def backward():
        g = out.grad
        x.accumulate_grad(g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    out._backward = backward if out._parents else None
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    feat = x.data.shape[-1]
    if gamma.data.shape != (feat,) or beta.data.shape != (feat,):
        raise ValueError(
            f"affine parameters must have shape ({feat},), got "
            f"{gamma.data.shape} and {beta.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = xc * inv
    y = xhat * gamma.data + beta.data
    out = Tensor._result(y, (x, gamma, beta), None)

    def backward():
        g = out.grad
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=tuple(range(g.ndim - 1))))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=tuple(range(g.ndim - 1))))
        if x.requires_grad:
            gh = g * gamma.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv * (gh - m1 - xhat * m2))

    out._backward = backward if out._parents else None
    return out


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)
    out = Tensor._result(y, (x,), None)

    def backward():
        x.accumulate_grad(out.grad * (x.data > 0))

    out._backward = backward if out._parents else None
    return out


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    v = x.data
    inner = _GELU_C * (v + _GELU_A * v**3)
    t = np.tanh(inner)
    y = 0.5 * v * (1.0 + t)
    out = Tensor._result(y.astype(v.dtype, copy=False), (x,), None)

    def backward():
        sech2 = 1.0 - t * t
        d = 0.5 * (1.0 + t) + 0.5 * v * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
        x.accumulate_grad(out.grad * d.astype(v.dtype, copy=False))

    out._backward = backward if out._parents else None
    return out


@dataclass
class MlpWeights:
    """Two-layer perceptron parameters; hidden width is w1.shape[1]."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def tensors(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return (self.w1, self.b1, self.w2, self.b2)


def mlp(x: Tensor, weights: MlpWeights) -> Tensor:
    """``gelu(x @ w1 + b1) @ w2 + b2`` over the last axis of ``x``.

    Input and output feature widths must match so the op can sit on a
    residual branch. Leading axes are flattened for the matmuls and
    restored afterwards.
    """
    feat = x.data.shape[-1]
    f_in, hidden = weights.w1.data.shape
    h2, f_out = weights.w2.data.shape
    if f_in != feat:
        raise ValueError(f"mlp expects feature width {f_in}, got {feat}")
    if h2 != hidden or f_out != f_in:
        raise ValueError(
            f"mlp weight shapes disagree: w1 {weights.w1.data.shape}, "
            f"w2 {weights.w2.data.shape}"
        )
    lead = x.data.shape[:-1]
    flat = x.reshape((int(np.prod(lead)) if lead else 1, feat))
    h = gelu(flat @ weights.w1 + weights.b1)
    y = h @ weights.w2 + weights.b2
    return y.reshape(x.data.shape)


# -- convolution ---------------------------------------------------------------


def _triple(v, name: str) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(e) for e in v)
    if len(t) != 3:
        raise ValueError(f"{name} must be an int or length-3, got {v!r}")
    return t


def _im2col(xp: np.ndarray, kernel, stride, out_extents) -> np.ndarray:
    """Window matrix (C*kd*kh*kw, od*oh*ow) of a padded (C, D, H, W) array."""
    c = xp.shape[0]
    kd, kh, kw = kernel
    sd, sh, sw = stride
    od, oh, ow = out_extents
    stc, std_, sth, stw = xp.strides
    win = as_strided(
        xp,
        (c, kd, kh, kw, od, oh, ow),
        (stc, std_, sth, stw, std_ * sd, sth * sh, stw * sw),
    )
    return win.reshape(c * kd * kh * kw, od * oh * ow)


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride=1, padding="same") -> Tensor:
    """3-D cross-correlation over a channel-first volume.

    Parameters
    ----------
    x : Tensor, shape (C, D, H, W)
    kernel : Tensor, shape (O, C, kd, kh, kw), each extent odd
    bias : Tensor of shape (O,), optional
    stride : int or (sd, sh, sw)
    padding : "same" (default) or int / triple of zero-padding per axis
    """
    if x.data.ndim != 4:
        raise ValueError(f"expected (C, D, H, W) input, got shape {x.data.shape}")
    if kernel.data.ndim != 5:
        raise ValueError(f"expected (O, C, kd, kh, kw) kernel, got {kernel.data.shape}")
    O, C, kd, kh, kw = kernel.data.shape
    if C != x.data.shape[0]:
        raise ValueError(
            f"kernel expects {C} input channels, volume has {x.data.shape[0]}"
        )
    for k in (kd, kh, kw):
        if k % 2 == 0:
            raise ValueError(f"kernel extents must be odd, got {(kd, kh, kw)}")
    sd, sh, sw = _triple(stride, "stride")
    if padding == "same":
        pd, ph, pw = (kd - 1) // 2, (kh - 1) // 2, (kw - 1) // 2
    else:
        pd, ph, pw = _triple(padding, "padding")
    if bias is not None and bias.data.shape != (O,):
        raise ValueError(f"bias must have shape ({O},), got {bias.data.shape}")
    if kernel.data.dtype != x.data.dtype:
        raise ValueError("kernel dtype must match input dtype")

    D, H, W = x.data.shape[1:]
    od = (D + 2 * pd - kd) // sd + 1
    oh = (H + 2 * ph - kh) // sh + 1
    ow = (W + 2 * pw - kw) // sw + 1
    if min(od, oh, ow) < 1:
        raise ValueError("kernel does not fit inside the padded volume")

    b_arr = (bias.data if bias is not None
             else np.zeros(O, dtype=x.data.dtype))
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    # 1x1x1 stride-1 convolutions are channel mixes; run them as one GEMM
    if (kd, kh, kw) == (1, 1, 1) and (sd, sh, sw) == (1, 1, 1):
        x2 = x.data.reshape(C, -1)
        w2 = kernel.data.reshape(O, C)
        y = w2 @ x2
        y += b_arr[:, None]
        out = Tensor._result(y.reshape(O, D, H, W), parents, None)

        def backward_1x1():
            g2 = out.grad.reshape(O, -1)
            if x.requires_grad:
                x.accumulate_grad((w2.T @ g2).reshape(x.data.shape))
            if kernel.requires_grad:
                kernel.accumulate_grad((g2 @ x2.T).reshape(kernel.data.shape))
            if bias is not None and bias.requires_grad:
                bias.accumulate_grad(g2.sum(axis=1))

        out._backward = backward_1x1 if out._parents else None
        return out

    xp = np.pad(x.data, ((0, 0), (pd, pd), (ph, ph), (pw, pw)))
    pad_ext = xp.shape[1:]
    cols = _im2col(xp, (kd, kh, kw), (sd, sh, sw), (od, oh, ow))
    y = kernel.data.reshape(O, -1) @ cols
    y += b_arr[:, None]
    out = Tensor._result(y.reshape(O, od, oh, ow), parents, None)

    def backward():
        g = out.grad.reshape(O, -1)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=1))
        if kernel.requires_grad:
            kernel.accumulate_grad((g @ cols.T).reshape(kernel.data.shape))
        if x.requires_grad:
            # col2im: per-tap gradient slabs scattered back onto the padded
            # grid with strided slice adds
            d7 = (kernel.data.reshape(O, -1).T @ g).reshape(
                C, kd, kh, kw, od, oh, ow)
            dxp = np.zeros((C, *pad_ext), dtype=out.grad.dtype)
            for a in range(kd):
                for b in range(kh):
                    for c in range(kw):
                        dxp[:, a : a + od * sd : sd, b : b + oh * sh : sh,
                            c : c + ow * sw : sw] += d7[:, a, b, c]
            x.accumulate_grad(dxp[:, pd : pd + D, ph : ph + H, pw : pw + W])

    out._backward = backward if out._parents else None
    return out


# -- resampling ----------------------------------------------------------------


@lru_cache(maxsize=None)
def _lerp_plan(n_in: int, factor: int):
    """Indices and weights for 1-D linear interpolation by an integer factor.

    Output sample i reads from source coordinate (i + 0.5)/factor - 0.5
    (half-pixel convention), clamped at the borders.
    """
    n_out = n_in * factor
    src = (np.arange(n_out, dtype=np.float64) + 0.5) / factor - 0.5
    raw = np.floor(src).astype(np.int64)
    t = src - raw
    # clamp to the border sample outside the valid range
    t[raw < 0] = 0.0
    t[raw >= n_in - 1] = 0.0
    i0 = np.clip(raw, 0, n_in - 1)
    i1 = np.clip(raw + 1, 0, n_in - 1)
    return i0, i1, t


def _lerp_axis_fwd(arr: np.ndarray, axis: int, factor: int) -> np.ndarray:
    if factor == 1:
        return arr
    i0, i1, t = _lerp_plan(arr.shape[axis], factor)
    a = np.take(arr, i0, axis=axis)
    b = np.take(arr, i1, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = len(t)
    tt = t.reshape(shape).astype(arr.dtype)
    # written as a + t*(b - a): when b == a the result is bitwise a
    return a + tt * (b - a)


@lru_cache(maxsize=None)
def _lerp_adjoint(n_in: int, factor: int, dtype_str: str) -> np.ndarray:
    """Dense (n_out, n_in) adjoint of the 1-D interpolation in `_lerp_plan`."""
    i0, i1, t = _lerp_plan(n_in, factor)
    n_out = n_in * factor
    a = np.zeros((n_out, n_in), dtype=np.dtype(dtype_str))
    rows = np.arange(n_out)
    np.add.at(a, (rows, i0), 1.0 - t)
    np.add.at(a, (rows, i1), t)
    return a


def _lerp_axis_bwd(g: np.ndarray, axis: int, n_in: int, factor: int) -> np.ndarray:
    if factor == 1:
        return g
    adj = _lerp_adjoint(n_in, factor, g.dtype.str)
    g2 = np.moveaxis(g, axis, -1)
    lead = g2.shape[:-1]
    dacc = g2.reshape(-1, g2.shape[-1]) @ adj
    return np.moveaxis(dacc.reshape(*lead, n_in), -1, axis)


def upsample_trilinear(x: Tensor, factors) -> Tensor:
    """Upsample the three trailing axes of (C, d, h, w) by integer factors.

    Constant fields come back bitwise unchanged.
    """
    fd, fh, fw = _triple(factors, "factors")
    if min(fd, fh, fw) < 1:
        raise ValueError(f"factors must be positive integers, got {factors!r}")
    if x.data.ndim != 4:
        raise ValueError(f"expected (C, d, h, w) input, got shape {x.data.shape}")
    y = _lerp_axis_fwd(x.data, 1, fd)
    y = _lerp_axis_fwd(y, 2, fh)
    y = _lerp_axis_fwd(y, 3, fw)
    out = Tensor._result(np.ascontiguousarray(y), (x,), None)
    d, h, w = x.data.shape[1:]

    def backward():
        g = _lerp_axis_bwd(out.grad, 3, w, fw)
        g = _lerp_axis_bwd(g, 2, h, fh)
        g = _lerp_axis_bwd(g, 1, d, fd)
        x.accumulate_grad(g)

    out._backward = backward if out._parents else None
    return out


def downsample_avg(x: Tensor, factors) -> Tensor:
    """Average-pool the three trailing axes by integer factors (no overlap)."""
    fd, fh, fw = _triple(factors, "factors")
    if x.data.ndim != 4:
        raise ValueError(f"expected (C, d, h, w) input, got shape {x.data.shape}")
    C, d, h, w = x.data.shape
    if d % fd or h % fh or w % fw:
        raise ValueError(
            f"extents {(d, h, w)} not divisible by pooling factors {(fd, fh, fw)}"
        )
    view = x.data.reshape(C, d // fd, fd, h // fh, fh, w // fw, fw)
    y = view.mean(axis=(2, 4, 6))
    out = Tensor._result(y, (x,), None)
    inv = 1.0 / (fd * fh * fw)

    def backward():
        g = out.grad[:, :, None, :, None, :, None] * np.asarray(inv, dtype=x.data.dtype)
        x.accumulate_grad(
            np.broadcast_to(g, (C, d // fd, fd, h // fh, fh, w // fw, fw))
            .reshape(x.data.shape)
            .astype(x.data.dtype)
        )

    out._backward = backward if out._parents else None
    return out


def replicate_pad(x: Tensor, pads) -> Tensor:
    """Edge-replicate the three trailing axes; ``pads`` are (before, after) pairs.

    ``pads`` is a triple of ints (pad after only) or of (before, after) pairs.
    """
    if x.data.ndim != 4:
        raise ValueError(f"expected (C, d, h, w) input, got shape {x.data.shape}")
    norm: list[tuple[int, int]] = []
    for p in pads:
        if isinstance(p, int):
            norm.append((0, p))
        else:
            a, b = p
            norm.append((int(a), int(b)))
    if len(norm) != 3 or any(a < 0 or b < 0 for a, b in norm):
        raise ValueError(f"pads must be 3 non-negative ints or pairs, got {pads!r}")
    widths = [(0, 0)] + norm
    y = np.pad(x.data, widths, mode="edge")
    out = Tensor._result(y, (x,), None)

    def backward():
        g = out.grad
        for axis, (lo, hi) in enumerate(norm, start=1):
            if hi:
                idx_tail = [slice(None)] * g.ndim
                idx_tail[axis] = slice(g.shape[axis] - hi, g.shape[axis])
                tail = g[tuple(idx_tail)].sum(axis=axis, keepdims=True)
                idx_core = [slice(None)] * g.ndim
                idx_core[axis] = slice(0, g.shape[axis] - hi)
                g = np.ascontiguousarray(g[tuple(idx_core)])
                last = [slice(None)] * g.ndim
                last[axis] = slice(g.shape[axis] - 1, g.shape[axis])
                g[tuple(last)] += tail
            if lo:
                idx_head = [slice(None)] * g.ndim
                idx_head[axis] = slice(0, lo)
                head = g[tuple(idx_head)].sum(axis=axis, keepdims=True)
                idx_core = [slice(None)] * g.ndim
                idx_core[axis] = slice(lo, g.shape[axis])
                g = np.ascontiguousarray(g[tuple(idx_core)])
                first = [slice(None)] * g.ndim
                first[axis] = slice(0, 1)
                g[tuple(first)] += head
        x.accumulate_grad(g)

    out._backward = backward if out._parents else None
    return out


def one_hot(labels: np.ndarray, n_classes: int, dtype=np.float32) -> np.ndarray:
    """(D, H, W) integer labels -> (n_classes, D, H, W) indicator array."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(
            f"labels must lie in [0, {n_classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    eye = np.eye(n_classes, dtype=dtype)
    return np.moveaxis(eye[labels], -1, 0)
