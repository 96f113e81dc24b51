"""U-shape residual segmentation network with prior updates on its skips.

The encoder is a 4-stage residual CNN (stem plus three stride-2 stages,
widths 8/16/32/64 at the default base width). The three deepest stage
outputs, at 1/2, 1/4 and 1/8 of the patch resolution, are the skip features.
When ``spm_enabled`` is set, a learnable shape prior is threaded through the
skips from deepest to shallowest: at each stage the self-update block
refines the incoming prior, the cross-update block enhances the skip
features with it, and the enhanced prior moves on to the next stage.

Axes whose extent has collapsed to 1 get 1x3x3 kernels and stride-1
downsampling, so thick-slice and fully 2-D volumes are handled uniformly.
The full-resolution stage additionally restricts itself to in-plane 1x3x3
kernels: native voxels are strongly anisotropic (thick slices), so the
through-plane axis is first mixed by the stride-2 downsampling convolution
rather than at native resolution. Residual blocks carry a zero-initialised
learnable scale on their branch, which makes every block an identity map at
initialisation; there are no normalisation layers in the convolutional
path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import sqrt

import numpy as np

from .functional import conv3d, relu, upsample_trilinear
from .spm import (
    FeatureMap,
    ShapePrior,
    SpmWeights,
    affinity_cross,
    affinity_self,
    cross_update_block,
    init_shape_prior,
    init_spm_weights,
    prior_extents_for,
    self_update_block,
    spm_parameter_count,
)
from .tensor import Tensor

STAGE_FACTORS = (2, 4, 8)
CKPT_MAGIC = b"SPMC"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    n_classes: int = 4
    base_width: int = 8
    stage_factors: tuple[int, ...] = STAGE_FACTORS
    patch_extents: tuple[int, int, int] = (8, 64, 64)
    spm_enabled: bool = True
    attention_scale: str = "sqrt_n"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stage_factors", tuple(self.stage_factors))
        object.__setattr__(self, "patch_extents", tuple(self.patch_extents))
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if self.base_width < 1:
            raise ValueError("base_width must be positive")
        if self.stage_factors != STAGE_FACTORS:
            raise ValueError(f"stage factors are fixed at {STAGE_FACTORS}")
        if len(self.patch_extents) != 3:
            raise ValueError("patch_extents must name three axes")
        for e in self.patch_extents:
            if e != 1 and (e < 8 or e % 8):
                raise ValueError(
                    f"each patch extent must be 1 or divisible by 8, got "
                    f"{self.patch_extents}"
                )
        if self.attention_scale not in ("sqrt_n", "sqrt_dk"):
            raise ValueError(f"unknown attention_scale {self.attention_scale!r}")

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "n_classes": self.n_classes,
            "base_width": self.base_width,
            "stage_factors": list(self.stage_factors),
            "patch_extents": list(self.patch_extents),
            "spm_enabled": self.spm_enabled,
            "attention_scale": self.attention_scale,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["stage_factors"] = tuple(d.get("stage_factors", STAGE_FACTORS))
        d["patch_extents"] = tuple(d.get("patch_extents", (8, 64, 64)))
        return ModelConfig(**d)


def _axis_kernel(extents) -> tuple[int, int, int]:
    return tuple(1 if e == 1 else 3 for e in extents)


def _inplane_kernel(extents) -> tuple[int, int, int]:
    _, h, w = extents
    return (1, 1 if h == 1 else 3, 1 if w == 1 else 3)


def _axis_stride(extents) -> tuple[int, int, int]:
    return tuple(1 if e == 1 else 2 for e in extents)


class _Conv:
    def __init__(self, params: dict, name: str, c_in: int, c_out: int,
                 kernel, stride, rng: np.random.Generator, std: float | None = None):
        kd, kh, kw = kernel
        if std is None:
            std = sqrt(2.0 / (c_in * kd * kh * kw))
        w = rng.normal(0.0, std, size=(c_out, c_in, kd, kh, kw)).astype(np.float32)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)
        self.stride = stride
        params[f"{name}.w"] = self.w
        params[f"{name}.b"] = self.b

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.w, self.b, stride=self.stride)


class _ResBlock:
    """conv-relu-conv branch with a zero-initialised learnable scale."""

    def __init__(self, params: dict, name: str, width: int, kernel,
                 rng: np.random.Generator):
        self.conv1 = _Conv(params, f"{name}.conv1", width, width, kernel, 1, rng)
        self.conv2 = _Conv(params, f"{name}.conv2", width, width, kernel, 1, rng)
        self.alpha = Tensor(np.zeros((), dtype=np.float32), requires_grad=True)
        params[f"{name}.alpha"] = self.alpha

    def __call__(self, x: Tensor) -> Tensor:
        return relu(x + self.alpha * self.conv2(relu(self.conv1(x))))


@dataclass
class StageSnapshot:
    """Per-skip-stage record of the prior update, deepest stage first."""

    stage: int
    factor: int
    f_o: np.ndarray
    f_e: np.ndarray
    s_g: np.ndarray | None = None
    s_l: np.ndarray | None = None
    s_e: np.ndarray | None = None
    affinity_self: np.ndarray | None = None
    affinity_cross: np.ndarray | None = None


class UNetModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.checkpoint_extra: dict = {}
        self.last_trace: list[StageSnapshot] | None = None

        ss = np.random.SeedSequence(config.seed)
        enc_ss, dec_ss, head_ss, prior_ss, spm_ss = ss.spawn(5)
        enc_rng = np.random.default_rng(enc_ss)
        dec_rng = np.random.default_rng(dec_ss)
        head_rng = np.random.default_rng(head_ss)

        w = config.base_width
        self.widths = (w, 2 * w, 4 * w, 8 * w)
        ext = config.patch_extents
        self.stage_extents = [ext]
        self.stage_strides: list[tuple[int, int, int]] = []

        p = self.params
        self.stem = _Conv(p, "enc0.conv", config.in_channels, w,
                          _inplane_kernel(ext), 1, enc_rng)
        self.enc_blocks = [[
            _ResBlock(p, "enc0.block0", w, _inplane_kernel(ext), enc_rng),
            _ResBlock(p, "enc0.block1", w, _inplane_kernel(ext), enc_rng),
        ]]
        self.downs = []
        for s in (1, 2, 3):
            stride = _axis_stride(ext)
            self.downs.append(_Conv(p, f"enc{s}.down", self.widths[s - 1],
                                    self.widths[s], _axis_kernel(ext), stride,
                                    enc_rng))
            ext = tuple(e // st for e, st in zip(ext, stride))
            self.stage_strides.append(stride)
            self.stage_extents.append(ext)
            self.enc_blocks.append([
                _ResBlock(p, f"enc{s}.block0", self.widths[s],
                          _axis_kernel(ext), enc_rng),
                _ResBlock(p, f"enc{s}.block1", self.widths[s],
                          _axis_kernel(ext), enc_rng),
            ])

        self.up_reduce = []
        self.dec_blocks = []
        for s in (3, 2, 1):
            kern = (_inplane_kernel(self.stage_extents[0]) if s == 1
                    else _axis_kernel(self.stage_extents[s - 1]))
            self.up_reduce.append(_Conv(p, f"dec{s}.reduce", self.widths[s],
                                        self.widths[s - 1], (1, 1, 1), 1, dec_rng))
            self.dec_blocks.append(_ResBlock(
                p, f"dec{s}.block", self.widths[s - 1], kern, dec_rng))

        self.head = _Conv(p, "head", w, config.n_classes, (1, 1, 1), 1,
                          head_rng, std=0.01)

        self.prior: ShapePrior | None = None
        self.spm_weights: dict[int, SpmWeights] = {}
        if config.spm_enabled:
            prior_rng = np.random.default_rng(prior_ss)
            self.prior = init_shape_prior(config.n_classes,
                                          config.patch_extents, prior_rng)
            p["prior"] = self.prior.values
            prior_ext = prior_extents_for(config.patch_extents)
            for k, child in zip((8, 4, 2), spm_ss.spawn(3)):
                stage_idx = {2: 1, 4: 2, 8: 3}[k]
                weights = init_spm_weights(config.n_classes,
                                           self.widths[stage_idx], prior_ext,
                                           np.random.default_rng(child))
                self.spm_weights[k] = weights
                for name, t in weights.named_tensors():
                    p[f"spm_k{k}.{name}"] = t

    @property
    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def spm_parameter_total(self) -> int:
        if not self.config.spm_enabled:
            return 0
        prior_ext = prior_extents_for(self.config.patch_extents)
        n = self.config.n_classes
        total = n * int(np.prod(prior_ext))
        for k, stage_idx in ((8, 3), (4, 2), (2, 1)):
            total += spm_parameter_count(n, self.widths[stage_idx], prior_ext)
        return total


def build_model(config: ModelConfig) -> UNetModel:
    """Deterministically initialised model; encoder/decoder/head weights do
    not depend on ``spm_enabled`` (separate seed streams per subsystem)."""
    return UNetModel(config)


def forward(model: UNetModel, volume, collect: bool = False) -> Tensor:
    """Run the network on one volume, returning pre-softmax logits.

    ``volume`` is a Tensor or array of shape (in_channels, D, H, W); a bare
    (D, H, W) array is promoted to one channel. With ``collect`` the
    per-stage prior snapshots (and affinity maps) are stored on
    ``model.last_trace``.
    """
    cfg = model.config
    if not isinstance(volume, Tensor):
        arr = np.asarray(volume, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr[None]
        volume = Tensor(arr)
    if volume.data.ndim != 4 or volume.data.shape[0] != cfg.in_channels:
        raise ValueError(
            f"expected ({cfg.in_channels}, D, H, W) volume, got "
            f"{volume.data.shape}"
        )
    if tuple(volume.data.shape[1:]) != cfg.patch_extents:
        raise ValueError(
            f"volume extents {volume.data.shape[1:]} do not match configured "
            f"patch extents {cfg.patch_extents}"
        )

    x = model.stem(volume)
    for blk in model.enc_blocks[0]:
        x = blk(x)
    skips = [x]
    for s in (1, 2, 3):
        x = model.downs[s - 1](x)
        for blk in model.enc_blocks[s]:
            x = blk(x)
        skips.append(x)

    feats = {2: skips[1], 4: skips[2], 8: skips[3]}
    trace: list[StageSnapshot] = []
    if cfg.spm_enabled:
        prior_cur = model.prior
        for stage, k in enumerate((8, 4, 2), start=1):
            weights = model.spm_weights[k]
            f_o = FeatureMap(feats[k], stage_factor=k)
            global_prior = self_update_block(prior_cur, weights,
                                             cfg.attention_scale)
            enhanced, local = cross_update_block(f_o, global_prior, weights,
                                                 cfg.attention_scale)
            se = ShapePrior(local.values + global_prior.values)
            if collect:
                trace.append(StageSnapshot(
                    stage=stage, factor=k,
                    f_o=f_o.values.data.copy(),
                    f_e=enhanced.values.data.copy(),
                    s_g=global_prior.values.data.copy(),
                    s_l=local.values.data.copy(),
                    s_e=se.values.data.copy(),
                    affinity_self=affinity_self(
                        prior_cur, weights, cfg.attention_scale).data.copy(),
                    affinity_cross=affinity_cross(
                        f_o, global_prior, weights,
                        cfg.attention_scale).data.copy(),
                ))
            feats[k] = enhanced.values
            prior_cur = se
    elif collect:
        for stage, k in enumerate((8, 4, 2), start=1):
            trace.append(StageSnapshot(stage=stage, factor=k,
                                       f_o=feats[k].data.copy(),
                                       f_e=feats[k].data.copy()))

    d = feats[8]
    for i, s in enumerate((3, 2, 1)):
        d = upsample_trilinear(d, model.stage_strides[s - 1])
        d = model.up_reduce[i](d)
        skip = feats[{3: 4, 2: 2}.get(s)] if s in (3, 2) else skips[0]
        d = model.dec_blocks[i](d + skip)
    logits = model.head(d)

    model.last_trace = trace if collect else None
    return logits


def export_stage_priors(model: UNetModel, volume=None) -> list[StageSnapshot]:
    """Per-stage prior snapshots (S_G, S_L, S_e) and F_o/F_e pairs.

    Runs a collecting forward pass when ``volume`` is given; otherwise uses
    the trace left by the most recent ``forward(..., collect=True)``.
    """
    if volume is not None:
        forward(model, volume, collect=True)
    if model.last_trace is None:
        raise RuntimeError(
            "no stage trace available; run forward(..., collect=True) or "
            "pass a volume"
        )
    return model.last_trace


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(model: UNetModel, path, extra: dict | None = None) -> None:
    """Write weights in the SPMC container (sorted names, float32 LE)."""
    names = sorted(model.params)
    tensors = []
    offset = 0
    for name in names:
        t = model.params[name]
        tensors.append({"name": name, "shape": list(t.data.shape),
                        "offset": offset})
        offset += t.data.size * 4
    manifest = {
        "config": model.config.to_dict(),
        "extra": extra if extra is not None else model.checkpoint_extra,
        "tensors": tensors,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(np.uint32(CKPT_VERSION).tobytes())
        fh.write(np.uint32(len(blob)).tobytes())
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(
                model.params[name].data.astype("<f4", copy=False)).tobytes())


def load_checkpoint(path) -> UNetModel:
    """Rebuild a model from an SPMC file; bit-exact with save_checkpoint."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    version = int(np.frombuffer(raw[4:8], dtype="<u4")[0])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    blob_len = int(np.frombuffer(raw[8:12], dtype="<u4")[0])
    header_end = 12 + blob_len
    if len(raw) < header_end:
        raise ValueError(f"{path}: truncated checkpoint manifest")
    manifest = json.loads(raw[12:header_end].decode())
    model = build_model(ModelConfig.from_dict(manifest["config"]))
    model.checkpoint_extra = manifest.get("extra", {})
    listed = {t["name"] for t in manifest["tensors"]}
    if listed != set(model.params):
        missing = sorted(set(model.params) - listed)
        surplus = sorted(listed - set(model.params))
        raise ValueError(
            f"{path}: tensor names disagree with config "
            f"(missing {missing[:3]}, surplus {surplus[:3]})"
        )
    base = header_end
    for entry in manifest["tensors"]:
        t = model.params[entry["name"]]
        shape = tuple(entry["shape"])
        if shape != t.data.shape:
            raise ValueError(
                f"{path}: {entry['name']} has shape {shape}, expected "
                f"{t.data.shape}"
            )
        n = int(np.prod(shape)) if shape else 1
        start = base + entry["offset"]
        end = start + n * 4
        if end > len(raw):
            raise ValueError(f"{path}: truncated weight buffer")
        t.data = np.frombuffer(raw[start:end], dtype="<f4").reshape(shape).astype(
            np.float32)
    return model
