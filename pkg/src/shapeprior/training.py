"""Training and evaluation harness.

Runs are deterministic for a fixed (config, seed, thread count): data order,
augmentation draws and weight init all derive from named SeedSequence
streams, the convolution kernels are single-threaded, and CSV rows are
written with fixed formatting. Two CSVs are produced per run:

* ``train_log.csv`` — one row per epoch: ``epoch,mean_loss,lr``;
* ``metrics.csv``  — validation rows with the header
  ``epoch,split,class,dice,hd95`` (foreground classes then a ``mean`` row),
  written on every ``val_every``-th epoch and always on the final one.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .backbone import (
    ModelConfig,
    UNetModel,
    build_model,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from .data import load_manifest, read_mask, read_volume, zscore
from .losses import total_loss
from .metrics import MetricsRecord, dice_score, hd95, summarize_case
from .tensor import Tensor, no_grad

METRICS_HEADER = "epoch,split,class,dice,hd95"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    manifest: str
    out_dir: str
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 30
    batch_size: int = 2
    learning_rate: float = 3e-4
    weight_decay: float = 1e-5
    warmup_epochs: int = 3
    seed: int = 0
    # Off by default: the synthetic anatomy has a canonical orientation
    # (like the scenes it mimics), and flips/rotations erase the positional
    # regularity that a learned shape prior feeds on.
    augment_flip: bool = False
    augment_rotate: bool = False
    val_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("warmup_epochs must lie in [0, epochs]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.val_every < 1:
            raise ValueError("val_every must be positive")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "manifest", "out_dir", "epochs", "batch_size", "learning_rate",
            "weight_decay", "warmup_epochs", "seed", "augment_flip",
            "augment_rotate", "val_every")}
        d["model"] = self.model.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d.get("model", {}))
        return TrainConfig(**d)

    @staticmethod
    def from_json_file(path) -> "TrainConfig":
        with open(path) as fh:
            return TrainConfig.from_dict(json.load(fh))


class AdamW:
    """Adam with decoupled weight decay over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self._v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= self.lr * update


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Linear warmup to the base rate, then cosine decay towards zero."""
    base = config.learning_rate
    w = config.warmup_epochs
    if epoch < w:
        return base * (epoch + 1) / w
    span = max(1, config.epochs - w)
    frac = (epoch - w) / span
    return base * 0.5 * (1.0 + float(np.cos(np.pi * frac)))


@dataclass
class _Case:
    id: str
    voxels: np.ndarray  # z-scored float32 (D, H, W)
    labels: np.ndarray  # uint8 (D, H, W)
    spacing: tuple[float, float, float]


def load_split(manifest_path, split: str) -> list[_Case]:
    manifest = load_manifest(manifest_path)
    cases = []
    for entry in manifest.split_cases(split):
        vol = read_volume(manifest.volume_path(entry))
        mask = read_mask(manifest.mask_path(entry))
        cases.append(_Case(id=entry.id, voxels=zscore(vol.voxels),
                           labels=mask.labels, spacing=vol.spacing))
    return cases


def _augment(voxels: np.ndarray, labels: np.ndarray,
             rng: np.random.Generator, flip: bool, rotate: bool):
    if flip:
        for axis in range(3):
            if rng.random() < 0.5:
                voxels = np.flip(voxels, axis)
                labels = np.flip(labels, axis)
    if rotate:
        k = int(rng.integers(0, 4))
        if k:
            voxels = np.rot90(voxels, k, axes=(1, 2))
            labels = np.rot90(labels, k, axes=(1, 2))
    return np.ascontiguousarray(voxels), np.ascontiguousarray(labels)


def _predict(model: UNetModel, voxels: np.ndarray) -> np.ndarray:
    with no_grad():
        logits = forward(model, voxels[None])
    return np.argmax(logits.data, axis=0).astype(np.uint8)


def _fmt(value: float) -> str:
    if np.isnan(value):
        return "nan"
    if np.isinf(value):
        return "inf"
    return f"{value:.6f}"


def _aggregate_rows(records: list[MetricsRecord], epoch: int, split: str,
                    n_classes: int) -> list[str]:
    """Per-class mean rows over cases plus a 'mean' row, fixed formatting."""
    rows = []
    class_dice, class_hd = [], []
    for c in range(1, n_classes):
        dc = float(np.mean([r.dice[c] for r in records]))
        hds = [r.hd95[c] for r in records if np.isfinite(r.hd95[c])]
        hc = float(np.mean(hds)) if hds else float("nan")
        class_dice.append(dc)
        class_hd.append(hc)
        rows.append(f"{epoch},{split},{c},{_fmt(dc)},{_fmt(hc)}")
    mean_dice = float(np.mean(class_dice))
    finite_hd = [h for h in class_hd if np.isfinite(h)]
    mean_hd = float(np.mean(finite_hd)) if finite_hd else float("nan")
    rows.append(f"{epoch},{split},mean,{_fmt(mean_dice)},{_fmt(mean_hd)}")
    return rows


@dataclass
class TrainResult:
    out_dir: str
    best_epoch: int
    best_val_dice: float
    final_train_loss: float
    metrics_csv: str
    train_log_csv: str
    best_checkpoint: str
    last_checkpoint: str


def train(config: TrainConfig) -> TrainResult:
    """Full training run: AdamW, warmup+cosine schedule, per-epoch
    validation, best-checkpoint tracking, deterministic CSV logs."""
    os.makedirs(config.out_dir, exist_ok=True)
    train_cases = load_split(config.manifest, "train")
    val_cases = load_split(config.manifest, "val")
    if not train_cases:
        raise ValueError("manifest has no training cases")
    if config.augment_rotate:
        d, h, w = config.model.patch_extents
        if h != w:
            raise ValueError(
                "in-plane rotation augmentation needs square slices; "
                f"got extents {(h, w)}"
            )

    model = build_model(config.model)
    opt = AdamW(model.params, lr=config.learning_rate,
                weight_decay=config.weight_decay)
    shuffle_ss, augment_ss = np.random.SeedSequence(config.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    augment_rng = np.random.default_rng(augment_ss)

    n_classes = config.model.n_classes
    metrics_path = os.path.join(config.out_dir, "metrics.csv")
    log_path = os.path.join(config.out_dir, "train_log.csv")
    best_path = os.path.join(config.out_dir, "best.spmc")
    last_path = os.path.join(config.out_dir, "last.spmc")

    best_dice = -1.0
    best_epoch = -1
    mean_loss = float("nan")
    with open(metrics_path, "w") as mfh, open(log_path, "w") as lfh:
        mfh.write(METRICS_HEADER + "\n")
        lfh.write("epoch,mean_loss,lr\n")
        for epoch in range(config.epochs):
            lr = lr_at(epoch, config)
            opt.lr = lr
            order = shuffle_rng.permutation(len(train_cases))
            losses_seen = []
            for start in range(0, len(order), config.batch_size):
                batch = order[start:start + config.batch_size]
                opt.zero_grad()
                inv = 1.0 / len(batch)
                for idx in batch:
                    case = train_cases[idx]
                    vox, lab = _augment(case.voxels, case.labels, augment_rng,
                                        config.augment_flip,
                                        config.augment_rotate)
                    logits = forward(model, vox[None])
                    loss = total_loss(logits, lab)
                    value = loss.item()
                    if not np.isfinite(value):
                        raise TrainingDiverged(
                            f"non-finite loss {value} at epoch {epoch}, "
                            f"case {case.id}"
                        )
                    losses_seen.append(value)
                    (loss * inv).backward()
                opt.step()
            mean_loss = float(np.mean(losses_seen))
            lfh.write(f"{epoch},{_fmt(mean_loss)},{_fmt(lr)}\n")
            lfh.flush()

            run_val = (epoch % config.val_every == 0
                       or epoch == config.epochs - 1)
            records = [
                summarize_case(_predict(model, c.voxels), c.labels, n_classes,
                               c.spacing, epoch=epoch, split="val")
                for c in val_cases
            ] if run_val else []
            if records:
                for row in _aggregate_rows(records, epoch, "val", n_classes):
                    mfh.write(row + "\n")
                mfh.flush()
                epoch_dice = float(np.mean(
                    [np.mean([r.dice[c] for r in records])
                     for c in range(1, n_classes)]))
            else:
                epoch_dice = float("nan")
            if records and epoch_dice > best_dice:
                best_dice = epoch_dice
                best_epoch = epoch
                save_checkpoint(model, best_path,
                                extra={"epoch": epoch, "kind": "best",
                                       "mean_val_dice": epoch_dice})
    save_checkpoint(model, last_path,
                    extra={"epoch": config.epochs - 1, "kind": "last",
                           "mean_val_dice": best_dice})
    if best_epoch < 0:
        # no validation cases; treat the final state as best
        save_checkpoint(model, best_path,
                        extra={"epoch": config.epochs - 1, "kind": "best",
                               "mean_val_dice": float("nan")})
        best_epoch = config.epochs - 1
    with open(os.path.join(config.out_dir, "config.json"), "w") as fh:
        snapshot = config.to_dict()
        snapshot["threads"] = {
            k: os.environ.get(k, "") for k in
            ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
        }
        json.dump(snapshot, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return TrainResult(out_dir=config.out_dir, best_epoch=best_epoch,
                       best_val_dice=best_dice, final_train_loss=mean_loss,
                       metrics_csv=metrics_path, train_log_csv=log_path,
                       best_checkpoint=best_path, last_checkpoint=last_path)


def evaluate(checkpoint_path, manifest_path, split: str = "test",
             out_csv=None) -> tuple[list[MetricsRecord], list[str]]:
    """Per-case metrics for a stored checkpoint on one manifest split.

    Returns (per-case records, aggregate CSV rows); optionally writes the
    rows (with header) to ``out_csv``.
    """
    model = load_checkpoint(checkpoint_path)
    cases = load_split(manifest_path, split)
    if not cases:
        raise ValueError(f"split {split!r} has no cases")
    epoch = int(model.checkpoint_extra.get("epoch", 0))
    n_classes = model.config.n_classes
    records = [
        summarize_case(_predict(model, c.voxels), c.labels, n_classes,
                       c.spacing, epoch=epoch, split=split)
        for c in cases
    ]
    rows = _aggregate_rows(records, epoch, split, n_classes)
    if out_csv:
        with open(out_csv, "w") as fh:
            fh.write(METRICS_HEADER + "\n")
            for row in rows:
                fh.write(row + "\n")
    return records, rows


# -- attention / prior export -----------------------------------------------------


def write_pgm(path, image: np.ndarray) -> None:
    """Binary (P5) PGM of a 2-D uint8 array."""
    if image.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {image.shape}")
    img = image.astype(np.uint8, copy=False)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(np.ascontiguousarray(img).tobytes())


def _to_gray(plane: np.ndarray) -> np.ndarray:
    """Min-max normalize to 8-bit; a constant plane maps to mid-gray 128."""
    lo = float(plane.min())
    hi = float(plane.max())
    if hi <= lo:
        return np.full(plane.shape, 128, dtype=np.uint8)
    return np.round((plane - lo) / (hi - lo) * 255.0).astype(np.uint8)


def _central_slice(vol: np.ndarray) -> np.ndarray:
    return vol[vol.shape[0] // 2]


def export_attention(checkpoint_path, case_volume_path, out_dir) -> list[str]:
    """Dump per-stage prior maps and feature summaries for one case.

    For every SPM stage and every class channel, the global (S_G), local
    (S_L) and enhanced (S_e) priors are written as min-max normalized PGM
    images of their central slice plus the raw slice values as CSV. Each
    stage also gets channel-mean images of the skip features before and
    after enhancement. With N classes and 3 stages that is 3*N*3 + 6 PGM
    files and 3*N*3 CSV files.
    """
    model = load_checkpoint(checkpoint_path)
    if not model.config.spm_enabled:
        raise ValueError("checkpoint was trained without the prior module")
    vol = read_volume(case_volume_path)
    if tuple(vol.extents) != model.config.patch_extents:
        raise ValueError(
            f"case extents {vol.extents} do not match model patch extents "
            f"{model.config.patch_extents}"
        )
    os.makedirs(out_dir, exist_ok=True)
    forward(model, zscore(vol.voxels)[None], collect=True)
    written: list[str] = []
    for snap in model.last_trace:
        kinds = (("global", snap.s_g), ("local", snap.s_l),
                 ("enhanced", snap.s_e))
        for kind, prior in kinds:
            for c in range(prior.shape[0]):
                plane = _central_slice(prior[c])
                base = os.path.join(
                    out_dir, f"stage{snap.stage}_{kind}_class{c}")
                write_pgm(base + ".pgm", _to_gray(plane))
                np.savetxt(base + ".csv", plane, fmt="%.8e", delimiter=",")
                written += [base + ".pgm", base + ".csv"]
        for tag, feat in (("before", snap.f_o), ("after", snap.f_e)):
            plane = _central_slice(feat.mean(axis=0))
            path = os.path.join(
                out_dir, f"stage{snap.stage}_features_{tag}.pgm")
            write_pgm(path, _to_gray(plane))
            written.append(path)
    return written
