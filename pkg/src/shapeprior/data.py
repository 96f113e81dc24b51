"""Synthetic cardiac-like volumes, bit-exact file I/O, dataset manifests.

Each generated case is a 4-class scene echoing short-axis cardiac anatomy:
background (0), a crescent-shaped right-ventricle pool (1), a myocardium
annulus (2), and a left-ventricle disk (3) strictly inside the annulus. The
in-plane geometry is constant across slices; intensities are per-class
constants (canonical tissue means plus a small per-case jitter) plus
Gaussian noise. The two blood pools deliberately share one canonical mean,
so classes 1 and 3 cannot be told apart by intensity alone: like the
anatomy this mimics, separating them requires shape and position context
(the crescent sits outside the annulus and consistently to its left, the
disk strictly inside).

Files use the SPMV container: ``magic "SPMV" | version u32 LE | dtype code
u8 (0 = float32, 1 = uint8) | ndim u8 | extents u32 LE | spacing f32 LE per
axis | raw little-endian buffer``. Round-trips are bitwise exact.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

VOL_MAGIC = b"SPMV"
VOL_VERSION = 1
GENERATOR_VERSION = "2"
N_CLASSES = 4
DEFAULT_SPACING = (5.0, 1.0, 1.0)

# Canonical per-class intensity means (background, RV pool, myocardium,
# LV pool) and the half-width of the uniform per-case jitter around them.
CLASS_MEANS = (0.20, 0.80, 0.45, 0.80)
MEAN_JITTER = 0.04


@dataclass
class Volume:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError(f"volume must be 3-D, got shape {self.voxels.shape}")

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass
class MaskVolume:
    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.labels.ndim != 3 or min(self.labels.shape) < 1:
            raise ValueError(f"mask must be 3-D, got shape {self.labels.shape}")

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.labels.shape


# -- generation -------------------------------------------------------------------


def gen_case(seed, extents=(8, 64, 64), noise_sigma: float = 0.05,
             ) -> tuple[Volume, MaskVolume]:
    """One synthetic case, fully determined by (seed, extents, noise_sigma).

    ``seed`` may be an int or a numpy SeedSequence. In-plane extents must be
    at least 16 so all three structures fit.
    """
    d, h, w = (int(e) for e in extents)
    if min(h, w) < 16:
        raise ValueError(
            f"in-plane extents must be at least 16 to fit the structures, "
            f"got {(h, w)}"
        )
    rng = np.random.default_rng(seed)
    s = min(h, w)

    r_lv = max(2.0, rng.uniform(0.10, 0.14) * s)
    r_myo = r_lv + max(1.5, rng.uniform(0.04, 0.07) * s)
    r_rv = max(2.0, rng.uniform(0.09, 0.13) * s)
    cy = h / 2.0 + rng.uniform(-0.05, 0.05) * s
    cx = w / 2.0 + rng.uniform(-0.05, 0.05) * s
    theta = rng.uniform(np.pi - 0.7, np.pi + 0.7)
    dist = r_myo + 0.5 * r_rv
    rv_cy = cy + dist * np.sin(theta)
    rv_cx = cx + dist * np.cos(theta)

    yy, xx = np.mgrid[0:h, 0:w]
    rho = np.hypot(yy - cy, xx - cx)
    rho_rv = np.hypot(yy - rv_cy, xx - rv_cx)
    lv = rho <= r_lv
    myo = (rho <= r_myo) & ~lv
    rv = (rho_rv <= r_rv) & (rho > r_myo)

    plane = np.zeros((h, w), dtype=np.uint8)
    plane[rv] = 1
    plane[myo] = 2
    plane[lv] = 3
    for c in (1, 2, 3):
        if not (plane == c).any():
            raise ValueError(
                f"extents {extents} too small: class {c} came out empty"
            )
    labels = np.repeat(plane[None], d, axis=0)

    means = np.asarray(CLASS_MEANS) + rng.uniform(
        -MEAN_JITTER, MEAN_JITTER, size=N_CLASSES)
    voxels = means[labels].astype(np.float32)
    if noise_sigma > 0:
        voxels = voxels + rng.normal(0.0, noise_sigma,
                                     size=voxels.shape).astype(np.float32)
    return (Volume(voxels.astype(np.float32), DEFAULT_SPACING),
            MaskVolume(labels, DEFAULT_SPACING))


def zscore(voxels: np.ndarray) -> np.ndarray:
    """Per-volume z-score normalization (used by the training loader)."""
    v = np.asarray(voxels, dtype=np.float32)
    mu = v.mean()
    sigma = v.std()
    return (v - mu) / max(float(sigma), 1e-8)


# -- SPMV I/O ---------------------------------------------------------------------

_DTYPE_F32 = 0
_DTYPE_U8 = 1


def _write_spmv(path, arr: np.ndarray, dtype_code: int, spacing) -> None:
    with open(path, "wb") as fh:
        fh.write(VOL_MAGIC)
        fh.write(np.uint32(VOL_VERSION).tobytes())
        fh.write(bytes([dtype_code, arr.ndim]))
        fh.write(np.asarray(arr.shape, dtype="<u4").tobytes())
        fh.write(np.asarray(spacing, dtype="<f4").tobytes())
        if dtype_code == _DTYPE_F32:
            fh.write(np.ascontiguousarray(arr.astype("<f4", copy=False)).tobytes())
        else:
            fh.write(np.ascontiguousarray(arr.astype(np.uint8, copy=False)).tobytes())


def _read_spmv(path) -> tuple[np.ndarray, tuple[float, ...], int]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 10 or raw[:4] != VOL_MAGIC:
        raise ValueError(f"{path}: not an SPMV file (bad magic)")
    version = int(np.frombuffer(raw[4:8], dtype="<u4")[0])
    if version != VOL_VERSION:
        raise ValueError(f"{path}: unsupported SPMV version {version}")
    dtype_code, ndim = raw[8], raw[9]
    header_end = 10 + 4 * ndim + 4 * ndim
    if len(raw) < header_end:
        raise ValueError(f"{path}: truncated SPMV header")
    extents = tuple(int(v) for v in np.frombuffer(raw[10:10 + 4 * ndim], "<u4"))
    spacing = tuple(float(v) for v in
                    np.frombuffer(raw[10 + 4 * ndim:header_end], "<f4"))
    count = int(np.prod(extents))
    itemsize = 4 if dtype_code == _DTYPE_F32 else 1
    if len(raw) != header_end + count * itemsize:
        raise ValueError(f"{path}: truncated SPMV payload")
    dt = "<f4" if dtype_code == _DTYPE_F32 else np.uint8
    arr = np.frombuffer(raw[header_end:], dtype=dt).reshape(extents)
    return arr.copy(), spacing, dtype_code


def write_volume(path, vol: Volume) -> None:
    _write_spmv(path, vol.voxels, _DTYPE_F32, vol.spacing)


def read_volume(path) -> Volume:
    arr, spacing, code = _read_spmv(path)
    if code != _DTYPE_F32:
        raise ValueError(f"{path}: expected a float volume, found a label mask")
    return Volume(arr.astype(np.float32), spacing)


def write_mask(path, mask: MaskVolume) -> None:
    _write_spmv(path, mask.labels, _DTYPE_U8, mask.spacing)


def read_mask(path) -> MaskVolume:
    arr, spacing, code = _read_spmv(path)
    if code != _DTYPE_U8:
        raise ValueError(f"{path}: expected a label mask, found a float volume")
    return MaskVolume(arr, spacing)


# -- manifests --------------------------------------------------------------------


@dataclass
class CaseEntry:
    id: str
    volume: str
    mask: str
    split: str


@dataclass
class DatasetManifest:
    n_classes: int
    seed: int
    generator_version: str
    cases: list[CaseEntry] = field(default_factory=list)
    root: str = "."

    def split_cases(self, split: str) -> list[CaseEntry]:
        return [c for c in self.cases if c.split == split]

    def volume_path(self, case: CaseEntry) -> str:
        return os.path.join(self.root, case.volume)

    def mask_path(self, case: CaseEntry) -> str:
        return os.path.join(self.root, case.mask)


def _split_counts(n: int, fractions) -> list[int]:
    fractions = [float(f) for f in fractions]
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {fractions}")
    raw = [f * n for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    remainders = [r - c for r, c in zip(raw, counts)]
    for _ in range(n - sum(counts)):
        i = int(np.argmax(remainders))
        counts[i] += 1
        remainders[i] = -1.0
    return counts


def make_manifest(dataset_dir, split_fractions=(0.7, 0.1, 0.2),
                  seed: int = 0) -> DatasetManifest:
    """Scan a directory of generated cases, assign shuffled splits, write
    manifest.json, and return the manifest."""
    names = sorted(f[: -len(".vol.spmv")] for f in os.listdir(dataset_dir)
                   if f.endswith(".vol.spmv"))
    if not names:
        raise ValueError(f"no *.vol.spmv cases found in {dataset_dir}")
    for name in names:
        if not os.path.exists(os.path.join(dataset_dir, f"{name}.mask.spmv")):
            raise ValueError(f"case {name} has no mask file")
    counts = _split_counts(len(names), split_fractions)
    order = np.random.default_rng(seed).permutation(len(names))
    split_of = {}
    cursor = 0
    for split, count in zip(("train", "val", "test"), counts):
        for idx in order[cursor:cursor + count]:
            split_of[names[idx]] = split
        cursor += count
    manifest = DatasetManifest(n_classes=N_CLASSES, seed=seed,
                               generator_version=GENERATOR_VERSION,
                               root=str(dataset_dir))
    for name in names:
        manifest.cases.append(CaseEntry(
            id=name, volume=f"{name}.vol.spmv", mask=f"{name}.mask.spmv",
            split=split_of[name]))
    payload = {
        "n_classes": manifest.n_classes,
        "seed": manifest.seed,
        "generator_version": manifest.generator_version,
        "cases": [{"id": c.id, "volume": c.volume, "mask": c.mask,
                   "split": c.split} for c in manifest.cases],
    }
    with open(os.path.join(dataset_dir, "manifest.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(path) -> DatasetManifest:
    with open(path) as fh:
        payload = json.load(fh)
    root = os.path.dirname(os.path.abspath(path))
    manifest = DatasetManifest(
        n_classes=int(payload["n_classes"]), seed=int(payload["seed"]),
        generator_version=str(payload["generator_version"]), root=root)
    for c in payload["cases"]:
        entry = CaseEntry(id=c["id"], volume=c["volume"], mask=c["mask"],
                          split=c["split"])
        for p in (manifest.volume_path(entry), manifest.mask_path(entry)):
            if not os.path.exists(p):
                raise FileNotFoundError(f"manifest references missing file {p}")
        manifest.cases.append(entry)
    return manifest


def gen_dataset(out_dir, cases: int, seed: int = 0, extents=(8, 64, 64),
                noise_sigma: float = 0.05,
                split_fractions=(40 / 60, 8 / 60, 12 / 60)) -> DatasetManifest:
    """Generate ``cases`` cases into ``out_dir`` and write its manifest.

    The default split fractions give the benchmark layout of 40 train /
    8 val / 12 test at the standard 60 cases."""
    os.makedirs(out_dir, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(cases)
    for i, child in enumerate(children):
        vol, mask = gen_case(child, extents=extents, noise_sigma=noise_sigma)
        write_volume(os.path.join(out_dir, f"case_{i:04d}.vol.spmv"), vol)
        write_mask(os.path.join(out_dir, f"case_{i:04d}.mask.spmv"), mask)
    return make_manifest(out_dir, split_fractions=split_fractions, seed=seed)
