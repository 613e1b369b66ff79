"""Synthetic glyph dataset, IDX ingestion, corruptions and subset splits."""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ContractError, FormatError, ShapeError

N_CLASSES = 10
IMAGE_SIZE = 28
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CORRUPTIONS = ("gaussian-noise", "shot-noise", "impulse-noise", "gaussian-blur",
               "contrast", "brightness", "pixelate")
STOCHASTIC = frozenset({"gaussian-noise", "shot-noise", "impulse-noise"})


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "test"
    provenance: str = "synthetic"
    n_classes: int = N_CLASSES

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise ShapeError(f"images must be (N, 1, H, W), got {self.images.shape}")
        if len(self.images) == 0 or len(self.images) != len(self.labels):
            raise ContractError("dataset must be non-empty with one label per image")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ContractError("labels out of range")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ContractError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.images[index], self.labels[index], self.split, self.provenance, self.n_classes)


# ---------------------------------------------------------------------------
# synthetic stroke glyphs
#
# The toy classifier pools features with a 9-pixel receptive field globally, so
# the ten classes differ in local structure (stroke orientation, crossings,
# corners, curvature) rather than in the arrangement of identical strokes.


def _polygon(n: int, phase: float = 0.0) -> list:
    pts = [(math.cos(phase + 2 * math.pi * i / n), math.sin(phase + 2 * math.pi * i / n)) for i in range(n)]
    return [(pts[i], pts[(i + 1) % n]) for i in range(n)]


_D = math.sqrt(0.5)
GLYPHS = (
    ("ring", _polygon(28)),
    ("vertical", [((0, -1), (0, 1))]),
    ("horizontal", [((-1, 0), (1, 0))]),
    ("slash", [((-_D, -_D), (_D, _D))]),
    ("backslash", [((-_D, _D), (_D, -_D))]),
    ("plus", [((0, -1), (0, 1)), ((-1, 0), (1, 0))]),
    ("cross", [((-_D, -_D), (_D, _D)), ((-_D, _D), (_D, -_D))]),
    ("square", _polygon(4, math.pi / 4)),
    ("triangle", _polygon(3, math.pi / 2)),
    ("diamond", _polygon(4)),
)
GLYPH_RADIUS = 8.0


def render_glyph(label: int, rng: np.random.Generator, size: int = IMAGE_SIZE) -> np.ndarray:
    """Anti-aliased stroke rendering of one glyph with random pose, width and intensity."""
    angle = math.radians(rng.uniform(-15.0, 15.0))
    shift = rng.uniform(-2.0, 2.0, size=2)
    radius = GLYPH_RADIUS * rng.uniform(0.85, 1.15)
    half_w = rng.uniform(0.8, 1.4)
    intensity = rng.uniform(0.6, 1.0)

    segs = np.array(GLYPHS[label][1], dtype=np.float64) * radius
    rot = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    segs = segs @ rot.T
    centre = (size - 1) / 2.0 + shift
    # image rows grow downwards
    p0 = np.stack([centre[0] + segs[:, 0, 0], centre[1] - segs[:, 0, 1]], axis=1)
    p1 = np.stack([centre[0] + segs[:, 1, 0], centre[1] - segs[:, 1, 1]], axis=1)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)[:, None, :]
    d = p1 - p0
    t = np.clip(((pts - p0) * d).sum(-1) / (d * d).sum(-1), 0.0, 1.0)
    dist = np.linalg.norm(pts - (p0 + t[..., None] * d), axis=-1).min(axis=1)
    img = intensity * np.clip(half_w + 0.5 - dist, 0.0, 1.0)
    return img.reshape(size, size)


def synth_dataset(seed: int, n_per_class: int, split: str = "test") -> Dataset:
    """Class-balanced glyph images; image i has label i mod 10 and its own RNG stream."""
    if n_per_class < 1:
        raise ContractError("n_per_class must be >= 1")
    n = n_per_class * N_CLASSES
    labels = np.arange(n) % N_CLASSES
    images = np.empty((n, 1, IMAGE_SIZE, IMAGE_SIZE))
    for i in range(n):
        images[i, 0] = render_glyph(int(labels[i]), np.random.default_rng([seed, i]))
    return Dataset(images, labels, split, f"synthetic({seed})")


# ---------------------------------------------------------------------------
# IDX files


def _read_idx_header(buf: bytes, expected_magic: int, ndim: int, what: str) -> tuple[int, ...]:
    if len(buf) < 4:
        raise FormatError(f"{what}: truncated magic number", len(buf))
    (magic,) = struct.unpack_from(">I", buf, 0)
    if magic != expected_magic:
        raise FormatError(f"{what}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    end = 4 + 4 * ndim
    if len(buf) < end:
        raise FormatError(f"{what}: truncated dimension header", len(buf))
    return struct.unpack_from(f">{ndim}I", buf, 4)


def load_idx(images_path, labels_path, split: str = "test") -> Dataset:
    """Read an IDX image/label pair (e.g. MNIST); bytes are scaled to [0, 1]."""
    img_buf = Path(images_path).read_bytes()
    lab_buf = Path(labels_path).read_bytes()
    n, rows, cols = _read_idx_header(img_buf, IDX_IMAGES_MAGIC, 3, "images")
    (n_lab,) = _read_idx_header(lab_buf, IDX_LABELS_MAGIC, 1, "labels")
    need = 16 + n * rows * cols
    if len(img_buf) < need:
        raise FormatError(f"images: expected {need} bytes, file has {len(img_buf)}", len(img_buf))
    if len(lab_buf) < 8 + n_lab:
        raise FormatError(f"labels: expected {8 + n_lab} bytes, file has {len(lab_buf)}", len(lab_buf))
    if n != n_lab:
        raise FormatError(f"image count {n} does not match label count {n_lab}", 4)
    pixels = np.frombuffer(img_buf, dtype=np.uint8, count=n * rows * cols, offset=16)
    labels = np.frombuffer(lab_buf, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    if n and labels.max() >= N_CLASSES:
        bad = int(np.argmax(labels >= N_CLASSES))
        raise FormatError(f"label {labels[bad]} out of range", 8 + bad)
    images = pixels.reshape(n, 1, rows, cols).astype(np.float64) / 255.0
    return Dataset(images, labels, split, f"idx-file({images_path})")


def write_idx(images_path, labels_path, ds: Dataset) -> None:
    """Inverse of ``load_idx``; pixels are rounded to bytes."""
    n, _, rows, cols = ds.images.shape
    pix = np.clip(np.rint(ds.images * 255.0), 0, 255).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols) + pix.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, n) + ds.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# corruptions


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ContractError(f"unknown corruption {self.kind!r}")
        if not 1 <= self.severity <= 5:
            raise ContractError(f"severity must be in 1..5, got {self.severity}")


@dataclass(frozen=True)
class SeverityTable:
    version: int
    params: dict = field(hash=False)
    digest: str = ""

    def __getitem__(self, key: tuple[str, int]) -> float:
        return self.params[key]


def parse_severity_table(text: str) -> SeverityTable:
    version = None
    params = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"severity table line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "version":
            version = int(value)
            continue
        kind, _, sev = key.rpartition(".")
        if kind not in CORRUPTIONS or not sev.isdigit() or not 1 <= int(sev) <= 5:
            raise ContractError(f"severity table line {lineno}: bad key {key!r}")
        params[(kind, int(sev))] = float(value)
    if version is None:
        raise ContractError("severity table has no version")
    missing = [(k, s) for k in CORRUPTIONS for s in range(1, 6) if (k, s) not in params]
    if missing:
        raise ContractError(f"severity table missing entries: {missing}")
    return SeverityTable(version, params, hashlib.sha256(text.encode()).hexdigest())


def default_severity_table() -> SeverityTable:
    text = resources.files("confmax").joinpath("corruptions.cfg").read_text(encoding="utf-8")
    return parse_severity_table(text)


def _pixelate(images: np.ndarray, target: int) -> np.ndarray:
    size = images.shape[-1]
    bins = (np.arange(size) * target) // size
    onehot = (bins[None, :] == np.arange(target)[:, None]).astype(np.float64)
    onehot /= onehot.sum(axis=1, keepdims=True)
    down = onehot @ images @ onehot.T
    return down[..., bins, :][..., :, bins]


def corrupt_images(images: np.ndarray, spec: CorruptionSpec, table: SeverityTable | None = None,
                   first_index: int = 0) -> np.ndarray:
    """Apply one corruption to an (N, 1, H, W) array; image i draws from RNG (seed, first_index + i)."""
    table = table or default_severity_table()
    v = table[spec.kind, spec.severity]
    x = np.asarray(images, dtype=np.float64)
    if spec.kind in STOCHASTIC:
        out = np.empty_like(x)
        for i in range(len(x)):
            rng = np.random.default_rng([spec.seed, first_index + i])
            img = x[i]
            if spec.kind == "gaussian-noise":
                out[i] = img + rng.normal(0.0, v, img.shape)
            elif spec.kind == "shot-noise":
                out[i] = rng.poisson(img * v) / v
            else:
                u = rng.random(img.shape)
                salt = rng.random(img.shape) < 0.5
                out[i] = np.where(u < v, np.where(salt, 1.0, 0.0), img)
    elif spec.kind == "gaussian-blur":
        out = ndimage.gaussian_filter(x, sigma=(0, 0, v, v), mode="constant")
    elif spec.kind == "contrast":
        out = 0.5 + v * (x - 0.5)
    elif spec.kind == "brightness":
        out = x + v
    else:
        out = _pixelate(x, int(v))
    return np.clip(out, 0.0, 1.0)


def apply_corruption(ds: Dataset, spec: CorruptionSpec, table: SeverityTable | None = None) -> Dataset:
    return Dataset(corrupt_images(ds.images, spec, table), ds.labels.copy(), ds.split,
                   f"{ds.provenance}+{spec.kind}@{spec.severity}", ds.n_classes)


# ---------------------------------------------------------------------------
# subsets


@dataclass(frozen=True)
class SubsetPlan:
    class_fraction: float = 1.0
    sample_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("class_fraction", "sample_fraction"):
            val = getattr(self, name)
            if not 0.0 < val <= 1.0:
                raise ContractError(f"{name} must lie in (0, 1], got {val}")


def subset_split(ds: Dataset, plan: SubsetPlan) -> tuple[Dataset, Dataset]:
    """Adaptation subset (classes first, then samples per class) and the untouched full set."""
    rng = np.random.default_rng(plan.seed)
    n_keep = math.ceil(plan.class_fraction * ds.n_classes)
    classes = np.sort(rng.choice(ds.n_classes, size=n_keep, replace=False))
    chosen = []
    for c in classes:
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) == 0:
            continue
        k = math.ceil(plan.sample_fraction * len(idx))
        chosen.append(np.sort(rng.choice(idx, size=k, replace=False)))
    if not chosen:
        raise ContractError("subset plan selects no samples")
    index = np.sort(np.concatenate(chosen))
    return ds.subset(index), ds
