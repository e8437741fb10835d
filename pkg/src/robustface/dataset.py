"""Face datasets: PGM/PNG manifests, identity filtering, splits, samplers, synthetic faces."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import (
    EmptyDatasetError,
    ImageFormatError,
    ImageShapeError,
    ManifestError,
    MissingImageError,
    SamplingError,
)

MANIFEST_HEADER = ["path", "identity"]


# ---------------------------------------------------------------------------
# Image files


def _pgm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PGM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte before the raster


def decode_pgm(buf: bytes) -> np.ndarray:
    """Binary P5 greymap to a float32 [H x W x 1] array in [0, 1]."""
    if not buf.startswith(b"P5"):
        raise ImageFormatError("not a binary PGM (P5) file")
    (magic, w, h, maxval), offset = _pgm_tokens(buf, 4)
    try:
        width, height, maxval = int(w), int(h), int(maxval)
    except ValueError as e:
        raise ImageFormatError(f"bad PGM header: {e}") from e
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ImageFormatError(f"bad PGM header values {width}x{height} maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = width * height
    raster = np.frombuffer(buf, dtype=dtype, count=min(n, (len(buf) - offset) // dtype.itemsize), offset=offset)
    if raster.size != n:
        raise ImageFormatError(f"PGM raster truncated: {raster.size} of {n} pixels")
    return (raster.astype(np.float32) / np.float32(maxval)).reshape(height, width, 1)


def encode_pgm(img: np.ndarray) -> bytes:
    """[H x W] or [H x W x 1] image in [0, 1] to an 8-bit P5 file (round to nearest)."""
    img = np.asarray(img)
    if img.ndim == 3:
        if img.shape[2] != 1:
            raise ImageFormatError("PGM holds single-channel images only")
        img = img[:, :, 0]
    q = quantize(img)
    h, w = q.shape
    return b"P5\n%d %d\n255\n" % (w, h) + q.tobytes()


def quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, np.float64) * 255), 0, 255).astype(np.uint8)


def read_image(path) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    if buf.startswith(b"P5"):
        return decode_pgm(buf)
    if buf.startswith(b"\x89PNG"):
        try:
            from PIL import Image
        except ImportError as e:  # pragma: no cover - optional dependency
            raise ImageFormatError("PNG input needs Pillow (pip install robustface[png])") from e
        with Image.open(io.BytesIO(buf)) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float32) / np.float32(255)
        return arr[:, :, None]
    raise ImageFormatError(f"{path}: unsupported image format (expected PGM P5 or PNG)")


def write_image(path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(img))


# ---------------------------------------------------------------------------
# Dataset container


@dataclass(frozen=True, eq=False)
class FaceDataset:
    images: np.ndarray  # [N x H x W x C] float32 in [0, 1]
    labels: np.ndarray  # [N] int64 identity ids
    paths: tuple[str, ...] = field(default=())

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ImageShapeError(f"images must be [N x H x W x C], got {images.shape}")
        if len(images) != len(labels):
            raise ValueError(f"{len(images)} images but {len(labels)} labels")
        paths = tuple(self.paths) or tuple(f"#{i}" for i in range(len(images)))
        if len(paths) != len(images):
            raise ValueError("one manifest path per image is required")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "paths", paths)

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.image_shape))

    @property
    def num_identities(self) -> int:
        return len(np.unique(self.labels))

    def flat(self, index=None) -> np.ndarray:
        imgs = self.images if index is None else self.images[np.asarray(index)]
        return imgs.reshape(len(imgs), -1)

    def subset(self, index) -> "FaceDataset":
        index = np.asarray(index, dtype=np.intp)
        return FaceDataset(self.images[index], self.labels[index], tuple(self.paths[i] for i in index))

    def with_labels(self, labels) -> "FaceDataset":
        return FaceDataset(self.images, labels, self.paths)

    def equals(self, other: "FaceDataset") -> bool:
        return (
            self.images.shape == other.images.shape
            and self.images.tobytes() == other.images.tobytes()
            and np.array_equal(self.labels, other.labels)
            and self.paths == other.paths
        )

    @cached_property
    def by_label(self) -> dict[int, np.ndarray]:
        return {int(k): np.flatnonzero(self.labels == k) for k in np.unique(self.labels)}


# ---------------------------------------------------------------------------
# Manifests


def load_dataset(manifest_path) -> FaceDataset:
    """Load a ``path,identity`` CSV manifest; image paths are relative to the manifest."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    images, labels, paths = [], [], []
    shape = None
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
            raise ManifestError(f"header must be {','.join(MANIFEST_HEADER)!r}, got {header!r}", row=1)
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2 or not row[0].strip():
                raise ManifestError(f"expected 2 fields 'path,identity', got {row!r}", row=row_no)
            rel, ident = row[0].strip(), row[1].strip()
            try:
                label = int(ident)
            except ValueError:
                raise ManifestError(f"identity {ident!r} is not an integer", row=row_no) from None
            if label < 0:
                raise ManifestError(f"identity {label} is negative", row=row_no)
            path = root / rel
            if not path.is_file():
                raise MissingImageError(path, row_no)
            try:
                img = read_image(path)
            except ImageFormatError as e:
                raise ImageFormatError(f"manifest row {row_no}: {e}") from e
            if shape is None:
                shape = img.shape
            elif img.shape != shape:
                raise ImageShapeError(f"image {rel} has shape {img.shape}, expected {shape}", row=row_no)
            images.append(img)
            labels.append(label)
            paths.append(rel)
    if not images:
        raise EmptyDatasetError(f"{manifest_path}: manifest lists no images")
    return FaceDataset(np.stack(images), np.array(labels), tuple(paths))


def write_dataset(ds: FaceDataset, out_dir, manifest_name: str = "manifest.csv") -> Path:
    """Write every image as PGM under ``images/`` plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (img, label) in enumerate(zip(ds.images, ds.labels)):
        rel = f"images/id{int(label):04d}_{i:05d}.pgm"
        write_image(out_dir / rel, img)
        rows.append(f"{rel},{int(label)}\n")
    manifest = out_dir / manifest_name
    with open(manifest, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(MANIFEST_HEADER) + "\n")
        fh.writelines(rows)
    return manifest


# ---------------------------------------------------------------------------
# Filtering and splitting


def relabel_dense(labels) -> np.ndarray:
    _, dense = np.unique(np.asarray(labels), return_inverse=True)
    return dense.astype(np.int64)


def filter_min_images(ds: FaceDataset, k: int) -> FaceDataset:
    """Keep identities with at least ``k`` images, renumbering labels to 0..K-1."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ids, counts = np.unique(ds.labels, return_counts=True)
    keep = np.isin(ds.labels, ids[counts >= k])
    if not keep.any():
        raise EmptyDatasetError(f"no identity has at least {k} images")
    kept = ds.subset(np.flatnonzero(keep))
    return kept.with_labels(relabel_dense(kept.labels))


def split_train_val(
    ds: FaceDataset, val_fraction: float = 0.1, seed: int = 0, min_val_per_identity: int = 2
) -> tuple[FaceDataset, FaceDataset]:
    """Identity-stratified split; disjoint and exhaustive.

    Each identity sends ``round(val_fraction * count)`` images to validation,
    raised to ``min_val_per_identity`` so validation triplets exist, while at
    least two images stay in training. Identities too small for both get no
    validation images.
    """
    if not 0 <= val_fraction < 1:
        raise ValueError("val_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    val_idx = []
    for label, idx in ds.by_label.items():
        n = len(idx)
        n_val = max(int(round(val_fraction * n)), min_val_per_identity) if val_fraction > 0 else 0
        n_val = min(n_val, n - 2)
        if n_val <= 0:
            continue
        val_idx.extend(rng.choice(idx, size=n_val, replace=False).tolist())
    val_mask = np.zeros(len(ds), dtype=bool)
    val_mask[val_idx] = True
    return ds.subset(np.flatnonzero(~val_mask)), ds.subset(np.flatnonzero(val_mask))


# ---------------------------------------------------------------------------
# Sampling


@dataclass(frozen=True)
class Triplet:
    anchor_idx: int
    positive_idx: int
    negative_idx: int


def _check_triplet_ready(ds: FaceDataset) -> None:
    groups = ds.by_label
    if len(groups) < 2:
        raise SamplingError("triplet sampling needs at least two identities")
    small = [k for k, v in groups.items() if len(v) < 2]
    if small:
        raise SamplingError(f"identities {small[:5]} have fewer than two images")


def sample_partners(ds: FaceDataset, anchors, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """For each anchor draw a uniform same-identity positive and a uniform other-identity negative."""
    _check_triplet_ready(ds)
    anchors = np.asarray(anchors, dtype=np.intp)
    groups = ds.by_label
    n_total = len(ds)
    pos = np.empty(len(anchors), dtype=np.intp)
    neg = np.empty(len(anchors), dtype=np.intp)
    for j, a in enumerate(anchors):
        same = groups[int(ds.labels[a])]
        # uniform over same-identity images other than the anchor
        k = int(rng.integers(len(same) - 1))
        pos[j] = same[k] if same[k] < a else same[k + 1]
        # uniform over the complement of the anchor's identity
        r = int(rng.integers(n_total - len(same)))
        neg[j] = _nth_outside(same, r)
    return pos, neg


def _nth_outside(sorted_members: np.ndarray, r: int) -> int:
    """The r-th index (0-based) not contained in ``sorted_members``."""
    # members strictly below the answer shift it upward
    ans = r
    for m in sorted_members:
        if m <= ans:
            ans += 1
        else:
            break
    return int(ans)


def sample_triplet(ds: FaceDataset, rng: np.random.Generator) -> Triplet:
    """Uniform anchor, uniform positive among its identity, uniform negative elsewhere."""
    _check_triplet_ready(ds)
    a = int(rng.integers(len(ds)))
    p, n = sample_partners(ds, [a], rng)
    return Triplet(a, int(p[0]), int(n[0]))


def sample_triplets(ds: FaceDataset, count: int, rng: np.random.Generator) -> list[Triplet]:
    return [sample_triplet(ds, rng) for _ in range(count)]


@dataclass(frozen=True)
class LabelMask:
    flags: np.ndarray
    fraction: float

    @property
    def count(self) -> int:
        return int(self.flags.sum())


def make_label_mask(ds: FaceDataset, fraction: float, rng: np.random.Generator) -> LabelMask:
    """Exactly ``floor(fraction * len)`` visible labels, allocated across identities by largest remainder."""
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must lie in [0, 1]")
    n = len(ds)
    total = math.floor(fraction * n)
    flags = np.zeros(n, dtype=bool)
    if total == 0:
        return LabelMask(flags, fraction)
    groups = list(ds.by_label.values())
    quotas = np.array([fraction * len(g) for g in groups])
    alloc = np.minimum(np.floor(quotas).astype(int), [len(g) for g in groups])
    remainder = quotas - alloc
    order = rng.permutation(len(groups))
    order = order[np.argsort(-remainder[order], kind="stable")]
    left = total - int(alloc.sum())
    for gi in order:
        if left <= 0:
            break
        if alloc[gi] < len(groups[gi]):
            alloc[gi] += 1
            left -= 1
    for g, k in zip(groups, alloc):
        if k:
            flags[rng.choice(g, size=int(k), replace=False)] = True
    return LabelMask(flags, fraction)


# ---------------------------------------------------------------------------
# Synthetic faces


def _smooth_field(rng: np.random.Generator, height: int, width: int, contrast: float, coarse: int = 4) -> np.ndarray:
    """Bilinearly upsampled Gaussian grid, rescaled to span 0.5 +/- contrast."""
    from .augment import resize_bilinear

    grid = rng.standard_normal((coarse, coarse, 1)).astype(np.float32)
    field_ = resize_bilinear(grid, height, width)[:, :, 0]
    lo, hi = field_.min(), field_.max()
    scaled = 2 * (field_ - lo) / max(hi - lo, 1e-6) - 1
    return (0.5 + contrast * scaled).astype(np.float32)


def _translate(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Shift content by (dy, dx) pixels, replicating edges."""
    h, w = img.shape
    pad = max(abs(dy), abs(dx))
    if pad == 0:
        return img.copy()
    padded = np.pad(img, pad, mode="edge")
    return padded[pad - dy:pad - dy + h, pad - dx:pad - dx + w]


def generate_synthetic(
    num_identities: int = 20,
    images_per_identity: int = 10,
    height: int = 16,
    width: int = 16,
    noise_sigma: float = 0.05,
    seed: int = 0,
    max_shift: int = 2,
    contrast: float = 0.12,
) -> FaceDataset:
    """Identities are smooth random prototypes in [0.2, 0.8]; samples add a small shift and Gaussian noise."""
    if min(num_identities, images_per_identity, height, width) < 1 or noise_sigma < 0 or max_shift < 0:
        raise ValueError("synthetic dataset dimensions must be positive")
    if not 0 < contrast <= 0.3:
        raise ValueError("contrast must lie in (0, 0.3] so prototypes stay inside [0.2, 0.8]")
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for ident in range(num_identities):
        proto = _smooth_field(rng, height, width, contrast)
        for _ in range(images_per_identity):
            dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
            img = _translate(proto, int(dy), int(dx))
            img = img + rng.normal(0.0, noise_sigma, size=img.shape) if noise_sigma > 0 else img
            images.append(np.clip(img, 0, 1).astype(np.float32)[:, :, None])
            labels.append(ident)
    paths = tuple(f"synthetic/id{l:04d}_{i:05d}" for i, l in enumerate(labels))
    return FaceDataset(np.stack(images), np.array(labels), paths)
