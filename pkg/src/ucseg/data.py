"""Synthetic blob-segmentation datasets, their on-disk format and semi-supervised splits.

On disk every array is one file: the magic ``UCSG1``, a ``uint8`` rank, the
dims as little-endian ``uint32``, a ``uint8`` dtype code, then the raw
little-endian buffer.  ``manifest.tsv`` lists ``image_path<TAB>mask_path``
relative to the dataset directory.
"""

import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DatasetError

MAGIC = b"UCSG1"
MANIFEST = "manifest.tsv"
DTYPE_CODES = {1: np.dtype("<u1"), 2: np.dtype("<f4"), 3: np.dtype("<f8"), 4: np.dtype("<i8")}
_CODE_FOR = {v: k for k, v in DTYPE_CODES.items()}


@dataclass(frozen=True)
class DatasetSpec:
    n_images: int = 200
    image_size: int = 32
    spatial_rank: int = 2
    min_shapes: int = 1
    max_shapes: int = 3
    noise: float = 0.12
    contrast: tuple = (0.12, 0.45)
    distractors: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.n_images < 1:
            raise ValueError("n_images must be >= 1")
        if self.spatial_rank not in (2, 3):
            raise ValueError("spatial_rank must be 2 or 3")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ValueError("need 1 <= min_shapes <= max_shapes")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")


def write_array(path, array):
    arr = np.ascontiguousarray(array)
    dt = np.dtype(f"<{arr.dtype.kind}{arr.dtype.itemsize}")
    if dt not in _CODE_FOR:
        raise DatasetError(f"unsupported dtype {arr.dtype}")
    header = MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    header += struct.pack("<B", _CODE_FOR[dt])
    Path(path).write_bytes(header + arr.astype(dt, copy=False).tobytes())


def read_array(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    if raw[:5] != MAGIC:
        raise DatasetError(f"{path}: bad magic")
    try:
        rank = raw[5]
        dims = struct.unpack_from(f"<{rank}I", raw, 6)
        off = 6 + 4 * rank
        dt = DTYPE_CODES[raw[off]]
    except (IndexError, KeyError, struct.error) as exc:
        raise DatasetError(f"{path}: corrupt header") from exc
    body = raw[off + 1:]
    expected = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(body) != expected:
        raise DatasetError(f"{path}: expected {expected} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=dt).reshape(dims).copy()


def _blob_mask(rng, grid, size):
    """Irregular star-convex blob (polyp-like) at a random position."""
    rank = len(grid)
    lo, hi = 0.12 * size, 0.24 * size
    center = rng.uniform(0.2 * size, 0.8 * size, rank)
    radii = rng.uniform(lo, hi, rank)
    rel = [(g - c) / r for g, c, r in zip(grid, center, radii)]
    dist = np.sqrt(sum(x ** 2 for x in rel))
    angle = np.arctan2(rel[1], rel[0])
    wobble = 1.0
    for k in (2, 3, 5):
        wobble = wobble + rng.uniform(0.0, 0.12) * np.sin(k * angle + rng.uniform(0, 2 * np.pi))
    return dist < wobble


def synthesize_one(spec, seed):
    rng = np.random.default_rng(seed)
    size, rank = spec.image_size, spec.spatial_rank
    shape = (size,) * rank
    grid = np.meshgrid(*[np.arange(size, dtype=np.float64) + 0.5] * rank, indexing="ij")
    # (row, col) ordering for atan2: swap so axis -1 is x
    grid = grid[::-1] if rank == 2 else [grid[2], grid[1], grid[0]]

    mask = np.zeros(shape, dtype=bool)
    while mask.sum() < 16:
        mask[:] = False
        for _ in range(rng.integers(spec.min_shapes, spec.max_shapes + 1)):
            mask |= _blob_mask(rng, grid, size)

    background = ndimage.gaussian_filter(rng.normal(0.0, 1.0, shape), sigma=size / 6)
    background = 0.45 + 0.15 * background / (np.abs(background).max() + 1e-12)
    image = background.copy()

    for _ in range(spec.distractors):
        # unlabeled clutter: elongated bright/dark streaks of similar contrast
        streak = _blob_mask(rng, grid, size)
        streak = streak & ~ndimage.binary_erosion(streak, iterations=2)
        image += rng.choice([-1.0, 1.0]) * rng.uniform(*spec.contrast) * streak

    contrast = rng.uniform(*spec.contrast)
    texture = ndimage.gaussian_filter(rng.normal(0.0, 1.0, shape), sigma=1.0)
    fg = ndimage.gaussian_filter(mask.astype(np.float64), sigma=0.7)
    image += contrast * fg * (1.0 + 0.3 * texture)
    image += rng.normal(0.0, spec.noise, shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return image, mask.astype(np.uint8)


def synthesize(spec):
    """Deterministic in-memory dataset: ``(images, masks)`` stacked along axis 0."""
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_images)
    pairs = [synthesize_one(spec, child) for child in children]
    images = np.stack([p[0] for p in pairs])
    masks = np.stack([p[1] for p in pairs])
    return images, masks


def generate_dataset(spec, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images, masks = synthesize(spec)
    lines = []
    for i, (img, msk) in enumerate(zip(images, masks)):
        img_name, msk_name = f"image_{i:05d}.bin", f"mask_{i:05d}.bin"
        write_array(out / img_name, img)
        write_array(out / msk_name, msk)
        lines.append(f"{img_name}\t{msk_name}\n")
    (out / MANIFEST).write_text("".join(lines))
    return out


@dataclass
class Dataset:
    images: np.ndarray
    masks: np.ndarray
    names: list

    def __len__(self):
        return len(self.images)

    def subset(self, idx):
        idx = list(idx)
        return Dataset(self.images[idx], self.masks[idx], [self.names[i] for i in idx])


def load_dataset(path):
    root = Path(path)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise DatasetError(f"no {MANIFEST} in {root}")
    images, masks, names = [], [], []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DatasetError(f"{manifest}:{lineno}: expected 'image<TAB>mask'")
        images.append(read_array(root / parts[0]))
        masks.append(read_array(root / parts[1]))
        names.append(parts[0])
    if not images:
        raise DatasetError(f"{manifest} lists no pairs")
    return Dataset(np.stack(images), np.stack(masks), names)


def split_semi(n_or_dataset, labeled_fraction, seed=0):
    """Disjoint ``(labeled_idx, unlabeled_idx)`` with ``round(fraction * N)`` labeled."""
    n = n_or_dataset if isinstance(n_or_dataset, int) else len(n_or_dataset)
    if not 0.0 < labeled_fraction < 1.0:
        raise ValueError(f"labeled_fraction must be in (0, 1), got {labeled_fraction}")
    n_lab = int(math.floor(labeled_fraction * n + 0.5))
    perm = np.random.default_rng(seed).permutation(n)
    return sorted(perm[:n_lab].tolist()), sorted(perm[n_lab:].tolist())


def spec_dict(spec):
    d = asdict(spec)
    d["contrast"] = list(d["contrast"])
    return d
