"""Synthetic position-sensitive datasets and small on-disk image loaders.

Both generators paint a single bright patch on an otherwise dark image and
label the example by where that patch sits: its quadrant, or its
concentric ring around the grid center. That makes chance-level and
ceiling accuracies analytically predictable for each positional mode.
Labels cycle through the classes so every dataset is balanced; placement
is uniform within the assigned class region.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    EmptyDatasetError,
    InvalidGeometryError,
    LabelOutOfRangeError,
    ParseError,
    RelposError,
)
from .grid import grid_from_patch_count
from .embeddings import circle_classes


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (H, W, C) floats in [0, 1]
    label: int


@dataclass
class Dataset:
    images: np.ndarray  # (M, H, W, C) float64 in [0, 1]
    labels: np.ndarray  # (M,) int64
    num_classes: int

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(pixels=self.images[i], label=int(self.labels[i]))

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(
            images=self.images[indices],
            labels=self.labels[indices],
            num_classes=self.num_classes,
        )


@dataclass(frozen=True)
class SyntheticSpec:
    task: str  # "quadrant" | "radial"
    image_side: int
    patch_size: int
    noise_sigma: float = 0.1
    count: int = 512
    seed: int = 0


def _grid_side(spec: SyntheticSpec) -> int:
    if spec.patch_size < 1 or spec.image_side % spec.patch_size != 0:
        raise InvalidGeometryError(
            f"image side {spec.image_side} not divisible by patch size {spec.patch_size}"
        )
    if spec.count < 1:
        raise InvalidGeometryError("count must be at least 1")
    if spec.noise_sigma < 0:
        raise InvalidGeometryError("noise_sigma must be non-negative")
    return spec.image_side // spec.patch_size


def _paint(images: np.ndarray, j: int, row: int, col: int, patch: int) -> None:
    images[j, row * patch : (row + 1) * patch, col * patch : (col + 1) * patch, :] = 1.0


def _finish(images: np.ndarray, rng: np.random.Generator, sigma: float) -> np.ndarray:
    noise = rng.normal(0.0, sigma, images.shape) if sigma > 0 else 0.0
    return np.clip(images + noise, 0.0, 1.0)


def gen_quadrant(spec: SyntheticSpec) -> Dataset:
    """One bright patch per image; label = its quadrant (TL 0, TR 1, BL 2, BR 3)."""
    side = _grid_side(spec)
    if side < 4 or side % 2 != 0:
        raise InvalidGeometryError(
            f"quadrant task needs an even grid side of at least 4, got {side}"
        )
    half = side // 2
    rng = np.random.default_rng(spec.seed)
    images = np.zeros((spec.count, spec.image_side, spec.image_side, 1))
    labels = np.empty(spec.count, dtype=np.int64)
    for j in range(spec.count):
        label = j % 4
        row = (half if label >= 2 else 0) + int(rng.integers(half))
        col = (half if label % 2 else 0) + int(rng.integers(half))
        _paint(images, j, row, col, spec.patch_size)
        labels[j] = label
    return Dataset(images=_finish(images, rng, spec.noise_sigma), labels=labels, num_classes=4)


def gen_radial(spec: SyntheticSpec) -> Dataset:
    """One bright patch per image; label = its concentric ring around the grid center."""
    side = _grid_side(spec)
    try:
        grid = grid_from_patch_count(side * side)
    except RelposError as exc:
        raise InvalidGeometryError(str(exc)) from exc
    ranks, class_count = circle_classes(grid)
    rings = [np.flatnonzero(ranks == r) for r in range(class_count)]
    rng = np.random.default_rng(spec.seed)
    images = np.zeros((spec.count, spec.image_side, spec.image_side, 1))
    labels = np.empty(spec.count, dtype=np.int64)
    for j in range(spec.count):
        label = j % class_count
        ring = rings[label]
        row, col = divmod(int(ring[rng.integers(ring.size)]), side)
        _paint(images, j, row, col, spec.patch_size)
        labels[j] = label
    return Dataset(
        images=_finish(images, rng, spec.noise_sigma), labels=labels, num_classes=class_count
    )


def generate(spec: SyntheticSpec) -> Dataset:
    if spec.task == "quadrant":
        return gen_quadrant(spec)
    if spec.task == "radial":
        return gen_radial(spec)
    raise InvalidGeometryError(f"unknown synthetic task {spec.task!r}")


def split_dataset(ds: Dataset, eval_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded random split into (train, eval)."""
    if len(ds) == 0:
        raise EmptyDatasetError("cannot split an empty dataset")
    if not 0 < eval_fraction < 1:
        raise ValueError("eval_fraction must lie strictly between 0 and 1")
    order = np.random.default_rng(seed).permutation(len(ds))
    cut = max(1, int(round(len(ds) * eval_fraction)))
    return ds.subset(order[cut:]), ds.subset(order[:cut])


# ---------------------------------------------------------------------------
# idx format: 0x00 0x00 <dtype> <ndim>, big-endian uint32 dims, raw bytes


_IDX_UBYTE = 0x08


def _read_exact(fh, size: int, path, what: str) -> bytes:
    data = fh.read(size)
    if len(data) != size:
        raise ParseError(f"{path}: truncated at byte {fh.tell()}: {what}")
    return data


def _read_idx(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, path, "expected 4-byte magic")
        if magic[0] != 0 or magic[1] != 0:
            raise ParseError(f"{path}: bad magic at byte 0: {magic[:2].hex()}")
        if magic[2] != _IDX_UBYTE:
            raise ParseError(f"{path}: unsupported dtype 0x{magic[2]:02x} at byte 2")
        ndim = magic[3]
        dims = [
            struct.unpack(">I", _read_exact(fh, 4, path, f"expected dim {k}"))[0]
            for k in range(ndim)
        ]
        total = int(np.prod(dims)) if dims else 0
        payload = fh.read(total)
        if len(payload) != total:
            raise ParseError(
                f"{path}: truncated at byte {4 + 4 * ndim + len(payload)}: "
                f"expected {total} data bytes"
            )
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def _write_idx(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, _IDX_UBYTE, array.ndim]))
        for d in array.shape:
            fh.write(struct.pack(">I", d))
        fh.write(array.tobytes())


def save_idx(images_path, labels_path, ds: Dataset) -> None:
    """Write a dataset as an idx image/label file pair (pixels scaled to bytes)."""
    pixels = np.round(ds.images * 255.0).astype(np.uint8)
    if pixels.shape[-1] == 1:
        pixels = pixels[..., 0]  # classic 3-D layout for single-channel data
    _write_idx(images_path, pixels)
    _write_idx(labels_path, ds.labels.astype(np.uint8))


def load_idx(images_path, labels_path) -> Dataset:
    """Load an idx image/label pair; pixel byte 255 maps to exactly 1.0."""
    raw_images = _read_idx(images_path)
    raw_labels = _read_idx(labels_path)
    if raw_images.ndim == 3:
        raw_images = raw_images[..., None]
    if raw_images.ndim != 4:
        raise ParseError(f"{images_path}: images must be 3-D or 4-D, got {raw_images.ndim}-D")
    if raw_labels.ndim != 1:
        raise ParseError(f"{labels_path}: labels must be 1-D, got {raw_labels.ndim}-D")
    if raw_labels.shape[0] != raw_images.shape[0]:
        raise ParseError(
            f"{labels_path}: {raw_labels.shape[0]} labels for {raw_images.shape[0]} images"
        )
    labels = raw_labels.astype(np.int64)
    return Dataset(
        images=raw_images.astype(np.float64) / 255.0,
        labels=labels,
        num_classes=int(labels.max()) + 1 if labels.size else 0,
    )


def load_csv(path, image_side: int | None = None, channels: int = 1) -> Dataset:
    """Load `label, pixel bytes...` rows; side inferred when square and not given."""
    images = []
    labels = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                values = [int(v) for v in line.split(",")]
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
            if len(values) < 2:
                raise ParseError(f"{path}: line {lineno}: need a label and pixels")
            label, pixels = values[0], values[1:]
            if label < 0:
                raise LabelOutOfRangeError(f"{path}: line {lineno}: negative label {label}")
            if any(not 0 <= v <= 255 for v in pixels):
                raise ParseError(f"{path}: line {lineno}: pixel byte outside 0..255")
            if image_side is None:
                side = int(round((len(pixels) / channels) ** 0.5))
                if side * side * channels != len(pixels):
                    raise ParseError(
                        f"{path}: line {lineno}: {len(pixels)} pixels is not a square image"
                    )
            else:
                side = image_side
                if side * side * channels != len(pixels):
                    raise ParseError(
                        f"{path}: line {lineno}: expected {side * side * channels} pixels, "
                        f"got {len(pixels)}"
                    )
            images.append(np.array(pixels, dtype=np.float64).reshape(side, side, channels) / 255.0)
            labels.append(label)
    if not images:
        raise EmptyDatasetError(f"{path}: no examples")
    labels_arr = np.array(labels, dtype=np.int64)
    return Dataset(
        images=np.stack(images),
        labels=labels_arr,
        num_classes=int(labels_arr.max()) + 1,
    )


def load_images(path, fmt: str, labels_path=None, image_side: int | None = None, channels: int = 1) -> Dataset:
    """Dispatch to the idx or csv loader."""
    if fmt == "idx":
        if labels_path is None:
            raise ParseError("idx format needs a labels file alongside the images file")
        return load_idx(path, labels_path)
    if fmt == "csv":
        return load_csv(path, image_side=image_side, channels=channels)
    raise ParseError(f"unknown dataset format {fmt!r}")
