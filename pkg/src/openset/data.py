"""Dataset ingestion, preprocessing and open-set split sampling.

Supported sources: big-endian IDX image/label pairs, directories of binary
Netpbm (P5/P6) images with one subdirectory per class, and a deterministic
synthetic generator used for fast tests. Preprocessing follows the model's
input conventions: optional luminance grayscale, bilinear resize, and a
linear byte -> [-1, 1] intensity map.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CACHE_MAGIC = b"OSDC"
CACHE_VERSION = 1


class DataFormatError(ValueError):
    """Raised for malformed dataset files."""


@dataclass
class Dataset:
    """Images as float64 (M, C, H, W) plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_names: list[str] | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be (M, C, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataFormatError(
                f"label count {self.labels.shape} does not match {self.images.shape[0]} images"
            )

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.class_names)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0


@dataclass(frozen=True)
class SyntheticConfig:
    num_classes: int = 10
    samples_per_class: int = 50
    image_size: int = 16
    noise: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if min(self.num_classes, self.samples_per_class, self.image_size) < 1:
            raise ValueError("synthetic sizes must be positive")


@dataclass(frozen=True)
class OpenSetSplit:
    """Known/unknown class partition with the known-class relabeling map."""

    known_classes: tuple[int, ...]
    unknown_classes: tuple[int, ...]
    relabel: dict[int, int] = field(hash=False)
    seed: int = 0


def _read_exact(f, n: int, what: str) -> bytes:
    raw = f.read(n)
    if len(raw) != n:
        raise DataFormatError(f"truncated {what}: wanted {n} bytes, got {len(raw)}")
    return raw


def load_idx(images_path, labels_path) -> Dataset:
    """Parse a big-endian IDX image/label file pair (unnormalized bytes)."""
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, "IDX image header"))
        if magic != IDX_IMAGE_MAGIC:
            raise DataFormatError(
                f"bad IDX image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"
            )
        raw = _read_exact(f, count * rows * cols, "IDX image payload")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(count, 1, rows, cols)
    with open(labels_path, "rb") as f:
        magic, lcount = struct.unpack(">II", _read_exact(f, 8, "IDX label header"))
        if magic != IDX_LABEL_MAGIC:
            raise DataFormatError(
                f"bad IDX label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"
            )
        labels = np.frombuffer(_read_exact(f, lcount, "IDX label payload"), dtype=np.uint8)
    if count != lcount:
        raise DataFormatError(f"IDX image count {count} != label count {lcount}")
    return Dataset(images.astype(np.float64), labels.astype(np.int64))


def write_idx(dataset: Dataset, images_path, labels_path):
    """Write byte-valued grayscale images as an IDX pair (test fixture aid)."""
    m, c, h, w = dataset.images.shape
    if c != 1:
        raise DataFormatError("IDX export supports single-channel images only")
    data = np.clip(np.round(dataset.images), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, m, h, w))
        f.write(data.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, m))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def _read_netpbm(path) -> np.ndarray:
    """Binary P5 (gray) or P6 (color) -> (C, H, W) byte values as float."""
    with open(path, "rb") as f:
        data = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError(f"{path}: truncated Netpbm header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    kind = fields[0]
    if kind not in (b"P5", b"P6"):
        raise DataFormatError(f"{path}: unsupported Netpbm type {kind!r} (want binary P5/P6)")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval <= 0 or maxval > 255:
        raise DataFormatError(f"{path}: unsupported maxval {maxval}")
    channels = 1 if kind == b"P5" else 3
    need = w * h * channels
    payload = data[pos : pos + need]
    if len(payload) != need:
        raise DataFormatError(f"{path}: truncated pixel data ({len(payload)} of {need} bytes)")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, channels)
    return np.transpose(arr, (2, 0, 1)).astype(np.float64) * (255.0 / maxval)


def write_pgm(path, image: np.ndarray):
    """Write a single-channel byte image as binary P5."""
    img = np.asarray(image)
    if img.ndim == 3:
        if img.shape[0] != 1:
            raise DataFormatError(f"write_pgm expects one channel, got {img.shape}")
        img = img[0]
    data = np.clip(np.round(img), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (data.shape[1], data.shape[0]))
        f.write(data.tobytes())


def load_image_dir(root) -> Dataset:
    """Load a directory tree with one PGM/PPM subdirectory per class."""
    root = os.fspath(root)
    class_dirs = sorted(
        d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d))
    )
    if not class_dirs:
        raise DataFormatError(f"{root}: no class subdirectories")
    images, labels = [], []
    for label, name in enumerate(class_dirs):
        files = sorted(
            f
            for f in os.listdir(os.path.join(root, name))
            if f.lower().endswith((".pgm", ".ppm", ".pnm"))
        )
        if not files:
            raise DataFormatError(f"{os.path.join(root, name)}: empty class directory")
        for fname in files:
            img = _read_netpbm(os.path.join(root, name, fname))
            if img.shape[0] == 1 and images and images[0].shape[0] == 3:
                img = np.repeat(img, 3, axis=0)
            elif img.shape[0] == 3 and images and images[0].shape[0] == 1:
                images = [np.repeat(prev, 3, axis=0) for prev in images]
            images.append(img)
            labels.append(label)
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise DataFormatError(f"{root}: inconsistent image shapes {sorted(shapes)}; resize first")
    return Dataset(np.stack(images), np.array(labels), class_names=class_dirs)


def _bilinear_resize(img: np.ndarray, th: int, tw: int) -> np.ndarray:
    """(C, H, W) -> (C, th, tw) bilinear interpolation, edge-aligned."""
    c, h, w = img.shape
    ys = np.linspace(0, h - 1, th)
    xs = np.linspace(0, w - 1, tw)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bot * fy


GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


def preprocess(d: Dataset, target_size: int, grayscale: bool = True) -> Dataset:
    """Grayscale, resize and map byte intensities 0..255 to [-1, 1]."""
    if target_size < 1:
        raise ValueError(f"target_size must be positive, got {target_size}")
    imgs = d.images
    if grayscale and imgs.shape[1] == 3:
        imgs = np.einsum("c,mchw->mhw", GRAY_WEIGHTS, imgs)[:, None]
    out = np.empty((imgs.shape[0], imgs.shape[1], target_size, target_size))
    for i in range(imgs.shape[0]):
        out[i] = (
            imgs[i]
            if imgs.shape[2] == target_size and imgs.shape[3] == target_size
            else _bilinear_resize(imgs[i], target_size, target_size)
        )
    out = out / 127.5 - 1.0
    return Dataset(np.clip(out, -1.0, 1.0), d.labels.copy(), d.class_names)


def sample_split(
    d: Dataset,
    n_known: int,
    seed: int,
    train_fraction: float = 0.8,
) -> tuple[OpenSetSplit, Dataset, Dataset, Dataset]:
    """Sample known classes, relabel them 0..K-1 and partition the data.

    Returns (split, train_known, test_known, test_unknown). Unknown-class
    samples appear only in test_unknown; known-class samples are divided
    per class by train_fraction.
    """
    classes = np.unique(d.labels)
    if n_known >= classes.size:
        raise ValueError(f"n_known {n_known} must be below class count {classes.size}")
    rng = np.random.default_rng(seed)
    known = np.sort(rng.choice(classes, size=n_known, replace=False))
    unknown = np.setdiff1d(classes, known)
    relabel = {int(c): i for i, c in enumerate(known)}

    train_idx, test_idx = [], []
    for c in known:
        idx = np.flatnonzero(d.labels == c)
        idx = rng.permutation(idx)
        cut = max(1, int(round(train_fraction * idx.size)))
        cut = min(cut, idx.size - 1) if idx.size > 1 else cut
        train_idx.append(idx[:cut])
        test_idx.append(idx[cut:])
    train_idx = np.concatenate(train_idx)
    test_idx = np.concatenate(test_idx) if test_idx else np.array([], dtype=int)
    unknown_idx = np.flatnonzero(np.isin(d.labels, unknown))

    def _relabeled(idx):
        sub = d.subset(idx)
        sub.labels = np.array([relabel[int(c)] for c in sub.labels], dtype=np.int64)
        return sub

    split = OpenSetSplit(
        known_classes=tuple(int(c) for c in known),
        unknown_classes=tuple(int(c) for c in unknown),
        relabel=relabel,
        seed=seed,
    )
    return split, _relabeled(train_idx), _relabeled(test_idx), d.subset(unknown_idx)


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Deterministic per-class patterns (oriented gratings + blobs) with noise.

    Class templates depend only on the class index; sample noise depends on
    cfg.seed. Values land in [-1, 1] like preprocessed real data.
    """
    size = cfg.image_size
    yy, xx = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size), indexing="ij")
    rng = np.random.default_rng(cfg.seed)
    images = np.empty((cfg.num_classes * cfg.samples_per_class, 1, size, size))
    labels = np.empty(cfg.num_classes * cfg.samples_per_class, dtype=np.int64)
    for c in range(cfg.num_classes):
        crng = np.random.default_rng(10_000 + c)  # class template, independent of cfg.seed
        angle = crng.uniform(0, np.pi)
        freq = crng.uniform(1.5, 4.5)
        phase = crng.uniform(0, 2 * np.pi)
        cx, cy = crng.uniform(-0.6, 0.6, size=2)
        blob_sign = 1.0 if crng.uniform() < 0.5 else -1.0
        grating = np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
        blob = blob_sign * np.exp(-(((xx - cx) ** 2 + (yy - cy) ** 2) / 0.08))
        template = 0.6 * grating + 0.7 * blob
        lo, hi = c * cfg.samples_per_class, (c + 1) * cfg.samples_per_class
        noise = rng.normal(scale=cfg.noise, size=(cfg.samples_per_class, size, size))
        images[lo:hi, 0] = np.clip(template[None] + noise, -1.0, 1.0)
        labels[lo:hi] = c
    return Dataset(images, labels)


def save_cache(dataset: Dataset, path):
    """Versioned binary cache: shape header + labels + little-endian doubles."""
    m, c, h, w = dataset.images.shape
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<IIIII", CACHE_VERSION, m, c, h, w))
        f.write(dataset.labels.astype("<i8").tobytes())
        f.write(np.ascontiguousarray(dataset.images, dtype="<f8").tobytes())


def load_cache(path) -> Dataset:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CACHE_MAGIC:
            raise DataFormatError(f"bad cache magic {magic!r}")
        version, m, c, h, w = struct.unpack("<IIIII", _read_exact(f, 20, "cache header"))
        if version != CACHE_VERSION:
            raise DataFormatError(f"unsupported cache version {version}")
        labels = np.frombuffer(_read_exact(f, m * 8, "cache labels"), dtype="<i8")
        raw = _read_exact(f, m * c * h * w * 8, "cache images")
        images = np.frombuffer(raw, dtype="<f8").reshape(m, c, h, w)
    return Dataset(images.copy(), labels.copy())
