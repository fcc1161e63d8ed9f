"""Datasets: the planted-correlation synthetic generator, CelebA-style
annotation files, a raw float image container and portable graymaps."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from galnet.errors import ConfigError, ParseError


@dataclass
class Dataset:
    images: np.ndarray  # N x H x W x C float64
    labels: np.ndarray  # N x M in {0, 1}
    attribute_names: list[str]
    ground_truth_pairs: list[tuple[int, int]] | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.labels.ndim != 2 or len(self.images) != len(self.labels):
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if len(self.images) < 1:
            raise ValueError("dataset is empty")
        if self.labels.shape[1] != len(self.attribute_names):
            raise ValueError(f"{self.labels.shape[1]} label columns but {len(self.attribute_names)} names")
        if len(set(self.attribute_names)) != len(self.attribute_names):
            raise ValueError("attribute names must be unique")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be binary")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_attributes(self) -> int:
        return self.labels.shape[1]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], list(self.attribute_names), self.ground_truth_pairs)

    def factor_groups(self) -> list[tuple[str, list[int]]] | None:
        """Connected components of ``ground_truth_pairs`` (singletons included)."""
        if self.ground_truth_pairs is None:
            return None
        parent = list(range(self.num_attributes))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for i, j in self.ground_truth_pairs:
            parent[find(i)] = find(j)
        comps: dict[int, list[int]] = {}
        for i in range(self.num_attributes):
            comps.setdefault(find(i), []).append(i)
        ordered = sorted(comps.values())
        return [(f"group{k}", members) for k, members in enumerate(ordered)]


@dataclass
class SyntheticConfig:
    num_attributes: int = 8
    num_factors: int = 4
    factor_map: list[int] | None = None  # attribute -> factor; default contiguous blocks
    flip_prob: float = 0.1  # label noise
    height: int = 32
    width: int = 32
    n_train: int = 4000
    n_eval: int = 1000
    render_contrast: float = 1.0
    seed: int = 0
    noise_scale: float = field(default=0.25, repr=False)

    def __post_init__(self):
        m, k = self.num_attributes, self.num_factors
        if k < 1 or m < 1:
            raise ConfigError("num_factors/num_attributes: must be positive")
        if k > m:
            raise ConfigError(f"num_factors: {k} exceeds num_attributes {m}")
        if self.factor_map is None:
            self.factor_map = [j * k // m for j in range(m)]
        self.factor_map = [int(f) for f in self.factor_map]
        if len(self.factor_map) != m:
            raise ConfigError(f"factor_map: needs {m} entries, got {len(self.factor_map)}")
        if any(not 0 <= f < k for f in self.factor_map):
            raise ConfigError(f"factor_map: entries must lie in [0, {k})")
        empty = sorted(set(range(k)) - set(self.factor_map))
        if empty:
            raise ConfigError(f"factor_map: factors {empty} have no attribute")
        if not 0 <= self.flip_prob < 0.5:
            raise ConfigError(f"flip_prob: must lie in [0, 0.5), got {self.flip_prob}")
        if self.height < k:
            raise ConfigError(f"height: {self.height} rows cannot hold {k} bands")
        if self.width < 1 or self.n_train < 1 or self.n_eval < 1:
            raise ConfigError("width/n_train/n_eval: must be positive")
        if self.render_contrast <= 0:
            raise ConfigError("render_contrast: must be positive")

    def pairs(self) -> list[tuple[int, int]]:
        fm = self.factor_map
        return [(i, j) for i in range(len(fm)) for j in range(i + 1, len(fm)) if fm[i] == fm[j]]


def generate_synthetic(config: SyntheticConfig, split: str = "train") -> Dataset:
    """Labels copy K fair-coin factors through a symmetric noisy channel; each
    factor is rendered as a horizontal band of high or low intensity."""
    n = {"train": config.n_train, "eval": config.n_eval}[split]
    rng = np.random.default_rng([config.seed, 0 if split == "train" else 1])
    m, k = config.num_attributes, config.num_factors
    factors = rng.integers(0, 2, size=(n, k))
    noise = rng.random((n, m)) < config.flip_prob
    labels = factors[:, config.factor_map] ^ noise
    rows = np.array_split(np.arange(config.height), k)
    band_of_row = np.empty(config.height, dtype=np.int64)
    for b, r in enumerate(rows):
        band_of_row[r] = b
    level = np.where(factors == 1, config.render_contrast, -config.render_contrast)  # n x k
    mean = level[:, band_of_row]  # n x H
    images = mean[:, :, None, None] + config.noise_scale * rng.standard_normal((n, config.height, config.width, 1))
    names = [f"attr{j}_f{config.factor_map[j]}" for j in range(m)]
    return Dataset(images, labels.astype(np.int64), names, config.pairs())


def random_flip(image: np.ndarray, rng) -> np.ndarray:
    """Mirror along the width axis with probability 0.5 (image is H x W x C)."""
    if rng.random() < 0.5:
        return image[:, ::-1, :]
    return image


# CelebA annotation list ------------------------------------------------------


def read_annotations(path) -> tuple[list[str], list[str], np.ndarray]:
    """Parse a ``list_attr_celeba.txt`` style file.

    Returns (filenames, attribute names, N x M labels with -1 mapped to 0).
    """
    path = Path(path)
    lines = path.read_text().splitlines()
    if len(lines) < 2:
        raise ParseError(f"{path}: expected count and header lines")
    try:
        count = int(lines[0].strip())
    except ValueError:
        raise ParseError(f"{path}:1: expected an image count, got {lines[0]!r}") from None
    names = lines[1].split()
    if not names:
        raise ParseError(f"{path}:2: empty attribute header")
    files, rows = [], []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != len(names) + 1:
            raise ParseError(f"{path}:{lineno}: expected {len(names)} values, got {len(parts) - 1}")
        try:
            vals = [int(v) for v in parts[1:]]
        except ValueError:
            raise ParseError(f"{path}:{lineno}: non-integer attribute value") from None
        if any(v not in (-1, 1) for v in vals):
            raise ParseError(f"{path}:{lineno}: attribute values must be -1 or 1")
        files.append(parts[0])
        rows.append([1 if v == 1 else 0 for v in vals])
    if len(files) != count:
        raise ParseError(f"{path}:1: header says {count} images, found {len(files)}")
    return files, names, np.array(rows, dtype=np.int64).reshape(len(files), len(names))


def write_annotations(path, filenames: Sequence[str], names: Sequence[str], labels: np.ndarray) -> None:
    out = [str(len(filenames)), " ".join(names)]
    for fn, row in zip(filenames, labels):
        out.append(fn + " " + " ".join("1" if v else "-1" for v in row))
    Path(path).write_text("\n".join(out) + "\n")


# portable graymap ------------------------------------------------------------


def read_pgm(path) -> np.ndarray:
    """Read a P2 or P5 graymap as an H x W float array scaled to [0, 1]."""
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic == b"P5":
        dtype = ">u2" if maxval > 255 else "u1"
        px = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos + 1)
    elif magic == b"P2":
        px = np.array(data[pos:].split(), dtype=np.int64)
        if px.size != w * h:
            raise ParseError(f"{path}: expected {w * h} pixels, got {px.size}")
    else:
        raise ParseError(f"{path}: unsupported magic {magic!r}")
    return px.reshape(h, w).astype(np.float64) / maxval


def write_pgm(path, pixels: np.ndarray, maxval: int = 255) -> None:
    """Write integer pixels (H x W) as ASCII P2."""
    px = np.asarray(pixels, dtype=np.int64)
    h, w = px.shape
    rows = "\n".join(" ".join(str(v) for v in row) for row in px)
    Path(path).write_text(f"P2\n{w} {h}\n{maxval}\n{rows}\n")


def _resize_nearest(img: np.ndarray, h: int, w: int) -> np.ndarray:
    rows = (np.arange(h) * img.shape[0] // h).clip(0, img.shape[0] - 1)
    cols = (np.arange(w) * img.shape[1] // w).clip(0, img.shape[1] - 1)
    return img[rows][:, cols]


def _read_image(path: Path, channels: int) -> np.ndarray:
    if path.suffix.lower() == ".pgm":
        img = read_pgm(path)[:, :, None]
        return np.repeat(img, channels, axis=2) if channels > 1 else img
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("L" if channels == 1 else "RGB"), dtype=np.float64) / 255.0
    return arr[:, :, None] if arr.ndim == 2 else arr


def load_attribute_dataset(image_dir, annotation_file, size: tuple[int, int] | None = None, channels: int = 1) -> Dataset:
    """Images listed in a CelebA-format annotation file, scaled to [0, 1] and
    resized (nearest neighbour) to ``size``."""
    image_dir = Path(image_dir)
    files, names, labels = read_annotations(annotation_file)
    images = []
    for lineno, fn in enumerate(files, start=3):
        p = image_dir / fn
        if not p.exists():
            raise ParseError(f"{annotation_file}:{lineno}: missing image {p}")
        img = _read_image(p, channels)
        if size is not None:
            img = _resize_nearest(img, *size)
        images.append(img)
    if len({im.shape for im in images}) > 1:
        raise ParseError(f"{annotation_file}: images differ in size; pass size=")
    return Dataset(np.stack(images), labels, names)


# raw float image container ---------------------------------------------------
#
# 16-byte header "<4sHIHHH": magic b"GALI", version, N, H, W, C; then N*H*W*C
# little-endian float64 values in N, H, W, C order.

IMG_MAGIC = b"GALI"
IMG_VERSION = 1
_IMG_HEADER = struct.Struct("<4sHIHHH")


def write_image_container(path, images: np.ndarray) -> None:
    n, h, w, c = images.shape
    with open(path, "wb") as fh:
        fh.write(_IMG_HEADER.pack(IMG_MAGIC, IMG_VERSION, n, h, w, c))
        fh.write(np.ascontiguousarray(images, dtype="<f8").tobytes())


def read_image_container(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _IMG_HEADER.size:
        raise ParseError(f"{path}: truncated header")
    magic, version, n, h, w, c = _IMG_HEADER.unpack_from(data)
    if magic != IMG_MAGIC or version != IMG_VERSION:
        raise ParseError(f"{path}: not an image container (magic {magic!r}, version {version})")
    expected = n * h * w * c * 8
    if len(data) - _IMG_HEADER.size != expected:
        raise ParseError(f"{path}: payload is {len(data) - _IMG_HEADER.size} bytes, expected {expected}")
    return np.frombuffer(data, dtype="<f8", offset=_IMG_HEADER.size).reshape(n, h, w, c).astype(np.float64)


# dataset directories ---------------------------------------------------------

ANNOTATION_FILE = "list_attr.txt"
IMAGES_FILE = "images.bin"
GROUPS_FILE = "pairs.txt"


def save_dataset(dataset: Dataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = [f"{i:06d}" for i in range(len(dataset))]
    write_annotations(d / ANNOTATION_FILE, names, dataset.attribute_names, dataset.labels)
    write_image_container(d / IMAGES_FILE, dataset.images)
    if dataset.ground_truth_pairs is not None:
        (d / GROUPS_FILE).write_text("".join(f"{i} {j}\n" for i, j in dataset.ground_truth_pairs))


def load_dataset(directory, size: tuple[int, int] | None = None, channels: int = 1) -> Dataset:
    """Load a directory holding ``list_attr.txt`` plus either ``images.bin``
    or the image files named in the annotation list."""
    d = Path(directory)
    ann = d / ANNOTATION_FILE
    if not ann.exists():
        raise ParseError(f"{d}: no {ANNOTATION_FILE}")
    if (d / IMAGES_FILE).exists():
        files, names, labels = read_annotations(ann)
        images = read_image_container(d / IMAGES_FILE)
        if len(images) != len(files):
            raise ParseError(f"{d}: {len(images)} images but {len(files)} annotation rows")
        ds = Dataset(images, labels, names)
    else:
        ds = load_attribute_dataset(d, ann, size, channels)
    if (d / GROUPS_FILE).exists():
        pairs = []
        for lineno, line in enumerate((d / GROUPS_FILE).read_text().splitlines(), start=1):
            parts = line.split()
            if len(parts) != 2:
                raise ParseError(f"{d / GROUPS_FILE}:{lineno}: expected two indices")
            pairs.append((int(parts[0]), int(parts[1])))
        ds.ground_truth_pairs = pairs
    return ds
