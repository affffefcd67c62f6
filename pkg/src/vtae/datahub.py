"""Dataset loading (IDX), synthetic generators (donut, warped glyphs) and export."""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import stlayer
from .diffcore import ContractViolation, FormatError, save_tensor

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray | None = None
    split: str = "train"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1) \
                and self.provenance.get("kind") != "donut":
            raise ContractViolation("image values must lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.images):
                raise ContractViolation(
                    f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        labels = None if self.labels is None else self.labels[idx]
        prov = dict(self.provenance, subset=len(idx))
        return Dataset(self.images[idx], labels, split or self.split, prov)

    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self.images), -1)


# -- IDX -------------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"no such file: {path}")
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def _parse_idx(raw: bytes, expected_magic: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"{what} file too short for an IDX header ({len(raw)} bytes)")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{what} file has magic bytes {raw[:4].hex(' ')}, "
                          f"expected {struct.pack('>I', expected_magic).hex(' ')}")
    ndim = raw[3]
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise FormatError(f"{what} header truncated: expected {head} bytes, got {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    expected = head + int(np.prod(dims))
    if len(raw) != expected:
        raise FormatError(f"{what} file length mismatch: expected {expected} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def load_idx(images_path, labels_path=None, transpose: bool = False, split: str = "train") -> Dataset:
    """Read an IDX image file (and optional label file); pixels are scaled by 1/255.

    ``transpose`` swaps rows and columns of every image (EMNIST layout).
    """
    raw = _parse_idx(_read_bytes(images_path), IMAGE_MAGIC, "image")
    images = raw.astype(np.float64) / 255.0
    if transpose:
        images = np.ascontiguousarray(np.swapaxes(images, 1, 2))
    labels = None
    if labels_path is not None:
        labels = _parse_idx(_read_bytes(labels_path), LABEL_MAGIC, "label").astype(np.int64)
        if len(labels) != len(images):
            raise FormatError(f"image file holds {len(images)} images but label file holds {len(labels)} labels")
    prov = {"kind": "idx", "images": str(images_path), "labels": str(labels_path) if labels_path else None,
            "transpose": transpose}
    return Dataset(images[:, None], labels, split, prov)


def idx_bytes(array: np.ndarray, magic: int) -> bytes:
    a = np.asarray(array, dtype=np.uint8)
    return struct.pack(">I", magic) + struct.pack(f">{a.ndim}I", *a.shape) + a.tobytes()


def write_idx(dataset: Dataset, images_path, labels_path=None) -> None:
    """Inverse of :func:`load_idx` for data that came from 8-bit pixels."""
    imgs = dataset.images.reshape(len(dataset), *dataset.images.shape[-2:])
    Path(images_path).write_bytes(idx_bytes(np.rint(imgs * 255.0), IMAGE_MAGIC))
    if labels_path is not None and dataset.labels is not None:
        Path(labels_path).write_bytes(idx_bytes(dataset.labels, LABEL_MAGIC))


IDX_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_idx_dir(directory, split: str = "train", transpose: bool = False) -> Dataset:
    """Load the standard file pair for ``split`` from ``directory`` (plain or .gz)."""
    d = Path(directory)
    names = IDX_NAMES[split]
    paths = []
    for name in names:
        for cand in (d / name, d / (name + ".gz")):
            if cand.is_file():
                paths.append(cand)
                break
        else:
            raise FormatError(f"missing {name} in {d}")
    return load_idx(paths[0], paths[1], transpose=transpose, split=split)


def write_sample_mnist(directory, n_test: int = 1000) -> Path:
    """Write the 5000-image MNIST sample bundled with ``mlxtend`` as IDX files.

    After a fixed shuffle the last ``n_test`` rows become the test split.
    """
    import importlib.resources

    src = importlib.resources.files("mlxtend.data").joinpath("data/mnist_5k.csv.gz")
    with src.open("rb") as fh:
        table = np.loadtxt(gzip.open(fh, "rt"), delimiter=",", dtype=np.int64)
    # rows are grouped by class; a fixed shuffle stratifies both splits
    table = table[np.random.default_rng(0).permutation(len(table))]
    labels, pixels = table[:, -1], table[:, :-1].reshape(-1, 28, 28)
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    cut = len(table) - n_test
    for split, sl in (("train", slice(0, cut)), ("test", slice(cut, None))):
        img_name, lab_name = IDX_NAMES[split]
        (d / img_name).write_bytes(idx_bytes(pixels[sl], IMAGE_MAGIC))
        (d / lab_name).write_bytes(idx_bytes(labels[sl], LABEL_MAGIC))
    return d


# -- synthetic data ----------------------------------------------------------------

def make_donut(n: int, inner: float = 0.8, outer: float = 1.2, seed: int = 0) -> Dataset:
    """Points with uniform angle and radius uniform in [inner, outer]."""
    if not 0 < inner < outer:
        raise ContractViolation(f"need 0 < inner < outer, got {inner}, {outer}")
    rng = np.random.default_rng(seed)
    ang = rng.uniform(0.0, 2 * np.pi, n)
    rad = rng.uniform(inner, outer, n)
    pts = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1) if n else np.zeros((0, 2))
    prov = {"kind": "donut", "n": n, "inner": inner, "outer": outer, "seed": seed}
    return Dataset(pts, None, "train", prov)


def _glyph_bank() -> np.ndarray:
    yy, xx = np.mgrid[0:28, 0:28].astype(np.float64)
    cy = cx = 13.5
    r = np.hypot(yy - cy, xx - cx)
    ring = (r >= 6.5) & (r <= 9.5)
    square = ((np.abs(yy - cy) <= 9) & (np.abs(xx - cx) <= 9)) & ~((np.abs(yy - cy) <= 6) & (np.abs(xx - cx) <= 6))
    cross = ((np.abs(yy - cy) <= 1.5) & (np.abs(xx - cx) <= 10)) | ((np.abs(xx - cx) <= 1.5) & (np.abs(yy - cy) <= 10))
    # filled triangle pointing up: apex at row 4, base at row 23
    half = (yy - 4) * 0.5
    tri = (yy >= 4) & (yy <= 23) & (np.abs(xx - cx) <= half)
    return np.stack([ring, square, cross, tri]).astype(np.float64)


GLYPHS = _glyph_bank()
GLYPH_NAMES = ("ring", "square", "cross", "triangle")

DEFAULT_RANGES = {"angle": 0.5, "shear": 0.2, "scale": (0.8, 1.2), "shift": 0.15}


def make_glyphs(n: int, ranges: dict | None = None, seed: int = 0):
    """Base glyphs warped by random decomposed affine maps.

    ``ranges`` gives half-widths for ``angle``, ``shear`` and ``shift`` and an
    interval for ``scale``.  Returns ``(dataset, truth)`` where ``truth`` holds
    ``appearance`` (glyph ids) and ``params`` (n, 6) decomposed parameters.
    """
    rg = dict(DEFAULT_RANGES)
    rg.update(ranges or {})
    lo, hi = rg["scale"]
    if not (0 < lo <= hi) or abs(rg["angle"]) > np.pi / 2 or abs(rg["shear"]) >= 1 or abs(rg["shift"]) > 0.5:
        raise ContractViolation(f"transform ranges outside the invertibility-safe region: {rg}")
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, len(GLYPHS), n)
    params = np.column_stack([
        rng.uniform(-1, 1, n) * rg["angle"],
        rng.uniform(-1, 1, n) * rg["shear"],
        rng.uniform(lo, hi, n),
        rng.uniform(lo, hi, n),
        rng.uniform(-1, 1, n) * rg["shift"],
        rng.uniform(-1, 1, n) * rg["shift"],
    ]) if n else np.zeros((0, 6))
    imgs = np.empty((n, 1, 28, 28))
    for i in range(n):
        t = stlayer.AffineTransform("decomposed", params[i])
        imgs[i, 0] = np.clip(stlayer.warp(GLYPHS[ids[i]], t), 0.0, 1.0)
    prov = {"kind": "glyphs", "n": n, "ranges": {k: list(v) if isinstance(v, tuple) else v for k, v in rg.items()},
            "seed": seed}
    return Dataset(imgs, ids, "train", prov), {"appearance": ids, "params": params}


# -- export --------------------------------------------------------------------------

def export_dataset(dataset: Dataset, path) -> tuple[Path, Path]:
    """Write images as a tensor container and a provenance JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_tensor(path, dataset.images)
    side = path.with_suffix(path.suffix + ".json")
    meta = {"split": dataset.split, "shape": list(dataset.images.shape),
            "labels": None if dataset.labels is None else dataset.labels.tolist(),
            "provenance": dataset.provenance}
    side.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path, side


def split_holdout(dataset: Dataset, digit: int) -> tuple[Dataset, Dataset]:
    """(rows whose label differs from ``digit``, rows with that label)."""
    if dataset.labels is None:
        raise ContractViolation("hold-out split needs labels")
    mask = dataset.labels == digit
    return dataset.subset(np.flatnonzero(~mask)), dataset.subset(np.flatnonzero(mask), split="outlier")
