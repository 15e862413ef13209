"""Artifact writers: PPM label renders and coefficient CSVs."""
from __future__ import annotations

import csv
import re
from pathlib import Path

import numpy as np

SPARSE_CUTOFF = 1e-10
# magic, width, height, maxval, then exactly one whitespace byte
_PPM_HEADER = re.compile(rb"P6\s+(\d+)\s+(\d+)\s+255\s")


def palette(n: int, seed: int = 0) -> np.ndarray:
    """``n`` distinct non-black RGB colours, reproducible for a given seed."""
    rng = np.random.default_rng(seed)
    codes = rng.choice((1 << 24) - 1, size=n, replace=False) + 1
    return np.stack([(codes >> 16) & 0xFF, (codes >> 8) & 0xFF, codes & 0xFF], axis=1).astype(np.uint8)


def render_labels(labels: np.ndarray, height: int, width: int, seed: int = 0) -> np.ndarray:
    """RGB image of a label map; label 0 is black, other labels get palette colours
    in increasing label order."""
    labels = np.asarray(labels).ravel()
    values, inverse = np.unique(labels, return_inverse=True)
    nonzero = values != 0
    colours = np.zeros((values.size, 3), dtype=np.uint8)
    colours[nonzero] = palette(int(nonzero.sum()), seed)
    return colours[inverse].reshape(height, width, 3)


def write_ppm(labels: np.ndarray, height: int, width: int, path, seed: int = 0) -> Path:
    path = Path(path)
    path.write_bytes(ppm_bytes(render_labels(labels, height, width, seed)))
    return path


def ppm_bytes(img: np.ndarray) -> bytes:
    height, width, _ = img.shape
    return f"P6\n{width} {height}\n255\n".encode() + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def parse_ppm(data: bytes, name: str = "data") -> np.ndarray:
    """Pixels of a binary PPM as a ``height x width x 3`` uint8 array."""
    header = _PPM_HEADER.match(data)
    if header is None:
        raise ValueError(f"{name} is not a binary PPM")
    width, height = int(header[1]), int(header[2])
    pixels = np.frombuffer(data, dtype=np.uint8, offset=header.end())
    if pixels.size != width * height * 3:
        raise ValueError(f"{name}: expected {width * height * 3} pixel bytes, found {pixels.size}")
    return pixels.reshape(height, width, 3)


def read_ppm(path) -> np.ndarray:
    return parse_ppm(Path(path).read_bytes(), str(path))


def write_dense_csv(Z: np.ndarray, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in np.asarray(Z):
            writer.writerow([repr(float(v)) for v in row])
    return path


def write_triplets_csv(Z: np.ndarray, path, cutoff: float = SPARSE_CUTOFF) -> Path:
    """``row,col,value`` for every entry with ``|value| > cutoff``."""
    path = Path(path)
    Z = np.asarray(Z)
    rows, cols = np.nonzero(np.abs(Z) > cutoff)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("row", "col", "value"))
        for r, c in zip(rows.tolist(), cols.tolist()):
            writer.writerow((r, c, repr(float(Z[r, c]))))
    return path


def read_triplets_csv(path, shape) -> np.ndarray:
    Z = np.zeros(shape)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for r, c, v in reader:
            Z[int(r), int(c)] = float(v)
    return Z
