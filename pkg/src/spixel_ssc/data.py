"""Hyperspectral cubes and label maps: file I/O, standardisation, synthesis,
and the superpixel-count rule."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ValidationError

CUBE_SUFFIX = ".hsi.json"
LABEL_SUFFIX = ".lbl.json"

# radius of the ball of per-pixel subspace coefficients around the class centre
_COEF_RADIUS = 0.5
# edge pixels per superpixel in the edge-based count estimate
_EDGE_PIXELS_PER_SUPERPIXEL = 64
# superpixels per class in the lower bound, and the fixed-point scale of the ratio
SAMPLES_PER_CLASS = 50
RATIO_SCALE = 10_000


@dataclass(frozen=True)
class HsiCube:
    """An ``height x width x bands`` image stored as an ``(N, D)`` matrix.

    Rows are pixels in row-major order.  ``band_mean``/``band_std`` are set by
    :func:`standardize` and are ``None`` for raw cubes.
    """

    height: int
    width: int
    values: np.ndarray
    band_mean: np.ndarray | None = None
    band_std: np.ndarray | None = None

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ValidationError(f"cube must be non-empty, got {self.height}x{self.width}")
        v = self.values
        if v.ndim != 2 or v.shape[0] != self.height * self.width or v.shape[1] < 1:
            raise ValidationError(
                f"values must have shape ({self.height * self.width}, D>=1), got {v.shape}"
            )
        _check_finite(v)
        v.setflags(write=False)

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    @property
    def bands(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.height, self.width, self.bands


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel integer labels; 0 marks unlabeled pixels."""

    height: int
    width: int
    labels: np.ndarray

    def __post_init__(self):
        if self.labels.shape != (self.height * self.width,):
            raise ValidationError(
                f"labels must have length {self.height * self.width}, got {self.labels.shape}"
            )
        self.labels.setflags(write=False)

    @property
    def classes(self) -> int:
        return int(np.count_nonzero(np.unique(self.labels)))

    @property
    def labeled_count(self) -> int:
        return int(np.count_nonzero(self.labels))

    def densify(self) -> "LabelMap":
        """Relabel nonzero classes to ``1..classes`` preserving order."""
        values = np.unique(self.labels[self.labels != 0])
        lut = np.zeros(int(self.labels.max(initial=0)) + 1, dtype=np.uint16)
        lut[values] = np.arange(1, values.size + 1)
        return LabelMap(self.height, self.width, lut[self.labels])


@dataclass(frozen=True)
class SynthSpec:
    height: int
    width: int
    bands: int
    classes: int
    subspace_dim: int = 3
    noise_sigma: float = 0.05
    region_layout: str = "blocks"
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ValidationError(f"classes must be >= 2, got {self.classes}")
        if self.subspace_dim < 1 or self.subspace_dim >= self.bands:
            raise ValidationError(
                f"subspace_dim must satisfy 1 <= subspace_dim < bands ({self.bands}), "
                f"got {self.subspace_dim}"
            )
        if self.region_layout not in ("blocks", "voronoi"):
            raise ValidationError(f"unknown region_layout {self.region_layout!r}")
        if self.height * self.width < self.classes:
            raise ValidationError("image has fewer pixels than classes")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")


def _check_finite(values: np.ndarray) -> None:
    bad = ~np.isfinite(values)
    if bad.any():
        k = int(np.flatnonzero(bad.ravel())[0])
        i, d = divmod(k, values.shape[1])
        raise ValidationError(f"non-finite value at pixel {i}, band {d} (flat index {k})")


# ------------------------------------------------------------------- file I/O


def _pair_paths(path, suffix: str) -> tuple[Path, Path]:
    name = str(path)
    raw_suffix = suffix.replace(".json", ".raw")
    stem = name
    for s in (suffix, raw_suffix):
        if name.endswith(s):
            stem = name[: -len(s)]
            break
    return Path(stem + suffix), Path(stem + raw_suffix)


def _read_raw(raw_path: Path, expected: int) -> bytes:
    if not raw_path.exists():
        raise OSError(f"missing raw file {raw_path}: expected {expected} bytes")
    data = raw_path.read_bytes()
    if len(data) != expected:
        raise OSError(f"{raw_path}: expected {expected} bytes, found {len(data)}")
    return data


def _write_pair(header_path: Path, raw_path: Path, header: dict, payload: bytes) -> None:
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header_path.write_text(json.dumps(header, indent=2) + "\n")
    raw_path.write_bytes(payload)


def load_cube(path) -> HsiCube:
    """Read a ``<name>.hsi.json`` header and its ``<name>.hsi.raw`` payload."""
    header_path, raw_path = _pair_paths(path, CUBE_SUFFIX)
    header = json.loads(header_path.read_text())
    if header.get("dtype", "f32le") != "f32le" or header.get("order", "bip") != "bip":
        raise ValidationError(f"unsupported cube encoding in {header_path}: {header}")
    h, w, d = int(header["height"]), int(header["width"]), int(header["bands"])
    data = _read_raw(raw_path, h * w * d * 4)
    values = np.frombuffer(data, dtype="<f4").reshape(h * w, d).copy()
    return HsiCube(h, w, values)


def save_cube(cube: HsiCube, path) -> Path:
    header_path, raw_path = _pair_paths(path, CUBE_SUFFIX)
    header = {"height": cube.height, "width": cube.width, "bands": cube.bands,
              "dtype": "f32le", "order": "bip"}
    _write_pair(header_path, raw_path, header, np.ascontiguousarray(cube.values, dtype="<f4").tobytes())
    return header_path


def load_labels(path) -> LabelMap:
    header_path, raw_path = _pair_paths(path, LABEL_SUFFIX)
    header = json.loads(header_path.read_text())
    if header.get("dtype", "u16le") != "u16le":
        raise ValidationError(f"unsupported label encoding in {header_path}: {header}")
    h, w = int(header["height"]), int(header["width"])
    data = _read_raw(raw_path, h * w * 2)
    return LabelMap(h, w, np.frombuffer(data, dtype="<u2").astype(np.uint16))


def save_labels(labels: LabelMap, path) -> Path:
    header_path, raw_path = _pair_paths(path, LABEL_SUFFIX)
    if labels.labels.size and int(labels.labels.max()) > 0xFFFF:
        raise ValidationError("labels exceed the u16 range")
    header = {"height": labels.height, "width": labels.width, "dtype": "u16le"}
    _write_pair(header_path, raw_path, header, labels.labels.astype("<u2").tobytes())
    return header_path


# -------------------------------------------------------------- preprocessing


def standardize(cube: HsiCube) -> HsiCube:
    """Z-score each band with the population standard deviation.

    Constant bands become all-zero and record a std of 1.
    """
    x = np.asarray(cube.values, dtype=np.float64)
    mean = x.mean(axis=0)
    centered = x - mean
    std = np.sqrt(np.mean(centered * centered, axis=0))
    scale = np.maximum(np.abs(mean), 1.0)
    constant = std <= 1e-12 * scale
    std = np.where(constant, 1.0, std)
    out = centered / std
    out[:, constant] = 0.0
    return HsiCube(cube.height, cube.width, out, band_mean=mean, band_std=std)


def _block_grid(classes: int) -> tuple[int, int]:
    rows = max(r for r in range(1, int(math.isqrt(classes)) + 1) if classes % r == 0)
    return rows, classes // rows


def _layout(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    H, W = spec.height, spec.width
    rr, cc = np.mgrid[0:H, 0:W]
    if spec.region_layout == "blocks":
        br, bc = _block_grid(spec.classes)
        block = (rr * br // H) * bc + (cc * bc // W)
        return (block + 1).ravel()
    seeds = rng.choice(H * W, size=spec.classes, replace=False)
    sr, sc = np.divmod(seeds, W)
    d = (rr.ravel()[:, None] - sr[None, :]) ** 2 + (cc.ravel()[:, None] - sc[None, :]) ** 2
    return np.argmin(d, axis=1) + 1


def make_synthetic(spec: SynthSpec) -> tuple[HsiCube, LabelMap]:
    """Union-of-subspaces cube with spatially contiguous class regions.

    Each class owns an orthonormal basis of ``subspace_dim`` vectors and a
    unit-norm centre in coefficient space; a pixel's spectrum is that basis
    times coefficients drawn uniformly from a ball around the centre, plus
    isotropic Gaussian noise.
    """
    rng = np.random.default_rng(spec.seed)
    labels = _layout(spec, rng)
    D, d = spec.bands, spec.subspace_dim
    values = np.empty((labels.size, D))
    for c in range(1, spec.classes + 1):
        basis, _ = np.linalg.qr(rng.standard_normal((D, d)))
        centre = rng.standard_normal(d)
        centre /= np.linalg.norm(centre)
        idx = np.flatnonzero(labels == c)
        u = rng.standard_normal((idx.size, d))
        u *= (rng.uniform(0.0, 1.0, (idx.size, 1)) ** (1.0 / d)) / np.linalg.norm(u, axis=1, keepdims=True)
        coef = centre + _COEF_RADIUS * u
        values[idx] = coef @ basis.T
    if spec.noise_sigma > 0:
        values += spec.noise_sigma * rng.standard_normal(values.shape)
    cube = HsiCube(spec.height, spec.width, values)
    return cube, LabelMap(spec.height, spec.width, labels.astype(np.uint16))


# ------------------------------------------------------------ superpixel count


def edge_superpixel_estimate(cube: HsiCube) -> int:
    """Scene-complexity estimate: Otsu-thresholded Sobel edges of the mean band,
    one superpixel per 64 edge pixels."""
    from skimage.filters import sobel, threshold_otsu

    mean_band = np.asarray(cube.values, dtype=np.float64).mean(axis=1).reshape(cube.height, cube.width)
    if min(cube.height, cube.width) < 3:
        return 0
    mag = sobel(mean_band)
    if np.ptp(mag) <= 1e-12:
        return 0
    edges = int(np.count_nonzero(mag > threshold_otsu(mag)))
    return math.ceil(edges / _EDGE_PIXELS_PER_SUPERPIXEL)


def superpixel_lower_bound(classes: int, labeled: int, n_pixels: int) -> int:
    """``ceil(50 * classes / ratio)`` where ``ratio = labeled / n_pixels``.

    The ratio is truncated to four decimals before dividing (30214/99600 is
    taken as 0.3033), which can only raise the bound; ratios below 1e-4 are
    used exactly.  Integer arithmetic throughout.
    """
    ratio_e4 = labeled * RATIO_SCALE // n_pixels
    if ratio_e4 == 0:
        return -(-SAMPLES_PER_CLASS * classes * n_pixels // labeled)
    return -(-SAMPLES_PER_CLASS * classes * RATIO_SCALE // ratio_e4)


def choose_superpixel_count(cube: HsiCube, labelmap: LabelMap | None = None,
                            override: int | None = None, classes: int | None = None,
                            edge_estimate: int | None = None) -> int:
    """Number of superpixels: ``max(edge estimate, 50*C/R)`` clamped to ``[C, N/4]``.

    ``override`` short-circuits everything.  ``classes`` supplies C when no
    label map is given (R is then 1).
    """
    if override is not None:
        if override < 1 or override > cube.n_pixels:
            raise ConfigError(f"superpixel override must lie in [1, {cube.n_pixels}], got {override}")
        return int(override)
    if labelmap is not None:
        n_classes = classes if classes is not None else labelmap.classes
        labeled = labelmap.labeled_count
    else:
        n_classes, labeled = classes, cube.n_pixels
    if not n_classes:
        raise ConfigError("number of classes unknown: pass a label map, classes, or an override")
    if labeled == 0:
        raise ConfigError("label map has no labeled pixels")
    m_edge = edge_superpixel_estimate(cube) if edge_estimate is None else edge_estimate
    m = max(m_edge, superpixel_lower_bound(n_classes, labeled, cube.n_pixels))
    return int(max(n_classes, min(m, cube.n_pixels // 4)))
