"""Differentiable superpixel generation.

Pixels are softly assigned to their ``G`` spatially nearest superpixels with a
temperature softmax over a per-superpixel blend of spectral and spatial
squared distances; centres are the assignment-weighted means.  Every forward
pass keeps a :class:`SuperpixelTrace` so :func:`superpixels_backward` can
replay it in reverse.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import kernels
from .errors import ValidationError

DEFAULT_G = 9
DEN_EPS = 1e-8


@dataclass(frozen=True)
class AdaptedFeatures:
    """``Xp = X + delta`` together with pixel coordinates in grid-step units."""

    Xp: np.ndarray
    coords: np.ndarray
    height: int
    width: int

    @property
    def n_pixels(self) -> int:
        return self.Xp.shape[0]


@dataclass(frozen=True)
class SuperpixelState:
    S: np.ndarray
    rS: np.ndarray

    @property
    def M(self) -> int:
        return self.S.shape[0]


@dataclass(frozen=True)
class SoftAssignment:
    candidates: np.ndarray
    probs: np.ndarray
    tau: float
    hard: np.ndarray


@dataclass
class _Round:
    cand: np.ndarray
    spec: np.ndarray
    spat: np.ndarray
    probs: np.ndarray
    den: np.ndarray
    prev: SuperpixelState
    new: SuperpixelState


@dataclass
class SuperpixelTrace:
    feat: AdaptedFeatures
    w: np.ndarray
    tau: float
    cells: np.ndarray
    cell_sizes: np.ndarray
    rounds: list[_Round] = field(default_factory=list)


def grid_step(n_pixels: int, M: int) -> float:
    return math.sqrt(n_pixels / M)


def pixel_coords(height: int, width: int, M: int) -> np.ndarray:
    """(row, col) of every pixel divided by the grid step ``sqrt(N/M)``."""
    rr, cc = np.divmod(np.arange(height * width, dtype=np.float64), width)
    return np.stack([rr, cc], axis=1) / grid_step(height * width, M)


def adapt_features(X: np.ndarray, delta: np.ndarray, height: int, width: int, M: int) -> AdaptedFeatures:
    return AdaptedFeatures(np.asarray(X, dtype=np.float64) + delta, pixel_coords(height, width, M), height, width)


def grid_cells(height: int, width: int, M: int) -> np.ndarray:
    """Cell index of every pixel for a near-square tiling into exactly ``M`` cells.

    The grid has ``ceil(sqrt(M*H/W))`` rows; cells are spread over the rows as
    evenly as possible, so every row holds ``floor`` or ``ceil`` of ``M/rows``
    cells (which is ``ceil(M/rows)`` whenever that tiles exactly).
    """
    if M < 1 or M > height * width:
        raise ValidationError(f"superpixel count must lie in [1, {height * width}], got {M}")
    n_rows = min(math.ceil(math.sqrt(M * height / width)), height, M)
    per_row = np.full(n_rows, M // n_rows)
    per_row[: M % n_rows] += 1
    if per_row.max() > width:
        raise ValidationError(f"cannot tile a {height}x{width} image into {M} cells")
    offsets = np.concatenate([[0], np.cumsum(per_row)[:-1]])
    rr, cc = np.divmod(np.arange(height * width), width)
    band = rr * n_rows // height
    return offsets[band] + cc * per_row[band] // width


def init_grid(feat: AdaptedFeatures, M: int) -> tuple[SuperpixelState, np.ndarray]:
    """Grid initialisation; returns the state and the per-pixel cell index."""
    cells = grid_cells(feat.height, feat.width, M)
    sizes = np.bincount(cells, minlength=M).astype(np.float64)
    S = kernels.segment_sum(cells, feat.Xp, M)
    rS = kernels.segment_sum(cells, feat.coords, M)
    return SuperpixelState(S / sizes[:, None], rS / sizes[:, None]), cells


def candidate_superpixels(state: SuperpixelState, coords: np.ndarray, G: int = DEFAULT_G) -> np.ndarray:
    """The ``min(G, M)`` spatially nearest superpixels of every pixel, nearest first."""
    return kernels.candidates(coords, state.rS, min(G, state.M))


def compute_distances(feat: AdaptedFeatures, state: SuperpixelState, w: np.ndarray,
                      candidates: np.ndarray) -> np.ndarray:
    """``w_j*|x_i - s_j|^2 + (1 - w_j)*|r_i - r(s_j)|^2`` over each pixel's candidates."""
    spec, spat, _ = kernels.assign_forward(feat.Xp, feat.coords, state.S, state.rS,
                                           np.asarray(w, dtype=np.float64), candidates, 1.0)
    wc = w[candidates]
    return wc * spec + (1.0 - wc) * spat


def soft_assign(dist: np.ndarray, tau: float) -> np.ndarray:
    if not tau > 0:
        raise ValidationError(f"temperature must be positive, got {tau}")
    y = -np.asarray(dist, dtype=np.float64) / tau
    y -= y.max(axis=1, keepdims=True)
    e = np.exp(y)
    return e / e.sum(axis=1, keepdims=True)


def update_centers(feat: AdaptedFeatures, probs: np.ndarray, candidates: np.ndarray, M: int) -> SuperpixelState:
    S, rS, _ = kernels.center_forward(feat.Xp, feat.coords, probs, candidates, M, DEN_EPS)
    return SuperpixelState(S, rS)


def hard_labels(probs: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Argmax superpixel per pixel; ties go to the lowest superpixel index."""
    top = probs.max(axis=1, keepdims=True)
    masked = np.where(probs == top, candidates, np.iinfo(np.int64).max)
    return masked.min(axis=1)


def run_superpixels(feat: AdaptedFeatures, w: np.ndarray, M: int, T: int, tau: float,
                    G: int = DEFAULT_G) -> tuple[SoftAssignment, SuperpixelState, SuperpixelTrace]:
    """Grid initialisation followed by ``T`` rounds of candidate selection,
    distances, softmax and centre update; hard labels from the last round."""
    if T < 1:
        raise ValidationError(f"need at least one refinement round, got T={T}")
    if not tau > 0:
        raise ValidationError(f"temperature must be positive, got {tau}")
    w = np.asarray(w, dtype=np.float64)
    state, cells = init_grid(feat, M)
    trace = SuperpixelTrace(feat, w, tau, cells, np.bincount(cells, minlength=M).astype(np.float64))
    G = min(G, M)
    for _ in range(T):
        cand = kernels.candidates(feat.coords, state.rS, G)
        spec, spat, probs = kernels.assign_forward(feat.Xp, feat.coords, state.S, state.rS, w, cand, tau)
        S, rS, den = kernels.center_forward(feat.Xp, feat.coords, probs, cand, M, DEN_EPS)
        new = SuperpixelState(S, rS)
        trace.rounds.append(_Round(cand, spec, spat, probs, den, state, new))
        state = new
    last = trace.rounds[-1]
    assignment = SoftAssignment(last.cand, last.probs, tau, hard_labels(last.probs, last.cand))
    return assignment, state, trace


def superpixels_backward(trace: SuperpixelTrace, gS: np.ndarray, gP_last: np.ndarray | None = None,
                         grS: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Reverse pass of :func:`run_superpixels`.

    ``gS``/``grS`` are adjoints of the final centres and ``gP_last`` of the
    final soft assignment.  Returns adjoints of ``Xp`` and ``w``; candidate
    sets and hard labels are treated as constants.
    """
    feat = trace.feat
    gXp = np.zeros_like(feat.Xp)
    gw = np.zeros_like(trace.w)
    gS = np.array(gS, dtype=np.float64)
    grS = np.zeros((gS.shape[0], 2)) if grS is None else np.array(grS, dtype=np.float64)
    for t in range(len(trace.rounds) - 1, -1, -1):
        rd = trace.rounds[t]
        gP, gx = kernels.center_backward(feat.Xp, feat.coords, rd.probs, rd.cand, rd.new.S, rd.new.rS,
                                         rd.den, gS, grS, DEN_EPS)
        gXp += gx
        if t == len(trace.rounds) - 1 and gP_last is not None:
            gP = gP + gP_last
        gx, gS, grS, gw_t = kernels.assign_backward(feat.Xp, feat.coords, rd.prev.S, rd.prev.rS, trace.w,
                                                    rd.cand, rd.probs, rd.spec, rd.spat, gP, trace.tau)
        gXp += gx
        gw += gw_t
    # grid initialisation: S_0 is the cell mean of Xp; r(S_0) is constant
    gXp += (gS / trace.cell_sizes[:, None])[trace.cells]
    return gXp, gw


def quantized_features(state: SuperpixelState, hard: np.ndarray) -> np.ndarray:
    """``F_i = S[L_i]``: each pixel replaced by its superpixel's centroid."""
    return state.S[hard]


def enforce_connectivity(hard: np.ndarray, height: int, width: int, M: int | None = None) -> np.ndarray:
    """Split superpixels into 4-connected components and merge small ones.

    Components smaller than ``N/(4M)`` pixels are merged into the adjacent
    component sharing the longest boundary (largest components are kept
    first).  Output labels are dense ``0..K-1`` in raster order of first
    appearance.
    """
    hard = np.asarray(hard).reshape(height, width)
    N = height * width
    if M is None:
        M = int(np.unique(hard).size)
    min_size = N / (4.0 * M)

    comp = np.full((height, width), -1, dtype=np.int64)
    n_comp = 0
    for lab in np.unique(hard):
        cc, k = ndimage.label(hard == lab)
        mask = cc > 0
        comp[mask] = cc[mask] - 1 + n_comp
        n_comp += k
    sizes = np.bincount(comp.ravel(), minlength=n_comp)

    # boundary lengths between adjacent components
    a = np.concatenate([comp[:, :-1].ravel(), comp[:-1, :].ravel()])
    b = np.concatenate([comp[:, 1:].ravel(), comp[1:, :].ravel()])
    cross = a != b
    a, b = a[cross], b[cross]
    edges: dict[tuple[int, int], int] = {}
    for u, v in zip(np.minimum(a, b).tolist(), np.maximum(a, b).tolist()):
        edges[(u, v)] = edges.get((u, v), 0) + 1
    neighbours: dict[int, dict[int, int]] = {}
    for (u, v), n in edges.items():
        neighbours.setdefault(u, {})[v] = n
        neighbours.setdefault(v, {})[u] = n

    parent = np.arange(n_comp)

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    size = sizes.astype(np.int64).copy()
    # process smallest first; ties by component id for determinism
    for c in sorted(range(n_comp), key=lambda k: (sizes[k], k)):
        root = find(c)
        if root != c or size[root] >= min_size:
            continue
        best, best_len = -1, 0
        shared: dict[int, int] = {}
        for nb, n in neighbours.get(c, {}).items():
            r = find(nb)
            if r != root:
                shared[r] = shared.get(r, 0) + n
        for r, n in sorted(shared.items()):
            if n > best_len:
                best, best_len = r, n
        if best < 0:
            continue
        parent[root] = best
        size[best] += size[root]
        # merged component inherits the boundaries of the absorbed one
        for nb, n in neighbours.get(root, {}).items():
            neighbours.setdefault(best, {})[nb] = neighbours.get(best, {}).get(nb, 0) + n
            neighbours.setdefault(nb, {})[best] = neighbours[best][nb]

    roots = np.array([find(k) for k in range(n_comp)])[comp.ravel()]
    _, first = np.unique(roots, return_index=True)
    order = np.argsort(np.argsort(first))
    dense = np.empty(n_comp, dtype=np.int64)
    dense[np.unique(roots)] = order
    return dense[roots]
