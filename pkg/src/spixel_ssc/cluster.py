"""Spectral clustering of superpixel affinities and clustering metrics."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import KMeans

from .errors import ValidationError

logger = logging.getLogger(__name__)

DEGREE_FLOOR = 1e-12
KMEANS_RESTARTS = 20


@dataclass(frozen=True)
class ClusterResult:
    superpixel_labels: np.ndarray
    pixel_labels: np.ndarray
    eigengap: float


@dataclass(frozen=True)
class MetricReport:
    oa: float
    nmi: float
    kappa: float
    confusion: np.ndarray

    def as_dict(self) -> dict:
        return {"oa": self.oa, "nmi": self.nmi, "kappa": self.kappa, "confusion": self.confusion.tolist()}


def spectral_embedding(A: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvectors of the ``k`` smallest eigenvalues of ``I - D^-1/2 A D^-1/2``."""
    A = np.asarray(A, dtype=np.float64)
    d = A.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(np.maximum(d, DEGREE_FLOOR))
    L = np.eye(A.shape[0]) - inv_sqrt[:, None] * A * inv_sqrt[None, :]
    L = (L + L.T) / 2.0
    vals, vecs = eigh(L)
    return vals, vecs[:, :k]


def spectral_cluster(A: np.ndarray, k: int, seed: int = 0) -> tuple[np.ndarray, float]:
    """Labels ``1..k`` for the ``M`` nodes of affinity ``A`` and the eigengap
    ``lambda_{k+1} - lambda_k``."""
    M = A.shape[0]
    if k < 1 or k > M:
        raise ValidationError(f"cluster count must lie in [1, {M}], got {k}")
    if not np.allclose(A, A.T) or (A < 0).any():
        raise ValidationError("affinity must be symmetric and nonnegative")
    if k == M:
        if not A.any():
            logger.warning("zero affinity with k == M: every node is its own cluster")
        return np.arange(1, M + 1), 0.0
    vals, U = spectral_embedding(A, k)
    eigengap = float(vals[k] - vals[k - 1])
    norms = np.linalg.norm(U, axis=1, keepdims=True)
    U = U / np.maximum(norms, DEGREE_FLOOR)
    with warnings.catch_warnings():
        # duplicate embedding rows are expected for disconnected blocks
        warnings.simplefilter("ignore")
        km = KMeans(n_clusters=k, init="k-means++", n_init=KMEANS_RESTARTS, random_state=seed).fit(U)
    return _canonical_labels(km.labels_), eigengap


def _canonical_labels(labels: np.ndarray) -> np.ndarray:
    """Relabel to ``1..k`` in order of first appearance."""
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first))
    return rank[inverse] + 1


def propagate(superpixel_labels: np.ndarray, hard: np.ndarray) -> np.ndarray:
    return np.asarray(superpixel_labels)[np.asarray(hard)]


def cluster_superpixels(A: np.ndarray, hard: np.ndarray, k: int, seed: int = 0) -> ClusterResult:
    sp_labels, gap = spectral_cluster(A, k, seed)
    return ClusterResult(sp_labels, propagate(sp_labels, hard), gap)


# -------------------------------------------------------------------- metrics


def _labeled(pred, gt):
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise ValidationError(f"prediction and ground truth differ in size: {pred.shape} vs {gt.shape}")
    keep = gt != 0
    if not keep.any():
        raise ValidationError("ground truth has no labeled pixels")
    return pred[keep], gt[keep]


def contingency(pred, gt) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Counts table with rows = true classes, columns = predicted labels,
    restricted to labeled pixels."""
    p, g = _labeled(pred, gt)
    g_vals, g_idx = np.unique(g, return_inverse=True)
    p_vals, p_idx = np.unique(p, return_inverse=True)
    table = np.zeros((g_vals.size, p_vals.size), dtype=np.int64)
    np.add.at(table, (g_idx, p_idx), 1)
    return table, g_vals, p_vals


def _assignment(table: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Matching with the most agreements; ties go to the smallest chance
    agreement, which keeps kappa independent of label names."""
    n = int(table.sum())
    chance = np.outer(table.sum(axis=1), table.sum(axis=0))
    if n ** 3 < 2 ** 53:
        # integer weights, exact in float64: agreements dominate, chance breaks ties
        weight = table.astype(np.float64) * (n * n + 1) - chance
    else:
        weight = table.astype(np.float64) - chance / (float(n) * n + 1.0)
    return linear_sum_assignment(weight, maximize=True)


def best_matching(pred, gt) -> dict:
    """Optimal one-to-one map from predicted labels to true labels."""
    table, g_vals, p_vals = contingency(pred, gt)
    rows, cols = _assignment(table)
    return {p_vals[c].item(): g_vals[r].item() for r, c in zip(rows, cols)}


def overall_accuracy(pred, gt) -> float:
    table, _, _ = contingency(pred, gt)
    rows, cols = _assignment(table)
    return float(table[rows, cols].sum() / table.sum())


def greedy_accuracy(pred, gt) -> float:
    """Accuracy under a greedy largest-count-first matching (lower bound on OA)."""
    table, _, _ = contingency(pred, gt)
    t = table.astype(np.float64)
    total = 0.0
    for _ in range(min(t.shape)):
        r, c = np.unravel_index(np.argmax(t), t.shape)
        if t[r, c] < 0:
            break
        total += t[r, c]
        t[r, :] = -1
        t[:, c] = -1
    return float(total / table.sum())


def nmi(pred, gt) -> float:
    """Mutual information over the arithmetic mean of the two entropies."""
    table, _, _ = contingency(pred, gt)
    n = table.sum()
    pij = table / n
    pi = pij.sum(axis=1)
    pj = pij.sum(axis=0)
    nz = pij > 0
    mi = float(np.sum(pij[nz] * np.log(pij[nz] / np.outer(pi, pj)[nz])))
    h_true = float(-np.sum(pi * np.log(pi)))
    h_pred = float(-np.sum(pj * np.log(pj)))
    denom = (h_true + h_pred) / 2.0
    if denom <= 0.0 or abs(mi) < 1e-15:
        return 0.0
    return float(min(max(mi / denom, 0.0), 1.0))


def kappa_from_confusion(confusion: np.ndarray) -> float:
    """Kappa from a table whose first ``k`` columns align with its ``k`` rows;
    extra columns hold predictions outside the true classes."""
    confusion = np.asarray(confusion, dtype=np.float64)
    k = confusion.shape[0]
    n = confusion.sum()
    p_o = np.trace(confusion[:, :k]) / n
    p_e = float(np.sum(confusion.sum(axis=1) * confusion.sum(axis=0)[:k]) / (n * n))
    if p_e >= 1.0:
        return 0.0
    return float((p_o - p_e) / (1.0 - p_e))


def kappa(pred_matched, gt) -> float:
    """Cohen's kappa of an already-aligned prediction against ground truth."""
    return kappa_from_confusion(aligned_confusion(pred_matched, gt))


def aligned_confusion(pred_matched, gt) -> np.ndarray:
    """Square table over true classes; predictions outside them count as misses."""
    p, g = _labeled(pred_matched, gt)
    classes = np.unique(g)
    index = {c.item(): i for i, c in enumerate(classes)}
    k = classes.size
    conf = np.zeros((k, k + 1), dtype=np.int64)
    gi = np.array([index[v] for v in g.tolist()])
    pi = np.array([index.get(v, k) for v in p.tolist()])
    np.add.at(conf, (gi, pi), 1)
    return conf


def match_labels(pred, gt) -> np.ndarray:
    """Rename predicted labels through :func:`best_matching`; unmatched ones become 0."""
    mapping = best_matching(pred, gt)
    pred = np.asarray(pred)
    return np.array([mapping.get(v, 0) for v in pred.ravel().tolist()], dtype=np.int64).reshape(pred.shape)


def evaluate(pred, gt) -> MetricReport:
    """OA, NMI and kappa over labeled pixels (``gt != 0``)."""
    matched = match_labels(pred, gt)
    conf = aligned_confusion(matched, gt)
    k_val = kappa_from_confusion(conf)
    return MetricReport(overall_accuracy(pred, gt), nmi(pred, gt), k_val, conf[:, :-1])
