"""Training objectives and their gradients.

Every loss ``foo`` has a companion ``foo_grad`` returning the adjoints of its
array inputs for a unit upstream gradient.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import kernels

ENTROPY_EPS = 1e-8
NOISE_WEIGHT = 50.0
REP_RECON_WEIGHT = 2.0


@dataclass(frozen=True)
class LossReport:
    spixel_compact: float
    spixel_consistency: float
    recon: float
    l1: float
    entropy: float
    noise: float
    rep: float
    total: float

    @classmethod
    def from_parts(cls, *, spixel_compact, spixel_consistency, recon, l1, entropy, noise, alpha) -> "LossReport":
        rep = rep_loss(recon, l1, entropy)
        total = total_loss(rep, spixel_compact, spixel_consistency, noise, alpha)
        return cls(float(spixel_compact), float(spixel_consistency), float(recon), float(l1),
                   float(entropy), float(noise), rep, total)

    @property
    def spixel(self) -> float:
        return self.spixel_compact + self.spixel_consistency

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


# ----------------------------------------------------------------- superpixel


def compactness_loss(Xp: np.ndarray, F: np.ndarray) -> float:
    diff = Xp - F
    return float(np.sum(diff * diff) / Xp.shape[0])


def compactness_loss_grad(Xp: np.ndarray, F: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    g = 2.0 * (Xp - F) / Xp.shape[0]
    return g, -g


def consistency_loss(probs: np.ndarray, candidates: np.ndarray, height: int, width: int) -> float:
    """Mean of ``1 - cos(P_i, P_n)`` over 4-neighbour pixel pairs."""
    value, _ = kernels.consistency(probs, candidates, height, width)
    return float(value)


def consistency_loss_grad(probs: np.ndarray, candidates: np.ndarray, height: int, width: int) -> np.ndarray:
    _, g = kernels.consistency(probs, candidates, height, width)
    return g


def spixel_loss(Xp, F, probs, candidates, height, width) -> tuple[float, float]:
    return compactness_loss(Xp, F), consistency_loss(probs, candidates, height, width)


# ------------------------------------------------------ self-representation


def recon_loss(Shat: np.ndarray, Z: np.ndarray) -> float:
    R = Shat @ Z - Shat
    return float(np.sum(R * R))


def recon_loss_grad(Shat: np.ndarray, Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    R = Shat @ Z - Shat
    gShat = 2.0 * R @ (Z - np.eye(Z.shape[0])).T
    gZ = 2.0 * Shat.T @ R
    return gShat, gZ


def l1_loss(Z: np.ndarray) -> float:
    return float(np.sum(np.abs(Z)))


def l1_loss_grad(Z: np.ndarray) -> np.ndarray:
    return np.sign(Z)


def _column_distributions(Z):
    a = np.abs(Z)
    s = a.sum(axis=0) + ENTROPY_EPS
    return a, s, a / s


def _column_entropy(c):
    # with a single entry above 1 - eps, c + eps exceeds 1 and the raw sum dips
    # about 1e-8 below zero; such columns are clamped to 0
    return -np.sum(c * np.log(c + ENTROPY_EPS), axis=0)


def entropy_loss(Z: np.ndarray) -> float:
    """Mean Shannon entropy of the columns of ``|Z|`` normalised to sum to one."""
    _, _, c = _column_distributions(Z)
    return float(np.sum(np.maximum(_column_entropy(c), 0.0)) / Z.shape[1])


def entropy_loss_grad(Z: np.ndarray) -> np.ndarray:
    a, s, c = _column_distributions(Z)
    h = -(np.log(c + ENTROPY_EPS) + c / (c + ENTROPY_EPS))
    ga = (h - np.sum(h * c, axis=0)) / s
    ga *= _column_entropy(c) > 0.0
    return ga * np.sign(Z) / Z.shape[1]


def rep_loss(recon: float, l1: float, entropy: float) -> float:
    return REP_RECON_WEIGHT * recon + l1 + entropy


# ------------------------------------------------------------------- residual


def noise_loss(delta: np.ndarray, lam: float = NOISE_WEIGHT) -> float:
    return float(lam * np.sum(delta * delta) / delta.size)


def noise_loss_grad(delta: np.ndarray, lam: float = NOISE_WEIGHT) -> np.ndarray:
    return 2.0 * lam * delta / delta.size


def total_loss(rep: float, spixel_compact: float, spixel_consistency: float, noise: float, alpha: float) -> float:
    return alpha * rep + (spixel_compact + spixel_consistency) + noise
