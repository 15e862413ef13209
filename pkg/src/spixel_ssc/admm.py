"""Unfolded ADMM for sparse self-representation of superpixel features.

Solves ``min ||S - S C||_F^2 + lam ||Z||_1  s.t.  C = Z, diag(Z) = 0`` with a
fixed number of iterations (layers) so that the output is a differentiable
function of the features and of ``lam``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ValidationError

logger = logging.getLogger(__name__)

NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class NormalizedFeatures:
    """``Shat`` is ``D x M`` with unit columns; ``norms`` are the original
    column norms and ``flagged`` marks columns that were (near) zero."""

    Shat: np.ndarray
    norms: np.ndarray
    flagged: np.ndarray


@dataclass(frozen=True)
class GramFactor:
    """Solver for ``(2 Shat^T Shat + rho I) X = rhs``.

    When ``Shat`` has fewer rows than columns the Cholesky factor is taken of
    the ``D x D`` matrix ``rho I + 2 Shat Shat^T`` and applied through the
    Woodbury identity; otherwise of the ``M x M`` matrix itself.
    """

    cho: tuple
    G2: np.ndarray
    rho: float
    Shat: np.ndarray
    woodbury: bool

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if not self.woodbury:
            return cho_solve(self.cho, rhs)
        t = cho_solve(self.cho, self.Shat @ rhs)
        return (rhs - 2.0 * (self.Shat.T @ t)) / self.rho


@dataclass
class SelfRepState:
    C: np.ndarray
    Z: np.ndarray
    mu: np.ndarray
    rho: float
    lambda_sr: float
    K: int
    # (C, Z, mu) after every layer, layer 0 = the zero initialisation
    history: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=list, repr=False)
    factor: GramFactor | None = field(default=None, repr=False)


def normalize_features(S: np.ndarray) -> NormalizedFeatures:
    """Transpose ``S`` (M x D) and scale every column to unit length.

    Columns with norm below 1e-12 are replaced by the first standard basis
    vector and flagged.
    """
    St = np.array(S, dtype=np.float64).T
    norms = np.linalg.norm(St, axis=0)
    flagged = norms < NORM_FLOOR
    Shat = St / np.where(flagged, 1.0, norms)
    if flagged.any():
        logger.warning("%d superpixel feature columns have zero norm", int(flagged.sum()))
        Shat[:, flagged] = 0.0
        Shat[0, flagged] = 1.0
    return NormalizedFeatures(Shat, norms, flagged)


def normalize_backward(nf: NormalizedFeatures, gShat: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`normalize_features`, returned in the ``M x D`` layout of S."""
    proj = np.sum(nf.Shat * gShat, axis=0)
    g = (gShat - nf.Shat * proj) / np.where(nf.flagged, 1.0, nf.norms)
    g[:, nf.flagged] = 0.0
    return g.T


def gram_factorization(Shat: np.ndarray, rho: float) -> GramFactor:
    """Factorisation of ``2 Shat^T Shat + rho I``, shared by all layers."""
    if not rho > 0:
        raise ValidationError(f"penalty must be positive, got {rho}")
    D, M = Shat.shape
    G2 = 2.0 * Shat.T @ Shat
    if D < M:
        small = rho * np.eye(D) + 2.0 * Shat @ Shat.T
        return GramFactor(cho_factor(small, lower=True), G2, float(rho), Shat, True)
    A = G2 + rho * np.eye(M)
    return GramFactor(cho_factor(A, lower=True), G2, float(rho), Shat, False)


def c_update(Z: np.ndarray, mu: np.ndarray, fac: GramFactor) -> np.ndarray:
    return fac.solve(fac.G2 - (mu - fac.rho * Z))


def soft_threshold(V: np.ndarray, thresh: float) -> np.ndarray:
    return np.maximum(np.abs(V) - thresh, 0.0) * np.sign(V)


def z_update(C: np.ndarray, mu: np.ndarray, rho: float, lambda_sr: float) -> np.ndarray:
    Z = soft_threshold(C + mu / rho, lambda_sr / rho)
    np.fill_diagonal(Z, 0.0)
    return Z


def mu_update(mu: np.ndarray, C: np.ndarray, Z: np.ndarray, rho: float) -> np.ndarray:
    return mu + rho * (C - Z)


def unfold_forward(Shat: np.ndarray, K: int, rho: float, lambda_sr: float,
                   keep_history: bool = True) -> SelfRepState:
    """Run ``K`` ADMM layers from ``C = Z = mu = 0``."""
    if K < 1:
        raise ValidationError(f"need at least one layer, got K={K}")
    M = Shat.shape[1]
    fac = gram_factorization(Shat, rho)
    C = np.zeros((M, M))
    Z = np.zeros((M, M))
    mu = np.zeros((M, M))
    history = [(C, Z, mu)] if keep_history else []
    for _ in range(K):
        C = c_update(Z, mu, fac)
        Z = z_update(C, mu, rho, lambda_sr)
        mu = mu_update(mu, C, Z, rho)
        if keep_history:
            history.append((C, Z, mu))
    return SelfRepState(C, Z, mu, float(rho), float(lambda_sr), K, history, fac)


def unfold_backward(Shat: np.ndarray, state: SelfRepState, gZ: np.ndarray,
                    gC: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """Reverse-mode pass through all layers.

    ``gZ``/``gC`` are adjoints of the final ``Z``/``C``.  Returns the adjoint
    of ``Shat`` and the scalar adjoint of ``lambda_sr``.  The soft-threshold
    derivative at its kink is taken as zero.
    """
    if not state.history:
        raise ValueError("unfold_backward needs a forward pass run with keep_history=True")
    fac = state.factor
    rho, lam = state.rho, state.lambda_sr
    M = gZ.shape[0]
    off = ~np.eye(M, dtype=bool)
    gZ_k = np.array(gZ, dtype=np.float64)
    gC_k = np.zeros((M, M)) if gC is None else np.array(gC, dtype=np.float64)
    gmu_k = np.zeros((M, M))
    # G2 = 2 Shat^T Shat enters through R and A; its adjoint per layer is
    # gR - gR C^T.  Contracting with Shat early keeps every product D x M.
    sum_gR = np.zeros((M, M))
    acc = np.zeros_like(Shat)
    glam = 0.0
    for k in range(state.K, 0, -1):
        C = state.history[k][0]
        mu_prev = state.history[k - 1][2]
        # mu' = mu + rho (C - Z')
        gmu = gmu_k.copy()
        gC = gC_k + rho * gmu_k
        gZnew = gZ_k - rho * gmu_k
        # Z' = offdiag * soft(V, lam/rho),  V = C + mu/rho
        V = C + mu_prev / rho
        active = (np.abs(V) > lam / rho) & off
        gV = np.where(active, gZnew, 0.0)
        glam -= np.sum(gV * np.sign(V)) / rho
        gC += gV
        gmu += gV / rho
        # C = A^{-1} R,  R = G2 - mu + rho Z,  A = G2 + rho I (symmetric)
        gR = fac.solve(gC)
        sum_gR += gR
        acc += (Shat @ gR) @ C.T + (Shat @ C) @ gR.T
        gmu -= gR
        gZ_k = rho * gR
        gC_k = np.zeros((M, M))
        gmu_k = gmu
    gShat = 2.0 * (Shat @ (sum_gR + sum_gR.T) - acc)
    return gShat, glam


def affinity(Z: np.ndarray) -> np.ndarray:
    """Symmetric nonnegative affinity ``(|Z| + |Z|^T)/2`` with zero diagonal."""
    A = np.abs(Z)
    A = (A + A.T) / 2.0
    np.fill_diagonal(A, 0.0)
    return A
