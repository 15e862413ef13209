"""Hot loops of the superpixel stage, in two interchangeable implementations.

Every kernel exists as ``nb_<name>`` (numba, explicit loops) and
``np_<name>`` (vectorised numpy, chunked over pixels).  The unprefixed public
names are bound to whichever backend :mod:`spixel_ssc._backend` selected.
Both paths accumulate scatters serially so results are deterministic.

Array conventions: ``N`` pixels, ``D`` bands, ``M`` superpixels, ``G``
candidates per pixel.  ``cand`` is ``(N, G)`` int64, ``probs``/``spec``/
``spat`` are ``(N, G)`` float64.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from ._backend import BACKEND, njit, prange

_CHUNK = 4096


# ---------------------------------------------------------------- numba path


@njit(parallel=True)
def nb_candidates(coords, rS, G):
    # Centres are bucketed on a unit grid (coordinates are in grid steps) and
    # each pixel scans rings of buckets outward until no unvisited bucket can
    # beat its G-th best.  Ordering is lexicographic in (distance, index).
    N = coords.shape[0]
    M = rS.shape[0]
    lo0 = min(coords[:, 0].min(), rS[:, 0].min())
    lo1 = min(coords[:, 1].min(), rS[:, 1].min())
    nb0 = int(max(coords[:, 0].max(), rS[:, 0].max()) - lo0) + 1
    nb1 = int(max(coords[:, 1].max(), rS[:, 1].max()) - lo1) + 1
    bucket = np.empty(M, dtype=np.int64)
    counts = np.zeros(nb0 * nb1 + 1, dtype=np.int64)
    for j in range(M):
        b = int(rS[j, 0] - lo0) * nb1 + int(rS[j, 1] - lo1)
        bucket[j] = b
        counts[b + 1] += 1
    start = np.cumsum(counts)
    members = np.empty(M, dtype=np.int64)
    fill = start[:-1].copy()
    for j in range(M):
        members[fill[bucket[j]]] = j
        fill[bucket[j]] += 1
    max_ring = max(nb0, nb1)

    out = np.empty((N, G), dtype=np.int64)
    for i in prange(N):
        best_d = np.full(G, np.inf)
        best_j = np.full(G, M, dtype=np.int64)
        p0 = int(coords[i, 0] - lo0)
        p1 = int(coords[i, 1] - lo1)
        for r in range(max_ring + 1):
            # every centre outside rings 0..r is at least r grid steps away
            if r > 0 and best_d[G - 1] < (r - 1.0) * (r - 1.0):
                break
            for b0 in range(p0 - r, p0 + r + 1):
                if b0 < 0 or b0 >= nb0:
                    continue
                edge_row = b0 == p0 - r or b0 == p0 + r
                step = 1 if edge_row else 2 * r
                b1 = p1 - r
                while b1 <= p1 + r:
                    if b1 >= 0 and b1 < nb1:
                        b = b0 * nb1 + b1
                        for q in range(start[b], start[b + 1]):
                            j = members[q]
                            dy = coords[i, 0] - rS[j, 0]
                            dx = coords[i, 1] - rS[j, 1]
                            d = dy * dy + dx * dx
                            if d < best_d[G - 1] or (d == best_d[G - 1] and j < best_j[G - 1]):
                                k = G - 1
                                while k > 0 and (best_d[k - 1] > d or (best_d[k - 1] == d and best_j[k - 1] > j)):
                                    best_d[k] = best_d[k - 1]
                                    best_j[k] = best_j[k - 1]
                                    k -= 1
                                best_d[k] = d
                                best_j[k] = j
                    if step == 0:
                        break
                    b1 += step
        for g in range(G):
            out[i, g] = best_j[g]
    return out


@njit(parallel=True)
def nb_assign_forward(Xp, coords, S, rS, w, cand, tau):
    N, D = Xp.shape
    G = cand.shape[1]
    spec = np.empty((N, G))
    spat = np.empty((N, G))
    probs = np.empty((N, G))
    for i in prange(N):
        ymax = -np.inf
        for g in range(G):
            j = cand[i, g]
            a = 0.0
            for d in range(D):
                t = Xp[i, d] - S[j, d]
                a += t * t
            dy = coords[i, 0] - rS[j, 0]
            dx = coords[i, 1] - rS[j, 1]
            b = dy * dy + dx * dx
            spec[i, g] = a
            spat[i, g] = b
            y = -(w[j] * a + (1.0 - w[j]) * b) / tau
            probs[i, g] = y
            if y > ymax:
                ymax = y
        z = 0.0
        for g in range(G):
            e = np.exp(probs[i, g] - ymax)
            probs[i, g] = e
            z += e
        for g in range(G):
            probs[i, g] /= z
    return spec, spat, probs


@njit
def nb_center_forward(Xp, coords, probs, cand, M, eps):
    N, D = Xp.shape
    G = cand.shape[1]
    num_s = np.zeros((M, D))
    num_r = np.zeros((M, 2))
    den = np.zeros(M)
    for i in range(N):
        for g in range(G):
            j = cand[i, g]
            p = probs[i, g]
            den[j] += p
            for d in range(D):
                num_s[j, d] += p * Xp[i, d]
            num_r[j, 0] += p * coords[i, 0]
            num_r[j, 1] += p * coords[i, 1]
    S = np.empty((M, D))
    rS = np.empty((M, 2))
    for j in range(M):
        q = 1.0 / (den[j] + eps)
        for d in range(D):
            S[j, d] = num_s[j, d] * q
        rS[j, 0] = num_r[j, 0] * q
        rS[j, 1] = num_r[j, 1] * q
    return S, rS, den


@njit(parallel=True)
def nb_center_backward(Xp, coords, probs, cand, S, rS, den, gS, grS, eps):
    N, D = Xp.shape
    M = S.shape[0]
    G = cand.shape[1]
    gnum_s = np.empty((M, D))
    gnum_r = np.empty((M, 2))
    gden = np.empty(M)
    for j in range(M):
        q = 1.0 / (den[j] + eps)
        acc = 0.0
        for d in range(D):
            gnum_s[j, d] = gS[j, d] * q
            acc += gS[j, d] * S[j, d]
        for c in range(2):
            gnum_r[j, c] = grS[j, c] * q
            acc += grS[j, c] * rS[j, c]
        gden[j] = -q * acc
    gP = np.empty((N, G))
    gXp = np.zeros((N, D))
    for i in prange(N):
        for g in range(G):
            j = cand[i, g]
            v = gden[j] + gnum_r[j, 0] * coords[i, 0] + gnum_r[j, 1] * coords[i, 1]
            p = probs[i, g]
            for d in range(D):
                v += gnum_s[j, d] * Xp[i, d]
                gXp[i, d] += p * gnum_s[j, d]
            gP[i, g] = v
    return gP, gXp


@njit
def nb_assign_backward(Xp, coords, S, rS, w, cand, probs, spec, spat, gP, tau):
    N, D = Xp.shape
    M = S.shape[0]
    G = cand.shape[1]
    gXp = np.zeros((N, D))
    gS = np.zeros((M, D))
    grS = np.zeros((M, 2))
    gw = np.zeros(M)
    for i in range(N):
        inner = 0.0
        for g in range(G):
            inner += probs[i, g] * gP[i, g]
        for g in range(G):
            j = cand[i, g]
            gd = -probs[i, g] * (gP[i, g] - inner) / tau
            gw[j] += gd * (spec[i, g] - spat[i, g])
            ga = 2.0 * gd * w[j]
            gb = 2.0 * gd * (1.0 - w[j])
            for d in range(D):
                t = ga * (Xp[i, d] - S[j, d])
                gXp[i, d] += t
                gS[j, d] -= t
            grS[j, 0] -= gb * (coords[i, 0] - rS[j, 0])
            grS[j, 1] -= gb * (coords[i, 1] - rS[j, 1])
    return gXp, gS, grS, gw


@njit
def _nb_pair(probs, cand, i, n, gP, scale):
    G = cand.shape[1]
    dot = 0.0
    ni = 0.0
    nn = 0.0
    for g in range(G):
        ni += probs[i, g] * probs[i, g]
        nn += probs[n, g] * probs[n, g]
        for h in range(G):
            if cand[i, g] == cand[n, h]:
                dot += probs[i, g] * probs[n, h]
    ni = np.sqrt(ni)
    nn = np.sqrt(nn)
    cos = dot / (ni * nn)
    # d(1 - cos)/dP_i[g] = -(P_n[match]/(ni nn) - cos P_i[g]/ni^2)
    for g in range(G):
        gi = cos * probs[i, g] / (ni * ni)
        gn = cos * probs[n, g] / (nn * nn)
        for h in range(G):
            if cand[i, g] == cand[n, h]:
                gi -= probs[n, h] / (ni * nn)
            if cand[n, g] == cand[i, h]:
                gn -= probs[i, h] / (ni * nn)
        gP[i, g] += scale * gi
        gP[n, g] += scale * gn
    return 1.0 - cos


@njit
def nb_consistency(probs, cand, height, width):
    N, G = probs.shape
    gP = np.zeros((N, G))
    n_pairs = height * (width - 1) + (height - 1) * width
    if n_pairs == 0:
        return 0.0, gP
    scale = 1.0 / n_pairs
    total = 0.0
    for r in range(height):
        for c in range(width):
            i = r * width + c
            if c + 1 < width:
                total += _nb_pair(probs, cand, i, i + 1, gP, scale)
            if r + 1 < height:
                total += _nb_pair(probs, cand, i, i + width, gP, scale)
    return total * scale, gP


# ---------------------------------------------------------------- numpy path


def _chunks(n):
    for lo in range(0, n, _CHUNK):
        yield slice(lo, min(lo + _CHUNK, n))


def np_candidates(coords, rS, G):
    out = np.empty((coords.shape[0], G), dtype=np.int64)
    for sl in _chunks(coords.shape[0]):
        diff = coords[sl, None, :] - rS[None, :, :]
        d = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1]
        out[sl] = np.argsort(d, axis=1, kind="stable")[:, :G]
    return out


def np_assign_forward(Xp, coords, S, rS, w, cand, tau):
    N, G = cand.shape
    spec = np.empty((N, G))
    spat = np.empty((N, G))
    for sl in _chunks(N):
        c = cand[sl]
        diff = Xp[sl, None, :] - S[c]
        spec[sl] = np.einsum("ngd,ngd->ng", diff, diff)
        rd = coords[sl, None, :] - rS[c]
        spat[sl] = rd[..., 0] * rd[..., 0] + rd[..., 1] * rd[..., 1]
    wc = w[cand]
    y = -(wc * spec + (1.0 - wc) * spat) / tau
    y -= y.max(axis=1, keepdims=True)
    e = np.exp(y)
    return spec, spat, e / e.sum(axis=1, keepdims=True)


def segment_sum(index, values, n):
    """Rows of ``values`` summed by ``index`` into ``n`` segments."""
    index = np.asarray(index)
    ones = np.ones(index.size)
    onehot = sp.csr_matrix((ones, (index, np.arange(index.size))), shape=(n, index.size))
    return np.asarray(onehot @ values)


def _scatter_matrix(probs, cand, M):
    N, G = cand.shape
    rows = np.repeat(np.arange(N), G)
    return sp.csr_matrix((probs.ravel(), (rows, cand.ravel())), shape=(N, M))


def np_center_forward(Xp, coords, probs, cand, M, eps):
    P = _scatter_matrix(probs, cand, M)
    den = np.bincount(cand.ravel(), weights=probs.ravel(), minlength=M)
    q = 1.0 / (den + eps)
    S = np.asarray(P.T @ Xp) * q[:, None]
    rS = np.asarray(P.T @ coords) * q[:, None]
    return S, rS, den


def np_center_backward(Xp, coords, probs, cand, S, rS, den, gS, grS, eps):
    q = 1.0 / (den + eps)
    gnum_s = gS * q[:, None]
    gnum_r = grS * q[:, None]
    gden = -q * (np.einsum("md,md->m", gS, S) + np.einsum("mc,mc->m", grS, rS))
    N, G = cand.shape
    gP = np.empty((N, G))
    gXp = np.empty_like(Xp)
    for sl in _chunks(N):
        c = cand[sl]
        gP[sl] = (
            np.einsum("ngd,nd->ng", gnum_s[c], Xp[sl])
            + np.einsum("ngk,nk->ng", gnum_r[c], coords[sl])
            + gden[c]
        )
        gXp[sl] = np.einsum("ng,ngd->nd", probs[sl], gnum_s[c])
    return gP, gXp


def np_assign_backward(Xp, coords, S, rS, w, cand, probs, spec, spat, gP, tau):
    N, G = cand.shape
    M, D = S.shape
    inner = np.sum(probs * gP, axis=1, keepdims=True)
    gd = -probs * (gP - inner) / tau
    flat = cand.ravel()
    gw = np.bincount(flat, weights=(gd * (spec - spat)).ravel(), minlength=M)
    wc = w[cand]
    ga = 2.0 * gd * wc
    gb = 2.0 * gd * (1.0 - wc)
    Ga = _scatter_matrix(ga, cand, M)
    Gb = _scatter_matrix(gb, cand, M)
    # sum_g ga_ig (x_i - s_j) = x_i * sum_g ga_ig - (Ga @ S)_i
    gXp = Xp * ga.sum(axis=1, keepdims=True) - np.asarray(Ga @ S)
    mass_a = np.bincount(flat, weights=ga.ravel(), minlength=M)
    gS = -(np.asarray(Ga.T @ Xp) - mass_a[:, None] * S)
    mass_b = np.bincount(flat, weights=gb.ravel(), minlength=M)
    grS = -(np.asarray(Gb.T @ coords) - mass_b[:, None] * rS)
    return gXp, gS, grS, gw


def _np_pairs(probs, cand, a, b):
    match = cand[a][:, :, None] == cand[b][:, None, :]
    pa, pb = probs[a], probs[b]
    dot = np.einsum("kg,kgh,kh->k", pa, match, pb)
    na = np.linalg.norm(pa, axis=1)
    nb = np.linalg.norm(pb, axis=1)
    cos = dot / (na * nb)
    ga = cos[:, None] * pa / (na * na)[:, None] - np.einsum("kgh,kh->kg", match, pb) / (na * nb)[:, None]
    gb = cos[:, None] * pb / (nb * nb)[:, None] - np.einsum("kgh,kg->kh", match, pa) / (na * nb)[:, None]
    return 1.0 - cos, ga, gb


def np_consistency(probs, cand, height, width):
    N, G = probs.shape
    gP = np.zeros((N, G))
    idx = np.arange(N).reshape(height, width)
    a = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    b = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    if a.size == 0:
        return 0.0, gP
    total = 0.0
    scale = 1.0 / a.size
    for sl in _chunks(a.size):
        loss, ga, gb = _np_pairs(probs, cand, a[sl], b[sl])
        total += loss.sum()
        np.add.at(gP, a[sl], scale * ga)
        np.add.at(gP, b[sl], scale * gb)
    return total * scale, gP


# ---------------------------------------------------------------- dispatch

if BACKEND == "numba":
    candidates = nb_candidates
    assign_forward = nb_assign_forward
    center_forward = nb_center_forward
    center_backward = nb_center_backward
    assign_backward = nb_assign_backward
    consistency = nb_consistency
else:
    candidates = np_candidates
    assign_forward = np_assign_forward
    center_forward = np_center_forward
    center_backward = np_center_backward
    assign_backward = np_assign_backward
    consistency = np_consistency
