"""One-sided (Hestenes) Jacobi SVD.

The taller orientation of the input is orthogonalized column-pairwise. Pairs
are visited in round-robin tournament order, so every round rotates disjoint
column pairs and can be vectorized without changing the result's
determinism: the order is fixed by the column count alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ROTATION_TOL = 1e-12
MAX_SWEEPS = 30


@dataclass(frozen=True)
class SvdFactors:
    """``W = U @ diag(p) @ V.T`` with ``p`` descending and nonnegative."""

    U: np.ndarray
    p: np.ndarray
    V: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.p) @ self.V.T


def _tournament(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        left, right = [], []
        for k in range(m // 2):
            a, b = players[k], players[m - 1 - k]
            if a >= 0 and b >= 0:
                left.append(min(a, b))
                right.append(max(a, b))
        if left:
            rounds.append((np.array(left), np.array(right)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _orthogonalize(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotate columns of tall ``a`` (m >= n) until mutually orthogonal.

    Returns the rotated matrix ``g`` and the accumulated rotation ``j`` with
    ``a @ j == g``.
    """
    # columns are stored as rows so that pair gathers are contiguous
    gt = np.array(a.T, order="C", copy=True)
    n = gt.shape[0]
    jt = np.eye(n)
    tiny = np.finfo(float).tiny / np.finfo(float).eps
    rounds = _tournament(n)
    for _ in range(MAX_SWEEPS):
        rotated = False
        for left, right in rounds:
            gl, gr = gt[left], gt[right]
            alpha = np.einsum("ij,ij->i", gl, gl)
            beta = np.einsum("ij,ij->i", gr, gr)
            gamma = np.einsum("ij,ij->i", gl, gr)
            active = (np.abs(gamma) > ROTATION_TOL * np.sqrt(alpha * beta)) & (alpha > tiny) & (beta > tiny)
            if not active.any():
                continue
            rotated = True
            if not active.all():
                left, right = left[active], right[active]
                gl, gr = gl[active], gr[active]
                alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = (1.0 / np.sqrt(1.0 + t * t))[:, None]
            s = c * t[:, None]
            gt[left], gt[right] = c * gl - s * gr, s * gl + c * gr
            jl, jr = jt[left], jt[right]
            jt[left], jt[right] = c * jl - s * jr, s * jl + c * jr
        if not rotated:
            break
    return gt.T, jt.T


def _complete(q: np.ndarray, missing: np.ndarray) -> np.ndarray:
    """Replace columns flagged ``missing`` with unit vectors orthogonal to the rest."""
    q = q.copy()
    keep = list(np.flatnonzero(~missing))
    candidate = 0
    for col in np.flatnonzero(missing):
        while True:
            e = np.zeros(q.shape[0])
            e[candidate] = 1.0
            candidate += 1
            for _ in range(2):
                basis = q[:, keep]
                e -= basis @ (basis.T @ e)
            norm = np.linalg.norm(e)
            if norm > 0.5:
                break
        q[:, col] = e / norm
        keep.append(col)
    return q


def svd(w) -> SvdFactors:
    """Economy SVD of a ``d x k`` matrix: ``U`` is d x r, ``V`` is k x r, r = min(d, k)."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or min(w.shape) < 1:
        raise ValueError(f"svd: need a nonempty matrix, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("svd: matrix has non-finite entries")
    d, k = w.shape
    wide = d < k
    a = w.T if wide else w
    g, rot = _orthogonalize(a)

    sigma = np.sqrt(np.einsum("ij,ij->j", g, g))
    cutoff = max(a.shape) * np.finfo(float).eps * (sigma.max() if sigma.size else 0.0)
    zero = sigma <= cutoff
    sigma = np.where(zero, 0.0, sigma)
    q = np.divide(g, np.where(zero, 1.0, sigma))
    if zero.any():
        q = _complete(q, zero)

    order = np.argsort(-sigma, kind="stable")
    sigma, q, rot = sigma[order], q[:, order], rot[:, order]
    u, v = (rot, q) if wide else (q, rot)

    pivot = np.argmax(np.abs(u), axis=0)
    flip = u[pivot, np.arange(u.shape[1])] < 0
    sign = np.where(flip, -1.0, 1.0)
    return SvdFactors(U=u * sign, p=sigma, V=v * sign)
