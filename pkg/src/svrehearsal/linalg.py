"""Dense real matrix helpers and a thin SVD via one-sided Jacobi rotations.

Matrices are plain 2-d float64 numpy arrays (row-major). Everything here is
a pure function; sizes are desk scale (at most a few hundred per side), so
simplicity and reproducibility win over raw speed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput, ShapeError

# Convergence: off-diagonal Gram entries relative to column norms.
GRAM_TOL = 1e-12
MAX_SWEEPS = 60


@dataclass(frozen=True)
class ThinSvd:
    """Thin SVD a = u @ diag(s) @ v.T with k = min(rows, cols).

    s is non-negative and sorted non-increasing; u (rows x k) and
    v (cols x k) have orthonormal columns.
    """

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    @property
    def k(self) -> int:
        return self.s.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.v.T


def check_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"expected a non-empty 2-d matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInput("matrix contains non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    """Dense product, accumulated in fixed index order.

    The sum over the inner dimension runs in ascending order with plain
    float64 adds, so the result is bit-identical to a naive triple loop.
    """
    a = check_matrix(a)
    b = check_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += np.outer(a[:, k], b[k, :])
    return out


def frobenius_norm(a) -> float:
    a = check_matrix(a)
    return float(np.sqrt(np.sum(a * a)))


def svd(a) -> ThinSvd:
    """Thin SVD by one-sided Jacobi rotations on columns.

    Columns of a working copy are rotated in pairs until all off-diagonal
    entries of the Gram matrix fall below GRAM_TOL relative to the column
    norms (at most MAX_SWEEPS sweeps). Singular triplets are sorted by
    descending singular value with index order breaking ties, so the
    output is deterministic for identical input bits. A zero matrix maps
    to s = 0 with identity-leading u and v columns.
    """
    a = check_matrix(a)
    m, n = a.shape
    if m < n:
        t = svd(a.T)
        return ThinSvd(u=t.v, s=t.s, v=t.u)
    k = n
    if not a.any():
        return ThinSvd(u=np.eye(m, k), s=np.zeros(k), v=np.eye(n, k))

    w = a.copy()
    v = np.eye(n)
    for _ in range(MAX_SWEEPS):
        g = w.T @ w  # fresh Gram per sweep, updated in place below
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                gpp, gqq, gpq = max(g[p, p], 0.0), max(g[q, q], 0.0), g[p, q]
                denom = math.sqrt(gpp * gqq)
                if denom == 0.0 or abs(gpq) <= GRAM_TOL * denom:
                    continue
                rotated = True
                theta = 0.5 * math.atan2(2.0 * gpq, gpp - gqq)
                c, s_ = math.cos(theta), math.sin(theta)
                wp = w[:, p].copy()
                w[:, p] = c * wp + s_ * w[:, q]
                w[:, q] = -s_ * wp + c * w[:, q]
                vp = v[:, p].copy()
                v[:, p] = c * vp + s_ * v[:, q]
                v[:, q] = -s_ * vp + c * v[:, q]
                # Two-sided rotation of the Gram matrix, rows then columns.
                hp = g[p, :].copy()
                g[p, :] = c * hp + s_ * g[q, :]
                g[q, :] = -s_ * hp + c * g[q, :]
                g[:, p] = g[p, :]
                g[:, q] = g[q, :]
                g[p, p] = c * c * gpp + 2.0 * c * s_ * gpq + s_ * s_ * gqq
                g[q, q] = s_ * s_ * gpp - 2.0 * c * s_ * gpq + c * c * gqq
                g[p, q] = g[q, p] = 0.0
        if not rotated:
            break

    s_vals = np.sqrt(np.sum(w * w, axis=0))
    order = np.argsort(-s_vals, kind="stable")
    s_vals = s_vals[order]
    w = w[:, order]
    v = v[:, order]

    u = np.zeros((m, k))
    rank_tol = max(m, n) * np.finfo(np.float64).eps * s_vals[0]
    for i in range(k):
        if s_vals[i] > rank_tol:
            u[:, i] = w[:, i] / s_vals[i]
        else:
            s_vals[i] = 0.0
            u[:, i] = _complete_column(u, i, m)
    return ThinSvd(u=u, s=s_vals, v=v)


def _complete_column(u, i, m):
    # Deterministic orthonormal filler for a rank-deficient direction.
    for j in range(m):
        cand = np.zeros(m)
        cand[j] = 1.0
        cand -= u[:, :i] @ (u[:, :i].T @ cand)
        norm = np.linalg.norm(cand)
        if norm > 0.5:
            return cand / norm
    raise InvalidInput("could not complete orthonormal basis")
