"""Dense float64 matrix kernels: products, symmetric eigendecomposition, nuclear norm.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64.  The
eigensolver is a cyclic Jacobi method using the round-robin (parallel)
ordering, so every rotation in a round touches a disjoint pair of indices and
a whole round can be applied with a handful of vectorised row/column updates.
A LAPACK backend is available through ``method="lapack"`` for large inputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import InputError, NumericError, ShapeError

MAX_SWEEPS = 100
OFF_TOL = 1e-12
SYMMETRY_TOL = 1e-9
NEG_CLAMP = 1e-10

METHODS = ("jacobi", "lapack")


@dataclass(frozen=True)
class EigenResult:
    values: np.ndarray  # descending
    vectors: np.ndarray  # column j pairs with values[j]

    def reconstruct(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.T


def as_matrix(a, name="matrix") -> np.ndarray:
    """Validate ``a`` as a finite 2-D float64 matrix."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InputError(f"{name} contains non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


@lru_cache(maxsize=64)
def _round_robin(n: int) -> tuple:
    """Pairings covering every (p, q), p < q, once per sweep; n-1 (or n) rounds of disjoint pairs."""
    m = n + (n % 2)
    ring = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(ring[i], ring[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p < n and q < n]
        if pairs:
            p = np.array([x[0] for x in pairs], dtype=np.intp)
            q = np.array([x[1] for x in pairs], dtype=np.intp)
            rounds.append((p, q))
        ring = [ring[0], ring[-1]] + ring[1:-1]
    return tuple(rounds)


def _off_norm(a: np.ndarray) -> float:
    off = a - np.diag(np.diagonal(a))
    return float(np.linalg.norm(off))


def jacobi_eig(c: np.ndarray, max_sweeps=MAX_SWEEPS, tol=OFF_TOL):
    """Cyclic Jacobi on a symmetric matrix.  Returns unsorted (values, vectors)."""
    n = c.shape[0]
    a = np.array(c, dtype=np.float64, copy=True)
    v = np.eye(n)
    norm = float(np.linalg.norm(a))
    if n < 2 or norm == 0.0:
        return np.diagonal(a).copy(), v
    threshold = tol * norm
    rounds = _round_robin(n)
    for sweep in range(max_sweeps + 1):
        off = _off_norm(a)
        if off <= threshold:
            return np.diagonal(a).copy(), v
        if sweep == max_sweeps:
            raise NumericError(f"Jacobi did not converge in {max_sweeps} sweeps", residual=off / norm)
        for p, q in rounds:
            apq = a[p, q]
            app = a[p, p]
            aqq = a[q, q]
            diff = aqq - app
            # rotation negligible when |apq| is tiny relative to the diagonal gap
            nz = np.abs(apq) > 1e-300 * np.abs(diff)
            theta = np.zeros_like(apq)
            theta[nz] = diff[nz] / (2.0 * apq[nz])
            t = np.where(theta >= 0.0, 1.0, -1.0) / (np.abs(theta) + np.hypot(theta, 1.0))
            t[~nz] = 0.0
            cs = 1.0 / np.sqrt(1.0 + t * t)
            sn = t * cs
            k = len(p)
            pq = np.concatenate((p, q))
            cc = cs[:, None]
            ss = sn[:, None]
            rows = a[pq, :]
            a[pq, :] = np.concatenate((cc * rows[:k] - ss * rows[k:], ss * rows[:k] + cc * rows[k:]))
            cols = a[:, pq]
            a[:, pq] = np.concatenate((cols[:, :k] * cs - cols[:, k:] * sn, cols[:, :k] * sn + cols[:, k:] * cs), axis=1)
            a[p, q] = 0.0
            a[q, p] = 0.0
            vc = v[:, pq]
            v[:, pq] = np.concatenate((vc[:, :k] * cs - vc[:, k:] * sn, vc[:, :k] * sn + vc[:, k:] * cs), axis=1)
    raise AssertionError("unreachable")


def _symmetric(c) -> np.ndarray:
    c = as_matrix(c, "c")
    if c.shape[0] != c.shape[1]:
        raise ShapeError(f"eigendecomposition needs a square matrix, got {c.shape}")
    scale = float(np.max(np.abs(c))) if c.size else 0.0
    if c.size and float(np.max(np.abs(c - c.T))) > SYMMETRY_TOL * max(scale, 1e-300):
        raise InputError("matrix is not symmetric within tolerance")
    return 0.5 * (c + c.T)


def _clamp(values: np.ndarray) -> np.ndarray:
    # round-off negatives only; genuinely negative spectra are left alone
    out = values.copy()
    scale = max(float(np.max(np.abs(values))) if values.size else 0.0, 1.0)
    out[(out < 0.0) & (out >= -NEG_CLAMP * scale)] = 0.0
    return out


def sym_eig(c, method="jacobi", clamp_negative=False) -> EigenResult:
    """Eigendecomposition ``c = V diag(values) V^T`` with values sorted descending.

    ``clamp_negative`` zeroes tiny negative eigenvalues, as expected for
    covariance matrices.
    """
    c = _symmetric(c)
    if method == "jacobi":
        values, vectors = jacobi_eig(c)
    elif method == "lapack":
        values, vectors = np.linalg.eigh(c)
    else:
        raise InputError(f"unknown eigen method {method!r}")
    order = np.argsort(-values, kind="stable")
    values = values[order]
    if clamp_negative:
        values = _clamp(values)
    return EigenResult(values=values, vectors=np.ascontiguousarray(vectors[:, order]))


def sym_eigvals(c, method="jacobi", clamp_negative=False) -> np.ndarray:
    """Eigenvalues only, descending."""
    if method == "lapack":
        c = _symmetric(c)
        values = np.linalg.eigvalsh(c)[::-1].copy()
        return _clamp(values) if clamp_negative else values
    return sym_eig(c, method=method, clamp_negative=clamp_negative).values


def nuclear_norm(w, method="jacobi") -> float:
    """Sum of singular values, via the eigenvalues of the smaller Gram matrix."""
    w = as_matrix(w, "w")
    if w.size == 0:
        return 0.0
    gram = w.T @ w if w.shape[1] <= w.shape[0] else w @ w.T
    lam = sym_eigvals(gram, method=method)
    return float(np.sum(np.sqrt(np.maximum(lam, 0.0))))
