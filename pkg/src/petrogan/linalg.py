"""Symmetric-matrix eigendecomposition and the PSD square root.

Everything here runs in float64: the distance metric's trace term is
numerically delicate and 32-bit accumulation visibly corrupts it. The
eigensolver is cyclic Jacobi; the sweep kernel is JIT-compiled when numba is
available, with an equivalent numpy fallback.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is normally present
    njit = None


class IndefiniteMatrixError(ValueError):
    """Input to the PSD square root has a significantly negative eigenvalue."""


@dataclass
class SymMatrix:
    """Square symmetric matrix; symmetry is validated on construction."""

    entries: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.entries, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {a.shape}")
        scale = max(float(np.abs(a).max()), 1e-300)
        if float(np.abs(a - a.T).max()) > 1e-6 * scale:
            raise ValueError("matrix is not symmetric within 1e-6 relative")
        self.entries = (a + a.T) / 2.0

    @property
    def n(self) -> int:
        return self.entries.shape[0]


def _sweeps_python(a: np.ndarray, v: np.ndarray, tol: float, max_sweeps: int) -> None:
    n = a.shape[0]
    for _ in range(max_sweeps):
        off = math.sqrt(max(0.0, float((a * a).sum() - (np.diagonal(a) ** 2).sum())))
        if off <= tol:
            break
        skip = off / (n * n) * 1e-3
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= skip:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = 1.0 if theta == 0.0 else (
                    math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0)))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                vec_p, vec_q = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q


if njit is not None:
    @njit(cache=True)
    def _sweeps_jit(a, v, tol, max_sweeps):  # pragma: no cover - jitted
        n = a.shape[0]
        for _ in range(max_sweeps):
            off2 = 0.0
            for i in range(n - 1):
                for j in range(i + 1, n):
                    off2 += a[i, j] * a[i, j]
            off = math.sqrt(2.0 * off2)
            if off <= tol:
                break
            skip = off / (n * n) * 1e-3
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = a[p, q]
                    if abs(apq) <= skip:
                        continue
                    theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                    if theta == 0.0:
                        t = 1.0
                    else:
                        sign = 1.0 if theta > 0.0 else -1.0
                        t = sign / (abs(theta) + math.sqrt(theta * theta + 1.0))
                    c = 1.0 / math.sqrt(t * t + 1.0)
                    s = t * c
                    for k in range(n):
                        akp = a[k, p]
                        akq = a[k, q]
                        a[k, p] = c * akp - s * akq
                        a[k, q] = s * akp + c * akq
                    for k in range(n):
                        apk = a[p, k]
                        aqk = a[q, k]
                        a[p, k] = c * apk - s * aqk
                        a[q, k] = s * apk + c * aqk
                    for k in range(n):
                        vkp = v[k, p]
                        vkq = v[k, q]
                        v[k, p] = c * vkp - s * vkq
                        v[k, q] = s * vkp + c * vkq
else:  # pragma: no cover
    _sweeps_jit = None


def jacobi_eigh(a: np.ndarray, tol_factor: float = 1e-10,
                max_sweeps: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns (eigenvalues, eigenvectors) with eigenvalues ascending and
    A == V @ diag(w) @ V.T. Sweeps stop once the off-diagonal Frobenius norm
    drops below tol_factor times the trace magnitude.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    if n > 1:
        tol = tol_factor * max(abs(float(np.trace(a))), float(np.abs(a).max()), 1e-300)
        if _sweeps_jit is not None:
            _sweeps_jit(a, v, tol, max_sweeps)
        else:
            _sweeps_python(a, v, tol, max_sweeps)
    w = np.diagonal(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def sqrtm_psd(m: SymMatrix | np.ndarray) -> np.ndarray:
    """Symmetric PSD square root: R with R @ R == M.

    Eigenvalues in [-1e-6 * trace, 0) are treated as rounding noise and
    clamped to zero; anything more negative raises IndefiniteMatrixError.
    """
    a = m.entries if isinstance(m, SymMatrix) else SymMatrix(np.asarray(m)).entries
    w, v = jacobi_eigh(a)
    trace = float(np.trace(a))
    floor = -1e-6 * max(trace, 0.0) - 1e-12
    if w.min() < floor:
        raise IndefiniteMatrixError(
            f"eigenvalue {w.min():.3e} below tolerance {floor:.3e}; matrix is not PSD")
    root = v * np.sqrt(np.clip(w, 0.0, None)) @ v.T
    return (root + root.T) / 2.0
