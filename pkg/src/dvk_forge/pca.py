"""Principal component analysis via cyclic Jacobi rotations, plus scree export."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .errors import DegenerateInputError, NumericalError, ShapeError


@dataclass
class PcaResult:
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # columns, orthonormal
    fractions: np.ndarray
    mean: np.ndarray
    sweeps: int = 0

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.fractions)


@numba.njit(cache=True)
def _jacobi_sweeps(a, vt, tol, max_sweeps):
    # Only the upper triangle of ``a`` is read or written; ``vt`` holds the
    # eigenvectors as rows so that rotations touch contiguous memory.
    d = a.shape[0]
    fro = 0.0
    for i in range(d):
        fro += a[i, i] * a[i, i]
        for j in range(i + 1, d):
            fro += 2.0 * a[i, j] * a[i, j]
    fro = math.sqrt(fro)
    for sweep in range(max_sweeps + 1):
        off = 0.0
        for i in range(d):
            for j in range(i + 1, d):
                off += 2.0 * a[i, j] * a[i, j]
        if math.sqrt(off) <= tol * fro:
            return sweep
        if sweep == max_sweeps:
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = 1.0 / (abs(theta) + math.sqrt(theta * theta + 1.0))
                if theta < 0.0:
                    t = -t
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                a[p, p] -= t * apq
                a[q, q] += t * apq
                a[p, q] = 0.0
                for r in range(p):
                    arp = a[r, p]
                    arq = a[r, q]
                    a[r, p] = c * arp - s * arq
                    a[r, q] = c * arq + s * arp
                for r in range(p + 1, q):
                    arp = a[p, r]
                    arq = a[r, q]
                    a[p, r] = c * arp - s * arq
                    a[r, q] = c * arq + s * arp
                for r in range(q + 1, d):
                    arp = a[p, r]
                    arq = a[q, r]
                    a[p, r] = c * arp - s * arq
                    a[q, r] = c * arq + s * arp
                for r in range(d):
                    vrp = vt[p, r]
                    vrq = vt[q, r]
                    vt[p, r] = c * vrp - s * vrq
                    vt[q, r] = s * vrp + c * vrq
    return -1


def jacobi_eigh(c, tol: float = 1e-12, max_sweeps: int = 60) -> tuple[np.ndarray, np.ndarray, int]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Iterates until the off-diagonal Frobenius norm is below ``tol`` times the
    matrix norm. Returns (eigenvalues descending, eigenvectors as columns, sweeps).
    """
    a = np.array(c, dtype=np.float64, order="C")
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got {a.shape}")
    if not np.allclose(a, a.T, rtol=0, atol=1e-12 * max(1.0, float(np.abs(a).max()))):
        raise DegenerateInputError("matrix is not symmetric")
    a = 0.5 * (a + a.T)
    vt = np.eye(a.shape[0])
    sweeps = _jacobi_sweeps(a, vt, tol, max_sweeps)
    if sweeps < 0:
        raise NumericalError(f"Jacobi did not converge in {max_sweeps} sweeps")
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], np.ascontiguousarray(vt[order].T), sweeps


def covariance(samples) -> tuple[np.ndarray, np.ndarray]:
    """Mean-centered covariance with the 1/n normalisation."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("samples must be an (n, d) matrix")
    n, d = x.shape
    if n < 2:
        raise DegenerateInputError("PCA needs at least 2 samples")
    if d < 1:
        raise ShapeError("samples need at least one feature")
    mean = x.mean(axis=0)
    xc = x - mean
    return xc.T @ xc / n, mean


def pca_fit(samples, tol: float = 1e-12) -> PcaResult:
    cov, mean = covariance(samples)
    w, v, sweeps = jacobi_eigh(cov, tol)
    total = w.sum()
    fractions = w / total if total > 0 else np.zeros_like(w)
    return PcaResult(w, v, fractions, mean, sweeps)


def scree_export(result: PcaResult, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["component_index", "eigenvalue", "variance_fraction", "cumulative_fraction"])
        for i, (lam, f, cf) in enumerate(zip(result.eigenvalues, result.fractions, result.cumulative), 1):
            wr.writerow([i, f"{lam:.17g}", f"{f:.17g}", f"{cf:.17g}"])
    return path


def read_scree(path) -> np.ndarray:
    """Parse a scree CSV back into an (n, 4) array."""
    with Path(path).open() as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(x) for x in r] for r in rows])
