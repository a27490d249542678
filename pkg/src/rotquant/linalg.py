"""Small dense linear algebra: orthogonal/Hadamard construction, FWHT, solve.

Matrices are plain float64 numpy arrays. Activations are row vectors, so a
linear map with weight ``W`` of shape (out, in) is applied as ``x @ W.T``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

PIVOT_TOL = 1e-12


class LinalgError(ValueError):
    pass


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Deterministic PCG64 generator; extra ints split the stream per worker/trial."""
    return np.random.default_rng([int(seed), *map(int, stream)])


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _require_pow2(n: int, what: str = "dim") -> None:
    if not is_power_of_two(n):
        raise LinalgError(f"{what}={n} must be a power of two (Sylvester Hadamard / FWHT constraint)")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise LinalgError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def orthonormality_residual(q: np.ndarray) -> float:
    """max|QᵀQ − I|."""
    q = np.asarray(q, dtype=np.float64)
    return float(np.max(np.abs(q.T @ q - np.eye(q.shape[1]))))


def random_orthogonal(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix via Householder QR with sign fixing."""
    if dim < 1:
        raise LinalgError(f"dim must be >= 1, got {dim}")
    z = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(z)  # LAPACK geqrf: Householder reflections
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def sylvester_hadamard(dim: int) -> np.ndarray:
    """Normalized Sylvester Hadamard matrix, entries ±1/√dim."""
    _require_pow2(dim)
    h = np.ones((1, 1))
    while h.shape[0] < dim:
        h = np.block([[h, h], [h, -h]])
    return h / np.sqrt(dim)


def random_hadamard(dim: int, rng: np.random.Generator) -> np.ndarray:
    """S·H with S a random ±1 diagonal."""
    _require_pow2(dim)
    signs = rng.choice(np.array([-1.0, 1.0]), size=dim)
    return hadamard_with_signs(signs)


def hadamard_with_signs(signs) -> np.ndarray:
    signs = np.asarray(signs, dtype=np.float64)
    return signs[:, None] * sylvester_hadamard(signs.shape[0])


@dataclass
class OpCounter:
    """Tallies scalar add/sub operations performed by :func:`fwht`."""

    ops: int = 0


def fwht(x: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
    """Normalized fast Walsh–Hadamard transform along the last axis.

    Equals ``x @ sylvester_hadamard(n)`` (the matrix is symmetric), so for a
    vector it is ``H·x``. Each of the log2(n) butterfly stages performs n
    additions/subtractions per row.
    """
    x = np.array(x, dtype=np.float64, copy=True)
    n = x.shape[-1]
    _require_pow2(n, "length")
    lead = x.shape[:-1]
    rows = int(np.prod(lead)) if lead else 1
    y = x.reshape(rows, n)
    h = 1
    while h < n:
        y = y.reshape(rows, n // (2 * h), 2, h)
        a = y[:, :, 0, :]
        b = y[:, :, 1, :]
        y = np.stack((a + b, a - b), axis=2)
        if counter is not None:
            counter.ops += 2 * a.size
        h *= 2
    return (y.reshape(x.shape)) / np.sqrt(n)


def solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``a @ x = b`` by LU with partial pivoting (LAPACK getrf/getrs)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise LinalgError(f"solve needs a square matrix, got {a.shape}")
    if b.shape[0] != a.shape[0]:
        raise LinalgError(f"solve shape mismatch: a {a.shape}, b {b.shape}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(a, check_finite=True)
    pivots = np.abs(np.diag(lu))
    if pivots.size and pivots.min() < PIVOT_TOL:
        k = int(np.argmin(pivots))
        raise LinalgError(f"matrix is singular within pivot tolerance {PIVOT_TOL:g} (column {k})")
    return scipy.linalg.lu_solve((lu, piv), b)


def inverse(a: np.ndarray) -> np.ndarray:
    return solve(a, np.eye(np.asarray(a).shape[0]))


def skew_residual(y: np.ndarray) -> float:
    return float(np.max(np.abs(y + y.T))) if y.size else 0.0
