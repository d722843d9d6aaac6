"""Dense 64-bit linear algebra helpers and seeded random streams.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64.  The SVD
is delegated to LAPACK through :func:`numpy.linalg.svd`; everything built on
top of it (numerical rank, truncation, residual energy) lives here.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericError, ShapeError

DEFAULT_RANK_TOL = 1e-6


def as_matrix(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def _check_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        bad = int(np.size(a) - np.count_nonzero(np.isfinite(a)))
        raise NumericError(f"{what}: {bad} non-finite entries in input of shape {a.shape}")


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return a @ b


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    a = as_matrix(m)
    _check_finite(a, "softmax_rows")
    z = a - a.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class SvdResult:
    left_vectors: np.ndarray
    singular_values: np.ndarray
    right_vectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.left_vectors * self.singular_values) @ self.right_vectors.T


def svd(m) -> SvdResult:
    """Thin SVD ``m = U diag(S) V^T`` with singular values nonincreasing."""
    a = as_matrix(m)
    _check_finite(a, "svd")
    if a.size == 0:
        k = min(a.shape)
        return SvdResult(np.zeros((a.shape[0], k)), np.zeros(k), np.zeros((a.shape[1], k)))
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(
            f"svd did not converge for {a.shape} matrix "
            f"(max|a|={np.abs(a).max():.3e}, fro={np.linalg.norm(a):.3e}): {exc}"
        ) from exc
    return SvdResult(u, s, vt.T)


def numerical_rank(m, rel_tol: float = DEFAULT_RANK_TOL) -> int:
    """Number of singular values strictly above ``rel_tol * sigma_max``."""
    if not 0.0 < rel_tol < 1.0:
        raise InputError(f"rel_tol must lie in (0, 1), got {rel_tol}")
    s = svd(m).singular_values
    return rank_from_singular_values(s, rel_tol)


def rank_from_singular_values(s: np.ndarray, rel_tol: float = DEFAULT_RANK_TOL) -> int:
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > rel_tol * s[0]))


def low_rank_truncate(m, r_prime: int) -> tuple[np.ndarray, float]:
    """Best rank-``r_prime`` approximation and the Frobenius norm of what is dropped."""
    a = as_matrix(m)
    if not 0 <= r_prime <= min(a.shape):
        raise ShapeError(f"r_prime={r_prime} outside [0, {min(a.shape)}] for shape {a.shape}")
    res = svd(a)
    u = res.left_vectors[:, :r_prime]
    s = res.singular_values[:r_prime]
    v = res.right_vectors[:, :r_prime]
    approx = (u * s) @ v.T
    residual = float(np.sqrt(np.sum(res.singular_values[r_prime:] ** 2)))
    return approx, residual


def residual_fraction(s: np.ndarray, r_prime: int) -> float:
    """Share of spectral energy beyond the first ``r_prime`` singular values."""
    total = float(np.sqrt(np.sum(s**2)))
    if total == 0.0:
        return 0.0
    return float(np.sqrt(np.sum(s[r_prime:] ** 2))) / total


class Rng:
    """Seeded generator with order-independent labeled substreams.

    ``Rng(7).split("init")`` always yields the same stream no matter how much
    of the parent (or any sibling) has been consumed.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._path = _path
        self.generator = np.random.default_rng(
            np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *_path])
        )

    def split(self, label: str | int) -> "Rng":
        key = label if isinstance(label, int) else zlib.crc32(str(label).encode())
        return Rng(self.seed, self._path + (int(key) & 0xFFFFFFFF,))

    def normal(self, size, scale: float = 1.0) -> np.ndarray:
        return self.generator.normal(0.0, scale, size=size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self.generator.uniform(low, high, size=size)

    def integers(self, low: int, high: int | None = None, size=None) -> np.ndarray:
        return self.generator.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, a, size=None, replace: bool = True):
        return self.generator.choice(a, size=size, replace=replace)
