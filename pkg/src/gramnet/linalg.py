"""Dense symmetric linear algebra with a runtime precision mode.

Matrices are plain numpy arrays; the precision mode is the array dtype
(``float32`` for ``"single"``, ``float64`` for ``"double"``).  Factorisation
and eigenvalue routines call LAPACK directly so that failures can be reported
with the pivot that broke.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.linalg
from scipy.linalg import lapack

from .errors import (
    ConvergenceFailure,
    DecompositionFailure,
    DimensionMismatch,
    NonFiniteInput,
    PrecisionMismatch,
)


class Precision(str, Enum):
    SINGLE = "single"
    DOUBLE = "double"

    @property
    def dtype(self):
        return np.dtype(np.float32) if self is Precision.SINGLE else np.dtype(np.float64)

    @classmethod
    def of(cls, array):
        dt = np.asarray(array).dtype
        if dt == np.float32:
            return cls.SINGLE
        if dt == np.float64:
            return cls.DOUBLE
        raise PrecisionMismatch(f"unsupported dtype {dt}")


def dtype_for(precision):
    return Precision(precision).dtype


def as_matrix(data, precision="double"):
    """Copy ``data`` into a 2-D array of the requested precision."""
    m = np.array(data, dtype=dtype_for(precision), ndmin=2)
    if m.ndim != 2:
        raise DimensionMismatch(f"expected a matrix, got shape {m.shape}")
    return m


def as_sym(data, precision=None):
    """Build an exactly symmetric matrix from the lower triangle of ``data``."""
    m = np.asarray(data)
    if precision is not None:
        m = m.astype(dtype_for(precision))
    elif m.dtype not in (np.float32, np.float64):
        m = m.astype(np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"symmetric matrix must be square, got {m.shape}")
    low = np.tril(m)
    return low + np.tril(m, -1).T


def check_same_precision(*arrays):
    kinds = {np.asarray(a).dtype for a in arrays if np.asarray(a).dtype.kind == "f"}
    if len(kinds) > 1:
        raise PrecisionMismatch(f"mixed precision operands: {sorted(map(str, kinds))}")


def _check_finite(m):
    if not np.all(np.isfinite(m)):
        raise NonFiniteInput("matrix contains non-finite entries")


@dataclass(frozen=True)
class CholFactor:
    lower: np.ndarray

    @property
    def dim(self):
        return self.lower.shape[0]

    @property
    def precision(self):
        return Precision.of(self.lower)

    def reconstruct(self):
        return self.lower @ self.lower.T

    def logdet(self):
        return 2.0 * np.sum(np.log(np.diagonal(self.lower)))


def cholesky_lower(m, jitter=0.0):
    """Lower Cholesky factor of ``m + jitter * I`` as a bare array.

    Raises :class:`DecompositionFailure` carrying the zero-based index of the
    first non-positive pivot.
    """
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"cholesky needs a square matrix, got {m.shape}")
    if not np.isfinite(jitter):
        raise NonFiniteInput("jitter must be finite")
    _check_finite(m)
    if m.dtype not in (np.float32, np.float64):
        m = m.astype(np.float64)
    a = m + jitter * np.eye(m.shape[0], dtype=m.dtype) if jitter else m
    if a.shape[0] == 0:
        return np.zeros_like(a)
    (potrf,) = lapack.get_lapack_funcs(("potrf",), (a,))
    low, info = potrf(a, lower=True, clean=True, overwrite_a=False)
    if info > 0:
        raise DecompositionFailure(info - 1)
    if info < 0:
        raise ValueError(f"potrf: illegal argument {-info}")
    return low


def cholesky(m, jitter=0.0):
    return CholFactor(cholesky_lower(m, jitter))


def solve_psd(f, b):
    """Solve ``(L L^T) X = b`` by forward then backward substitution."""
    low = f.lower if isinstance(f, CholFactor) else np.asarray(f)
    b = np.asarray(b)
    if b.shape[0] != low.shape[0]:
        raise DimensionMismatch(f"factor has dim {low.shape[0]}, rhs has {b.shape[0]} rows")
    check_same_precision(low, b)
    y = scipy.linalg.solve_triangular(low, b, lower=True, check_finite=False)
    return scipy.linalg.solve_triangular(low, y, lower=True, trans="T", check_finite=False)


def sym_eigenvalues(m):
    """Full spectrum of a symmetric matrix, ascending.

    LAPACK's symmetric driver reduces to tridiagonal form and iterates from
    there, which stays backward stable for badly conditioned Gram matrices.
    """
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"eigenvalues need a square matrix, got {m.shape}")
    _check_finite(m)
    try:
        return scipy.linalg.eigh(m, eigvals_only=True, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(str(exc)) from exc


def condition_number(m):
    """lambda_max / lambda_min, or ``inf`` when lambda_min <= 0."""
    eig = sym_eigenvalues(m)
    if eig.size == 0:
        return 1.0
    lo, hi = float(eig[0]), float(eig[-1])
    if lo <= 0.0:
        return float("inf")
    return hi / lo


def factor_condition_number(low):
    """Condition number of ``L L^T`` from the singular values of ``L``.

    Squaring ``sigma_max / sigma_min`` keeps full relative accuracy well past
    the ``1 / eps`` ceiling that forming ``L L^T`` first would impose.
    """
    low = np.asarray(low)
    if low.size == 0:
        return 1.0
    _check_finite(low)
    try:
        sv = scipy.linalg.svdvals(low, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(str(exc)) from exc
    if sv[-1] <= 0.0:
        return float("inf")
    return float((sv[0] / sv[-1]) ** 2)
