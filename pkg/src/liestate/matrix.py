"""Dense real/complex matrix primitives.

Matrices are plain numpy arrays of dtype float64 (real field) or complex128
(complex field). Every function accepts a trailing ``(rows, cols)`` pair and
broadcasts over any leading batch axes.
"""
import numpy as np

from . import _core
from .errors import NumericRangeError, RankDeficientError, ShapeError

__all__ = [
    "as_matrix",
    "is_complex",
    "matmul",
    "adjoint",
    "trace_re_inner",
    "skew_real",
    "skew_hermitian",
    "traceless",
    "expm",
    "cayley",
    "reproject_orthogonal",
    "eye_like",
]


def as_matrix(x, field=None):
    """Coerce ``x`` to a float64/complex128 array with at least two axes."""
    arr = np.asarray(x)
    if field == "complex" or (field is None and np.iscomplexobj(arr)):
        arr = arr.astype(np.complex128, copy=False)
    else:
        if np.iscomplexobj(arr):
            raise ShapeError("complex entries given for a real-field matrix")
        arr = arr.astype(np.float64, copy=False)
    if arr.ndim < 2:
        raise ShapeError(f"expected a matrix, got shape {arr.shape}")
    if arr.shape[-1] == 0 or arr.shape[-2] == 0:
        raise ShapeError("zero-dimensional matrices are not allowed")
    return arr


def is_complex(x):
    return np.iscomplexobj(x)


def _square(x, what="matrix"):
    x = as_matrix(x)
    if x.shape[-1] != x.shape[-2]:
        raise ShapeError(f"{what} must be square, got {x.shape[-2]}x{x.shape[-1]}")
    return x


def eye_like(x):
    return np.broadcast_to(np.eye(x.shape[-1], dtype=x.dtype), x.shape)


def matmul(a, b):
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply {a.shape[-2]}x{a.shape[-1]} by {b.shape[-2]}x{b.shape[-1]}")
    return a @ b


def adjoint(a):
    """Conjugate transpose (plain transpose for real input)."""
    a = np.asarray(a)
    t = np.swapaxes(a, -1, -2)
    return np.conj(t) if np.iscomplexobj(a) else t


def trace_re_inner(a, b):
    """``Re tr(a^* b)`` over the trailing matrix axes."""
    a = _square(a)
    b = _square(b)
    if a.shape[-2:] != b.shape[-2:]:
        raise ShapeError(f"shape mismatch {a.shape[-2:]} vs {b.shape[-2:]}")
    if np.iscomplexobj(a) or np.iscomplexobj(b):
        return np.sum(a.real * b.real + a.imag * b.imag, axis=(-2, -1))
    return np.sum(a * b, axis=(-2, -1))


def skew_real(x):
    x = _square(x)
    if np.iscomplexobj(x):
        raise ShapeError("skew_real expects a real matrix")
    return 0.5 * (x - np.swapaxes(x, -1, -2))


def skew_hermitian(x):
    x = _square(x).astype(np.complex128, copy=False)
    return 0.5 * (x - adjoint(x))


def traceless(x):
    x = _square(x)
    d = x.shape[-1]
    tr = np.trace(x, axis1=-2, axis2=-1)
    return x - (tr / d)[..., None, None] * np.eye(d, dtype=x.dtype)


def expm(a):
    """Matrix exponential by scaling-and-squaring over a degree-12 Taylor polynomial.

    Squaring count per matrix is ``max(0, ceil(log2 |a|_1) + 1)``.
    """
    a = _square(a)
    if not np.all(np.isfinite(a)):
        raise NumericRangeError("expm input has non-finite entries")
    d = a.shape[-1]
    flat = np.ascontiguousarray(a.reshape(-1, d, d))
    norms = np.abs(flat).sum(axis=-2).max(axis=-1) if flat.shape[0] else np.zeros(0)
    if flat.shape[0] and int(_core.squaring_counts(norms).max()) > _core.MAX_SQUARINGS:
        raise NumericRangeError("expm input norm exceeds the scaling budget")
    out, _ = _core.expm_forward(flat, keep_cache=False)
    if not np.all(np.isfinite(out)):
        raise NumericRangeError("expm overflowed")
    return out.reshape(a.shape)


def cayley(a):
    """``(I - a/2)^{-1} (I + a/2)``."""
    a = _square(a)
    eye = eye_like(a)
    lhs = eye - 0.5 * a
    rhs = eye + 0.5 * a
    try:
        cond = np.linalg.cond(lhs)
    except np.linalg.LinAlgError as exc:
        raise NumericRangeError("I - a/2 is singular") from exc
    if not np.all(np.isfinite(cond)) or np.any(cond > 1.0 / np.finfo(np.float64).eps):
        raise NumericRangeError("I - a/2 is singular")
    return np.linalg.solve(lhs, rhs)


def reproject_orthogonal(x):
    """Nearest orthogonal (unitary) matrix: the polar factor ``U V^*`` of an SVD."""
    x = _square(x)
    u, s, vh = np.linalg.svd(x)
    tol = s[..., :1] * x.shape[-1] * np.finfo(np.float64).eps
    if np.any(s[..., -1:] <= tol):
        raise RankDeficientError("cannot re-project a rank-deficient matrix")
    return u @ vh
