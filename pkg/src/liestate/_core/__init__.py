"""Hot kernels: compiled extension when built, numpy fallback otherwise.

The compiled loop wins for the small matrices these models use; above
``COMPILED_MAX_DIM`` the numpy path (BLAS-backed batched matmul) is faster,
so dispatch is by matrix size. Set ``LIESTATE_PURE_PYTHON=1`` to force the
fallback everywhere.
"""
import importlib
import os

from . import _expm_py

COMPILED_MAX_DIM = 8

_expm_ext = None
if os.environ.get("LIESTATE_PURE_PYTHON", "").lower() not in ("1", "true", "yes"):
    try:
        _expm_ext = importlib.import_module(__name__ + "._expm_ext")
    except ImportError:  # extension not built
        _expm_ext = None

BACKEND = "cython" if _expm_ext is not None else "python"
TAYLOR_ORDER = _expm_py.TAYLOR_ORDER
MAX_SQUARINGS = _expm_py.MAX_SQUARINGS
squaring_counts = _expm_py.squaring_counts


def _pick(d):
    if _expm_ext is not None and d <= COMPILED_MAX_DIM:
        return _expm_ext
    return _expm_py


def expm_forward(a, keep_cache=True):
    """Batched exponential of an (N, d, d) stack; see ``_expm_py.expm_forward``."""
    return _pick(a.shape[-1]).expm_forward(a, keep_cache)


def expm_backward(cache, grad):
    return _pick(grad.shape[-1]).expm_backward(cache, grad)


def backends():
    """Available kernel modules keyed by name (used by tests and benchmarks)."""
    out = {"python": _expm_py}
    if _expm_ext is not None:
        out["cython"] = _expm_ext
    return out
