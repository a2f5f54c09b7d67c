"""Pure-numpy batched matrix exponential (scaling-and-squaring + Taylor).

Mirror of the compiled ``_expm_ext`` kernel. Both expose the same three
functions and the same cache layout, so the dispatcher in
``liestate._core`` can swap them freely.
"""
import numpy as np

TAYLOR_ORDER = 12
MAX_SQUARINGS = 64


def squaring_counts(onenorms):
    """Per-matrix squaring count ``max(0, ceil(log2(|A|_1)) + 1)``."""
    onenorms = np.asarray(onenorms, dtype=np.float64)
    s = np.zeros(onenorms.shape, dtype=np.int64)
    pos = onenorms > 0
    s[pos] = np.maximum(0, np.ceil(np.log2(onenorms[pos])).astype(np.int64) + 1)
    return s


def _ctranspose(x):
    return np.conj(np.swapaxes(x, -1, -2)) if np.iscomplexobj(x) else np.swapaxes(x, -1, -2)


def expm_forward(a, keep_cache=True):
    """Exponentiate a stack ``a`` of shape (N, d, d).

    Returns ``(out, cache)``; ``cache`` is None when ``keep_cache`` is false.
    """
    n, d, _ = a.shape
    onenorm = np.abs(a).sum(axis=-2).max(axis=-1) if n else np.zeros(0)
    s = squaring_counts(onenorm)
    scale = np.ldexp(1.0, -s)[:, None, None]
    scaled = a * scale
    eye = np.broadcast_to(np.eye(d, dtype=a.dtype), a.shape)

    q = np.empty((TAYLOR_ORDER + 1,) + a.shape, dtype=a.dtype)
    q[TAYLOR_ORDER] = eye
    for k in range(TAYLOR_ORDER, 0, -1):
        q[k - 1] = eye + (scaled @ q[k]) / k

    smax = int(s.max()) if n else 0
    x = np.empty((smax + 1,) + a.shape, dtype=a.dtype)
    x[0] = q[0]
    for m in range(smax):
        active = (s > m)[:, None, None]
        x[m + 1] = np.where(active, x[m] @ x[m], x[m])
    out = x[smax].copy()
    if not keep_cache:
        return out, None
    return out, (s, scaled, q, x)


def expm_backward(cache, grad):
    """Reverse sweep through the squaring chain and the Horner recursion."""
    s, scaled, q, x = cache
    g = np.array(grad, dtype=scaled.dtype, copy=True)
    smax = x.shape[0] - 1
    for m in range(smax - 1, -1, -1):
        xm_h = _ctranspose(x[m])
        active = (s > m)[:, None, None]
        g = np.where(active, g @ xm_h + xm_h @ g, g)

    scaled_h = _ctranspose(scaled)
    g_scaled = np.zeros_like(scaled)
    gq = g
    for k in range(1, TAYLOR_ORDER + 1):
        g_scaled += (gq @ _ctranspose(q[k])) / k
        gq = (scaled_h @ gq) / k
    return g_scaled * np.ldexp(1.0, -s)[:, None, None]
