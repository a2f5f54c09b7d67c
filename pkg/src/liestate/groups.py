"""Subgroup drop-in components: tangent projections, algebra coordinates,
and on-group token embeddings/prototypes.

Supported families are U(d), SU(d), O(d), SO(d) and the torus T^k. The torus
is carried as a k x k complex diagonal matrix so every family shares the
same matrix templates.

Coordinate conventions (``vec_g``), fixed so checkpoints are portable:

* so(d): strictly-upper-triangle entries ``A[i, j]`` (i < j) in row-major order.
* u(d): ``Im A[k, k]`` for k = 0..d-1, then ``(Re A[i, j], Im A[i, j])`` pairs
  for i < j in row-major order.
* su(d): as u(d) without the last diagonal coordinate, which is recovered
  from the trace-zero constraint.
* t^k: ``Im A[k, k]``.
"""
from dataclasses import dataclass, field

import numpy as np

from . import matrix as mx
from .errors import InvalidTangentError, ShapeError

FAMILIES = ("U", "SU", "O", "SO", "Torus")
_ALIASES = {"u": "U", "su": "SU", "o": "O", "so": "SO", "torus": "Torus", "t": "Torus"}

TANGENT_TOL = 1e-9


@dataclass(frozen=True)
class SubgroupSpec:
    family: str
    d: int

    def __post_init__(self):
        fam = _ALIASES.get(str(self.family).lower())
        if fam is None:
            raise ShapeError(f"unknown subgroup family {self.family!r}; expected one of {FAMILIES}")
        object.__setattr__(self, "family", fam)
        if int(self.d) != self.d or self.d < 1:
            raise ShapeError(f"matrix size must be a positive integer, got {self.d!r}")
        object.__setattr__(self, "d", int(self.d))

    @classmethod
    def parse(cls, text):
        """Parse ``"SO(6)"``, ``"su(3)"``, ``"Torus(4)"``."""
        text = text.strip()
        if "(" not in text or not text.endswith(")"):
            raise ShapeError(f"cannot parse subgroup {text!r}; expected e.g. 'SO(6)'")
        name, _, size = text[:-1].partition("(")
        return cls(name, int(size))

    @property
    def is_real(self):
        return self.family in ("O", "SO")

    @property
    def field(self):
        return "real" if self.is_real else "complex"

    @property
    def dtype(self):
        return np.float64 if self.is_real else np.complex128

    @property
    def algebra_dim(self):
        d = self.d
        return {"U": d * d, "SU": d * d - 1, "O": d * (d - 1) // 2,
                "SO": d * (d - 1) // 2, "Torus": d}[self.family]

    @property
    def raw_shape(self):
        """Shape of one unconstrained token parameter."""
        return (self.d,) if self.family == "Torus" else (self.d, self.d)

    def __str__(self):
        return f"{self.family}({self.d})"


def algebra_dim(spec):
    return spec.algebra_dim


@dataclass(frozen=True)
class TangentCoords:
    spec: SubgroupSpec
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape[-1:] != (self.spec.algebra_dim,):
            raise ShapeError(
                f"{self.spec} coordinates need length {self.spec.algebra_dim}, got {vals.shape}")
        object.__setattr__(self, "values", vals)


@dataclass
class TokenParams:
    B: np.ndarray
    C: np.ndarray
    eta: int = 0
    xi: int = 0


def _check_field(spec, y):
    y = np.asarray(y)
    if y.ndim < 2 or y.shape[-2:] != (spec.d, spec.d):
        raise ShapeError(f"{spec} expects {spec.d}x{spec.d} matrices, got {y.shape}")
    if spec.is_real:
        if np.iscomplexobj(y):
            raise ShapeError(f"{spec} is a real family; got complex input")
        return y.astype(np.float64, copy=False)
    return y.astype(np.complex128, copy=False)


def _torus_project(y):
    d = y.shape[-1]
    out = np.zeros(y.shape, dtype=np.complex128)
    r = np.arange(d)
    out[..., r, r] = 1j * y[..., r, r].imag
    return out


def project_tangent(spec, y):
    """Subgroup tangent projection of a raw matrix onto the algebra."""
    y = _check_field(spec, y)
    fam = spec.family
    if fam in ("O", "SO"):
        return mx.skew_real(y)
    if fam == "U":
        return mx.skew_hermitian(y)
    if fam == "SU":
        return mx.traceless(mx.skew_hermitian(y))
    return _torus_project(y)


# Raw coordinate maps. These do no membership checking and are shared with
# the differentiation engine, which also needs their adjoints.

def _pairs(d):
    return np.triu_indices(d, 1)


def _vec(spec, a):
    d, fam = spec.d, spec.family
    iu, ju = _pairs(d)
    if fam in ("O", "SO"):
        return np.ascontiguousarray(np.real(a[..., iu, ju]))
    r = np.arange(d)
    diag = a[..., r, r].imag
    if fam == "Torus":
        return np.ascontiguousarray(diag)
    if fam == "SU":
        diag = diag[..., : d - 1]
    off = a[..., iu, ju]
    off = np.stack([off.real, off.imag], axis=-1).reshape(off.shape[:-1] + (2 * len(iu),))
    return np.concatenate([diag, off], axis=-1)


def _vec_inv(spec, c):
    d, fam = spec.d, spec.family
    c = np.asarray(c, dtype=np.float64)
    batch = c.shape[:-1]
    iu, ju = _pairs(d)
    if fam in ("O", "SO"):
        a = np.zeros(batch + (d, d))
        a[..., iu, ju] = c
        a[..., ju, iu] = -c
        return a
    a = np.zeros(batch + (d, d), dtype=np.complex128)
    r = np.arange(d)
    if fam == "Torus":
        a[..., r, r] = 1j * c
        return a
    nd = d if fam == "U" else d - 1
    diag = c[..., :nd]
    if fam == "SU":
        diag = np.concatenate([diag, -diag.sum(axis=-1, keepdims=True)], axis=-1)
    a[..., r, r] = 1j * diag
    z = c[..., nd::2] + 1j * c[..., nd + 1::2]
    a[..., iu, ju] = z
    a[..., ju, iu] = -np.conj(z)
    return a


def _vec_adjoint(spec, g):
    """Adjoint of ``_vec`` under the real inner product ``Re tr(X^* Y)``."""
    d, fam = spec.d, spec.family
    g = np.asarray(g, dtype=np.float64)
    batch = g.shape[:-1]
    iu, ju = _pairs(d)
    if fam in ("O", "SO"):
        out = np.zeros(batch + (d, d))
        out[..., iu, ju] = g
        return out
    out = np.zeros(batch + (d, d), dtype=np.complex128)
    r = np.arange(d)
    if fam == "Torus":
        out[..., r, r] = 1j * g
        return out
    nd = d if fam == "U" else d - 1
    out[..., r[:nd], r[:nd]] = 1j * g[..., :nd]
    out[..., iu, ju] = g[..., nd::2] + 1j * g[..., nd + 1::2]
    return out


def _vec_inv_adjoint(spec, gm):
    """Adjoint of ``_vec_inv``: matrix cotangent to coordinate cotangent."""
    d, fam = spec.d, spec.family
    iu, ju = _pairs(d)
    if fam in ("O", "SO"):
        gm = np.real(gm)
        return gm[..., iu, ju] - gm[..., ju, iu]
    r = np.arange(d)
    diag = gm[..., r, r].imag
    if fam == "Torus":
        return np.ascontiguousarray(diag)
    if fam == "SU":
        diag = diag[..., : d - 1] - diag[..., d - 1 : d]
    up, lo = gm[..., iu, ju], gm[..., ju, iu]
    g_re = up.real - lo.real
    g_im = up.imag + lo.imag
    off = np.stack([g_re, g_im], axis=-1).reshape(g_re.shape[:-1] + (2 * len(iu),))
    return np.concatenate([diag, off], axis=-1)


def in_algebra(spec, a, tol=TANGENT_TOL):
    a = _check_field(spec, a)
    resid = np.linalg.norm(project_tangent(spec, a) - a)
    return resid <= tol * max(1.0, float(np.linalg.norm(a)))


def vec_g(spec, a):
    """Algebra element to its coordinate vector. Raises if ``a`` is not in the algebra."""
    a = _check_field(spec, a)
    if not in_algebra(spec, a):
        raise InvalidTangentError(f"matrix is not in the Lie algebra of {spec}")
    return TangentCoords(spec, _vec(spec, a))


def vec_g_inv(spec, c):
    if isinstance(c, TangentCoords):
        if c.spec != spec:
            raise ShapeError(f"coordinates belong to {c.spec}, not {spec}")
        c = c.values
    c = np.asarray(c, dtype=np.float64)
    if c.shape[-1:] != (spec.algebra_dim,):
        raise ShapeError(f"{spec} coordinates need length {spec.algebra_dim}, got {c.shape}")
    return _vec_inv(spec, c)


def algebra_basis(spec):
    """The algebra basis elements ``vec_g_inv(e_k)``, stacked on axis 0."""
    return _vec_inv(spec, np.eye(spec.algebra_dim))


def reflection(d):
    """``F = diag(-1, 1, ..., 1)``."""
    f = np.eye(d)
    f[0, 0] = -1.0
    return f


def raw_to_algebra(spec, raw):
    """Map unconstrained token parameters onto the algebra.

    Torus parameters may be given either as phase vectors of length k or as
    k x k matrices.
    """
    raw = np.asarray(raw)
    if spec.family == "Torus" and raw.shape[-1:] == (spec.d,) and (raw.ndim == 1 or raw.shape[-2] != spec.d):
        return _vec_inv(spec, raw.astype(np.float64))
    return project_tangent(spec, raw)


def token_to_group(spec, p, which="embedding"):
    """On-group embedding ``M_v`` or prototype ``P_v`` from token parameters."""
    if which not in ("embedding", "prototype"):
        raise ValueError("which must be 'embedding' or 'prototype'")
    raw, flag = (p.B, p.eta) if which == "embedding" else (p.C, p.xi)
    if flag and spec.family != "O":
        raise ShapeError("reflection flags are only defined for the O(d) family")
    g = mx.expm(raw_to_algebra(spec, raw))
    if flag:
        g = reflection(spec.d) @ g
    return g


def init_token_raw(spec, n_tokens, rng):
    """I.i.d. Gaussian token parameters with standard deviation 0.2/sqrt(d)."""
    std = 0.2 / np.sqrt(spec.d)
    shape = (n_tokens,) + spec.raw_shape
    if spec.family == "Torus" or spec.is_real:
        return rng.normal(0.0, std, size=shape)
    return rng.normal(0.0, std, size=shape) + 1j * rng.normal(0.0, std, size=shape)


def group_constraint_error(g):
    """``||G^* G - I||_F`` (same quantity the diagnostics call drift)."""
    g = np.asarray(g)
    return np.linalg.norm(mx.adjoint(g) @ g - np.eye(g.shape[-1]), axis=(-2, -1))
