"""Self-check suites behind ``liestate verify``.

Each check returns its worst observed error; a check passes when that error is
below its tolerance. ``fast`` runs structural invariants only; ``full`` adds
reference oracles (eigendecomposition exponential, a straight-line
transcription of the attention template, finite differences) and long drift
rollouts.
"""
import contextlib
import io
import math
import time
from dataclasses import dataclass
from unittest import mock

import numpy as np

from . import _core
from . import autodiff as ad
from . import checkpoint as ckpt
from . import groups as grp
from . import matrix as mx
from . import models
from .diagnostics import channel_split, drift
from .training import loss_bpc

LEVELS = ("fast", "full")
FAMILIES = ("O", "SO", "U", "SU", "Torus")


@dataclass
class CheckResult:
    name: str
    level: str
    max_error: float
    tol: float
    seconds: float
    message: str = ""

    @property
    def passed(self):
        return not self.message and self.max_error < self.tol

    def record(self):
        err = self.max_error if math.isfinite(self.max_error) else None
        return {"name": self.name, "level": self.level, "passed": self.passed, "max_error": err,
                "tol": self.tol, "seconds": round(self.seconds, 4), "message": self.message}

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.message})" if self.message else ""
        return (f"{status} {self.name:<34s} max_err={self.max_error:.3e} tol={self.tol:.0e} "
                f"[{self.seconds:.2f}s]{extra}")


_CHECKS = []


def check(level, tol):
    def wrap(fn):
        _CHECKS.append((fn.__name__, level, tol, fn))
        return fn
    return wrap


# Reference oracles ---------------------------------------------------------

def ref_expm_skew(a):
    """Exponential of skew-symmetric / skew-Hermitian matrices through the
    Hermitian eigendecomposition of ``iA``."""
    a = np.asarray(a)
    w, v = np.linalg.eigh(1j * a)
    out = (v * np.exp(-1j * w)[..., None, :]) @ np.conj(np.swapaxes(v, -1, -2))
    return out.real if not np.iscomplexobj(a) else out


def ref_vec_so(a):
    i, j = np.triu_indices(a.shape[-1], 1)
    return a[..., i, j]


def ref_vec_so_inv(c, d):
    i, j = np.triu_indices(d, 1)
    out = np.zeros(c.shape[:-1] + (d, d))
    out[..., i, j] = c
    out[..., j, i] = -c
    return out


def ref_osmformer_so(params, tokens, d, num_layers, alibi_slope):
    """Per-position transcription of the SO(d) attention template with
    linear mixing in both slots. ``tokens`` is one sequence."""
    def proj(y):
        return 0.5 * (y - y.T)

    def mix(w, a):
        return ref_vec_so_inv(w @ ref_vec_so(a), d)

    emb = [ref_expm_skew(proj(b)) for b in params["embed"]]
    tau_a = math.exp(float(params["log_tau_attn"]))
    m = [emb[x] for x in tokens]
    h = list(m)
    n = len(tokens)
    for layer in range(num_layers):
        wa = params[f"layers.{layer}.attn"]
        wg = params[f"layers.{layer}.ground"]
        new = []
        for i in range(n):
            scores = [tau_a * float(np.trace(h[i].T @ h[j])) - alibi_slope * (i - j) for j in range(i + 1)]
            top = max(scores)
            e = [math.exp(s - top) for s in scores]
            alpha = [x / sum(e) for x in e]
            agg = sum(alpha[j] * h[j] for j in range(i + 1))
            z = mix(wa, proj(h[i].T @ agg))
            ht = h[i] @ ref_expm_skew(z)
            g = mix(wg, proj(ht.T @ m[i]))
            new.append(ht @ ref_expm_skew(g))
        h = new
    protos = [ref_expm_skew(proj(c)) for c in params["proto"]]
    tau = math.exp(float(params["log_tau"]))
    return np.array([[tau * float(np.trace(hi.T @ p)) + b for p, b in zip(protos, params["bias"])]
                     for hi in h])


def _rng():
    return np.random.default_rng(20240601)


def _random_skew(rng, n, d, scale=1.0):
    x = rng.normal(size=(n, d, d)) * scale
    return x - np.swapaxes(x, -1, -2)


def _raw(spec, rng, n):
    x = rng.normal(size=(n, spec.d, spec.d))
    if not spec.is_real:
        x = x + 1j * rng.normal(size=(n, spec.d, spec.d))
    return x


# Fast checks ---------------------------------------------------------------

@check("fast", 1e-300)
def expm_zero_is_identity():
    return max(float(np.max(np.abs(mx.expm(np.zeros((d, d))) - np.eye(d)))) for d in (1, 2, 5, 9))


@check("fast", 1e-12)
def expm_planar_rotation():
    err = 0.0
    for theta in np.linspace(-7.0, 7.0, 29):
        a = np.array([[0.0, -theta], [theta, 0.0]])
        want = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
        err = max(err, float(np.max(np.abs(mx.expm(a) - want))))
    return err


@check("fast", 1e-13)
def skew_projection():
    rng = _rng()
    x = rng.normal(size=(64, 6, 6))
    p = mx.skew_real(x)
    anti = np.max(np.abs(p + np.swapaxes(p, -1, -2)))
    idem = np.max(np.abs(mx.skew_real(p) - p))
    # the symmetric part must be what was removed
    resid = np.max(np.abs((x - p) - np.swapaxes(x - p, -1, -2)))
    return float(max(anti, idem, resid))


@check("fast", 1e-13)
def family_projection_idempotent():
    rng = _rng()
    err = 0.0
    for fam in FAMILIES:
        spec = grp.SubgroupSpec(fam, 4)
        p = grp.project_tangent(spec, _raw(spec, rng, 16))
        err = max(err, float(np.max(np.abs(grp.project_tangent(spec, p) - p))))
        if not all(grp.in_algebra(spec, a) for a in p):
            return math.inf
    return err


@check("fast", 0.5)
def algebra_dimension_rank():
    """Rank of the projected random basis equals the algebra dimension (exact)."""
    worst = 0
    for fam in FAMILIES:
        for d in (1, 2, 3, 5):
            spec = grp.SubgroupSpec(fam, d)
            field = [1.0] if spec.is_real else [1.0, 1j]
            images = []
            for i in range(d):
                for j in range(d):
                    for c in field:
                        e = np.zeros((d, d), dtype=spec.dtype)
                        e[i, j] = c
                        a = grp.project_tangent(spec, e)
                        images.append(np.concatenate([a.real.ravel(), a.imag.ravel()]))
            rank = int(np.linalg.matrix_rank(np.array(images), tol=1e-10))
            worst = max(worst, abs(rank - spec.algebra_dim))
    return float(worst)


@check("fast", 1e-14)
def vec_round_trip():
    rng = _rng()
    err = 0.0
    for fam in FAMILIES:
        spec = grp.SubgroupSpec(fam, 5)
        c = rng.normal(size=(8, spec.algebra_dim))
        a = grp.vec_g_inv(spec, c)
        err = max(err, float(np.max(np.abs(grp.vec_g(spec, a).values - c))))
    return err


@check("fast", 1e-12)
def token_to_group_on_group():
    rng = _rng()
    err = 0.0
    for fam in FAMILIES:
        spec = grp.SubgroupSpec(fam, 4)
        raw = grp.init_token_raw(spec, 6, rng) * 10.0
        for v in range(6):
            for which in ("embedding", "prototype"):
                flag = int(fam == "O" and v % 2)
                p = grp.TokenParams(raw[v], raw[(v + 1) % 6], eta=flag, xi=flag)
                g = grp.token_to_group(spec, p, which)
                err = max(err, float(grp.group_constraint_error(g)))
                if fam in ("SO", "SU") and abs(np.linalg.det(g) - 1.0) > 1e-10:
                    return math.inf
    return err


@check("fast", 1e-12)
def expm_backends_agree():
    backs = _core.backends()
    if len(backs) < 2:
        return 0.0
    rng = _rng()
    err = 0.0
    for d in (2, 4, 8):
        for a in (_random_skew(rng, 16, d, 2.0), _random_skew(rng, 16, d) * 1j):
            outs = [b.expm_forward(a, keep_cache=False)[0] for b in backs.values()]
            scale = 1.0 + np.max(np.abs(a).sum(axis=-2))
            err = max(err, float(np.max(np.abs(outs[0] - outs[1]))) / scale)
    return err


@check("fast", 1e-14)
def attention_rows_causal():
    rng = _rng()
    h = mx.expm(_random_skew(rng, 7, 4))
    alpha = models.attention_weights(h[None], 0.5)[0]
    upper = np.abs(alpha[np.triu_indices(7, 1)]).max()
    return float(max(upper, np.abs(alpha.sum(-1) - 1).max()))


@check("fast", 1e-300)
def causality_bit_exact():
    rng = _rng()
    worst = 0.0
    for model in (models.OSMRNN("SO(4)", 5), models.OSMFormer("U(3)", 5, num_layers=2)):
        params = model.init_params(rng)
        x = rng.integers(0, 5, size=(1, 9))
        y = x.copy()
        y[0, 5:] = (y[0, 5:] + 1) % 5
        a = model.forward(params, x)[0, :5]
        b = model.forward(params, y)[0, :5]
        worst = max(worst, float(np.max(np.abs(a - b))))
    return worst


@check("fast", 1e-12)
def attention_conjugation_invariant():
    rng = _rng()
    spec = grp.SubgroupSpec("U", 4)
    h = mx.expm(grp.project_tangent(spec, _raw(spec, rng, 6)))
    q = mx.expm(grp.project_tangent(spec, _raw(spec, rng, 1)))[0]
    a1 = models.attention_weights(h[None], 0.7)
    a2 = models.attention_weights((q.conj().T @ h @ q)[None], 0.7)
    return float(np.max(np.abs(a1 - a2)))


@check("fast", 0.5)
def channel_split_dims():
    rng = _rng()
    worst = 0
    for fam in FAMILIES:
        spec = grp.SubgroupSpec(fam, 3)
        n = spec.algebra_dim
        v = n + 2
        proto = grp.init_token_raw(spec, v, rng) * 5.0
        h = mx.expm(grp.project_tangent(spec, _raw(spec, rng, 1)))[0]
        for tau in (0.0, 1.0):
            split = channel_split(models.ReadoutHead(spec, proto, tau, np.zeros(v)), h)
            worst = max(worst, abs(split.predictive_dim + split.memory_dim - n))
            if tau == 0.0:
                worst = max(worst, split.predictive_dim)
            else:
                worst = max(worst, split.memory_dim)
    return float(worst)


@check("fast", 1e-12)
def uniform_logits_bpc():
    err = 0.0
    for v in (2, 5, 65):
        logits = np.zeros((3, 4, v))
        err = max(err, abs(loss_bpc(logits, np.zeros((3, 4), dtype=int))[1] - math.log2(v)))
    return err


@check("fast", 0.5)
def checkpoint_round_trip():
    model = models.OSMFormer("SU(3)", 4)
    params = model.init_params(_rng())
    blob = ckpt.dumps(model.config(), ckpt.pack_state(params), {"step": 3})
    config, tensors, meta = ckpt.loads(blob)
    again = ckpt.dumps(config, tensors, meta)
    return float(blob != again)


# Full checks ---------------------------------------------------------------

@check("full", 1e-10)
def expm_spectral_oracle():
    rng = _rng()
    err = 0.0
    for d in (2, 4, 8, 16):
        a = _random_skew(rng, 1000, d)
        q = mx.expm(a)
        err = max(err, float(np.max(np.abs(q - ref_expm_skew(a)))))
        err = max(err, float(np.max(grp.group_constraint_error(q))) * 100)
        err = max(err, float(np.max(np.abs(np.linalg.det(q) - 1.0))))
    return err


@check("full", 1e-12)
def osmformer_transcription():
    rng = _rng()
    model = models.OSMFormer("SO(4)", 5, num_layers=2)
    params = model.init_params(rng)
    params["log_tau_attn"] = np.array(0.3)
    tokens = np.array([3, 0, 4])
    got = model.forward(params, tokens[None])[0]
    want = ref_osmformer_so(params, tokens, 4, 2, model.alibi_slope)
    return float(np.max(np.abs(got - want)))


@check("full", 1e-6)
def gradient_finite_difference():
    rng = _rng()
    worst = 0.0
    for family in FAMILIES:
        spec = grp.SubgroupSpec(family, 4 if family != "U" else 3)
        for model in (models.OSMRNN(spec, 5), models.OSMFormer(spec, 5)):
            params = model.init_params(rng)
            x = rng.integers(0, 5, size=(2, 6))
            y = rng.integers(0, 5, size=(2, 6))
            err = ad.finite_diff_check(lambda p: model.loss(p, x, y), params, fraction=0.1, seed=1)
            worst = max(worst, err)
    return worst


@check("full", 1e-8)
def drift_long_rollout():
    rng = _rng()
    worst = 0.0
    for spec in ("SO(6)", "U(4)"):
        model = models.OSMRNN(spec, 7)
        params = model.init_params(rng)
        params["embed"] = params["embed"] * 10.0
        tokens = rng.integers(0, 7, size=10_000)
        emb = model.embeddings(params)
        h = model.initial_state()
        for t, tok in enumerate(tokens):
            h = model.step(params, h, tok, embeddings=emb,
                           reproject_now=(t + 1) % model.reproject_every == 0)
            worst = max(worst, float(drift(h)))
    return worst


CORRUPTIONS = {
    "skew_real": (mx, "skew_real", lambda x: np.asarray(x) - np.swapaxes(np.asarray(x), -1, -2) * 0.4),
}


def run_verify(level="fast", corrupt=None, out=None):
    """Run the suites for ``level``; returns the list of :class:`CheckResult`.

    ``corrupt`` names a deliberately broken kernel (see ``CORRUPTIONS``) to
    exercise the harness itself.
    """
    if level not in LEVELS:
        raise ValueError(f"level must be one of {LEVELS}")
    selected = [c for c in _CHECKS if c[1] == "fast" or level == "full"]
    stack = contextlib.ExitStack()
    if corrupt is not None:
        target, attr, broken = CORRUPTIONS[corrupt]
        stack.enter_context(mock.patch.object(target, attr, broken))
    results = []
    with stack:
        for name, lvl, tol, fn in selected:
            t0 = time.perf_counter()
            message = ""
            try:
                with contextlib.redirect_stderr(io.StringIO()):
                    err = float(fn())
            except Exception as exc:  # a crash is a failure of that check
                err, message = math.inf, f"{type(exc).__name__}: {exc}"
            if math.isnan(err):
                err, message = math.inf, "nan"
            res = CheckResult(name, lvl, err, tol, time.perf_counter() - t0, message)
            results.append(res)
            if out is not None:
                out.write(res.line() + "\n")
    return results
