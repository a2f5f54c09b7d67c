"""Group-valued sequence models: the recurrent template (OSM-RNN) and the
attention template (OSMFormer), sharing tangent mixing and the prototype
similarity readout.

Parameters live in a flat ``dict`` (name -> array). Forward functions accept
either arrays or :class:`~liestate.autodiff.Var` leaves, so the same code path
serves plain evaluation and gradient computation.
"""
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import groups as grp
from . import matrix as mx
from .errors import ShapeError

MIXING_MODES = ("identity", "scale", "linear")
EXP_MAPS = ("expm", "cayley")
DEFAULT_ALIBI_SLOPE = 2.0 ** -8
REPROJECT_EVERY = 64

_MODE_ALIASES = {
    "identity": "identity", "id": "identity", "none": "identity",
    "scale": "scale", "per-direction": "scale", "perdirectionscale": "scale",
    "linear": "linear", "linearmix": "linear",
}


def normalize_mixing(mode):
    try:
        return _MODE_ALIASES[str(mode).lower()]
    except KeyError:
        raise ShapeError(f"unknown mixing mode {mode!r}; expected one of {MIXING_MODES}") from None


@dataclass
class MixingSpec:
    """Tangent map in algebra coordinates: identity, ``s * a`` or ``W @ a``."""

    mode: str = "identity"
    params: object = None

    def __post_init__(self):
        self.mode = normalize_mixing(self.mode)

    def check(self, spec):
        n = spec.algebra_dim
        shape = None if self.params is None else tuple(ad.value(self.params).shape)
        want = {"identity": None, "scale": (n,), "linear": (n, n)}[self.mode]
        if shape != want:
            raise ShapeError(f"{self.mode} mixing for {spec} needs params of shape {want}, got {shape}")


def init_mixing(mode, spec, rng):
    mode = normalize_mixing(mode)
    n = spec.algebra_dim
    if mode == "identity":
        return None
    if mode == "scale":
        return np.ones(n)
    return np.eye(n) + 0.01 * rng.normal(size=(n, n))


def apply_mixing(mix, spec, a):
    """Tangent mixing on (a batch of) algebra elements."""
    if mix.mode == "identity":
        return a
    mix.check(spec)
    n = spec.algebra_dim
    d = spec.d
    lead = ad.value(a).shape[:-2]
    c = ad.reshape(ad.vec_g(spec, a), (-1, n))
    if mix.mode == "scale":
        c = ad.mul(c, mix.params)
    else:
        c = ad.matmul(c, ad.adjoint(mix.params))
    return ad.reshape(ad.vec_g_inv(spec, c), lead + (d, d))


def to_algebra(spec, raw):
    """Unconstrained token parameters to algebra elements (batched over tokens)."""
    if spec.family == "Torus":
        return ad.vec_g_inv(spec, raw)
    return ad.project(spec, raw)


def token_groups(spec, raw, flags=None, exp_map="expm"):
    """``F^flag Exp(Pi(raw_v))`` for every token ``v``."""
    g = group_exp(to_algebra(spec, raw), exp_map)
    if flags is not None and np.any(flags):
        if spec.family != "O":
            raise ShapeError("reflection flags are only defined for the O(d) family")
        sign = np.ones((len(flags), spec.d, 1))
        sign[np.asarray(flags, dtype=bool), 0, 0] = -1.0
        g = ad.mul(g, sign)
    return g


def group_exp(a, exp_map="expm"):
    if exp_map == "expm":
        return ad.expm(a)
    if exp_map == "cayley":
        return ad.cayley(a)
    raise ShapeError(f"unknown exponential map {exp_map!r}; expected one of {EXP_MAPS}")


def reproject(h):
    """Polar re-projection onto the unitary group.

    Plain arrays go through the SVD polar factor. On a tape, two Newton-Schulz
    polar iterations are used instead; they converge to the same factor for
    the near-unitary states seen here and stay differentiable.
    """
    if not isinstance(h, ad.Var):
        return mx.reproject_orthogonal(h)
    eye = np.eye(ad.value(h).shape[-1])
    for _ in range(2):
        h = ad.scale(ad.matmul(h, ad.sub(3.0 * eye, ad.matmul(ad.adjoint(h), h))), 0.5)
    return h


def similarity_logits(h, protos, tau, bias):
    """``tau * Re tr(H^* P_v) + b_v`` for every prototype, batched over ``h``."""
    hv = ad.value(h)
    d = hv.shape[-1]
    lead = hv.shape[:-2]
    n_tok = ad.value(protos).shape[0]
    hf = ad.reshape(h, (-1, d * d))
    pf = ad.reshape(protos, (n_tok, d * d))
    raw = ad.reshape(ad.real(ad.matmul(hf, ad.adjoint(pf))), lead + (n_tok,))
    return ad.add(ad.mul(raw, tau), bias)


@dataclass
class ReadoutHead:
    """Prototype readout: raw prototype parameters, temperature and biases."""

    spec: grp.SubgroupSpec
    proto_raw: np.ndarray
    tau: float
    bias: np.ndarray
    xi: np.ndarray = None
    exp_map: str = "expm"

    def __post_init__(self):
        if not self.tau >= 0:
            raise ShapeError("readout temperature must be non-negative")
        if len(self.bias) != len(self.proto_raw):
            raise ShapeError("need one bias per prototype")

    def prototypes(self):
        return token_groups(self.spec, self.proto_raw, self.xi, self.exp_map)


def readout(head, h):
    """Logit vector(s) for state(s) ``h``."""
    return similarity_logits(h, head.prototypes(), head.tau, head.bias)


def readout_differential(head, h):
    """Matrix of the readout differential at ``h`` in algebra coordinates.

    Row ``v``, column ``k``: ``tau * Re tr((h E_k)^* P_v)`` with ``E_k`` the
    k-th algebra basis element. Shape ``(V, n_g)``.
    """
    h = np.asarray(h)
    basis = grp.algebra_basis(head.spec)
    directions = h @ basis
    protos = head.prototypes()
    inner = mx.trace_re_inner(directions[None, :, :, :], protos[:, None, :, :])
    return head.tau * inner


def alibi_bias(n, slope):
    """``-slope * (i - j)`` below the diagonal, ``-inf`` above it."""
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    bias = -slope * (i - j).astype(np.float64)
    return np.where(j <= i, bias, -np.inf)


def attention_weights(states, tau_attn, alibi_slope=DEFAULT_ALIBI_SLOPE):
    """Causal attention weights from pairwise similarity ``tau * Re tr(H_i^* H_j)``.

    ``states`` has shape (..., T, d, d); the result has shape (..., T, T) with
    rows summing to one and zeros above the diagonal.
    """
    sv = ad.value(states)
    t, d = sv.shape[-3], sv.shape[-1]
    lead = sv.shape[:-3]
    flat = ad.reshape(states, lead + (t, d * d))
    scores = ad.real(ad.matmul(flat, ad.adjoint(flat)))
    bias = alibi_bias(t, alibi_slope)
    mask = np.isfinite(bias)
    logits = ad.add(ad.mul(scores, tau_attn), np.where(mask, bias, 0.0))
    return ad.softmax(logits, mask=np.broadcast_to(mask, ad.value(logits).shape))


class _Template:
    kind = None

    def __init__(self, spec, vocab_size, exp_map="expm", reproject_every=REPROJECT_EVERY,
                 eta=None, xi=None):
        if isinstance(spec, str):
            spec = grp.SubgroupSpec.parse(spec)
        if vocab_size < 1:
            raise ShapeError("vocabulary must be non-empty")
        if exp_map not in EXP_MAPS:
            raise ShapeError(f"unknown exponential map {exp_map!r}; expected one of {EXP_MAPS}")
        self.spec = spec
        self.vocab_size = int(vocab_size)
        self.exp_map = exp_map
        self.reproject_every = int(reproject_every or 0)
        self.eta = None if eta is None else np.asarray(eta, dtype=np.int64)
        self.xi = None if xi is None else np.asarray(xi, dtype=np.int64)

    # parameters ------------------------------------------------------------
    def _token_params(self, rng):
        spec, v = self.spec, self.vocab_size
        return {
            "embed": grp.init_token_raw(spec, v, rng),
            "proto": grp.init_token_raw(spec, v, rng),
            "bias": np.zeros(v),
            "log_tau": np.array(0.0),
        }

    def param_groups(self):
        """Parameter name -> component label used for itemized counts."""
        groups = {}
        for name in self.param_shapes():
            if name == "embed":
                groups[name] = "embeddings"
            elif name == "proto":
                groups[name] = "prototypes"
            elif name == "bias":
                groups[name] = "biases"
            elif name.startswith("log_tau"):
                groups[name] = "temperatures"
            else:
                groups[name] = "mixing"
        return groups

    def param_shapes(self):
        return {k: (v.shape, v.dtype) for k, v in self.init_params(np.random.default_rng(0)).items()}

    def head(self, params):
        p = {k: ad.value(v) for k, v in params.items()}
        return ReadoutHead(self.spec, p["proto"], float(np.exp(p["log_tau"])), p["bias"],
                           self.xi, self.exp_map)

    def embeddings(self, params):
        return token_groups(self.spec, params["embed"], self.eta, self.exp_map)

    def prototypes(self, params):
        return token_groups(self.spec, params["proto"], self.xi, self.exp_map)

    def readout_logits(self, params, states):
        return similarity_logits(states, self.prototypes(params), ad.exp(params["log_tau"]), params["bias"])

    def _check_tokens(self, tokens):
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.ndim != 2 or tokens.shape[1] < 1:
            raise ShapeError("tokens must be a non-empty (batch, time) integer array")
        if tokens.min() < 0 or tokens.max() >= self.vocab_size:
            raise ShapeError(f"token id out of vocabulary (size {self.vocab_size})")
        return tokens.astype(np.intp)

    def loss(self, params, inputs, targets):
        """Mean next-token cross-entropy in nats."""
        logits = self.forward(params, inputs)
        targets = np.asarray(targets, dtype=np.intp).reshape(ad.value(logits).shape[:-1])
        nll = ad.sub(ad.logsumexp(logits), ad.pick(logits, targets))
        return ad.mean(nll)

    def config(self):
        out = {"kind": self.kind, "family": self.spec.family, "d": self.spec.d,
               "vocab_size": self.vocab_size, "exp_map": self.exp_map,
               "reproject_every": self.reproject_every}
        if self.eta is not None:
            out["eta"] = self.eta.tolist()
        if self.xi is not None:
            out["xi"] = self.xi.tolist()
        return out


class OSMRNN(_Template):
    """Recurrent template: ``H_{t+1} = H_t Exp(Gamma(Pi(H_t^* M_{x_t})))`` from ``H_0 = I``."""

    kind = "osm-rnn"

    def __init__(self, spec, vocab_size, mixing="linear", **kw):
        super().__init__(spec, vocab_size, **kw)
        self.mixing = normalize_mixing(mixing)

    def init_params(self, rng):
        params = self._token_params(rng)
        mix = init_mixing(self.mixing, self.spec, rng)
        if mix is not None:
            params["mix"] = mix
        return params

    def mixing_spec(self, params):
        return MixingSpec(self.mixing, params.get("mix"))

    def initial_state(self, batch=None):
        eye = np.eye(self.spec.d, dtype=self.spec.dtype)
        return eye if batch is None else np.broadcast_to(eye, (batch, self.spec.d, self.spec.d)).copy()

    def tangent(self, params, h, m):
        """Mixed tangent update ``Gamma(Pi(H^* M))``."""
        raw = ad.project(self.spec, ad.matmul(ad.adjoint(h), m))
        return apply_mixing(self.mixing_spec(params), self.spec, raw)

    def step(self, params, h, token, embeddings=None, reproject_now=False):
        """One recurrent step from state ``h`` on token id(s) ``token``."""
        token = np.asarray(token, dtype=np.intp)
        if token.min() < 0 or token.max() >= self.vocab_size:
            raise ShapeError(f"token id out of vocabulary (size {self.vocab_size})")
        if embeddings is None:
            embeddings = self.embeddings(params)
        m = ad.gather(embeddings, token)
        out = ad.matmul(h, group_exp(self.tangent(params, h, m), self.exp_map))
        return reproject(out) if reproject_now else out

    def rollout(self, params, tokens, trace=None):
        """States ``H_1..H_T`` stacked on axis 1, shape (B, T, d, d)."""
        tokens = self._check_tokens(tokens)
        emb = self.embeddings(params)
        h = self.initial_state(tokens.shape[0])
        states = []
        for t in range(tokens.shape[1]):
            m = ad.gather(emb, tokens[:, t])
            u = self.tangent(params, h, m)
            h = ad.matmul(h, group_exp(u, self.exp_map))
            if self.reproject_every and (t + 1) % self.reproject_every == 0:
                h = reproject(h)
            if trace is not None:
                trace.append({"position": t, "tangent": ad.value(u), "state": ad.value(h)})
            states.append(h)
        return ad.stack(states, axis=1)

    def forward(self, params, tokens, trace=None):
        """Logits of shape (B, T, V); position t predicts token t+1."""
        return self.readout_logits(params, self.rollout(params, tokens, trace))

    def config(self):
        out = super().config()
        out["mixing"] = self.mixing
        return out


class OSMFormer(_Template):
    """Attention template: per layer, an attention step toward the weighted
    aggregate of states, then a grounding step toward the token embedding."""

    kind = "osmformer"

    def __init__(self, spec, vocab_size, num_layers=1, mixing_attn="linear", mixing_ground="linear",
                 alibi_slope=DEFAULT_ALIBI_SLOPE, **kw):
        super().__init__(spec, vocab_size, **kw)
        if num_layers < 1:
            raise ShapeError("need at least one layer")
        self.num_layers = int(num_layers)
        self.mixing_attn = normalize_mixing(mixing_attn)
        self.mixing_ground = normalize_mixing(mixing_ground)
        self.alibi_slope = float(alibi_slope)

    def init_params(self, rng):
        params = self._token_params(rng)
        params["log_tau_attn"] = np.array(-0.5 * np.log(self.spec.d))
        for layer in range(self.num_layers):
            for slot, mode in (("attn", self.mixing_attn), ("ground", self.mixing_ground)):
                mix = init_mixing(mode, self.spec, rng)
                if mix is not None:
                    params[f"layers.{layer}.{slot}"] = mix
        return params

    def mixing_spec(self, params, layer, slot):
        mode = self.mixing_attn if slot == "attn" else self.mixing_ground
        return MixingSpec(mode, params.get(f"layers.{layer}.{slot}"))

    def layer(self, params, layer, h, m, trace=None, step_count=0):
        """One layer on states ``h`` (B, T, d, d) with token embeddings ``m``."""
        spec = self.spec
        alpha = attention_weights(h, ad.exp(params["log_tau_attn"]), self.alibi_slope)
        hv = ad.value(h)
        lead, t, d = hv.shape[:-3], hv.shape[-3], spec.d
        flat = ad.reshape(h, lead + (t, d * d))
        agg = ad.reshape(ad.matmul(alpha, flat), hv.shape)
        z = apply_mixing(self.mixing_spec(params, layer, "attn"), spec,
                         ad.project(spec, ad.matmul(ad.adjoint(h), agg)))
        h_mid = ad.matmul(h, group_exp(z, self.exp_map))
        if self.reproject_every and (step_count + 1) % self.reproject_every == 0:
            h_mid = reproject(h_mid)
        g = apply_mixing(self.mixing_spec(params, layer, "ground"), spec,
                         ad.project(spec, ad.matmul(ad.adjoint(h_mid), m)))
        out = ad.matmul(h_mid, group_exp(g, self.exp_map))
        if self.reproject_every and (step_count + 2) % self.reproject_every == 0:
            out = reproject(out)
        if trace is not None:
            trace.append({"layer": layer, "alpha": ad.value(alpha), "attn": ad.value(z),
                          "ground": ad.value(g), "state": ad.value(out)})
        return out

    def rollout(self, params, tokens, trace=None):
        tokens = self._check_tokens(tokens)
        m = ad.gather(self.embeddings(params), tokens)
        h = m
        for layer in range(self.num_layers):
            h = self.layer(params, layer, h, m, trace=trace, step_count=2 * layer)
        return h

    def forward(self, params, tokens, trace=None):
        """Logits of shape (B, T, V); position i predicts token i+1."""
        return self.readout_logits(params, self.rollout(params, tokens, trace))

    def config(self):
        out = super().config()
        out.update(num_layers=self.num_layers, mixing_attn=self.mixing_attn,
                   mixing_ground=self.mixing_ground, alibi_slope=self.alibi_slope)
        return out


def build_model(cfg):
    """Model from a ``config()``-style mapping."""
    cfg = dict(cfg)
    kind = cfg.pop("kind")
    spec = grp.SubgroupSpec(cfg.pop("family"), cfg.pop("d"))
    vocab = cfg.pop("vocab_size")
    if kind == "osm-rnn":
        return OSMRNN(spec, vocab, **cfg)
    if kind == "osmformer":
        return OSMFormer(spec, vocab, **cfg)
    raise ShapeError(f"unknown model kind {kind!r}")
