"""Character-level training and evaluation: corpus handling, batching,
Adam with decoupled weight decay, global-norm clipping, bits-per-character,
early stopping."""
import copy
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError, NumericAbort, NumericRangeError

log = logging.getLogger(__name__)

LN2 = math.log(2.0)
METRIC_FIELDS = ("epoch", "step", "train_bpc", "val_bpc", "wallclock_s", "grad_norm", "drift")
MAX_CONSECUTIVE_SKIPS = 10


class NonFiniteGradientError(NumericRangeError):
    pass


@dataclass
class Corpus:
    """Text with a sorted character vocabulary and contiguous train/val/test spans."""

    text: str
    vocab: list
    ids: np.ndarray
    splits: dict

    @classmethod
    def from_text(cls, text, fractions=(0.8, 0.1, 0.1), offsets=None):
        if not text:
            raise DataError("corpus is empty")
        vocab = sorted(set(text))
        index = {ch: i for i, ch in enumerate(vocab)}
        ids = np.fromiter((index[ch] for ch in text), dtype=np.intp, count=len(text))
        n = len(text)
        if offsets is None:
            if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
                raise DataError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
            a = int(round(fractions[0] * n))
            b = a + int(round(fractions[1] * n))
            offsets = (a, b)
        a, b = offsets
        if not 0 <= a <= b <= n:
            raise DataError(f"split offsets {offsets} out of range for {n} characters")
        splits = {"train": (0, a), "val": (a, b), "test": (b, n)}
        return cls(text, vocab, ids, splits)

    @classmethod
    def from_file(cls, path, **kw):
        try:
            with open(path, "rb") as fh:
                raw = fh.read()
        except OSError as exc:
            raise DataError(f"cannot read corpus {path}: {exc}") from exc
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DataError(f"corpus {path} is not valid UTF-8") from exc
        return cls.from_text(text, **kw)

    @property
    def vocab_size(self):
        return len(self.vocab)

    def split(self, name):
        try:
            a, b = self.splits[name]
        except KeyError:
            raise DataError(f"unknown split {name!r}") from None
        return self.ids[a:b]


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    clip_norm: float = 1.0
    patience: int = 50
    seq_len: int = 64
    seed: int = 0
    max_epochs: int = 1000
    max_steps: int = 0
    eval_every: int = 1
    eval_batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    log_wallclock: bool = False
    trace_every: int = 100

    def __post_init__(self):
        positive = ("batch_size", "clip_norm", "patience", "max_epochs", "eval_every",
                    "eval_batch_size", "eps")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"train.{name} must be positive, got {getattr(self, name)!r}")
        for name in ("lr", "weight_decay", "max_steps", "trace_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"train.{name} must be non-negative, got {getattr(self, name)!r}")
        if self.seq_len < 2:
            raise ConfigError("train.seq_len must be at least 2")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")

    def to_dict(self):
        return dataclasses.asdict(self)


def batches_per_epoch(n, seq_len, batch_size):
    return n // (seq_len * batch_size)


def make_batches(corpus, split, seq_len, batch_size, seed):
    """One epoch of seeded random contiguous windows.

    Yields ``(inputs, targets)`` integer arrays of shape (batch, seq_len);
    targets are the inputs shifted by one character.
    """
    if seq_len < 2:
        raise DataError("seq_len must be at least 2")
    ids = corpus.split(split)
    n = len(ids)
    if n < seq_len + 1:
        raise DataError(f"{split} split has {n} characters; need at least {seq_len + 1}")
    count = batches_per_epoch(n, seq_len, batch_size)
    if count == 0:
        raise DataError(f"{split} split too short for one batch of {batch_size}x{seq_len}")
    rng = np.random.default_rng(seed)
    offsets = np.arange(seq_len + 1)
    for _ in range(count):
        starts = rng.integers(0, n - seq_len, size=batch_size)
        windows = ids[starts[:, None] + offsets]
        yield windows[:, :-1], windows[:, 1:]


def loss_bpc(logits, targets):
    """Mean cross-entropy (nats) and bits per character."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.intp)
    if logits.shape[:-1] != targets.shape:
        raise DataError(f"need one logit row per target: {logits.shape} vs {targets.shape}")
    if not np.all(np.isfinite(logits)):
        raise NumericRangeError("non-finite logits")
    nll = ad.logsumexp(logits) - ad.pick(logits, targets)
    ce = float(np.mean(nll))
    return ce, ce / LN2


def global_norm(grads):
    total = 0.0
    for name in sorted(grads):
        g = grads[name]
        total += float(np.sum(np.abs(g) ** 2))
    return math.sqrt(total)


def clip_gradients(grads, max_norm):
    """Scale all gradients by ``max_norm / norm`` when the global L2 norm exceeds it.

    Returns ``(grads, norm_before)``.
    """
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads), norm
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}, norm


def _decays(name):
    return not name.startswith("log_tau")


def _real_view(x):
    if np.iscomplexobj(x):
        return np.ascontiguousarray(x).view(np.float64)
    return x


def init_adam(params):
    return {"m": {k: np.zeros_like(v) for k, v in params.items()},
            "v": {k: np.zeros_like(_real_view(v)) for k, v in params.items()},
            "step": 0}


def adam_step(params, grads, state, config):
    """One Adam update with decoupled weight decay; returns new ``(params, state)``.

    Complex parameters are updated as pairs of independent real coordinates.
    Temperatures (``log_tau*``) are not decayed.
    """
    for name in sorted(grads):
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteGradientError(f"non-finite gradient for {name}")
    b1, b2, eps, lr = config.beta1, config.beta2, config.eps, config.lr
    t = state["step"] + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name in sorted(params):
        p = np.array(params[name], copy=True)
        g = _real_view(np.asarray(grads[name], dtype=p.dtype))
        pr = _real_view(p)
        if config.weight_decay and _decays(name):
            pr -= lr * config.weight_decay * pr
        m = b1 * _real_view(state["m"][name]) + (1.0 - b1) * g
        v = b2 * state["v"][name] + (1.0 - b2) * g * g
        pr -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_params[name] = p
        new_m[name] = m.view(p.dtype).reshape(p.shape) if np.iscomplexobj(p) else m
        new_v[name] = v
    return new_params, {"m": new_m, "v": new_v, "step": t}


def count_params(model):
    """Trainable real scalars, itemized by component, plus ``total``."""
    out = {"embeddings": 0, "prototypes": 0, "biases": 0, "mixing": 0, "temperatures": 0}
    groups = model.param_groups()
    for name, (shape, dtype) in model.param_shapes().items():
        n = int(np.prod(shape, dtype=np.int64))
        if np.issubdtype(dtype, np.complexfloating):
            n *= 2
        out[groups[name]] += n
    out["total"] = sum(out.values())
    return out


def value_and_grad(model, params, inputs, targets):
    """Loss (nats), gradients and final-position states."""
    tape = ad.Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    states = model.rollout(leaves, inputs)
    logits = model.readout_logits(leaves, states)
    nll = ad.sub(ad.logsumexp(logits), ad.pick(logits, np.asarray(targets, dtype=np.intp)))
    loss = ad.mean(nll)
    raw = tape.backward(loss)
    grads = {k: raw[leaf.id] for k, leaf in leaves.items()}
    return float(loss.value), grads, ad.value(states)[:, -1]


def max_drift(states):
    from .diagnostics import drift
    return float(np.max(drift(states))) if np.size(states) else 0.0


def eval_windows(n, seq_len):
    """Non-overlapping windows ``(start, length)`` covering every prediction target."""
    out = []
    start = 0
    while start < n - 1:
        length = min(seq_len, n - 1 - start)
        out.append((start, length))
        start += length
    return out


def evaluate(model, params, corpus, split, seq_len, batch_size=32):
    """Bits per character on a split; the state resets at every window boundary."""
    ids = corpus.split(split)
    if len(ids) < 2:
        raise DataError(f"{split} split needs at least two characters")
    windows = eval_windows(len(ids), seq_len)
    sums = np.zeros(len(windows))
    by_len = {}
    for k, (start, length) in enumerate(windows):
        by_len.setdefault(length, []).append(k)
    for length, members in sorted(by_len.items()):
        for i in range(0, len(members), batch_size):
            chunk = members[i:i + batch_size]
            starts = np.array([windows[k][0] for k in chunk])
            idx = starts[:, None] + np.arange(length + 1)
            win = ids[idx]
            logits = model.forward(params, win[:, :-1])
            if not np.all(np.isfinite(logits)):
                raise NumericRangeError("non-finite logits during evaluation")
            nll = ad.logsumexp(logits) - ad.pick(logits, win[:, 1:])
            sums[chunk] = nll.sum(axis=1)
    return float(np.sum(sums) / (len(ids) - 1) / LN2)


@dataclass
class TrainRun:
    history: list = field(default_factory=list)
    best_params: dict = None
    best_opt: dict = None
    best_val_bpc: float = math.inf
    best_epoch: int = 0
    test_bpc: float = math.nan
    steps: int = 0
    epochs: int = 0
    skipped_steps: int = 0
    params: dict = None
    opt: dict = None


class Trainer:
    """Holds parameters and optimizer state; one :meth:`step` per batch."""

    def __init__(self, model, config, params=None, opt=None):
        self.model = model
        self.config = config
        if params is None:
            params = model.init_params(np.random.default_rng(config.seed))
        self.params = params
        self.opt = opt if opt is not None else init_adam(params)
        self.skipped = 0
        self.consecutive_skips = 0

    @property
    def step_count(self):
        return self.opt["step"]

    def step(self, inputs, targets):
        """Forward/backward/update. Returns ``(loss_nats, grad_norm, drift)``;
        a step with non-finite gradients is skipped and returns ``None``."""
        loss, grads, last = value_and_grad(self.model, self.params, inputs, targets)
        try:
            if not math.isfinite(loss):
                raise NonFiniteGradientError("non-finite loss")
            clipped, norm = clip_gradients(grads, self.config.clip_norm)
            self.params, self.opt = adam_step(self.params, clipped, self.opt, self.config)
        except NonFiniteGradientError as exc:
            self.skipped += 1
            self.consecutive_skips += 1
            log.warning("skipping step: %s (%d consecutive)", exc, self.consecutive_skips)
            if self.consecutive_skips >= MAX_CONSECUTIVE_SKIPS:
                raise NumericAbort(f"{self.consecutive_skips} consecutive non-finite steps") from exc
            return None
        self.consecutive_skips = 0
        return loss, norm, max_drift(last)


def epoch_seed(seed, epoch):
    return int(np.random.SeedSequence([int(seed), int(epoch)]).generate_state(1)[0])


def metric_record(epoch, step, train_bpc, val_bpc, wallclock, grad_norm, drift):
    return dict(zip(METRIC_FIELDS, (epoch, step, train_bpc, val_bpc, wallclock, grad_norm, drift)))


def train(model, corpus, config, on_record=None, on_best=None, on_step=None):
    """Epoch loop with per-epoch validation and patience-based early stopping.

    ``on_record(record)`` receives each metrics record; ``on_best(run)`` is
    called whenever validation improves (e.g. to write a checkpoint);
    ``on_step(trainer)`` runs after every optimizer step.
    """
    if model.vocab_size != corpus.vocab_size:
        raise DataError(f"model vocabulary {model.vocab_size} != corpus vocabulary {corpus.vocab_size}")
    n_train = len(corpus.split("train"))
    if batches_per_epoch(n_train, config.seq_len, config.batch_size) == 0 or n_train < config.seq_len + 1:
        raise DataError("train split too short for one batch")
    for name in ("val", "test"):
        if len(corpus.split(name)) < 2:
            raise DataError(f"{name} split needs at least two characters")

    trainer = Trainer(model, config)
    run = TrainRun()
    t0 = time.perf_counter()
    since_best = 0
    done = False
    for epoch in range(1, config.max_epochs + 1):
        losses, norm, drift = [], 0.0, 0.0
        for inputs, targets in make_batches(corpus, "train", config.seq_len, config.batch_size,
                                            epoch_seed(config.seed, epoch)):
            out = trainer.step(inputs, targets)
            if out is not None:
                loss, norm, drift = out
                losses.append(loss)
            if on_step is not None:
                on_step(trainer)
            if config.max_steps and trainer.step_count >= config.max_steps:
                done = True
                break
        run.epochs = epoch
        if epoch % config.eval_every and not done:
            continue
        val = evaluate(model, trainer.params, corpus, "val", config.seq_len, config.eval_batch_size)
        train_bpc = float(np.mean(losses) / LN2) if losses else math.nan
        wall = round(time.perf_counter() - t0, 3) if config.log_wallclock else None
        rec = metric_record(epoch, trainer.step_count, train_bpc, val, wall, norm, drift)
        run.history.append(rec)
        if on_record is not None:
            on_record(rec)
        if val < run.best_val_bpc:
            run.best_val_bpc = val
            run.best_epoch = epoch
            run.best_params = copy.deepcopy(trainer.params)
            run.best_opt = copy.deepcopy(trainer.opt)
            since_best = 0
            if on_best is not None:
                on_best(run)
        else:
            since_best += config.eval_every
        if since_best >= config.patience or done:
            break
    run.steps = trainer.step_count
    run.skipped_steps = trainer.skipped
    run.params, run.opt = trainer.params, trainer.opt
    run.test_bpc = evaluate(model, run.best_params, corpus, "test", config.seq_len, config.eval_batch_size)
    return run


def format_record(rec):
    """One metrics line with stable field order."""
    return json.dumps({k: rec[k] for k in METRIC_FIELDS})
