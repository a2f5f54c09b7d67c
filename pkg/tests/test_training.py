import copy
import math

import numpy as np
import pytest

from liestate import checkpoint as ckpt
from liestate import models
from liestate import training as tr
from liestate.errors import ConfigError, DataError, NumericAbort, NumericRangeError


def ab_corpus(n=5000):
    return tr.Corpus.from_text("ab" * n)


# corpus / batching -------------------------------------------------------------

def test_corpus_splits():
    c = tr.Corpus.from_text("hello world" * 10)
    assert c.vocab == sorted(set("hello world"))
    spans = [c.splits[k] for k in ("train", "val", "test")]
    assert spans[0][0] == 0 and spans[0][1] == spans[1][0] and spans[1][1] == spans[2][0]
    assert spans[2][1] == 110
    assert spans == [(0, 88), (88, 99), (99, 110)]
    c2 = tr.Corpus.from_text("abcdefghij", offsets=(6, 8))
    assert "".join(c2.vocab[i] for i in c2.split("val")) == "gh"
    with pytest.raises(DataError):
        tr.Corpus.from_text("")
    with pytest.raises(DataError):
        tr.Corpus.from_text("abc", offsets=(2, 1))
    with pytest.raises(DataError):
        tr.Corpus.from_text("abc", fractions=(0.5, 0.6, 0.1))
    with pytest.raises(DataError):
        c.split("dev")


def test_corpus_from_file(tmp_path):
    p = tmp_path / "c.txt"
    p.write_bytes("naïve ±".encode("utf-8"))
    assert "ï" in tr.Corpus.from_file(p).vocab
    p.write_bytes(b"\xff\xfe")
    with pytest.raises(DataError):
        tr.Corpus.from_file(p)
    with pytest.raises(DataError):
        tr.Corpus.from_file(tmp_path / "missing.txt")


def test_batch_window_offsets():
    c = tr.Corpus.from_text("ababab", fractions=(1.0, 0.0, 0.0))
    x, y = next(tr.make_batches(c, "train", 3, 1, 0))
    to_text = lambda row: "".join(c.vocab[i] for i in row)  # noqa: E731
    assert (to_text(x[0]), to_text(y[0])) in {("aba", "bab"), ("bab", "aba")}
    assert np.array_equal(x[0, 1:], y[0, :-1])


def test_batches_deterministic_and_counted():
    c = tr.Corpus.from_text("".join(chr(97 + i % 7) for i in range(3000)))
    n = len(c.split("train"))
    a = list(tr.make_batches(c, "train", 8, 4, 11))
    b = list(tr.make_batches(c, "train", 8, 4, 11))
    assert len(a) == n // (8 * 4) == tr.batches_per_epoch(n, 8, 4)
    assert all(np.array_equal(p[0], q[0]) and np.array_equal(p[1], q[1]) for p, q in zip(a, b))
    other = list(tr.make_batches(c, "train", 8, 4, 12))
    assert not all(np.array_equal(p[0], q[0]) for p, q in zip(a, other))


def test_batches_too_short():
    c = tr.Corpus.from_text("abcd", fractions=(1.0, 0.0, 0.0))
    with pytest.raises(DataError):
        list(tr.make_batches(c, "train", 4, 1, 0))
    with pytest.raises(DataError):
        list(tr.make_batches(c, "train", 1, 1, 0))


# loss ---------------------------------------------------------------------------

def test_loss_bpc_examples():
    ce, bpc = tr.loss_bpc(np.zeros((2, 3, 65)), np.zeros((2, 3), dtype=int))
    assert abs(bpc - math.log2(65)) < 1e-14 and abs(bpc - 6.022) < 1e-3
    assert tr.loss_bpc(np.zeros((4, 2)), np.array([0, 1, 1, 0]))[1] == 1.0
    logits = np.full((3, 4), -1e4)
    logits[np.arange(3), [1, 2, 3]] = 1e4
    assert tr.loss_bpc(logits, np.array([1, 2, 3]))[1] == 0.0
    with pytest.raises(NumericRangeError):
        tr.loss_bpc(np.array([[np.nan, 0.0]]), np.array([0]))
    with pytest.raises(DataError):
        tr.loss_bpc(np.zeros((3, 4)), np.zeros(2, dtype=int))


# optimizer ----------------------------------------------------------------------

def cfg(**kw):
    return tr.TrainConfig(**kw)


def test_adam_zero_gradient_no_decay():
    params = {"w": np.array([1.0, -2.0]), "z": np.array([1 + 1j])}
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    new, state = tr.adam_step(params, grads, tr.init_adam(params), cfg(weight_decay=0.0))
    assert all(np.array_equal(new[k], params[k]) for k in params)
    assert state["step"] == 1


def test_adam_hand_trace():
    lr, wd, b1, b2, eps = 1e-3, 1e-4, 0.9, 0.999, 1e-8
    p0, gs = 0.7, [0.3, -0.1, 0.25]
    params = {"w": np.array(p0), "log_tau": np.array(p0)}
    state = tr.init_adam(params)
    p, m, v = p0, 0.0, 0.0
    q = p0
    for t, g in enumerate(gs, start=1):
        p = p - lr * wd * p
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        q = q - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        params, state = tr.adam_step(params, {"w": np.array(g), "log_tau": np.array(g)}, state, cfg())
    assert abs(float(params["w"]) - p) < 1e-16
    assert abs(float(params["log_tau"]) - q) < 1e-16  # temperatures are not decayed
    # first step from zero moments: a unit step against the gradient sign
    one, _ = tr.adam_step({"w": np.array(0.0)}, {"w": np.array(5.0)}, tr.init_adam({"w": 0}), cfg())
    assert abs(float(one["w"]) + 1e-3 * 5.0 / (5.0 + 1e-8)) < 1e-18


def test_adam_unit_step_limit():
    params = {"w": np.zeros(3)}
    state = tr.init_adam(params)
    c = cfg(weight_decay=0.0, lr=0.01)
    for _ in range(2000):
        prev = params["w"].copy()
        params, state = tr.adam_step(params, {"w": np.array([0.5, -3.0, 1e-3])}, state, c)
    assert np.allclose(prev - params["w"], [0.01, -0.01, 0.01], rtol=1e-4)


def test_adam_complex_as_real_pairs():
    z = {"z": np.array([1.0 + 2.0j])}
    r = {"z": np.array([1.0, 2.0])}
    zs, rs = tr.init_adam(z), tr.init_adam(r)
    for g in ([0.3 - 0.2j], [-0.1 + 0.4j]):
        z, zs = tr.adam_step(z, {"z": np.array(g)}, zs, cfg())
        r, rs = tr.adam_step(r, {"z": np.array([g[0].real, g[0].imag])}, rs, cfg())
    assert z["z"][0].real == r["z"][0] and z["z"][0].imag == r["z"][1]


def test_adam_rejects_non_finite():
    params = {"w": np.zeros(2)}
    with pytest.raises(tr.NonFiniteGradientError):
        tr.adam_step(params, {"w": np.array([np.nan, 0.0])}, tr.init_adam(params), cfg())


def test_clip_examples():
    g = {"a": np.array([0.3, 0.4])}
    out, norm = tr.clip_gradients(g, 1.0)
    assert norm == 0.5 and np.array_equal(out["a"], g["a"])
    g = {"a": np.array([2.0, 2.0]), "b": np.array([[2.0, -2.0]])}
    out, norm = tr.clip_gradients(g, 1.0)
    assert norm == 4.0
    assert np.array_equal(out["a"], g["a"] * 0.25)
    assert abs(tr.global_norm(out) - 1.0) < 1e-12
    assert tr.clip_gradients({}, 1.0) == ({}, 0.0)
    z = {"z": np.array([3.0 + 4.0j])}
    assert tr.clip_gradients(z, 1.0)[1] == 5.0


def test_clip_never_exceeds(rng):
    for _ in range(50):
        g = {k: rng.normal(size=(3,)) * 10 ** rng.uniform(-3, 3) for k in "abc"}
        out, _ = tr.clip_gradients(g, 0.7)
        assert tr.global_norm(out) <= 0.7 + 1e-12


def test_config_validation():
    assert cfg().lr == 1e-3 and cfg().weight_decay == 1e-4 and cfg().batch_size == 32
    assert cfg().clip_norm == 1.0 and cfg().patience == 50
    for bad in ({"batch_size": 0}, {"clip_norm": -1}, {"lr": -1e-3}, {"seq_len": 1}, {"beta2": 1.0}):
        with pytest.raises(ConfigError):
            cfg(**bad)


# parameter counting -------------------------------------------------------------

def test_count_params_formula():
    d, v = 6, 11
    n = d * (d - 1) // 2
    rnn = models.OSMRNN("SO(6)", v, mixing="linear")
    counts = tr.count_params(rnn)
    assert counts == {"embeddings": v * d * d, "prototypes": v * d * d, "biases": v, "mixing": n * n,
                      "temperatures": 1, "total": 2 * v * d * d + v + n * n + 1}
    assert tr.count_params(models.OSMRNN("SO(6)", v, mixing="identity"))["total"] == counts["total"] - n * n
    u = tr.count_params(models.OSMFormer("U(3)", 4, num_layers=2, mixing_attn="scale"))
    assert u["embeddings"] == 4 * 9 * 2 and u["mixing"] == 2 * 9 + 2 * 81 and u["temperatures"] == 2


# evaluation ---------------------------------------------------------------------

def test_eval_windows_cover_every_target():
    for n in (2, 3, 10, 65, 130):
        w = tr.eval_windows(n, 32)
        covered = [s + k for s, length in w for k in range(length)]
        assert covered == list(range(n - 1))


def test_eval_partition_invariance(rng):
    text = "".join(rng.choice(list("abcde"), size=900))
    corpus = tr.Corpus.from_text(text)
    model = models.OSMFormer("SO(3)", corpus.vocab_size)
    params = model.init_params(rng)
    vals = [tr.evaluate(model, params, corpus, "val", 16, batch_size=b) for b in (1, 2, 5, 64)]
    assert max(vals) - min(vals) < 1e-13


def test_eval_matches_manual_windows(rng):
    corpus = tr.Corpus.from_text("".join(rng.choice(list("xyz"), size=400)))
    model = models.OSMRNN("SO(3)", 3)
    params = model.init_params(rng)
    ids = corpus.split("val")
    total = 0.0
    for s, length in tr.eval_windows(len(ids), 7):
        win = ids[s:s + length + 1]
        ce, _ = tr.loss_bpc(model.forward(params, win[None, :-1]), win[None, 1:])
        total += ce * length
    assert abs(tr.evaluate(model, params, corpus, "val", 7) - total / (len(ids) - 1) / math.log(2)) < 1e-13


# training loop ------------------------------------------------------------------

SMALL = dict(seq_len=16, batch_size=8, max_steps=40, patience=100, seed=3)


def test_training_reduces_loss():
    corpus = ab_corpus(2000)
    model = models.OSMRNN("SO(4)", 2)
    run = tr.train(model, corpus, cfg(**dict(SMALL, max_steps=150, lr=1e-2)))
    assert run.history[-1]["train_bpc"] < 0.1 * run.history[0]["train_bpc"]
    assert run.steps == 150


def test_training_deterministic():
    corpus = ab_corpus(1000)
    runs = [tr.train(models.OSMFormer("SO(3)", 2), corpus, cfg(**SMALL)) for _ in range(2)]
    assert [tr.format_record(r) for r in runs[0].history] == [tr.format_record(r) for r in runs[1].history]
    assert runs[0].test_bpc == runs[1].test_bpc


def test_patience_with_zero_lr():
    corpus = ab_corpus(1000)
    run = tr.train(models.OSMRNN("SO(3)", 2), corpus, cfg(**dict(SMALL, lr=0.0, patience=1, max_steps=0)))
    assert run.epochs == 2
    assert run.history[0]["val_bpc"] == run.history[1]["val_bpc"]


def test_metric_record_fields():
    corpus = ab_corpus(1000)
    run = tr.train(models.OSMRNN("SO(3)", 2), corpus, cfg(**dict(SMALL, max_steps=10)))
    rec = run.history[0]
    assert tuple(rec) == tr.METRIC_FIELDS
    assert rec["wallclock_s"] is None
    timed = tr.train(models.OSMRNN("SO(3)", 2), corpus, cfg(**dict(SMALL, max_steps=10, log_wallclock=True)))
    assert timed.history[0]["wallclock_s"] >= 0


def test_train_rejects_bad_data():
    with pytest.raises(DataError):
        tr.train(models.OSMRNN("SO(3)", 3), ab_corpus(100), cfg(**SMALL))
    with pytest.raises(DataError):
        tr.train(models.OSMRNN("SO(3)", 2), ab_corpus(20), cfg(**SMALL))


def test_checkpoint_resume_bit_exact(tmp_path):
    corpus = ab_corpus(3000)
    model = models.OSMFormer("U(2)", 2)
    config = cfg(**SMALL)
    batches = list(tr.make_batches(corpus, "train", 16, 8, 5))[:20]

    straight = tr.Trainer(model, config)
    for x, y in batches:
        straight.step(x, y)

    first = tr.Trainer(model, config)
    for x, y in batches[:10]:
        first.step(x, y)
    path = tmp_path / "mid.ckpt"
    ckpt.save(path, model.config(), first.params, first.opt)
    _, params, opt, _ = ckpt.load(path)
    resumed = tr.Trainer(model, config, params=params, opt=opt)
    for x, y in batches[10:]:
        resumed.step(x, y)
    assert resumed.step_count == straight.step_count == 20
    for k in straight.params:
        assert np.array_equal(straight.params[k], resumed.params[k])
        assert np.array_equal(straight.opt["m"][k], resumed.opt["m"][k])


def test_non_finite_steps_skipped_then_abort(monkeypatch):
    corpus = ab_corpus(500)
    model = models.OSMRNN("SO(3)", 2)
    trainer = tr.Trainer(model, cfg(**SMALL))
    x, y = next(tr.make_batches(corpus, "train", 16, 8, 0))
    real = tr.value_and_grad
    bad = {"n": 0}

    def poisoned(*args):
        loss, grads, last = real(*args)
        if bad["n"]:
            bad["n"] -= 1
            grads = dict(grads, bias=grads["bias"] * np.nan)
        return loss, grads, last

    monkeypatch.setattr(tr, "value_and_grad", poisoned)
    before = copy.deepcopy(trainer.params)
    bad["n"] = 3
    assert all(trainer.step(x, y) is None for _ in range(3))
    assert trainer.skipped == 3 and trainer.step_count == 0
    assert all(np.array_equal(before[k], trainer.params[k]) for k in before)
    assert trainer.step(x, y) is not None and trainer.consecutive_skips == 0
    bad["n"] = 100
    with pytest.raises(NumericAbort):
        for _ in range(10):
            trainer.step(x, y)
    assert trainer.consecutive_skips == tr.MAX_CONSECUTIVE_SKIPS


def test_epoch_seeds_distinct():
    seeds = {tr.epoch_seed(0, e) for e in range(1, 50)}
    assert len(seeds) == 49
    assert tr.epoch_seed(1, 1) != tr.epoch_seed(0, 1)
