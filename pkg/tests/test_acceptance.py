"""Acceptance criteria, each at its stated tolerance and runtime budget.

Every test records one PASS/FAIL line, collected in the terminal summary.
Criterion 8 needs a Tiny Shakespeare file named by ``LIESTATE_TINY_SHAKESPEARE``
and is never gating.
"""
import json
import os
import time

import numpy as np
import pytest
import scipy.linalg as sla

from liestate import autodiff as ad
from liestate import cli
from liestate import groups as grp
from liestate import matrix as mx
from liestate import models
from liestate import training as tr
from liestate.diagnostics import channel_split, drift

from conftest import FAMILIES, random_raw, record_criterion
from test_models import perturb, t_former


def spectral_expm(a):
    # a real skew -> i*a Hermitian; exp(a) = V exp(-i w) V^*
    w, v = np.linalg.eigh(1j * a)
    return ((v * np.exp(-1j * w)[..., None, :]) @ v.conj().swapaxes(-1, -2)).real


def test_c01_group_map():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    orth = det = oracle = 0.0
    for d in (2, 4, 8, 16):
        x = rng.normal(size=(1000, d, d))
        a = x - x.swapaxes(-1, -2)
        q = mx.expm(a)
        eye = np.eye(d)
        orth = max(orth, float(np.max(np.linalg.norm(q.swapaxes(-1, -2) @ q - eye, axis=(-2, -1)))))
        det = max(det, float(np.max(np.abs(np.linalg.det(q) - 1.0))))
        oracle = max(oracle, float(np.max(np.abs(q - spectral_expm(a)))))
    secs = time.perf_counter() - t0
    ok = orth < 1e-12 and det < 1e-10 and oracle < 1e-10 and secs < 30
    record_criterion(1, ok, f"group map: orth {orth:.2e} (<1e-12), det {det:.2e} (<1e-10), "
                            f"oracle {oracle:.2e} (<1e-10), {secs:.1f}s (<30s)")
    assert ok


def test_c02_subgroup_drop_ins():
    rng = np.random.default_rng(102)
    t0 = time.perf_counter()
    idem = unit = 0.0
    ranks_ok = True
    for family in FAMILIES:
        for d in (2, 3, 4, 6):
            spec = grp.SubgroupSpec(family, d)
            p = grp.project_tangent(spec, random_raw(spec, rng, 200))
            idem = max(idem, float(np.max(np.abs(grp.project_tangent(spec, p) - p))))
            basis = grp.algebra_basis(spec).reshape(spec.algebra_dim, -1)
            real = np.concatenate([basis.real, basis.imag], axis=1)
            ranks_ok &= int(np.linalg.matrix_rank(real)) == spec.algebra_dim
            raw = grp.init_token_raw(spec, 200, rng)
            raw = raw * rng.uniform(0.1, 50.0, size=200).reshape((-1,) + (1,) * (raw.ndim - 1))
            m = models.token_groups(spec, raw)
            unit = max(unit, float(np.max(drift(m))))
    secs = time.perf_counter() - t0
    ok = idem < 1e-14 and ranks_ok and unit < 1e-12 and secs < 30
    record_criterion(2, ok, f"drop-ins: idempotence {idem:.2e}, ranks exact {ranks_ok}, "
                            f"token drift {unit:.2e} (<1e-12), {secs:.1f}s (<30s)")
    assert ok


def test_c03_template_transcription():
    rng = np.random.default_rng(103)
    t0 = time.perf_counter()
    worst = 0.0
    for family in FAMILIES:
        model = models.OSMFormer(family + "(4)", 5, num_layers=2)
        params = perturb(model.init_params(rng), rng)
        tokens = np.array([3, 0, 4])
        got = model.forward(params, tokens[None])[0]
        want = t_former(params, family, 4, 2, "linear", "linear", model.alibi_slope, tokens)
        worst = max(worst, float(np.max(np.abs(got - want))))
    secs = time.perf_counter() - t0
    ok = worst < 1e-12 and secs < 5
    record_criterion(3, ok, f"transcription d=4 T=3 L=2: max |diff| {worst:.2e} (<1e-12), {secs:.1f}s (<5s)")
    assert ok


def test_c04_gradients():
    rng = np.random.default_rng(104)
    t0 = time.perf_counter()
    worst = 0.0
    for spec in ("SO(4)", "U(4)"):
        for model in (models.OSMRNN(spec, 5), models.OSMFormer(spec, 5, num_layers=1)):
            params = perturb(model.init_params(rng), rng)
            x = rng.integers(0, 5, size=(1, 6))
            y = rng.integers(0, 5, size=(1, 6))
            err = ad.finite_diff_check(lambda p: model.loss(p, x, y), params, fraction=1.0)
            worst = max(worst, err)
    secs = time.perf_counter() - t0
    ok = worst < 1e-6 and secs < 120
    record_criterion(4, ok, f"gradients vs central differences, every coordinate: max rel err "
                            f"{worst:.2e} (<1e-6), {secs:.1f}s (<120s)")
    assert ok


def test_c05_axioms():
    rng = np.random.default_rng(105)
    # causality: perturbing token k leaves every logit before k bit-identical
    causal = True
    for model in (models.OSMRNN("SO(4)", 6), models.OSMFormer("U(3)", 6, num_layers=2)):
        params = perturb(model.init_params(rng), rng)
        tokens = rng.integers(0, 6, size=(2, 12))
        base = model.forward(params, tokens)
        for k in range(12):
            changed = tokens.copy()
            changed[:, k] = (changed[:, k] + 1) % 6
            out = model.forward(params, changed)
            causal &= np.array_equal(out[:, :k], base[:, :k])
            causal &= not np.array_equal(out[:, k], base[:, k])
    # closure under long rollouts with the re-projection schedule
    worst_drift = 0.0
    for spec in ("SO(6)", "U(4)"):
        model = models.OSMRNN(spec, 7)
        params = perturb(model.init_params(rng), rng, 3.0)
        emb = model.embeddings(params)
        h = model.initial_state()
        for t, tok in enumerate(rng.integers(0, 7, size=10_000)):
            h = model.step(params, h, tok, embeddings=emb, reproject_now=(t + 1) % model.reproject_every == 0)
            worst_drift = max(worst_drift, float(drift(h)))
    # local updates: each transition is H -> H Exp(A) with A in the algebra
    local = 0.0
    model = models.OSMRNN("SU(3)", 4, reproject_every=0)
    params = perturb(model.init_params(rng), rng)
    frames = []
    model.forward(params, rng.integers(0, 4, size=(1, 20)), trace=frames)
    prev = np.eye(3)
    for f in frames:
        a, h = f["tangent"][0], f["state"][0]
        local = max(local, float(np.max(np.abs(grp.project_tangent(model.spec, a) - a))),
                    float(np.max(np.abs(prev @ sla.expm(a) - h))))
        prev = h
    model = models.OSMFormer("SO(4)", 4, num_layers=2, reproject_every=0)
    params = perturb(model.init_params(rng), rng)
    tokens = rng.integers(0, 4, size=(1, 7))
    frames = []
    model.forward(params, tokens, trace=frames)
    prev = model.embeddings(params)[tokens[0]]
    for f in frames:
        z, g, h = f["attn"][0], f["ground"][0], f["state"][0]
        local = max(local, float(np.max(np.abs(prev @ sla.expm(z) @ sla.expm(g) - h))))
        prev = h
    ok = causal and worst_drift < 1e-8 and local < 1e-12
    record_criterion(5, ok, f"axioms: causality bit-exact {causal}, 10^4-step drift {worst_drift:.2e} "
                            f"(<1e-8), local-update residual {local:.2e}")
    assert ok


def test_c06_attention_conjugation():
    rng = np.random.default_rng(106)
    worst = 0.0
    for family in FAMILIES:
        spec = grp.SubgroupSpec(family, 4)
        states = mx.expm(grp.project_tangent(spec, random_raw(spec, rng, 16) * 2)).reshape(2, 8, 4, 4)
        q = mx.expm(grp.project_tangent(spec, random_raw(spec, rng) * 3))
        conj = q @ states @ mx.adjoint(q)
        for tau in (0.5, 3.0):
            a = models.attention_weights(states, tau)
            b = models.attention_weights(conj, tau)
            worst = max(worst, float(np.max(np.abs(a - b))))
    ok = worst < 1e-12
    record_criterion(6, ok, f"attention under global conjugation: max |d alpha| {worst:.2e} (<1e-12)")
    assert ok


@pytest.mark.parametrize("kind, mixing", [("osm-rnn", "identity"), ("osm-rnn", "linear"),
                                          ("osmformer", "identity"), ("osmformer", "linear")])
def test_c07_learning_smoke(kind, mixing):
    corpus = tr.Corpus.from_text("ab" * 5000)
    if kind == "osm-rnn":
        model = models.OSMRNN("SO(6)", corpus.vocab_size, mixing=mixing)
    else:
        model = models.OSMFormer("SO(6)", corpus.vocab_size, num_layers=1, mixing_attn=mixing,
                                 mixing_ground=mixing)
    t0 = time.perf_counter()
    run = tr.train(model, corpus, tr.TrainConfig(max_steps=200, patience=1000, seed=0))
    secs = time.perf_counter() - t0
    ok = run.best_val_bpc < 0.2 and run.steps <= 200 and secs < 60
    record_criterion(7, ok, f"learning smoke {kind}/{mixing}: val {run.best_val_bpc:.4f} BPC (<0.2) "
                            f"in {run.steps} steps, {secs:.1f}s (<60s)")
    assert ok


def test_c08_paper_numbers(tmp_path):
    path = os.environ.get("LIESTATE_TINY_SHAKESPEARE")
    if not path:
        record_criterion(8, False, "non-gating; set LIESTATE_TINY_SHAKESPEARE to a corpus file to run",
                         gating=False, status="SKIP")
        pytest.skip("no Tiny Shakespeare corpus supplied")
    steps = int(os.environ.get("LIESTATE_ACCEPT_STEPS", "2000"))
    corpus = tr.Corpus.from_file(path)
    results = {}
    for mixing, budget in (("linear", 91_429), ("identity", 103_501)):
        cfg = {"kind": "osmformer", "family": "O", "num_layers": 1,
               "mixing_attn": mixing, "mixing_ground": mixing}
        d, _ = cli.choose_dim(cfg, corpus.vocab_size, budget)
        model = models.build_model(dict(cfg, d=d, vocab_size=corpus.vocab_size))
        results[mixing] = tr.train(model, corpus, tr.TrainConfig(max_steps=steps, seed=0))
    lin, ident = results["linear"], results["identity"]
    near = abs(lin.best_val_bpc - 2.254) <= 0.15 and abs(lin.test_bpc - 2.464) <= 0.15
    ordered = lin.best_val_bpc <= ident.best_val_bpc
    record_criterion(8, near and ordered,
                     f"Tiny Shakespeare ({steps} steps): linear val/test {lin.best_val_bpc:.3f}/"
                     f"{lin.test_bpc:.3f} (target 2.254/2.464 +-0.15), identity val "
                     f"{ident.best_val_bpc:.3f}, ordering holds {ordered}", gating=False)


def test_c09_channel_split():
    rng = np.random.default_rng(109)
    t0 = time.perf_counter()
    sums = zero_tau = generic = True
    for family in FAMILIES:
        for d in (2, 3, 4):
            spec = grp.SubgroupSpec(family, d)
            n = spec.algebra_dim
            h = mx.expm(grp.project_tangent(spec, random_raw(spec, rng, 1)))[0]
            for v in (1, max(1, n // 2), n, n + 4):
                proto = grp.init_token_raw(spec, v, rng) * 5.0
                for tau in (0.0, 0.7):
                    split = channel_split(models.ReadoutHead(spec, proto, tau, np.zeros(v)), h)
                    sums &= split.predictive_dim + split.memory_dim == n
                    if tau == 0.0:
                        zero_tau &= split.predictive_dim == 0
                    elif v >= n:
                        generic &= split.memory_dim == 0
    secs = time.perf_counter() - t0
    ok = sums and zero_tau and generic and secs < 10
    record_criterion(9, ok, f"channel split: dims sum {sums}, tau=0 predictive 0 {zero_tau}, "
                            f"generic V>=n_g memory 0 {generic}, {secs:.1f}s (<10s)")
    assert ok


def test_c10_reproducibility(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("LIESTATE_OUTPUT_ROOT", str(tmp_path / "out"))
    (tmp_path / "corpus.txt").write_text("the quick brown fox " * 100)
    streams = []
    for run in range(2):
        cfg = tmp_path / f"run{run}.toml"
        cfg.write_text('seed = 7\n[model]\nkind = "osmformer"\nfamily = "U"\nd = 3\n'
                       '[train]\nseq_len = 16\nbatch_size = 8\nmax_steps = 40\n'
                       f'[data]\npath = "corpus.txt"\n[output]\ndir = "r{run}"\n')
        assert cli.main(["train", "--config", str(cfg)]) == 0
        streams.append((tmp_path / "out" / f"r{run}" / "metrics.jsonl").read_bytes())
    capsys.readouterr()
    ok = streams[0] == streams[1] and len(streams[0]) > 0
    n = len(streams[0].splitlines())
    record_criterion(10, ok, f"reproducibility: two runs, {n} metric records, byte-identical {ok}")
    assert ok
    assert all(json.loads(x)["val_bpc"] > 0 for x in streams[0].splitlines())
