import math

import numpy as np
import pytest

from liestate import groups as grp
from liestate import matrix as mx
from liestate import models
from liestate.diagnostics import channel_split, drift, trace_run

from conftest import FAMILIES, random_raw


def test_drift_examples():
    assert drift(np.eye(4)) == 0.0
    assert abs(drift(1.01 * np.eye(2)) - 0.0201 * math.sqrt(2)) < 1e-15
    assert abs(drift(1.01 * np.eye(2)) - 0.02843) < 1e-5
    assert drift(np.stack([np.eye(3), 2 * np.eye(3)])).tolist() == [0.0, 3 * math.sqrt(3)]
    assert drift(np.diag([1j, -1j])) < 1e-16


def head_and_state(spec, rng, v, tau, scale=5.0):
    proto = grp.init_token_raw(spec, v, rng) * scale
    h = mx.expm(grp.project_tangent(spec, random_raw(spec, rng, 1)))[0]
    return models.ReadoutHead(spec, proto, tau, np.zeros(v)), h


@pytest.mark.parametrize("family", FAMILIES)
def test_channel_split(family, rng):
    spec = grp.SubgroupSpec(family, 3)
    n = spec.algebra_dim
    head, h = head_and_state(spec, rng, n + 3, 1.0)
    split = channel_split(head, h)
    assert split.predictive_dim == n and split.memory_dim == 0
    head, h = head_and_state(spec, rng, n + 3, 0.0)
    split = channel_split(head, h)
    assert split.predictive_dim == 0 and split.memory_dim == n
    head, h = head_and_state(spec, rng, 1, 1.0)
    split = channel_split(head, h)
    assert split.predictive_dim + split.memory_dim == n
    assert split.predictive_dim <= 1
    for p in (split.predictive, split.memory):
        assert np.max(np.abs(p @ p - p)) < 1e-12
        assert np.max(np.abs(p - p.T)) < 1e-12
    assert np.max(np.abs(split.predictive + split.memory - np.eye(n))) < 1e-15


def test_channel_split_memory_is_readout_null(rng):
    spec = grp.SubgroupSpec("SO", 4)
    head, h = head_and_state(spec, rng, 2, 1.5)
    split = channel_split(head, h)
    dmat = models.readout_differential(head, h)
    assert split.memory_dim == spec.algebra_dim - 2
    assert np.max(np.abs(dmat @ split.memory)) < 1e-10 * np.max(np.abs(dmat))


def test_trace_former_records(rng):
    model = models.OSMFormer("SO(4)", 5, num_layers=2)
    params = model.init_params(rng)
    snapshot = {k: v.copy() for k, v in params.items()}
    recs = trace_run(model, params, [1, 2, 3, 4, 0, 1])
    assert len(recs) == 6 * 2
    assert [(r["position"], r["layer"]) for r in recs[:3]] == [(0, 0), (0, 1), (1, 0)]
    assert all(r["drift"] < 1e-13 for r in recs)
    assert all(np.array_equal(snapshot[k], params[k]) for k in params)
    fixed = trace_run(model, params, [2, 2, 2, 2])
    assert all(r["attn_norm"] < 1e-14 and r["ground_norm"] < 1e-14 for r in fixed)


def test_trace_rnn_records(rng):
    model = models.OSMRNN("U(3)", 4)
    params = model.init_params(rng)
    recs = trace_run(model, params, np.array([0, 1, 2, 3, 3]))
    assert [r["position"] for r in recs] == list(range(5))
    assert all(r["coord_abs_max"] >= r["coord_abs_mean"] >= 0 for r in recs)
    assert all(r["drift"] < 1e-13 for r in recs)
