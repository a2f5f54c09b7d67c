"""Geometry-aware instrumentation: drift from the group, tangent statistics,
and the predictive/memory split of the tangent space under the readout."""
import json
from dataclasses import dataclass

import numpy as np

from . import groups as grp
from . import matrix as mx
from .models import OSMFormer, readout_differential

SV_CUTOFF = 1e-10


def drift(h):
    """``||H^* H - I||_F`` (batched over leading axes)."""
    h = np.asarray(h)
    return np.linalg.norm(mx.adjoint(h) @ h - np.eye(h.shape[-1]), axis=(-2, -1))


@dataclass
class ChannelSplit:
    predictive_dim: int
    memory_dim: int
    predictive: np.ndarray
    memory: np.ndarray
    singular_values: np.ndarray


def channel_split(head, h, cutoff=SV_CUTOFF):
    """Split the algebra into readout-visible and readout-null directions at ``h``.

    Singular values below ``cutoff * sigma_max`` count as zero. The projectors
    act on algebra coordinates and sum to the identity.
    """
    n = head.spec.algebra_dim
    dmat = readout_differential(head, h)
    if n == 0:
        empty = np.zeros((0, 0))
        return ChannelSplit(0, 0, empty, empty, np.zeros(0))
    _, s, vh = np.linalg.svd(dmat, full_matrices=True)
    smax = s[0] if s.size else 0.0
    rank = int(np.sum(s > cutoff * smax)) if smax > 0 else 0
    basis = vh[:rank]
    pred = basis.T @ basis
    mem = np.eye(n) - pred
    return ChannelSplit(rank, n - rank, pred, mem, s)


def _coord_stats(spec, u):
    coords = np.abs(grp._vec(spec, u))
    return float(coords.mean()) if coords.size else 0.0, float(coords.max()) if coords.size else 0.0


def trace_run(model, params, tokens):
    """Per-position step records for one sequence.

    Recurrent models give one record per position; attention models give one
    per (position, layer) with the attention and grounding tangent norms.
    Model parameters are only read.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    frames = []
    model.forward(params, tokens, trace=frames)
    spec = model.spec
    records = []
    if isinstance(model, OSMFormer):
        for frame in frames:
            z, g, st = frame["attn"][0], frame["ground"][0], frame["state"][0]
            for i in range(z.shape[0]):
                zmean, zmax = _coord_stats(spec, z[i])
                records.append({
                    "position": i, "layer": frame["layer"],
                    "attn_norm": float(np.linalg.norm(z[i])),
                    "ground_norm": float(np.linalg.norm(g[i])),
                    "coord_abs_mean": zmean, "coord_abs_max": zmax,
                    "drift": float(drift(st[i])),
                })
        records.sort(key=lambda r: (r["position"], r["layer"]))
    else:
        for frame in frames:
            u = frame["tangent"][0]
            umean, umax = _coord_stats(spec, u)
            records.append({
                "position": frame["position"], "tangent_norm": float(np.linalg.norm(u)),
                "coord_abs_mean": umean, "coord_abs_max": umax,
                "drift": float(drift(frame["state"][0])),
            })
    return records


def write_trace(records, fh):
    for rec in records:
        fh.write(json.dumps(rec) + "\n")
