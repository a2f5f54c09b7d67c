"""Single-file checkpoint container.

Layout (all integers little-endian)::

    magic            8 bytes   b"LIESTCK\\x00"
    version          u32
    config digest    32 bytes  sha256 of the canonical config JSON
    metadata length  u64
    metadata         UTF-8 JSON (sorted keys): config, vocab, step, ...
    tensor count     u32
    per tensor:
        name length  u16, name UTF-8
        kind         u8  (0 = real, 1 = complex)
        ndim         u8, shape u64 * ndim
        payload      f64 little-endian, row-major; complex entries interleave (re, im)

Tensor order is sorted by name so identical state always serializes to
identical bytes.
"""
import hashlib
import io
import json
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"LIESTCK\x00"
VERSION = 1


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(config):
    return hashlib.sha256(canonical_json(config).encode("utf-8")).digest()


def _write_tensor(fh, name, arr):
    arr = np.asarray(arr)
    kind = 1 if np.iscomplexobj(arr) else 0
    enc = name.encode("utf-8")
    fh.write(struct.pack("<H", len(enc)))
    fh.write(enc)
    fh.write(struct.pack("<BB", kind, arr.ndim))
    for n in arr.shape:
        fh.write(struct.pack("<Q", n))
    data = np.ascontiguousarray(arr, dtype=np.complex128 if kind else np.float64)
    if kind:
        data = data.view(np.float64)
    fh.write(data.astype("<f8", copy=False).tobytes())


def _read_exact(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint")
    return buf


def _read_tensor(fh):
    (nlen,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, nlen).decode("utf-8")
    kind, ndim = struct.unpack("<BB", _read_exact(fh, 2))
    shape = tuple(struct.unpack("<Q", _read_exact(fh, 8))[0] for _ in range(ndim))
    count = int(np.prod(shape, dtype=np.int64)) * (2 if kind else 1)
    data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").astype(np.float64)
    if kind:
        data = data.view(np.complex128)
    return name, data.reshape(shape).copy()


def dumps(config, tensors, meta=None):
    """Serialize ``tensors`` (name -> array) with ``config`` and extra metadata."""
    meta = dict(meta or {})
    meta["config"] = config
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    out.write(config_digest(config))
    blob = canonical_json(meta).encode("utf-8")
    out.write(struct.pack("<Q", len(blob)))
    out.write(blob)
    out.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        _write_tensor(out, name, tensors[name])
    return out.getvalue()


def loads(data):
    """Inverse of :func:`dumps`: returns ``(config, tensors, meta)``."""
    fh = io.BytesIO(data)
    if _read_exact(fh, len(MAGIC)) != MAGIC:
        raise CheckpointError("not a liestate checkpoint (bad magic)")
    (version,) = struct.unpack("<I", _read_exact(fh, 4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = _read_exact(fh, 32)
    (mlen,) = struct.unpack("<Q", _read_exact(fh, 8))
    try:
        meta = json.loads(_read_exact(fh, mlen).decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError("corrupt checkpoint metadata") from exc
    config = meta.pop("config", None)
    if config is None or config_digest(config) != digest:
        raise CheckpointError("checkpoint config digest mismatch")
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    tensors = dict(_read_tensor(fh) for _ in range(count))
    if fh.read(1):
        raise CheckpointError("trailing bytes after tensor table")
    return config, tensors, meta


def pack_state(params, opt=None):
    """Flatten parameters and Adam moments into one tensor table."""
    tensors = {f"param/{k}": v for k, v in params.items()}
    if opt is not None:
        tensors.update({f"adam_m/{k}": v for k, v in opt["m"].items()})
        tensors.update({f"adam_v/{k}": v for k, v in opt["v"].items()})
    return tensors


def unpack_state(tensors, step=0):
    params, m, v = {}, {}, {}
    for name, arr in tensors.items():
        group, _, key = name.partition("/")
        {"param": params, "adam_m": m, "adam_v": v}.get(group, {})[key] = arr
    opt = {"m": m, "v": v, "step": int(step)} if m else None
    return params, opt


def save(path, config, params, opt=None, meta=None):
    meta = dict(meta or {})
    if opt is not None:
        meta["step"] = int(opt["step"])
    data = dumps(config, pack_state(params, opt), meta)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def load(path):
    """Returns ``(config, params, opt, meta)``."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    config, tensors, meta = loads(data)
    params, opt = unpack_state(tensors, meta.get("step", 0))
    return config, params, opt, meta
