"""Run configuration: a TOML file with ``[model]``, ``[train]``, ``[data]`` and
``[output]`` tables. Unknown keys are rejected so typos cannot silently fall
back to defaults.

Example::

    [model]
    kind = "osmformer"      # or "osm-rnn"
    family = "SO"
    d = 6
    num_layers = 1
    mixing_attn = "linear"
    mixing_ground = "linear"

    [train]
    lr = 1e-3
    seq_len = 32
    max_steps = 200

    [data]
    path = "corpus.txt"     # relative to this file
    splits = [0.8, 0.1, 0.1]

    [output]
    dir = "runs/toy"
"""
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import groups as grp
from . import models
from .errors import ConfigError, LieStateError
from .training import TrainConfig

OUTPUT_ROOT_ENV = "LIESTATE_OUTPUT_ROOT"

_MODEL_COMMON = {"kind", "family", "d", "k", "exp_map", "reproject_every", "eta", "xi"}
_MODEL_KEYS = {
    "osm-rnn": _MODEL_COMMON | {"mixing"},
    "osmformer": _MODEL_COMMON | {"num_layers", "mixing_attn", "mixing_ground", "alibi_slope"},
}
_DATA_KEYS = {"path", "splits", "offsets"}
_OUTPUT_KEYS = {"dir"}
_TOP_KEYS = {"model", "train", "data", "output", "seed"}


@dataclass
class RunConfig:
    model: dict
    train: TrainConfig
    data_path: Path = None
    splits: tuple = (0.8, 0.1, 0.1)
    offsets: tuple = None
    output_dir: Path = None
    source: dict = field(default_factory=dict)

    @property
    def seed(self):
        return self.train.seed

    def build_model(self, vocab_size):
        cfg = dict(self.model, vocab_size=vocab_size)
        return models.build_model(cfg)

    def corpus_kwargs(self):
        if self.offsets is not None:
            return {"offsets": tuple(self.offsets)}
        return {"fractions": tuple(self.splits)}

    def data_config(self):
        return {"splits": list(self.splits), "offsets": None if self.offsets is None else list(self.offsets)}


def _reject_unknown(section, table, allowed):
    if not isinstance(table, dict):
        raise ConfigError(f"{section}: expected a table")
    for key in table:
        if key not in allowed:
            raise ConfigError(f"{section}.{key}: unknown key")


def _model_section(raw):
    _reject_unknown("model", raw, set().union(*_MODEL_KEYS.values()))
    kind = raw.get("kind")
    if kind not in _MODEL_KEYS:
        raise ConfigError(f"model.kind: expected one of {sorted(_MODEL_KEYS)}, got {kind!r}")
    _reject_unknown("model", raw, _MODEL_KEYS[kind])
    out = {k: v for k, v in raw.items() if k != "k"}
    if "k" in raw:
        if "d" in raw:
            raise ConfigError("model.k: give either d or k, not both")
        out["d"] = raw["k"]
    for key in ("family", "d"):
        if key not in out:
            raise ConfigError(f"model.{key}: required")
    try:
        spec = grp.SubgroupSpec(out["family"], out["d"])
    except LieStateError as exc:
        key = "family" if "family" in str(exc) else "d"
        raise ConfigError(f"model.{key}: {exc}") from None
    out["family"] = spec.family
    for key in ("mixing", "mixing_attn", "mixing_ground"):
        if key in out:
            try:
                out[key] = models.normalize_mixing(out[key])
            except LieStateError as exc:
                raise ConfigError(f"model.{key}: {exc}") from None
    if "exp_map" in out and out["exp_map"] not in models.EXP_MAPS:
        raise ConfigError(f"model.exp_map: expected one of {models.EXP_MAPS}, got {out['exp_map']!r}")
    if "num_layers" in out and (not isinstance(out["num_layers"], int) or out["num_layers"] < 1):
        raise ConfigError("model.num_layers: must be a positive integer")
    return out


def parse_config(raw, base_dir=None):
    """Validate a parsed TOML mapping into a :class:`RunConfig`."""
    _reject_unknown("config", raw, _TOP_KEYS)
    if "model" not in raw:
        raise ConfigError("model: required section missing")
    model = _model_section(raw["model"])

    train_raw = dict(raw.get("train", {}))
    allowed = {f.name for f in dataclasses.fields(TrainConfig)}
    _reject_unknown("train", train_raw, allowed)
    if "seed" in raw:
        if "seed" in train_raw:
            raise ConfigError("seed: set either top-level seed or train.seed")
        train_raw["seed"] = raw["seed"]
    try:
        train = TrainConfig(**train_raw)
    except TypeError as exc:
        raise ConfigError(f"train: {exc}") from None

    data = raw.get("data", {})
    _reject_unknown("data", data, _DATA_KEYS)
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    path = data.get("path")
    data_path = None if path is None else (base / path if not Path(path).is_absolute() else Path(path))
    splits = tuple(data.get("splits", (0.8, 0.1, 0.1)))
    if len(splits) != 3 or any(not isinstance(x, (int, float)) or x < 0 for x in splits) \
            or abs(sum(splits) - 1.0) > 1e-9:
        raise ConfigError("data.splits: need three non-negative fractions summing to 1")
    offsets = data.get("offsets")
    if offsets is not None and (len(offsets) != 2 or any(not isinstance(x, int) for x in offsets)):
        raise ConfigError("data.offsets: need two integer character offsets [val_start, test_start]")

    output = raw.get("output", {})
    _reject_unknown("output", output, _OUTPUT_KEYS)
    out_dir = Path(output.get("dir", "runs/default"))
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if not out_dir.is_absolute():
        out_dir = (Path(root) if root else base) / out_dir
    return RunConfig(model, train, data_path, splits, None if offsets is None else tuple(offsets),
                     out_dir, raw)


def load_config(path):
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config {path} is not valid TOML: {exc}") from exc
    return parse_config(raw, base_dir=path.parent)
