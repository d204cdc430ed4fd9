"""Experiment configuration: YAML files and the compact network grammar.

A config file is YAML with these top-level keys (all optional except the
dataset source)::

    train:          # any TrainConfig field; unset fields keep their defaults
      eta0: 0.001
      mode: stl     # sl | tl | stl
      surrogate: {kind: arctan, scale: 3.14159}
    dataset:
      kind: idx     # idx | events | synthetic
      images: data/train-images-idx3-ubyte.gz
      labels: data/train-labels-idx1-ubyte.gz
      n_train: 2000
      n_test: 1000
      downsample: 2
    network: "{128C3-BN-MP}*2-DP-FC2048-DP-VotingC10P10-AP"
    out: runs/mnist
    jdf_k: 1
    noise: {kind: salt_pepper, nl: 0.1, seed: 0}
    track_samples: 10

Network grammar, tokens joined by ``-``: ``128C3`` (conv, 128 channels,
3x3 kernel), ``BN``, ``MP`` / ``MP2`` (max-pool window), ``DP`` / ``DP0.3``,
``FC2048``, ``VotingC10P10``, a trailing ``AP`` (the population average
readout, always implied) and ``{...}*n`` for n repeats.
"""

from __future__ import annotations

import dataclasses
import gzip
import re
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import yaml

from .data import NoiseSpec
from .errors import ConfigError
from .layers import LayerKind, LayerSpec
from .network import compile_stages
from .neuron import SurrogateSpec
from .train import TrainConfig

DATASET_KINDS = ("idx", "events", "synthetic")


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    # idx
    images: str | None = None
    labels: str | None = None
    downsample: int = 1
    # events: directory of "<label>_<name>.txt" streams
    events_dir: str | None = None
    height: int | None = None
    width: int | None = None
    slices: int | None = None  # equal-count slicing when set
    slice_ms: float | None = None  # otherwise fixed-duration slicing
    total_ms: float | None = None
    # synthetic
    n: int = 600
    classes: int = 10
    shape: tuple = (1, 8, 8)
    noise: float = 0.15
    # shared
    n_train: int | None = None
    n_test: int | None = None
    split_seed: int = 0
    encoding: str = "bernoulli"

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}, got {self.kind!r}")
        self.shape = tuple(int(d) for d in self.shape)
        if self.kind == "idx" and not (self.images and self.labels):
            raise ConfigError("idx dataset needs both 'images' and 'labels'")
        if self.kind == "events":
            if not self.events_dir or not self.height or not self.width:
                raise ConfigError("events dataset needs 'events_dir', 'height' and 'width'")
            if self.slices is None and not (self.slice_ms and self.total_ms):
                raise ConfigError("events dataset needs 'slices' or both 'slice_ms' and 'total_ms'")
        if self.downsample < 1:
            raise ConfigError("dataset.downsample must be >= 1")

    @property
    def n_frames(self) -> int | None:
        if self.kind != "events":
            return None
        if self.slices is not None:
            return int(self.slices)
        return int(round(self.total_ms / self.slice_ms))

    def input_shape(self):
        """Per-timestep input shape, or None when it cannot be known before loading."""
        if self.kind == "synthetic":
            return self.shape
        if self.kind == "events":
            return (2, int(self.height), int(self.width))
        dims = _idx_dims(self.images)
        if dims is None:
            return None
        h, w = dims[1:3] if len(dims) >= 3 else (dims[1], 1)
        f = self.downsample
        return (1, h // f, w // f)


def _idx_dims(path):
    p = Path(path)
    if not p.exists():
        return None
    opener = gzip.open if p.suffix == ".gz" else open
    with opener(p, "rb") as fh:
        head = fh.read(4)
        if len(head) < 4:
            return None
        ndim = head[3]
        raw = fh.read(4 * ndim)
    if len(raw) < 4 * ndim:
        return None
    return struct.unpack(f">{ndim}I", raw)


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    network: str = "FC256-VotingC10P10"
    out: str = "runs/default"
    jdf_k: int = 1
    noise: NoiseSpec | None = None
    track_samples: int = 10

    def __post_init__(self):
        if self.jdf_k < 1:
            raise ConfigError("jdf_k must be >= 1")
        if self.track_samples < 0:
            raise ConfigError("track_samples must be >= 0")
        self.layers = parse_network(self.network)
        shape = self.dataset.input_shape()
        if shape is not None:
            check_chain(self.layers, shape)

    def __eq__(self, other):
        if not isinstance(other, ExperimentConfig):
            return NotImplemented
        return config_to_dict(self) == config_to_dict(other)


# ---------------------------------------------------------------- grammar

_TOKENS = [
    (re.compile(r"(\d+)C(\d+)$"), lambda m: LayerSpec(LayerKind.CONV2D, channels=int(m[1]), kernel=int(m[2]))),
    (re.compile(r"BN$"), lambda m: LayerSpec(LayerKind.BATCHNORM)),
    (re.compile(r"MP(\d*)$"), lambda m: LayerSpec(LayerKind.MAXPOOL2D, window=int(m[1] or 2))),
    (re.compile(r"DP(\d*\.?\d*)$"), lambda m: LayerSpec(LayerKind.DROPOUT, p=float(m[1]) if m[1] else None)),
    (re.compile(r"FC\s*(\d+)$"), lambda m: LayerSpec(LayerKind.DENSE, features=int(m[1]))),
    (
        re.compile(r"VotingC(\d+)P(\d+)$"),
        lambda m: LayerSpec(LayerKind.VOTING, classes=int(m[1]), population=int(m[2])),
    ),
]


def _split_top(s):
    """Split on '-' outside braces."""
    parts, depth, cur = [], 0, ""
    for ch in s:
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth < 0:
                raise ConfigError(f"unbalanced '}}' in network string {s!r}")
        if ch == "-" and depth == 0:
            parts.append(cur)
            cur = ""
        else:
            cur += ch
    if depth:
        raise ConfigError(f"unbalanced '{{' in network string {s!r}")
    parts.append(cur)
    return [p.strip() for p in parts]


def expand_network(s: str) -> list[str]:
    """Flat token list with every ``{X}*n`` group expanded."""
    s = s.strip().strip("[]")
    out = []
    for part in _split_top(s):
        if not part:
            raise ConfigError(f"empty token in network string {s!r}")
        if part.startswith("{"):
            m = re.fullmatch(r"\{(.*)\}\s*\*\s*(\d+)", part)
            if not m:
                raise ConfigError(f"repeat group must look like {{...}}*n, got {part!r}")
            n = int(m[2])
            if n < 1:
                raise ConfigError(f"repeat count must be >= 1 in {part!r}")
            out.extend(expand_network(m[1]) * n)
        else:
            out.append(part)
    return out


def parse_network(s: str) -> list[LayerSpec]:
    tokens = expand_network(s)
    specs = []
    for pos, tok in enumerate(tokens):
        if tok == "AP":
            # population average readout; only meaningful right after the voting layer
            if pos != len(tokens) - 1 or not specs or specs[-1].kind is not LayerKind.VOTING:
                raise ConfigError("'AP' may only appear last, directly after the voting layer")
            continue
        for rx, build in _TOKENS:
            m = rx.match(tok)
            if m:
                specs.append(build(m))
                break
        else:
            raise ConfigError(f"unknown network token {tok!r}")
    if not specs or specs[-1].kind is not LayerKind.VOTING:
        raise ConfigError("network must end in a voting layer")
    return specs


def format_network(specs) -> str:
    """Inverse of :func:`parse_network` (without repeat groups)."""
    out = []
    for sp in specs:
        k = sp.kind
        if k is LayerKind.CONV2D:
            out.append(f"{sp.channels}C{sp.kernel}")
        elif k is LayerKind.BATCHNORM:
            out.append("BN")
        elif k is LayerKind.MAXPOOL2D:
            out.append(f"MP{sp.window}")
        elif k is LayerKind.DROPOUT:
            out.append("DP" if sp.p is None else f"DP{sp.p}")
        elif k is LayerKind.DENSE:
            out.append(f"FC{sp.features}")
        else:
            out.append(f"VotingC{sp.classes}P{sp.population}")
    return "-".join(out)


def check_chain(specs, input_shape):
    try:
        compile_stages(specs, input_shape)
    except ConfigError as e:
        raise ConfigError(f"network does not fit input {tuple(input_shape)}: {e}") from e


# ---------------------------------------------------------------- files


def _fields(cls):
    return {f.name for f in dataclasses.fields(cls)}


_CASTS = {"float": float, "float | None": float, "int": int, "int | None": int}


def _coerce(cls, section, where):
    # YAML 1.1 reads forms like "1e-05" as strings; cast by the declared field type
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    out = {}
    for k, v in section.items():
        cast = _CASTS.get(str(types[k]))
        if cast is not None and v is not None and not isinstance(v, bool):
            try:
                cv = cast(v)
            except (TypeError, ValueError):
                raise ConfigError(f"'{where}.{k}' must be a number, got {v!r}") from None
            if cast is int and cv != v and not (isinstance(v, str) and v.strip().lstrip("-").isdigit()):
                raise ConfigError(f"'{where}.{k}' must be an integer, got {v!r}")
            v = cv
        out[k] = v
    return out


def _build(cls, section, where):
    if section is None:
        section = {}
    if not isinstance(section, dict):
        raise ConfigError(f"'{where}' must be a mapping")
    unknown = sorted(set(section) - _fields(cls))
    if unknown:
        raise ConfigError(f"unknown key '{where}.{unknown[0]}'")
    section = _coerce(cls, section, where)
    try:
        return cls(**section)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"bad value in '{where}': {e}") from e


def config_from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a mapping at the top level")
    unknown = sorted(set(d) - _fields(ExperimentConfig))
    if unknown:
        raise ConfigError(f"unknown key '{unknown[0]}'")
    train = dict(d.get("train") or {})
    if isinstance(train.get("surrogate"), dict):
        train["surrogate"] = _build(SurrogateSpec, train["surrogate"], "train.surrogate")
    kw = dict(train=_build(TrainConfig, train, "train"), dataset=_build(DatasetSpec, d.get("dataset"), "dataset"))
    if d.get("noise") is not None:
        kw["noise"] = _build(NoiseSpec, d["noise"], "noise")
    for key in ("network", "out", "jdf_k", "track_samples"):
        if key in d:
            kw[key] = d[key]
    return ExperimentConfig(**kw)


def _plain(v):
    if isinstance(v, Enum):
        return v.value
    if isinstance(v, tuple):
        return list(v)
    return v


def config_to_dict(cfg: ExperimentConfig) -> dict:
    train = {}
    for f in dataclasses.fields(TrainConfig):
        v = getattr(cfg.train, f.name)
        if f.name == "surrogate":
            v = {"kind": v.kind.value, "scale": float(v.scale)}
        train[f.name] = _plain(v)
    out = {
        "train": train,
        "dataset": {f.name: _plain(getattr(cfg.dataset, f.name)) for f in dataclasses.fields(DatasetSpec)},
        "network": cfg.network,
        "out": cfg.out,
        "jdf_k": cfg.jdf_k,
        "track_samples": cfg.track_samples,
    }
    if cfg.noise is not None:
        out["noise"] = {"kind": cfg.noise.kind.value, "nl": cfg.noise.nl, "seed": cfg.noise.seed}
    return out


def emit_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def parse_config_text(text: str) -> ExperimentConfig:
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML: {e}") from e
    return config_from_dict(d or {})


def parse_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text())
