"""Checkpoints and metrics files.

Checkpoint layout::

    STLSNN-CHECKPOINT <version>\\n
    header <n>\\n
    <n bytes of JSON: config, input shape, tensor names and shapes,
     optimizer step, epoch, rng state, metrics history>
    <float64 little-endian payload of every tensor, in header order>

All writes go to a temporary sibling file that is renamed into place, so a
failed write never leaves a partial file behind.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, config_from_dict, config_to_dict
from .errors import FormatError, LengthError
from .network import Network
from .train import MetricsRecord, OptimizerState, RngStreams

MAGIC = "STLSNN-CHECKPOINT"
VERSION = 1
METRICS_HEADER = ("epoch", "split", "loss", "top1", "afr", "lr", "seed", "mode")
_F64 = np.dtype("<f8")


def atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class Checkpoint:
    config: ExperimentConfig
    input_shape: tuple
    tensors: dict  # name -> float64 array (network tensors incl. BN buffers)
    optimizer: OptimizerState = field(default_factory=OptimizerState)
    epoch: int = -1  # last completed epoch; -1 = initialisation
    rng_state: dict | None = None
    metrics: list = field(default_factory=list)
    version: int = VERSION


def make_checkpoint(cfg: ExperimentConfig, net: Network, opt=None, rngs: RngStreams | None = None, epoch=-1, metrics=()):
    return Checkpoint(
        config=cfg,
        input_shape=net.input_shape,
        tensors={k: v.copy() for k, v in net.named_tensors().items()},
        optimizer=OptimizerState() if opt is None else opt,
        epoch=epoch,
        rng_state=None if rngs is None else rngs.state(),
        metrics=list(metrics),
    )


def network_from_checkpoint(ckpt: Checkpoint) -> Network:
    from .train import build_network

    cfg = ckpt.config
    net = build_network(cfg.layers, ckpt.input_shape, cfg.train)
    load_tensors(net, ckpt.tensors)
    return net


def load_tensors(net: Network, tensors: dict):
    """Copy ``tensors`` into ``net`` in place (names and shapes must match)."""
    own = net.named_tensors()
    if set(own) != set(tensors):
        missing = sorted(set(own) ^ set(tensors))
        raise FormatError(f"checkpoint tensors do not match the network: {missing[:3]}")
    for name, dst in own.items():
        src = tensors[name]
        if src.shape != dst.shape:
            raise FormatError(f"tensor {name}: checkpoint shape {src.shape}, network {dst.shape}")
        dst[...] = src


def _payload(ckpt):
    blocks = [(k, v) for k, v in ckpt.tensors.items()]
    for k in sorted(ckpt.optimizer.m):
        blocks.append((f"adam.m.{k}", ckpt.optimizer.m[k]))
        blocks.append((f"adam.v.{k}", ckpt.optimizer.v[k]))
    return blocks


def save_checkpoint(path, ckpt: Checkpoint):
    blocks = _payload(ckpt)
    header = {
        "version": ckpt.version,
        "config": config_to_dict(ckpt.config),
        "input_shape": list(ckpt.input_shape),
        "tensors": [{"name": k, "shape": list(np.shape(v))} for k, v in blocks],
        "optimizer_step": ckpt.optimizer.step,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "metrics": [m.as_dict() for m in ckpt.metrics],
    }
    head = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(f"{MAGIC} {ckpt.version}\nheader {len(head)}\n".encode())
    buf.write(head)
    for _, v in blocks:
        buf.write(np.ascontiguousarray(v, dtype=_F64).tobytes())
    atomic_write(path, buf.getvalue())


def _line(fh, what):
    line = fh.readline()
    if not line.endswith(b"\n"):
        raise LengthError(f"checkpoint truncated in {what}")
    return line[:-1].decode("ascii", errors="replace")


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        first = _line(fh, "magic line").split()
        if len(first) != 2 or first[0] != MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        if first[1] != str(VERSION):
            raise FormatError(f"{path}: checkpoint version {first[1]} not supported (expected {VERSION})")
        size = _line(fh, "header line").split()
        if len(size) != 2 or size[0] != "header" or not size[1].isdigit():
            raise FormatError(f"{path}: malformed header line")
        raw = fh.read(int(size[1]))
        if len(raw) != int(size[1]):
            raise LengthError(f"{path}: checkpoint truncated in header")
        try:
            header = json.loads(raw)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: corrupt header: {e}") from e
        body = fh.read()
    blocks, offset = {}, 0
    for t in header["tensors"]:
        shape = tuple(t["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * _F64.itemsize
        if offset + n > len(body):
            raise LengthError(f"{path}: payload for {t['name']} is truncated")
        blocks[t["name"]] = np.frombuffer(body, dtype=_F64, count=n // 8, offset=offset).astype(float).reshape(shape)
        offset += n
    if offset != len(body):
        raise LengthError(f"{path}: {len(body) - offset} unexpected trailing payload bytes")
    opt = OptimizerState(step=int(header["optimizer_step"]))
    tensors = {}
    for k, v in blocks.items():
        if k.startswith("adam.m."):
            opt.m[k[7:]] = v
        elif k.startswith("adam.v."):
            opt.v[k[7:]] = v
        else:
            tensors[k] = v
    return Checkpoint(
        config=config_from_dict(header["config"]),
        input_shape=tuple(header["input_shape"]),
        tensors=tensors,
        optimizer=opt,
        epoch=int(header["epoch"]),
        rng_state=header["rng_state"],
        metrics=[MetricsRecord(**m) for m in header["metrics"]],
        version=int(header["version"]),
    )


# ---------------------------------------------------------------- metrics


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def format_metrics(records, header=True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(METRICS_HEADER)
    for r in records:
        d = r.as_dict() if isinstance(r, MetricsRecord) else r
        w.writerow([_fmt(d[k]) for k in METRICS_HEADER])
    return buf.getvalue()


def write_metrics(path, records, append=True):
    """Append ``records`` to a metrics CSV (header written when the file is new)."""
    path = Path(path)
    old = path.read_text() if append and path.exists() else ""
    atomic_write(path, (old + format_metrics(records, header=not old)).encode())


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
