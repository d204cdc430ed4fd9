"""Glue between an ExperimentConfig and the engine: data loading and training runs."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from .config import DatasetSpec, ExperimentConfig, emit_config
from .data import (
    Dataset,
    downsample,
    load_events,
    load_idx,
    slice_equal_count,
    slice_fixed_duration,
    stratified_split,
    synthetic_images,
)
from .errors import ConfigError, EmptyInputError
from .persist import Checkpoint, atomic_write, format_metrics, make_checkpoint, save_checkpoint
from .train import OptimizerState, RngStreams, build_network, fit

log = logging.getLogger(__name__)


def check_paths(ds: DatasetSpec):
    paths = {"idx": [ds.images, ds.labels], "events": [ds.events_dir], "synthetic": []}[ds.kind]
    for p in paths:
        if not Path(p).exists():
            raise ConfigError(f"dataset path does not exist: {p}")


def _event_set(ds: DatasetSpec):
    files = sorted(Path(ds.events_dir).glob("*.txt"))
    if not files:
        raise EmptyInputError(f"no event files in {ds.events_dir}")
    frames, labels = [], []
    for f in files:
        head = f.stem.split("_", 1)[0]
        if not head.isdigit():
            raise ConfigError(f"event file {f.name} must be named '<label>_<name>.txt'")
        ev = load_events(f)
        if (ev.H, ev.W) != (ds.height, ds.width):
            raise ConfigError(f"{f.name}: sensor {ev.H}x{ev.W}, config says {ds.height}x{ds.width}")
        if ds.slices is not None:
            frames.append(slice_equal_count(ev, ds.slices))
        else:
            frames.append(slice_fixed_duration(ev, ds.slice_ms, ds.total_ms))
        labels.append(int(head))
    return np.stack(frames), np.array(labels, dtype=np.int64)


def load_arrays(ds: DatasetSpec):
    """All samples and labels described by ``ds`` (before any split)."""
    check_paths(ds)
    if ds.kind == "idx":
        imgs = load_idx(ds.images, ds.labels)
        return downsample(imgs.pixels, ds.downsample), imgs.labels
    if ds.kind == "events":
        return _event_set(ds)
    imgs = synthetic_images(ds.n, ds.classes, ds.shape, seed=ds.split_seed, noise=ds.noise)
    return imgs.pixels, imgs.labels


def load_datasets(ds: DatasetSpec):
    """(train, test) Datasets; a stratified split when sizes are given, else 5:1."""
    x, y = load_arrays(ds)
    encoding = "frames" if ds.kind == "events" else ds.encoding
    if ds.n_train is not None or ds.n_test is not None:
        n_train = ds.n_train if ds.n_train is not None else len(y) - ds.n_test
        n_test = ds.n_test if ds.n_test is not None else len(y) - n_train
        tr, te = stratified_split(y, n_train, n_test, ds.split_seed)
    else:
        order = np.random.default_rng(ds.split_seed).permutation(len(y))
        cut = len(y) - len(y) // 6
        tr, te = order[:cut], order[cut:]
    return Dataset(x[tr], y[tr], encoding), Dataset(x[te], y[te], encoding)


def input_shape_of(data: Dataset):
    return tuple(data.sample_shape)


def run_training(cfg: ExperimentConfig, out, resume: Checkpoint | None = None, init: Checkpoint | None = None):
    """Train per ``cfg``, writing into directory ``out``.

    Files: ``config.yaml``, ``metrics.csv`` (rewritten after every epoch),
    ``checkpoints/epoch_NNN.ckpt`` per epoch (``epoch_init.ckpt`` before
    training) and ``final.ckpt``. ``resume`` continues an interrupted run;
    ``init`` starts from another checkpoint's tensors with a fresh optimiser.
    Returns (net, records).
    """
    from .persist import load_tensors

    train, test = load_datasets(cfg.dataset)
    shape = input_shape_of(train)
    if cfg.dataset.kind == "events" and cfg.dataset.n_frames != cfg.train.T:
        raise ConfigError(f"event slicing gives {cfg.dataset.n_frames} frames but T={cfg.train.T}")
    out = Path(out)
    net = build_network(cfg.layers, shape, cfg.train)
    opt, rngs, start, records = OptimizerState(), RngStreams(cfg.train.seed), 0, []
    if resume is not None:
        load_tensors(net, resume.tensors)
        opt = resume.optimizer
        if resume.rng_state is not None:
            rngs.set_state(resume.rng_state)
        start, records = resume.epoch + 1, list(resume.metrics)
    elif init is not None:
        load_tensors(net, init.tensors)

    atomic_write(out / "config.yaml", emit_config(cfg).encode())
    atomic_write(out / "metrics.csv", format_metrics(records).encode())
    if resume is None:
        save_checkpoint(out / "checkpoints" / "epoch_init.ckpt", make_checkpoint(cfg, net, opt, rngs, -1))

    def on_epoch(epoch, net, opt, rngs, new):
        records.extend(new)
        ck = make_checkpoint(cfg, net, opt, rngs, epoch, records)
        save_checkpoint(out / "checkpoints" / f"epoch_{epoch:03d}.ckpt", ck)
        atomic_write(out / "metrics.csv", format_metrics(records).encode())

    fit(net, train, test, cfg.train, opt, rngs, start, on_epoch)
    last = max(start - 1, cfg.train.epochs - 1) if cfg.train.epochs else -1
    save_checkpoint(out / "final.ckpt", make_checkpoint(cfg, net, opt, rngs, last, records))
    return net, records
