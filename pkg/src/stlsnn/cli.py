"""Command-line entry point: ``stlsnn <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys

import numpy as np

from .config import ExperimentConfig, config_from_dict, config_to_dict, parse_config
from .data import NoiseSpec, bernoulli_encode, corrupt_samples, direct_encode
from .errors import STLError
from .experiment import load_arrays, load_datasets, run_training
from .grad import LearningMode, one_hot
from .gradcheck import grad_check
from .layers import LayerKind, LayerSpec
from .network import Network
from .persist import (
    atomic_write,
    format_metrics,
    load_checkpoint,
    make_checkpoint,
    network_from_checkpoint,
    save_checkpoint,
)
from .train import (
    MetricsRecord,
    RngStreams,
    build_network,
    hete_init,
    jdf_evaluate,
    run_eval,
    sample_threshold_indices,
    shuffle_thresholds,
    track_thresholds,
)

log = logging.getLogger("stlsnn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits on its own; route errors through the common handler instead
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _with_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    d = config_to_dict(cfg)
    if getattr(args, "seed", None) is not None:
        d["train"]["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        d["train"]["mode"] = args.mode
    if getattr(args, "epochs", None) is not None:
        d["train"]["epochs"] = args.epochs
    return config_from_dict(d)


def _need(args, *names):
    for n in names:
        if getattr(args, n, None) in (None, []):
            raise UsageError(f"--{n.replace('_', '-')} is required for '{args.command}'")


def _eval_data(cfg, args):
    if getattr(args, "data", None):
        z = np.load(args.data)
        from .data import Dataset

        return Dataset(z["inputs"], z["labels"], str(z["encoding"]))
    train, test = load_datasets(cfg.dataset)
    return train if args.split == "train" else test


def _noisy(data, cfg, args):
    nl = getattr(args, "noise_level", None)
    if nl is None and cfg.noise is None:
        return data
    spec = cfg.noise if nl is None else NoiseSpec(kind=args.noise_kind, nl=nl, seed=args.noise_seed)
    from .data import Dataset

    return Dataset(corrupt_samples(data.inputs, spec), data.labels, data.encoding)


# ---------------------------------------------------------------- commands


def cmd_train(args):
    _need(args, "config", "out")
    cfg = _with_overrides(parse_config(args.config), args)
    resume = load_checkpoint(args.resume) if args.resume else None
    init = load_checkpoint(args.init) if args.init else None
    if resume is not None:
        cfg = _with_overrides(resume.config, args)
    _, records = run_training(cfg, args.out, resume=resume, init=init)
    tests = [r for r in records if r.split == "test"]
    if tests:
        print(f"final test top1={tests[-1].top1:.4f} afr={tests[-1].afr:.4f}")
    return 0


def cmd_eval(args):
    _need(args, "checkpoint")
    ck = load_checkpoint(args.checkpoint)
    cfg = _with_overrides(parse_config(args.config), args) if args.config else ck.config
    net = network_from_checkpoint(ck)
    data = _noisy(_eval_data(cfg, args), cfg, args)
    r = run_eval(net, data, cfg.train)
    print(f"top1={r.top1:.6g} afr={r.afr:.6g} loss={r.loss:.6g}")
    if args.out:
        rec = MetricsRecord(ck.epoch, args.split, r.loss, r.top1, r.afr, 0.0, cfg.train.seed, cfg.train.mode.value)
        atomic_write(args.out, format_metrics([rec]).encode())
    return 0


def default_test_net(seed):
    """Small random net used by ``gradcheck`` when no config is given."""
    rng = np.random.default_rng(seed)
    specs = [
        LayerSpec(LayerKind.DENSE, features=int(rng.integers(4, 17))),
        LayerSpec(LayerKind.VOTING, classes=3, population=2),
    ]
    v_th = rng.uniform(0.3, 1.5)
    net = Network(specs, (int(rng.integers(3, 9)),), v_th_init=v_th, rng=rng, init_gain=1.5)
    for p in net.params:
        if p is not None:
            p.v_th = p.v_th + rng.normal(0, 0.1, p.v_th.shape)
    return net


def cmd_gradcheck(args):
    seed = 0 if args.seed is None else args.seed
    rng = np.random.default_rng([seed, 1])
    if args.config:
        cfg = _with_overrides(parse_config(args.config), args)
        shape = cfg.dataset.input_shape() or (1, 28, 28)
        net = build_network(cfg.layers, shape, cfg.train)
        T = cfg.train.T
    else:
        net = default_test_net(seed)
        T = 4
    B = 2
    x = rng.random((T, B) + net.input_shape)
    y = one_hot(rng.integers(0, net.classes, B), net.classes)
    err = grad_check(net, x, y, epsilon=args.epsilon)
    ok = err < args.tol
    print(f"max relative error {err:.3e} ({'ok' if ok else 'FAIL'}, tolerance {args.tol:g})")
    return 0 if ok else 1


def cmd_encode(args):
    _need(args, "config", "out")
    cfg = _with_overrides(parse_config(args.config), args)
    x, y = load_arrays(cfg.dataset)
    if cfg.dataset.kind == "events":
        out, enc = x, "frames"
    else:
        rng = RngStreams(cfg.train.seed)["encoder"]
        if cfg.dataset.encoding == "direct":
            out = np.stack([direct_encode(s, cfg.train.T) for s in x]) if len(x) else x
        else:
            out = np.swapaxes(bernoulli_encode(x, cfg.train.T, rng), 0, 1).astype(np.uint8)
        enc = "frames"
    buf = io.BytesIO()
    np.savez_compressed(buf, inputs=out, labels=y, encoding=enc)
    atomic_write(args.out, buf.getvalue())
    print(f"wrote {len(y)} encoded samples of shape {out.shape[1:]} to {args.out}")
    return 0


def cmd_noise(args):
    _need(args, "config", "out", "noise_level")
    cfg = _with_overrides(parse_config(args.config), args)
    x, y = load_arrays(cfg.dataset)
    spec = NoiseSpec(kind=args.noise_kind, nl=args.noise_level, seed=args.noise_seed)
    noisy = corrupt_samples(x, spec)
    enc = "frames" if cfg.dataset.kind == "events" else cfg.dataset.encoding
    buf = io.BytesIO()
    np.savez_compressed(buf, inputs=noisy, labels=y, encoding=enc)
    atomic_write(args.out, buf.getvalue())
    print(f"wrote {len(y)} samples with {spec.kind.value} noise nl={spec.nl:g} to {args.out}")
    return 0


def cmd_shuffle(args):
    _need(args, "checkpoint", "out")
    ck = load_checkpoint(args.checkpoint)
    net = network_from_checkpoint(ck)
    seed = 0 if args.seed is None else args.seed
    d = config_to_dict(ck.config)
    d["train"]["mode"] = LearningMode.SL.value
    d["train"]["seed"] = seed
    cfg = config_from_dict(d)
    out = shuffle_thresholds(net, seed) if args.keep_weights else hete_init(net, cfg.train, seed)
    save_checkpoint(args.out, make_checkpoint(cfg, out))
    print(f"wrote heterogeneous-threshold init to {args.out}")
    return 0


def cmd_jdf(args):
    _need(args, "checkpoints")
    cks = [load_checkpoint(p) for p in args.checkpoints]
    cfg = _with_overrides(parse_config(args.config), args) if args.config else cks[0].config
    nets = [network_from_checkpoint(c) for c in cks]
    data = _noisy(_eval_data(cfg, args), cfg, args)
    acc = jdf_evaluate(nets, data, cfg.train)
    print(f"jdf k={len(nets)} top1={acc:.6g}")
    if args.out:
        rec = MetricsRecord(cks[0].epoch, f"jdf{len(nets)}", float("nan"), acc, float("nan"), 0.0, cfg.train.seed, cfg.train.mode.value)
        atomic_write(args.out, format_metrics([rec]).encode())
    return 0


def cmd_track(args):
    _need(args, "checkpoints", "out")
    cks = [load_checkpoint(p) for p in args.checkpoints]
    cks.sort(key=lambda c: c.epoch)
    nets = [network_from_checkpoint(c) for c in cks]
    n = args.samples if args.samples is not None else cks[0].config.track_samples
    idx = sample_threshold_indices(nets[0], n, 0 if args.seed is None else args.seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "layer", "unit", "v_th", "layer_mean", "layer_std"])
    for ck, net in zip(cks, nets):
        for snap in track_thresholds(net, idx):
            for u, v in zip(snap["indices"], snap["values"]):
                w.writerow([ck.epoch, snap["layer"], int(u), f"{v:.6g}", f"{snap['mean']:.6g}", f"{snap['std']:.6g}"])
    atomic_write(args.out, buf.getvalue().encode())
    print(f"wrote threshold snapshots for {len(cks)} checkpoints to {args.out}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "encode": cmd_encode,
    "noise": cmd_noise,
    "shuffle-thresholds": cmd_shuffle,
    "jdf-eval": cmd_jdf,
    "track-thresholds": cmd_track,
}


def build_parser():
    p = _Parser(prog="stlsnn", description="Spiking networks with learnable synapses and thresholds.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config")
        s.add_argument("--seed", type=int)
        s.add_argument("--out")
        s.add_argument("--mode", choices=[m.value for m in LearningMode])
        if name == "train":
            s.add_argument("--epochs", type=int)
            s.add_argument("--resume", help="checkpoint to continue from")
            s.add_argument("--init", help="checkpoint whose tensors initialise the net")
        if name in ("eval", "shuffle-thresholds"):
            s.add_argument("--checkpoint")
        if name in ("jdf-eval", "track-thresholds"):
            s.add_argument("--checkpoints", nargs="+")
        if name in ("eval", "jdf-eval"):
            s.add_argument("--split", choices=["train", "test"], default="test")
            s.add_argument("--data", help="npz written by 'encode' or 'noise'")
        if name in ("eval", "jdf-eval", "noise"):
            s.add_argument("--noise-level", type=float)
            s.add_argument("--noise-kind", default="salt_pepper", choices=["salt_pepper", "uniform"])
            s.add_argument("--noise-seed", type=int, default=0)
        if name == "gradcheck":
            s.add_argument("--tol", type=float, default=1e-5)
            s.add_argument("--epsilon", type=float, default=1e-3)
        if name == "shuffle-thresholds":
            s.add_argument("--keep-weights", action="store_true", help="only permute thresholds")
        if name == "track-thresholds":
            s.add_argument("--samples", type=int)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "stlsnn: error: a subcommand is required")
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"stlsnn {args.command}: {e}", file=sys.stderr)
        return 2
    except (STLError, OSError) as e:
        print(f"stlsnn {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
