"""Training loop, evaluation and the analysis tools built on top of them.

Covers the Adam optimiser with an exponential learning-rate schedule, the
per-epoch train loop, top-1 / average-firing-rate evaluation, threshold
snapshots, the threshold shuffle used to build heterogeneous-threshold
baselines, and the joint (summed spike count) decision of several networks.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, bernoulli_encode
from .errors import ConfigError, ConsistencyError, EmptyInputError, NumericError, RangeError
from .grad import (
    LearningMode,
    LossSpec,
    apply_mode_mask,
    backward,
    loss_grad_output,
    mse_loss,
    one_hot,
    trainable,
)
from .network import Network, SpikeRecord, network_forward, predict_class, voting_readout
from .neuron import LifConstants, SurrogateSpec

log = logging.getLogger(__name__)

STREAMS = ("weights", "order", "encoder", "dropout", "noise", "shuffle")
EVAL_SEED = 2023  # every evaluation of a dataset sees the same encoded windows


@dataclass
class TrainConfig:
    initial_threshold: float = 2.0  # mV
    tau: float = 2.0  # ms
    T: int = 4
    dt: float = 1.0  # ms
    batch_size: int = 50
    epochs: int = 100
    eta0: float = 0.001
    gamma: float = 0.93
    dropout_p: float = 0.5
    mode: LearningMode = LearningMode.STL
    surrogate: SurrogateSpec = field(default_factory=SurrogateSpec)
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    init_gain: float = 1.0

    def __post_init__(self):
        self.mode = LearningMode(self.mode)
        if isinstance(self.surrogate, dict):
            self.surrogate = SurrogateSpec(**self.surrogate)
        if not self.eta0 >= 0:
            raise ConfigError(f"eta0 must be >= 0, got {self.eta0}")
        for name in ("tau", "dt", "initial_threshold", "init_gain"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.T < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("T and batch_size must be >= 1, epochs >= 0")
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("Adam needs 0 <= beta1, beta2 < 1 and eps > 0")

    @property
    def lif(self) -> LifConstants:
        return LifConstants(tau=self.tau, dt=self.dt)


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    loss: float
    top1: float
    afr: float
    lr: float
    seed: int
    mode: str

    def as_dict(self):
        return asdict(self)


class RngStreams:
    """Named, independently seeded generators derived from one seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.gens = {name: np.random.default_rng([self.seed, i]) for i, name in enumerate(STREAMS)}

    def __getitem__(self, name) -> np.random.Generator:
        return self.gens[name]

    def state(self) -> dict:
        return {name: g.bit_generator.state for name, g in self.gens.items()}

    def set_state(self, state: dict):
        for name, s in state.items():
            self.gens[name].bit_generator.state = s


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def build_network(specs, input_shape, cfg: TrainConfig, rng=None, v_th_init=None) -> Network:
    """Freshly initialised network; weights drawn from ``rng`` (default: the seed's weight stream)."""
    rng = RngStreams(cfg.seed)["weights"] if rng is None else rng
    return Network(
        specs,
        input_shape,
        lif=cfg.lif,
        surrogate=cfg.surrogate,
        dropout_p=cfg.dropout_p,
        v_th_init=cfg.initial_threshold if v_th_init is None else v_th_init,
        rng=rng,
        init_gain=cfg.init_gain,
    )


def lr_schedule(eta0, gamma, epoch):
    if epoch < 0:
        raise RangeError("epoch must be >= 0")
    return eta0 * gamma**epoch


def optimizer_step(params, grads, state: OptimizerState, lr, cfg: TrainConfig | None = None, mode=None):
    """In-place bias-corrected Adam update of ``params`` (name -> array).

    Tensors frozen by ``mode`` are skipped entirely so they stay bit-identical.
    """
    b1, b2, eps = (0.9, 0.999, 1e-8) if cfg is None else (cfg.beta1, cfg.beta2, cfg.eps)
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ConsistencyError(f"gradient {name} has shape {g.shape}, parameter {p.shape}")
        if mode is not None and not trainable(name, mode):
            continue
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params


def _batches(n, size):
    return [slice(i, min(n, i + size)) for i in range(0, n, size)]


def train_epoch(net: Network, data: Dataset, cfg: TrainConfig, opt_state: OptimizerState, rngs: RngStreams, epoch=0):
    """One pass over ``data`` in shuffled mini-batches; updates ``net`` in place."""
    if len(data) == 0:
        raise EmptyInputError("empty training set")
    lr = lr_schedule(cfg.eta0, cfg.gamma, epoch)
    C, P = net.classes, net.population
    order = rngs["order"].permutation(len(data))
    total_loss = correct = spikes = 0.0
    for b, sl in enumerate(_batches(len(data), cfg.batch_size)):
        idx = order[sl]
        window = data.window(idx, cfg.T, rngs["encoder"])
        try:
            rec, cache = network_forward(window, net, mode="train", rng=rngs["dropout"])
            p = voting_readout(rec, C, P)
            y = one_hot(data.labels[idx], C)
            spec = LossSpec(S=len(idx), C=C, P=P, T=cfg.T)
            grads = backward(cache, net, loss_grad_output(p, y, spec))
        except NumericError as e:
            raise NumericError(f"epoch {epoch} batch {b}: {e}") from e
        grads = apply_mode_mask(grads, cfg.mode)
        optimizer_step(net.parameters(), grads, opt_state, lr, cfg, cfg.mode)
        total_loss += mse_loss(p, y) * len(idx)
        correct += (predict_class(p) == data.labels[idx]).sum()
        spikes += sum(o.sum() for o in cache.spikes())
    n = len(data)
    rec = MetricsRecord(
        epoch=epoch,
        split="train",
        loss=float(total_loss / n),
        top1=float(correct / n),
        afr=float(spikes / (net.total_units * cfg.T * n)),
        lr=lr,
        seed=cfg.seed,
        mode=cfg.mode.value,
    )
    return net, rec


@dataclass
class EvalResult:
    top1: float
    afr: float
    loss: float
    counts: np.ndarray  # [N, C] output spike counts per class
    layer_spikes: np.ndarray  # [N, n_spiking_layers] spike totals per sample


def class_counts(rec, C, P):
    """Raw spike count per class [batch, C] from an output SpikeRecord."""
    v = rec.values if isinstance(rec, SpikeRecord) else np.asarray(rec)
    if v.shape[-1] != C * P:
        raise ConsistencyError(f"output width {v.shape[-1]} != C*P = {C * P}")
    return v.sum(axis=0).reshape(v.shape[1], C, P).sum(axis=-1)


def run_eval(net: Network, data: Dataset, cfg: TrainConfig, batch_size=None, seed=EVAL_SEED) -> EvalResult:
    """Eval-mode pass over ``data`` (dropout off, BN running statistics)."""
    if len(data) == 0:
        raise EmptyInputError("empty evaluation set")
    rng = np.random.default_rng(seed)
    C, P = net.classes, net.population
    counts, layer_spikes, losses = [], [], 0.0
    for sl in _batches(len(data), batch_size or cfg.batch_size):
        idx = np.arange(sl.start, sl.stop)
        window = data.window(idx, cfg.T, rng)
        rec, cache = network_forward(window, net, mode="eval")
        p = voting_readout(rec, C, P)
        losses += mse_loss(p, one_hot(data.labels[idx], C)) * len(idx)
        counts.append(class_counts(rec, C, P))
        layer_spikes.append(np.stack([o.reshape(o.shape[0], o.shape[1], -1).sum(axis=(0, 2)) for o in cache.spikes()], axis=1))
    counts = np.concatenate(counts)
    layer_spikes = np.concatenate(layer_spikes)
    top1 = float((predict_class(counts) == data.labels).mean())
    afr = float(layer_spikes.sum(axis=1).mean() / (net.total_units * cfg.T))
    return EvalResult(top1, afr, float(losses / len(data)), counts, layer_spikes)


def evaluate(net: Network, data: Dataset, cfg: TrainConfig, batch_size=None):
    """(top-1 accuracy, average firing rate over all spiking units)."""
    r = run_eval(net, data, cfg, batch_size)
    return r.top1, r.afr


def fit(net, train, test, cfg: TrainConfig, opt_state=None, rngs=None, start_epoch=0, on_epoch=None):
    """Train for ``cfg.epochs`` epochs, evaluating on ``test`` after each.

    ``on_epoch(epoch, net, opt_state, rngs, records)`` is called after every
    epoch (checkpointing hooks in here). Returns all MetricsRecords.
    """
    opt_state = OptimizerState() if opt_state is None else opt_state
    rngs = RngStreams(cfg.seed) if rngs is None else rngs
    records = []
    for epoch in range(start_epoch, cfg.epochs):
        _, tr = train_epoch(net, train, cfg, opt_state, rngs, epoch)
        new = [tr]
        if test is not None:
            r = run_eval(net, test, cfg)
            new.append(MetricsRecord(epoch, "test", r.loss, r.top1, r.afr, tr.lr, cfg.seed, cfg.mode.value))
        records.extend(new)
        log.info("epoch %d: %s", epoch, ", ".join(f"{m.split} loss={m.loss:.4f} top1={m.top1:.4f}" for m in new))
        if on_epoch is not None:
            on_epoch(epoch, net, opt_state, rngs, new)
    return records


# ---------------------------------------------------------------- thresholds


def track_thresholds(net: Network, sample_indices=None, bins=50):
    """Snapshot of the thresholds of every spiking layer.

    ``sample_indices`` is an optional list (one entry per spiking layer) of
    unit indices to report; summary statistics and the histogram always
    cover the whole layer.
    """
    out = []
    for k, (st, v) in enumerate(zip(net.spiking_stages, net.thresholds())):
        idx = np.arange(v.size) if sample_indices is None else np.asarray(sample_indices[k], dtype=int)
        if idx.size and (idx.min() < 0 or idx.max() >= v.size):
            raise RangeError(f"threshold index out of range for layer {st.index} ({v.size} units)")
        lo, hi = float(v.min()), float(v.max())
        counts, edges = np.histogram(v, bins=bins, range=(lo, hi) if hi > lo else None)
        out.append(
            {
                "layer": st.index,
                "indices": idx,
                "values": v[idx].copy(),
                "mean": float(v.mean()),
                "std": float(v.std()),
                "hist": counts,
                "edges": edges,
            }
        )
    return out


def sample_threshold_indices(net: Network, n, seed=0):
    """Up to ``n`` random unit indices per spiking layer (sorted)."""
    rng = np.random.default_rng(seed)
    return [np.sort(rng.choice(v.size, size=min(n, v.size), replace=False)) for v in net.thresholds()]


def shuffle_thresholds(net: Network, seed) -> Network:
    """Copy of ``net`` with each layer's thresholds randomly permuted; weights untouched."""
    rng = np.random.default_rng(seed)
    out = net.copy()
    for p in out.params:
        if p is not None:
            p.v_th = rng.permutation(p.v_th)
    return out


def hete_init(trained: Network, cfg: TrainConfig, shuffle_seed) -> Network:
    """Heterogeneous-threshold baseline: fresh weights from ``cfg.seed``,
    thresholds shuffled layer-wise from ``trained``."""
    shuffled = shuffle_thresholds(trained, shuffle_seed)
    net = build_network(trained.specs, trained.input_shape, cfg)
    for dst, src in zip(net.params, shuffled.params):
        if dst is not None:
            dst.v_th = src.v_th.copy()
    return net


# ---------------------------------------------------------------- joint decision


def _check_members(nets):
    if not nets:
        raise ConfigError("joint decision needs at least one network")
    cp = {(n.classes, n.population) for n in nets}
    if len(cp) != 1:
        raise ConsistencyError(f"member networks disagree on (classes, population): {sorted(cp)}")


def jdf_predict(nets, sample, cfg: TrainConfig | None = None):
    """Joint decision: argmax of class spike counts summed over all members.

    ``sample`` is an encoded window [T, ...] or batch [T, batch, ...]. A bare
    image shaped like the network input is Bernoulli-encoded first (needs
    ``cfg`` for T). Returns a class index, or an array for a batch.
    """
    _check_members(nets)
    single = np.ndim(sample) == len(nets[0].input_shape) + 1
    if np.shape(sample) == nets[0].input_shape:
        if cfg is None:
            raise ConfigError("encoding a raw image needs cfg.T")
        sample, single = bernoulli_encode(sample, cfg.T, EVAL_SEED), True
    C, P = nets[0].classes, nets[0].population
    total = None
    for net in nets:
        rec, _ = network_forward(sample, net, mode="eval")
        c = class_counts(rec, C, P)
        total = c if total is None else total + c
    pred = predict_class(total)
    return int(pred[0]) if single else pred


def jdf_evaluate(nets, data: Dataset, cfg: TrainConfig, batch_size=None, seed=EVAL_SEED):
    """Top-1 accuracy of the joint decision; every member sees identical windows."""
    _check_members(nets)
    total = None
    for net in nets:
        c = run_eval(net, data, cfg, batch_size, seed).counts
        total = c if total is None else total + c
    return float((predict_class(total) == data.labels).mean())
