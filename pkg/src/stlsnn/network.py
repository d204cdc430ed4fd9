"""Time-unrolled spiking network: construction, forward pass and rate readout."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .layers import (
    LayerKind,
    LayerParams,
    LayerSpec,
    as_float,
    batchnorm_forward,
    conv2d_forward,
    conv_output_size,
    dense_forward,
    dropout_mask,
    init_layer_params,
    maxpool_forward,
)
from .neuron import LifConstants, SurrogateSpec, decay_factor, fire, surrogate_value


@dataclass(frozen=True)
class Stage:
    """A compiled layer: a spiking layer (with optional BN) or a spike-to-spike op."""

    index: int
    spec: LayerSpec
    in_shape: tuple
    out_shape: tuple
    bn: bool = False
    p_drop: float = 0.0

    @property
    def spiking(self) -> bool:
        return self.spec.spiking

    @property
    def units(self) -> int:
        return int(np.prod(self.out_shape))

    @property
    def threshold_shape(self) -> tuple:
        # conv thresholds are per output channel, broadcast over space
        if self.spec.kind is LayerKind.CONV2D:
            return (self.out_shape[0], 1, 1)
        return (self.out_shape[0],)


def compile_stages(specs, input_shape, dropout_p=0.5):
    """Shape-check a layer list and fold each BatchNorm into the layer before it."""
    input_shape = tuple(int(d) for d in input_shape)
    shape = input_shape
    stages: list[Stage] = []
    for pos, spec in enumerate(specs):
        where = f"layer {pos} ({spec.kind.value}) after input shape {shape}"
        if stages and stages[-1].spec.kind is LayerKind.VOTING:
            raise ConfigError(f"{where}: nothing may follow the voting layer")
        if spec.kind is LayerKind.BATCHNORM:
            if not stages or not stages[-1].spiking or stages[-1].bn:
                raise ConfigError(f"{where}: BN must directly follow a conv or dense layer")
            prev = stages[-1]
            stages[-1] = Stage(prev.index, prev.spec, prev.in_shape, prev.out_shape, bn=True)
            continue
        idx = len(stages)
        if spec.kind is LayerKind.CONV2D:
            if len(shape) != 3:
                raise ConfigError(f"{where}: conv needs a [C,H,W] input")
            c, h, w = shape
            ho = conv_output_size(h, spec.kernel, spec.stride, spec.pad)
            wo = conv_output_size(w, spec.kernel, spec.stride, spec.pad)
            if ho < 1 or wo < 1:
                raise ConfigError(f"{where}: kernel {spec.kernel} does not fit")
            out = (spec.channels, ho, wo)
        elif spec.kind in (LayerKind.DENSE, LayerKind.VOTING):
            out = (spec.width,)
        elif spec.kind is LayerKind.MAXPOOL2D:
            if len(shape) != 3:
                raise ConfigError(f"{where}: max-pool needs a [C,H,W] input")
            c, h, w = shape
            k = spec.window
            if h % k or w % k:
                raise ConfigError(f"{where}: spatial dims not divisible by pool window {k}")
            out = (c, h // k, w // k)
        elif spec.kind is LayerKind.DROPOUT:
            out = shape
        else:  # pragma: no cover
            raise ConfigError(f"{where}: unknown layer kind")
        p = spec.p if spec.p is not None else dropout_p
        stages.append(Stage(idx, spec, shape, out, p_drop=p if spec.kind is LayerKind.DROPOUT else 0.0))
        shape = out
    if not stages or not any(s.spiking for s in stages):
        raise ConfigError("network has no spiking layer")
    if not stages[0].spiking:
        raise ConfigError("the first layer must be a spiking (encoding) layer")
    return stages


class Network:
    """Layer stack plus parameters.

    ``params[i]`` holds the :class:`LayerParams` of stage ``i`` (``None`` for
    pooling and dropout stages).
    """

    def __init__(
        self,
        specs,
        input_shape,
        *,
        lif=LifConstants(),
        surrogate=SurrogateSpec(),
        dropout_p=0.5,
        v_th_init=2.0,
        rng=None,
        init_gain=1.0,
        params=None,
    ):
        self.specs = list(specs)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.lif = lif
        self.surrogate = surrogate
        self.dropout_p = dropout_p
        self.stages = compile_stages(self.specs, self.input_shape, dropout_p)
        if params is None:
            rng = np.random.default_rng(rng)
            v_init = (
                list(v_th_init)
                if np.ndim(v_th_init)
                else [v_th_init] * sum(s.spiking for s in self.stages)
            )
            params, k = [], 0
            for st in self.stages:
                if st.spiking:
                    params.append(init_layer_params(st.spec, st.in_shape, v_init[k], rng, st.bn, init_gain))
                    k += 1
                else:
                    params.append(None)
        self.params = params

    # ------------------------------------------------------------ views

    @property
    def spiking_stages(self) -> list[Stage]:
        return [s for s in self.stages if s.spiking]

    @property
    def output_stage(self) -> Stage:
        return self.spiking_stages[-1]

    @property
    def classes(self) -> int:
        return self.output_stage.spec.classes

    @property
    def population(self) -> int:
        return self.output_stage.spec.population

    @property
    def total_units(self) -> int:
        return sum(s.units for s in self.spiking_stages)

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Every stored tensor (learnable and BN buffers) in a fixed order."""
        out = {}
        for st, p in zip(self.stages, self.params):
            if p is not None:
                for k, v in p.tensors().items():
                    out[f"{st.index}.{k}"] = v
        return out

    def parameters(self) -> dict[str, np.ndarray]:
        """Learnable tensors only: W, v_th and BN affine parameters."""
        return {k: v for k, v in self.named_tensors().items() if "running" not in k}

    def thresholds(self) -> list[np.ndarray]:
        return [p.v_th for p in self.params if p is not None]

    def copy(self) -> "Network":
        return Network(
            self.specs,
            self.input_shape,
            lif=self.lif,
            surrogate=self.surrogate,
            dropout_p=self.dropout_p,
            params=[p.copy() if p is not None else None for p in self.params],
        )

    def set_learning_flags(self, learnable_w: bool, learnable_vth: bool):
        for p in self.params:
            if p is not None:
                p.learnable_w = learnable_w
                p.learnable_vth = learnable_vth


@dataclass
class SpikeRecord:
    values: np.ndarray  # [T, batch, units], entries in {0, 1}

    @property
    def T(self) -> int:
        return self.values.shape[0]


@dataclass
class ForwardCache:
    """Everything the backward pass needs, one dict per stage."""

    T: int
    batch: int
    mode: str
    soft: bool
    layers: list = field(default_factory=list)

    def spikes(self):
        """Spike tensors [T, batch, ...] of every spiking layer, in order."""
        return [rec["o"] for rec in self.layers if "o" in rec]


def as_time_batch(sample, input_shape):
    """Coerce a sample to [T, batch, *input_shape]; [T, *input_shape] gains batch 1."""
    x = as_float(sample)
    input_shape = tuple(input_shape)
    n_in = int(np.prod(input_shape))
    if x.ndim < 2:
        raise ShapeError(f"sample needs a time axis, got shape {x.shape}")
    if x.shape[2:] == input_shape:
        return x
    if x.shape[1:] == input_shape:
        return x[:, None]
    if x.ndim >= 3 and int(np.prod(x.shape[2:])) == n_in:
        return x.reshape(x.shape[:2] + input_shape)
    if int(np.prod(x.shape[1:])) == n_in:
        return x.reshape((x.shape[0], 1) + input_shape)
    raise ShapeError(f"sample shape {x.shape} does not match network input {tuple(input_shape)}")


def _spiking_forward(st: Stage, p: LayerParams, inp, mode, soft, c, s):
    T, B = inp.shape[:2]
    flat = inp.reshape((T * B,) + inp.shape[2:])
    if st.spec.kind is LayerKind.CONV2D:
        x = conv2d_forward(flat, p.W, st.spec.stride, st.spec.pad)
    else:
        x = dense_forward(flat, p.W)
    rec = {"inp": inp}
    if st.bn:
        bn_mode = "train" if mode == "train" and not soft else "eval"
        x, rec["bn"] = batchnorm_forward(x, p, bn_mode)
    x = x.reshape((T, B) + st.out_shape)
    v = p.v_th.reshape(st.threshold_shape)
    u = np.empty_like(x)
    o = np.empty_like(x)
    alpha = np.empty_like(x)
    u_prev = np.zeros_like(x[0])
    o_prev = np.zeros_like(x[0])
    for t in range(T):
        alpha[t] = c.leak if soft else decay_factor(o_prev, c)
        u[t] = alpha[t] * u_prev + x[t]
        if not np.isfinite(u[t]).all():
            raise NumericError(f"non-finite membrane potential in layer {st.index} at timestep {t + 1}")
        o[t] = surrogate_value(u[t], v, s) if soft else fire(u[t], v)
        u_prev, o_prev = u[t], o[t]
    rec.update(x=x, u=u, o=o, alpha=alpha)
    return o, rec


def network_forward(sample, net: Network, c=None, mode="train", rng=None, *, soft=False, surrogate=None):
    """Run the net over the whole window.

    ``sample`` is [T, batch, *input] (or [T, *input]); ``rng`` (Generator or
    seed) drives dropout masks in train mode. Returns ``(SpikeRecord, ForwardCache)``
    where the record holds the output layer's spikes as [T, batch, units].
    """
    c = net.lif if c is None else c
    s = net.surrogate if surrogate is None else surrogate
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    h = as_time_batch(sample, net.input_shape)
    T, B = h.shape[:2]
    if T < 1:
        raise ShapeError("time window must be at least 1")
    cache = ForwardCache(T=T, batch=B, mode=mode, soft=soft)
    gen = None
    for st, p in zip(net.stages, net.params):
        kind = st.spec.kind
        if st.spiking:
            h, rec = _spiking_forward(st, p, h, mode, soft, c, s)
        elif kind is LayerKind.MAXPOOL2D:
            flat = h.reshape((T * B,) + h.shape[2:])
            pooled, arg = maxpool_forward(flat, st.spec.window)
            rec = {"argmax": arg, "in_shape": flat.shape}
            h = pooled.reshape((T, B) + pooled.shape[1:])
        elif kind is LayerKind.DROPOUT:
            if mode == "train" and st.p_drop > 0:
                if soft:
                    raise ConfigError("soft (oracle) mode does not support active dropout")
                gen = gen or np.random.default_rng(rng)
                # one mask per sample, shared by all T steps
                mask = dropout_mask((B,) + h.shape[2:], st.p_drop, gen, mode)
            else:
                mask = np.ones((B,) + h.shape[2:])
            rec = {"mask": mask}
            h = h * mask[None]
        cache.layers.append(rec)
    return SpikeRecord(h.reshape(T, B, -1)), cache


def voting_readout(out_spikes, C, P, T=None):
    """Population rates p[batch, C] = spikes of class c over the window / (T * P)."""
    v = as_float(out_spikes.values if isinstance(out_spikes, SpikeRecord) else out_spikes)
    if v.ndim == 2:
        v = v[:, None, :]
    T = v.shape[0] if T is None else T
    if v.shape[-1] != C * P:
        raise ShapeError(f"output width {v.shape[-1]} != C*P = {C * P}")
    counts = v.sum(axis=0).reshape(v.shape[1], C, P).sum(axis=-1)
    return counts / (T * P)


def predict_class(p):
    """Argmax over the last axis; ties go to the lowest class index."""
    return np.argmax(np.asarray(p), axis=-1)
