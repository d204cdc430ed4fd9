"""Spatio-temporal backpropagation for weights and spike thresholds.

Gradients are plain ``dict[str, ndarray]`` keyed like
:meth:`Network.parameters` (``"<stage>.W"``, ``"<stage>.v_th"``,
``"<stage>.bn_gamma"``, ``"<stage>.bn_beta"``).

The reset path is cut: the decay factor recorded in the forward cache is a
constant during backward, so time credit flows only through
``du[t+1]/du[t] = alpha[t+1]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, ConsistencyError, NumericError, ShapeError
from .layers import (
    LayerKind,
    as_float,
    batchnorm_backward,
    conv2d_backward,
    dense_backward,
    maxpool_backward,
)
from .network import ForwardCache, Network, network_forward, voting_readout
from .neuron import SurrogateKind, surrogate_grad

GradientSet = dict


class LearningMode(str, Enum):
    SL = "sl"  # synapses only
    TL = "tl"  # thresholds only
    STL = "stl"  # both

    @property
    def learns_w(self) -> bool:
        return self is not LearningMode.TL

    @property
    def learns_vth(self) -> bool:
        return self is not LearningMode.SL


@dataclass(frozen=True)
class LossSpec:
    S: int
    C: int
    P: int
    T: int

    def __post_init__(self):
        if min(self.S, self.C, self.P, self.T) < 1:
            raise ConfigError(f"loss dimensions must be >= 1: {self}")


def _check_pair(p, y):
    p = np.atleast_2d(as_float(p))
    y = np.atleast_2d(as_float(y))
    if p.shape != y.shape:
        raise ShapeError(f"rates {p.shape} and labels {y.shape} differ in shape")
    return p, y


def mse_loss(p, y, spec: LossSpec | None = None):
    """Half mean (over samples) squared error between rates and one-hot labels."""
    p, y = _check_pair(p, y)
    S = p.shape[0] if spec is None else spec.S
    return ((y - p) ** 2).sum() / (2 * S)


def loss_grad_output(p, y, spec: LossSpec):
    """dL/do for every output spike, shape [T, S, C*P]; constant over t and population."""
    p, y = _check_pair(p, y)
    if p.shape != (spec.S, spec.C):
        raise ShapeError(f"rates {p.shape} do not match loss spec (S={spec.S}, C={spec.C})")
    g = -(y - p) / (spec.S * spec.T * spec.P)
    g = np.repeat(g, spec.P, axis=1)
    return np.broadcast_to(g, (spec.T,) + g.shape).copy()


def one_hot(labels, C):
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, C))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _spiking_backward(st, p, rec, g_o, s, need_input_grad):
    u, alpha = rec["u"], rec["alpha"]
    T, B = u.shape[:2]
    v = p.v_th.reshape(st.threshold_shape)
    g_x = np.empty_like(u)
    g_vth = np.zeros_like(u[0])
    carry = np.zeros_like(u[0])
    for t in range(T - 1, -1, -1):
        spatial = g_o[t] * surrogate_grad(u[t], v, s)
        g_u = spatial + carry
        g_vth -= spatial  # do/dv_th = -do/du
        g_x[t] = g_u
        carry = g_u * alpha[t]
    axes = (0, 2, 3) if st.spec.kind is LayerKind.CONV2D else (0,)
    grads = {"v_th": g_vth.sum(axis=axes)}
    g_x = g_x.reshape((T * B,) + st.out_shape)
    if st.bn:
        g_x, grads["bn_gamma"], grads["bn_beta"] = batchnorm_backward(g_x, rec["bn"], p)
    inp = rec["inp"]
    flat_in = inp.reshape((T * B,) + inp.shape[2:])
    if st.spec.kind is LayerKind.CONV2D:
        if need_input_grad:
            g_in, grads["W"] = conv2d_backward(g_x, flat_in, p.W, st.spec.stride, st.spec.pad)
        else:
            _, grads["W"] = conv2d_backward(g_x, flat_in, p.W, st.spec.stride, st.spec.pad)
            g_in = None
    else:
        g_in, grads["W"] = dense_backward(g_x, flat_in, p.W)
    if g_in is not None:
        g_in = g_in.reshape(inp.shape)
    return g_in, grads


def backward(cache: ForwardCache, net: Network, seed_grads, c=None, s=None) -> GradientSet:
    """Reverse pass over layers and time.

    ``seed_grads`` is dL/do of the output layer, [T, batch, units] (see
    :func:`loss_grad_output`). ``c`` is accepted for symmetry with the
    forward call; the decay factors actually used are read from the cache.
    """
    s = net.surrogate if s is None else s
    if len(cache.layers) != len(net.stages):
        raise ConsistencyError(f"cache has {len(cache.layers)} layers, net has {len(net.stages)}")
    out = net.stages[-1]
    T, B = cache.T, cache.batch
    g = np.asarray(seed_grads, dtype=float)
    if g.size != T * B * out.units:
        raise ConsistencyError(f"seed gradient shape {g.shape} != ({T}, {B}, {out.units})")
    g = g.reshape((T, B) + out.out_shape)
    found = {}
    for st, p, rec in zip(reversed(net.stages), reversed(net.params), reversed(cache.layers)):
        kind = st.spec.kind
        if st.spiking:
            if rec["u"].shape[:2] != (T, B):
                raise ConsistencyError(f"cache of layer {st.index} does not match window/batch")
            g, lg = _spiking_backward(st, p, rec, g, s, need_input_grad=st.index > 0)
            for k, v in lg.items():
                found[f"{st.index}.{k}"] = v
        elif kind is LayerKind.MAXPOOL2D:
            flat = g.reshape((T * B,) + g.shape[2:])
            g = maxpool_backward(flat, rec["argmax"], rec["in_shape"], st.spec.window)
            g = g.reshape((T, B) + g.shape[1:])
        elif kind is LayerKind.DROPOUT:
            g = g * rec["mask"][None]
    grads = {}
    for name in net.parameters():
        grads[name] = found[name]
        if not np.isfinite(found[name]).all():
            raise NumericError(f"non-finite gradient in {name}")
    return grads


def apply_mode_mask(g: GradientSet, mode) -> GradientSet:
    """Zero the gradients a learning mode freezes (BN affine follows W)."""
    mode = LearningMode(mode)
    out = {}
    for name, v in g.items():
        frozen = (name.endswith(".v_th") and not mode.learns_vth) or (
            not name.endswith(".v_th") and not mode.learns_w
        )
        out[name] = np.zeros_like(v) if frozen else v
    return out


def trainable(name: str, mode) -> bool:
    mode = LearningMode(mode)
    return mode.learns_vth if name.endswith(".v_th") else mode.learns_w


# ---------------------------------------------------------------- soft oracle


def soft_forward(sample, net: Network, c=None, s=None):
    """Smooth twin of the forward pass used only for gradient checking.

    Spikes become ``surrogate_value(u, v_th)`` and the decay factor stays at
    ``1 - dt/tau`` (no reset). BN uses running statistics, dropout is off.
    Returns ``(rates [batch, C], cache)``.
    """
    s = net.surrogate if s is None else s
    if s.kind is not SurrogateKind.ARCTAN:
        raise ConfigError("soft mode needs the arctan surrogate")
    rec, cache = network_forward(sample, net, c, mode="eval", soft=True, surrogate=s)
    return voting_readout(rec, net.classes, net.population), cache


def soft_loss(net, sample, y, c=None, s=None):
    p, _ = soft_forward(sample, net, c, s)
    return mse_loss(p, y)
