"""Layer descriptions, parameters and the stateless tensor primitives.

Every primitive works on a leading sample axis ``N``; the network folds the
time window into it (``N = T * batch``) because the layers are feedforward,
so a layer's whole window can be computed once its input window is known.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, EmptyInputError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def as_float(x):
    """Array view of ``x``; keeps floating dtypes (the grad oracle runs in longdouble)."""
    x = np.asarray(x)
    return x if x.dtype.kind == "f" else x.astype(float)


class LayerKind(str, Enum):
    DENSE = "dense"
    CONV2D = "conv2d"
    VOTING = "voting"
    BATCHNORM = "batchnorm"
    MAXPOOL2D = "maxpool2d"
    DROPOUT = "dropout"


SPIKING_KINDS = (LayerKind.DENSE, LayerKind.CONV2D, LayerKind.VOTING)


@dataclass(frozen=True)
class LayerSpec:
    """Architecture of one layer; only the fields of its ``kind`` are used.

    The first spiking layer of a network is its encoding layer: it receives
    the raw sample (spikes, pixels or event frames) directly.
    """

    kind: LayerKind
    features: int = 0  # dense
    channels: int = 0  # conv2d output channels
    kernel: int = 3
    stride: int = 1
    padding: int | None = None  # conv2d; None = kernel // 2
    window: int = 2  # maxpool2d
    p: float | None = None  # dropout; None = take TrainConfig.dropout_p
    classes: int = 0  # voting
    population: int = 0  # voting

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        k = self.kind
        if k is LayerKind.DENSE and self.features < 1:
            raise ConfigError("dense layer needs features >= 1")
        if k is LayerKind.CONV2D and (self.channels < 1 or self.kernel < 1 or self.stride < 1):
            raise ConfigError("conv2d layer needs channels, kernel, stride >= 1")
        if k is LayerKind.VOTING and (self.classes < 1 or self.population < 1):
            raise ConfigError("voting layer needs classes and population >= 1")
        if k is LayerKind.MAXPOOL2D and self.window < 1:
            raise ConfigError("maxpool window must be >= 1")
        if k is LayerKind.DROPOUT and self.p is not None and not 0 <= self.p < 1:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {self.p}")

    @property
    def spiking(self) -> bool:
        return self.kind in SPIKING_KINDS

    @property
    def pad(self) -> int:
        return self.kernel // 2 if self.padding is None else self.padding

    @property
    def width(self) -> int:
        """Number of output units for dense and voting layers."""
        if self.kind is LayerKind.VOTING:
            return self.classes * self.population
        return self.features


@dataclass
class LayerParams:
    """Learnable tensors of one spiking layer (plus its attached BatchNorm)."""

    W: np.ndarray
    v_th: np.ndarray
    bn_gamma: np.ndarray | None = None
    bn_beta: np.ndarray | None = None
    bn_running_mean: np.ndarray | None = None
    bn_running_var: np.ndarray | None = None
    learnable_w: bool = True
    learnable_vth: bool = True

    @property
    def has_bn(self) -> bool:
        return self.bn_gamma is not None

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"W": self.W, "v_th": self.v_th}
        if self.has_bn:
            out.update(
                bn_gamma=self.bn_gamma,
                bn_beta=self.bn_beta,
                bn_running_mean=self.bn_running_mean,
                bn_running_var=self.bn_running_var,
            )
        return out

    def copy(self) -> "LayerParams":
        kw = {k: v.copy() for k, v in self.tensors().items()}
        return LayerParams(**kw, learnable_w=self.learnable_w, learnable_vth=self.learnable_vth)


# ---------------------------------------------------------------- dense


def dense_forward(spikes_in, W):
    """x = spikes_in @ W.T over the last (flattened) axis."""
    spikes_in = as_float(spikes_in)
    flat = spikes_in.reshape(spikes_in.shape[0], -1) if spikes_in.ndim > 1 else spikes_in[None]
    if flat.shape[1] != W.shape[1]:
        raise ShapeError(f"dense input width {flat.shape[1]} != weight columns {W.shape[1]}")
    out = flat @ W.T
    return out if spikes_in.ndim > 1 else out[0]


def dense_backward(g_x, spikes_in, W):
    """Returns (grad wrt input, reshaped like spikes_in; grad wrt W)."""
    flat = spikes_in.reshape(spikes_in.shape[0], -1)
    dW = g_x.T @ flat
    g_in = (g_x @ W).reshape(spikes_in.shape)
    return g_in, dW


# ---------------------------------------------------------------- conv


def conv_output_size(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


def _windows(x, k, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # N,C,Hp-k+1,Wp-k+1,k,k
    return win[:, :, ::stride, ::stride]


def conv2d_forward(frames_in, W, stride=1, padding=0):
    """Cross-correlation of ``frames_in`` [N,C,H,W] with kernels [O,C,k,k]."""
    x = as_float(frames_in)
    if x.ndim == 3:
        return conv2d_forward(x[None], W, stride, padding)[0]
    if x.ndim != 4 or x.shape[1] != W.shape[1]:
        raise ShapeError(f"conv input {x.shape} incompatible with kernels {W.shape}")
    k = W.shape[2]
    if x.shape[2] + 2 * padding < k or x.shape[3] + 2 * padding < k:
        raise ShapeError(f"input {x.shape[2:]} smaller than kernel {k} with padding {padding}")
    win = _windows(x, k, stride, padding)
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    out = cols @ W.reshape(W.shape[0], -1).T
    return out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)


def conv2d_backward(g_out, frames_in, W, stride=1, padding=0):
    """Returns (grad wrt frames_in, grad wrt W) for :func:`conv2d_forward`."""
    x = as_float(frames_in)
    o, c, k, _ = W.shape
    n, _, h, w = x.shape
    win = _windows(x, k, stride, padding)
    ho, wo = win.shape[2:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    g = g_out.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
    dW = (g.T @ cols).reshape(W.shape)
    g_cols = (g @ W.reshape(o, -1)).reshape(n, ho, wo, c, k, k)
    g_pad = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g_cols.dtype)
    for i in range(k):
        for j in range(k):
            g_pad[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g_cols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    g_in = g_pad[:, :, padding : padding + h, padding : padding + w]
    return g_in, dW


# ---------------------------------------------------------------- batchnorm


def _bn_axes(x):
    # channel axis is 1; statistics pool over samples and any spatial axes
    return (0,) + tuple(range(2, x.ndim))


def _bn_shape(x):
    return (1, -1) + (1,) * (x.ndim - 2)


def batchnorm_forward(x, p: LayerParams, mode="train"):
    """Per-channel normalisation of ``x`` [N,C,...]; updates running stats in train mode.

    Returns ``(y, cache)``.
    """
    x = as_float(x)
    if x.shape[0] == 0:
        raise EmptyInputError("batchnorm received an empty batch")
    axes, shp = _bn_axes(x), _bn_shape(x)
    if mode == "train":
        count = x.size // x.shape[1]
        if count < 2:
            raise EmptyInputError("batchnorm in train mode needs more than one value per channel")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        p.bn_running_mean *= 1 - BN_MOMENTUM
        p.bn_running_mean += BN_MOMENTUM * mean
        p.bn_running_var *= 1 - BN_MOMENTUM
        p.bn_running_var += BN_MOMENTUM * var * count / (count - 1)
    else:
        mean, var = p.bn_running_mean, p.bn_running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean.reshape(shp)) * inv_std.reshape(shp)
    y = p.bn_gamma.reshape(shp) * xhat + p.bn_beta.reshape(shp)
    return y, {"xhat": xhat, "inv_std": inv_std, "mode": mode}


def batchnorm_backward(g_y, cache, p: LayerParams):
    """Returns (grad wrt x, dgamma, dbeta)."""
    xhat, inv_std = cache["xhat"], cache["inv_std"]
    axes, shp = _bn_axes(g_y), _bn_shape(g_y)
    dgamma = (g_y * xhat).sum(axis=axes)
    dbeta = g_y.sum(axis=axes)
    g_xhat = g_y * p.bn_gamma.reshape(shp)
    if cache["mode"] == "train":
        g_x = (
            g_xhat
            - g_xhat.mean(axis=axes, keepdims=True)
            - xhat * (g_xhat * xhat).mean(axis=axes, keepdims=True)
        ) * inv_std.reshape(shp)
    else:
        g_x = g_xhat * inv_std.reshape(shp)
    return g_x, dgamma, dbeta


# ---------------------------------------------------------------- maxpool


def maxpool_forward(spikes_in, window=2, stride=None):
    """Max over ``window`` x ``window`` patches of [N,C,H,W].

    Returns ``(pooled, argmax)`` where argmax is the row-major flat index of
    the first maximal element inside each patch.
    """
    x = as_float(spikes_in)
    stride = window if stride is None else stride
    h, w = x.shape[2:]
    if h < window or w < window or (h - window) % stride or (w - window) % stride:
        raise ShapeError(f"spatial dims {(h, w)} not divisible by pool window {window}/stride {stride}")
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(*win.shape[:4], window * window)
    arg = flat.argmax(axis=-1)
    pooled = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return pooled, arg


def maxpool_backward(g_out, argmax, in_shape, window=2, stride=None):
    """Routes each pooled gradient to the recorded argmax position."""
    stride = window if stride is None else stride
    n, c, ho, wo = g_out.shape
    g_in = np.zeros(in_shape, dtype=g_out.dtype)
    rows = np.arange(ho)[:, None] * stride + argmax // window
    cols = np.arange(wo)[None, :] * stride + argmax % window
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    np.add.at(g_in, (np.broadcast_to(ni, rows.shape), np.broadcast_to(ci, rows.shape), rows, cols), g_out)
    return g_in


# ---------------------------------------------------------------- dropout


def dropout_mask(width, p_drop, rng=None, mode="train"):
    """Inverted-dropout mask: kept entries are ``1 / (1 - p_drop)``, dropped are 0.

    ``width`` may be an int or a shape tuple; ``rng`` a Generator or an int seed.
    """
    if not 0 <= p_drop < 1:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {p_drop}")
    shape = (width,) if isinstance(width, (int, np.integer)) else tuple(width)
    if mode != "train" or p_drop == 0:
        return np.ones(shape)
    rng = np.random.default_rng(rng)
    keep = rng.random(shape) >= p_drop
    return keep / (1.0 - p_drop)


# ---------------------------------------------------------------- init


def init_layer_params(spec: LayerSpec, in_shape, v_th_init, rng, bn=False, gain=1.0):
    """Seeded uniform fan-in initialisation, bound = gain * sqrt(6 / fan_in)."""
    if spec.kind is LayerKind.CONV2D:
        c = in_shape[0]
        fan_in = c * spec.kernel**2
        shape = (spec.channels, c, spec.kernel, spec.kernel)
        units = spec.channels
    else:
        fan_in = int(np.prod(in_shape))
        units = spec.width
        shape = (units, fan_in)
    bound = gain * math.sqrt(6.0 / fan_in)
    W = rng.uniform(-bound, bound, size=shape)
    v_th = np.full(units, float(v_th_init))
    p = LayerParams(W=W, v_th=v_th)
    if bn:
        p.bn_gamma = np.ones(units)
        p.bn_beta = np.zeros(units)
        p.bn_running_mean = np.zeros(units)
        p.bn_running_var = np.ones(units)
    return p
