"""Finite-difference oracle for the soft-mode backward pass.

The oracle re-implements the soft forward on its own (plain matmul/einsum,
no shared code with :mod:`stlsnn.network`) with an optional leading "copy"
axis on any parameter tensor, so a whole chunk of perturbed networks is
evaluated in one pass. Differences use the fourth-order central stencil in
float64; entries whose error looks large are re-evaluated in
``np.longdouble`` before being reported.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericError
from .grad import LossSpec, backward, loss_grad_output, soft_forward
from .layers import BN_EPS, LayerKind, as_float
from .network import Network, as_time_batch

STENCIL = ((2, -1.0), (1, 8.0), (-1, -8.0), (-2, 1.0))  # offset, weight / 12h
REFINE_ABOVE = 1e-7
COPY_BUDGET = 2_000_000  # floats per activation tensor


def _conv(h, W, stride, pad):
    # h [K,N,C,H,W], W [K,O,C,k,k] (K may be 1 on either side)
    k = W.shape[-1]
    if pad:
        h = np.pad(h, ((0, 0), (0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(h, (k, k), axis=(3, 4))[:, :, :, ::stride, ::stride]
    K, N, C, Ho, Wo = win.shape[:5]
    cols = win.transpose(0, 1, 3, 4, 2, 5, 6).reshape(K, N * Ho * Wo, C * k * k)
    out = cols @ W.reshape(W.shape[0], W.shape[1], -1).transpose(0, 2, 1)
    return out.reshape(out.shape[0], N, Ho, Wo, -1).transpose(0, 1, 4, 2, 3)


def _with_copy_axis(t, base_ndim):
    return t if t.ndim == base_ndim + 1 else t[None]


def reference_soft_losses(net: Network, sample, y, params, c=None, s=None):
    """Soft-mode loss of every network copy described by ``params``.

    ``params`` maps parameter names to tensors shaped like the network's, or
    with one extra leading copy axis. Returns a 1-D array of losses.
    """
    c = net.lif if c is None else c
    s = net.surrogate if s is None else s
    x = as_time_batch(sample, net.input_shape)
    T, B = x.shape[:2]
    h = x.reshape((1, T * B) + x.shape[2:])
    for st, lp in zip(net.stages, net.params):
        kind = st.spec.kind
        if st.spiking:
            i = st.index
            W = _with_copy_axis(params[f"{i}.W"], lp.W.ndim)
            if kind is LayerKind.CONV2D:
                pre = _conv(h, W, st.spec.stride, st.spec.pad)
            else:
                pre = h.reshape(h.shape[0], T * B, -1) @ W.transpose(0, 2, 1)
            chan = (1, 1, -1) + (1,) * (pre.ndim - 3)
            if st.bn:
                g = _with_copy_axis(params[f"{i}.bn_gamma"], 1)
                b = _with_copy_axis(params[f"{i}.bn_beta"], 1)
                scale = 1.0 / np.sqrt(lp.bn_running_var + BN_EPS)
                pre = (pre - lp.bn_running_mean.reshape(chan)) * scale.reshape(chan)
                pre = g.reshape((g.shape[0],) + chan[1:]) * pre + b.reshape((b.shape[0],) + chan[1:])
            K = pre.shape[0]
            pre = pre.reshape((K, T, B) + st.out_shape)
            v = _with_copy_axis(params[f"{i}.v_th"], 1)
            v = v.reshape((v.shape[0], 1) + st.threshold_shape)
            K = max(K, v.shape[0])
            pre = np.broadcast_to(pre, (K,) + pre.shape[1:])
            u = np.zeros_like(pre[:, 0])
            out = np.empty_like(pre)
            for t in range(T):
                u = c.leak * u + pre[:, t]
                out[:, t] = np.arctan(s.scale * (u - v)) / np.pi + 0.5
            h = out.reshape((K, T * B) + st.out_shape)
        elif kind is LayerKind.MAXPOOL2D:
            k = st.spec.window
            win = sliding_window_view(h, (k, k), axis=(3, 4))[:, :, :, ::k, ::k]
            h = win.max(axis=(-2, -1))
        # dropout is the identity in eval mode
    K = h.shape[0]
    counts = h.reshape(K, T, B, net.classes, net.population).sum(axis=(1, 4))
    rates = counts / (T * net.population)
    y = np.atleast_2d(as_float(y))
    return ((y[None] - rates) ** 2).sum(axis=(1, 2)) / (2 * B)


def _fd_entries(net, sample, y, params, name, entries, h, c, s, dtype):
    """Fourth-order central differences for the flat ``entries`` of ``name``."""
    base = params[name].astype(dtype)
    others = {k: v.astype(dtype) for k, v in params.items() if k != name}
    sample = as_float(sample).astype(dtype)
    y = as_float(y).astype(dtype)
    n = len(entries)
    stacked = np.broadcast_to(base, (len(STENCIL) * n,) + base.shape).copy()
    flat = stacked.reshape(len(STENCIL) * n, -1)
    for j, (off, _) in enumerate(STENCIL):
        flat[j * n + np.arange(n), entries] += off * h
    losses = reference_soft_losses(net, sample, y, {**others, name: stacked}, c, s)
    losses = losses.reshape(len(STENCIL), n)
    weights = np.array([w for _, w in STENCIL], dtype=dtype)
    return (weights[:, None] * losses).sum(axis=0) / (12 * h)


def _chunked(net, sample, y, params, name, entries, h, c, s, dtype):
    T, B = as_time_batch(sample, net.input_shape).shape[:2]
    widest = max(st.units for st in net.stages)
    chunk = max(1, COPY_BUDGET // (len(STENCIL) * T * B * widest))
    fd = np.empty(len(entries), dtype=dtype)
    for start in range(0, len(entries), chunk):
        sl = slice(start, start + chunk)
        fd[sl] = _fd_entries(net, sample, y, params, name, entries[sl], h, c, s, dtype)
    return fd


def finite_difference_grads(net, sample, y, epsilon=1e-3, c=None, s=None, names=None, dtype=np.float64):
    """Central-difference gradient of the soft loss for each named parameter."""
    params = net.parameters()
    out = {}
    for name in names or params:
        entries = np.arange(params[name].size)
        fd = _chunked(net, sample, y, params, name, entries, epsilon, c, s, dtype)
        out[name] = fd.reshape(params[name].shape)
    return out


def grad_check(net: Network, sample, y, c=None, s=None, epsilon=1e-3, names=None):
    """Largest per-entry relative error of the analytic soft-mode gradients.

    Every entry of every W, v_th and BN affine tensor is compared against the
    finite-difference oracle; the error of an entry is
    ``|g_analytic - g_fd| / max(|g_fd|, 1e-8)``.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ConfigError(f"epsilon must lie in [1e-6, 1e-3], got {epsilon}")
    s = net.surrogate if s is None else s
    y = np.atleast_2d(as_float(y))
    p, cache = soft_forward(sample, net, c, s)
    spec = LossSpec(S=p.shape[0], C=net.classes, P=net.population, T=cache.T)
    analytic = backward(cache, net, loss_grad_output(p, y, spec), c, s)
    fd = finite_difference_grads(net, sample, y, epsilon, c, s, names)
    params = net.parameters()
    worst = 0.0
    for name, g_fd in fd.items():
        if not np.isfinite(g_fd).all():
            raise NumericError(f"non-finite soft loss while perturbing {name}")
        a = analytic[name].reshape(-1)
        g_fd = g_fd.reshape(-1)
        err = np.abs(a - g_fd) / np.maximum(np.abs(g_fd), 1e-8)
        suspect = np.flatnonzero(err > REFINE_ABOVE)
        if suspect.size:
            precise = _chunked(net, sample, y, params, name, suspect, epsilon, c, s, np.longdouble)
            err[suspect] = np.abs(a[suspect] - precise) / np.maximum(np.abs(precise), 1e-8)
        worst = max(worst, float(err.max()))
    return worst
