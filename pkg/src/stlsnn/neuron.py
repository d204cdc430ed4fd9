"""Pointwise LIF dynamics and the surrogate spike functions.

All functions broadcast over numpy arrays. The hard forward pass only uses
:func:`decay_factor`, :func:`lif_step` and :func:`fire`; the surrogate is
consulted for derivatives, and for values only by the soft oracle mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, UnsupportedSurrogateError


@dataclass(frozen=True)
class LifConstants:
    tau: float = 2.0  # ms
    dt: float = 1.0  # ms
    v_rest: float = 0.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not 0 < self.dt <= self.tau:
            raise ConfigError(f"dt must satisfy 0 < dt <= tau, got dt={self.dt}, tau={self.tau}")
        if self.v_rest != 0:
            raise ConfigError("only v_rest = 0 is supported")

    @property
    def leak(self) -> float:
        """Decay factor applied when the neuron did not spike last step."""
        return 1.0 - self.dt / self.tau


@dataclass
class NeuronState:
    u: np.ndarray | float = 0.0
    o_prev: np.ndarray | int = 0


class SurrogateKind(str, Enum):
    ARCTAN = "arctan"
    RECTANGULAR = "rectangular"


@dataclass(frozen=True)
class SurrogateSpec:
    """Surrogate shape. ``scale`` is the arctan slope or the rectangle width."""

    kind: SurrogateKind = SurrogateKind.ARCTAN
    scale: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", SurrogateKind(self.kind))
        if self.scale is None:
            default = math.pi if self.kind is SurrogateKind.ARCTAN else 1.0
            object.__setattr__(self, "scale", default)
        if not self.scale > 0:
            raise ConfigError(f"surrogate scale must be positive, got {self.scale}")


def decay_factor(o_prev, c: LifConstants):
    """0 after a spike (hard reset), ``1 - dt/tau`` otherwise."""
    o_prev = np.asarray(o_prev)
    return np.where(o_prev != 0, 0.0, c.leak)


def lif_step(state: NeuronState, x, c: LifConstants):
    """One membrane update; ``x`` already carries the dt/tau input scaling."""
    return decay_factor(state.o_prev, c) * np.asarray(state.u, dtype=np.result_type(state.u, float)) + x


def fire(u, v_th):
    # inclusive: u == v_th fires
    u = np.asarray(u)
    return (u >= v_th).astype(u.dtype if u.dtype.kind == "f" else float)


def surrogate_value(u, v_th, s: SurrogateSpec = SurrogateSpec()):
    if s.kind is not SurrogateKind.ARCTAN:
        raise UnsupportedSurrogateError(f"{s.kind.value} surrogate has no forward value")
    return np.arctan(s.scale * (np.asarray(u) - v_th)) / np.pi + 0.5


def surrogate_grad(u, v_th, s: SurrogateSpec = SurrogateSpec()):
    """d(spike)/du under the surrogate. d(spike)/d(v_th) is the negative of this."""
    d = np.asarray(u) - v_th
    if s.kind is SurrogateKind.ARCTAN:
        return s.scale / (np.pi * (1.0 + (s.scale * d) ** 2))
    return np.where(np.abs(d) < s.scale / 2, 1.0 / s.scale, 0.0)
