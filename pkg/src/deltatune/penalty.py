"""Change penalties on the delta parameters and the MAS importance penalty."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tape
from .network import ModelSpec, forward


class NormKind(str, Enum):
    L1 = "L1"
    L2 = "L2"
    COMBINED = "Combined"


@dataclass(frozen=True)
class PenaltyConfig:
    kind: NormKind = NormKind.COMBINED
    lam: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", NormKind(self.kind))
        if not self.lam >= 0:
            raise ValueError(f"penalty lambda must be >= 0, got {self.lam}")


def penalty_value(delta: ParamSet, config: PenaltyConfig) -> float:
    """lam * |d|_1, lam * sum(d^2), or lam * 0.5 * (|d|_1 + sum(d^2))."""
    l1 = sum(float(np.abs(t.data).sum()) for _, t in delta.items())
    l2 = sum(float(np.sum(t.data * t.data)) for _, t in delta.items())
    if config.kind is NormKind.L1:
        return config.lam * l1
    if config.kind is NormKind.L2:
        return config.lam * l2
    return config.lam * 0.5 * (l1 + l2)


def penalty_grad(delta: ParamSet, config: PenaltyConfig) -> dict[str, np.ndarray]:
    """Adds the penalty (sub)gradient into each entry's ``grad`` and returns it.

    sign(0) = 0, so a zero delta gets exactly zero penalty gradient.
    """
    grads = {}
    for name, t in delta.items():
        d = t.data
        if config.kind is NormKind.L1:
            g = config.lam * np.sign(d)
        elif config.kind is NormKind.L2:
            g = config.lam * 2.0 * d
        else:
            g = config.lam * 0.5 * (np.sign(d) + 2.0 * d)
        grads[name] = g
        t.grad = g.copy() if t.grad is None else t.grad + g
    return grads


def clip_zero_crossings(delta: ParamSet, before: dict, velocity: ParamSet, config: PenaltyConfig) -> int:
    """Set entries that crossed zero during the last step to exactly zero.

    Only applies when the penalty has an l1 part.  A plain subgradient step
    never lands on zero, so without this an l1 penalty only makes entries
    oscillate around it with amplitude lr * lam.  Velocity of clipped entries
    is reset.  Returns the number of clipped entries.
    """
    if config.kind is NormKind.L2 or config.lam == 0:
        return 0
    clipped = 0
    for name, t in delta.items():
        old = before[name]
        crossed = (old != 0) & (np.sign(t.data) != np.sign(old))
        if crossed.any():
            t.data = np.where(crossed, 0.0, t.data)
            velocity[name].data = np.where(crossed, 0.0, velocity[name].data)
            clipped += int(crossed.sum())
    return clipped


@dataclass
class MasState:
    omega: dict
    anchor: dict
    lambda_mas: float = 1.0

    def __post_init__(self):
        for k, w in self.omega.items():
            if np.any(w < 0):
                raise ValueError(f"MAS importance for {k!r} must be non-negative")


def mas_importance(spec: ModelSpec, params: ParamSet, data) -> dict[str, np.ndarray]:
    """Mean over samples of |d ||f(x)||^2 / d theta| for every parameter entry."""
    data = np.asarray(data, dtype=np.float64)
    if len(data) == 0:
        raise ValueError("mas_importance: empty data")
    probe = params.copy(trainable=True)
    omega = {k: np.zeros(t.shape) for k, t in probe.items()}
    for x in data:
        with Tape() as tape:
            out = ad.sum_squares(forward(spec, probe, x[None]))
        ad.backward(tape, out, probe)
        for k, t in probe.items():
            omega[k] += np.abs(t.grad)
            t.grad = None
    return {k: w / len(data) for k, w in omega.items()}


def mas_penalty_grad(params: ParamSet, state: MasState) -> float:
    """Returns lambda * sum(omega * (theta - anchor)^2) and adds its gradient to ``grad``."""
    value = 0.0
    for name, t in params.items():
        if name not in state.omega:
            raise ad.ShapeError(f"MAS state has no entry {name!r}")
        w, a = state.omega[name], state.anchor[name]
        if w.shape != t.shape or a.shape != t.shape:
            raise ad.ShapeError(f"MAS state shape {w.shape} does not match {name!r} shape {t.shape}")
        diff = t.data - a
        value += state.lambda_mas * float(np.sum(w * diff * diff))
        g = state.lambda_mas * 2.0 * w * diff
        t.grad = g if t.grad is None else t.grad + g
    return value
