"""Parameter update rules: plain SGD and Adam."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .tensor import Parameter


@dataclass
class OptimConfig:
    rule: str = "adam"  # "sgd" or "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None

    def __post_init__(self):
        if self.rule not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer rule {self.rule!r}")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")


class MissingGradientError(KeyError):
    pass


class Optimizer:
    """Stateful wrapper around :func:`optimize_step` (holds Adam moments)."""

    def __init__(self, params: Sequence[Parameter], config: OptimConfig):
        self.params = list(params)
        self.config = config
        self.t = 0
        self.m = {id(p): np.zeros_like(p.data) for p in self.params}
        self.v = {id(p): np.zeros_like(p.data) for p in self.params}

    def step(self, grads: Mapping) -> None:
        optimize_step(self.params, grads, self.config, state=self)


def _lookup(grads: Mapping, p: Parameter) -> np.ndarray:
    if p in grads:
        return grads[p]
    if id(p) in grads:
        return grads[id(p)]
    raise MissingGradientError(f"no gradient for parameter {p.name or p!r}")


def optimize_step(params: Sequence[Parameter], grads: Mapping, config: OptimConfig,
                  state: Optimizer | None = None) -> list[Parameter]:
    """Update ``params`` in place (by rebinding their data) and return them.

    ``grads`` may be keyed by the Parameter itself or by ``id(param)``.
    Adam needs ``state``; one is created on the fly for a single step otherwise.
    """
    gs = [np.asarray(_lookup(grads, p), dtype=np.float64) for p in params]
    if config.clip_norm is not None:
        total = float(np.sqrt(sum(float((g * g).sum()) for g in gs)))
        if total > config.clip_norm:
            gs = [g * (config.clip_norm / total) for g in gs]
    if config.lr == 0.0:
        return list(params)
    if config.rule == "sgd":
        for p, g in zip(params, gs):
            p.assign(p.data - config.lr * g)
        return list(params)
    if state is None:
        state = Optimizer(params, config)
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g in zip(params, gs):
        key = id(p)
        m = state.m.setdefault(key, np.zeros_like(p.data))
        v = state.v.setdefault(key, np.zeros_like(p.data))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[key], state.v[key] = m, v
        p.assign(p.data - config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps))
    return list(params)
