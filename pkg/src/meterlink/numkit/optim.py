"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.001
    weight_decay: float = 0.01
    lr_floor: float = 1e-5
    lr_decay_factor: float = 0.5
    patience: int = 10
    max_epochs: int = 300

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if not 0 < self.lr_floor < self.learning_rate:
            raise ValueError("lr_floor must be positive and below learning_rate")
        if not 0 < self.lr_decay_factor < 1:
            raise ValueError("lr_decay_factor must lie in (0, 1)")
        if self.patience < 1 or self.max_epochs < 1:
            raise ValueError("patience and max_epochs must be positive")


@dataclass
class AdamWState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    @classmethod
    def for_params(cls, params) -> "AdamWState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adamw_step(params, grads, state: AdamWState, cfg: OptimizerConfig, lr: float | None = None):
    """One AdamW update of the arrays in ``params`` (modified in place).

    Weight decay shrinks parameters by ``lr * weight_decay`` before the
    bias-corrected adaptive step. ``lr`` overrides ``cfg.learning_rate`` so a
    decayed schedule can reuse one config. A ``None`` gradient counts as zero.
    """
    lr = cfg.learning_rate if lr is None else lr
    weight_decay = cfg.weight_decay
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must align")
    state.t += 1
    c1 = 1 - BETA1**state.t
    c2 = 1 - BETA2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}")
        p *= 1 - lr * weight_decay
        m *= BETA1
        m += (1 - BETA1) * g
        v *= BETA2
        v += (1 - BETA2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + EPS)
    return params, state


class AdamW:
    """Stateful wrapper around :func:`adamw_step` for a list of tensors."""

    def __init__(self, tensors, cfg: OptimizerConfig):
        self.tensors = list(tensors)
        self.cfg = cfg
        self.lr = cfg.learning_rate
        self.state = AdamWState.for_params([t.data for t in self.tensors])

    def step(self) -> None:
        adamw_step([t.data for t in self.tensors], [t.grad for t in self.tensors], self.state, self.cfg,
                   lr=self.lr)

    def zero_grad(self) -> None:
        for t in self.tensors:
            t.grad = None
