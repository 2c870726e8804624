"""SGD with momentum and the two learning-rate schedules.

Update rule (classical momentum):

    v <- momentum * v + grad + weight_decay * param
    param <- param - lr * v

With ``nesterov=True`` the step uses grad + momentum * v after the buffer
update (the common deep-learning formulation).  Weight decay applies to conv
and linear weights only — never to normalization parameters or biases.
"""
from __future__ import annotations

import numpy as np

from .tensor import ConfigError, NumericalError, Tensor

DECAYED_KINDS = ("conv_weight", "linear_weight")


def poly_lr(base: float, iteration: int, max_iter: int, power: float = 0.9) -> float:
    """base * (1 - iter/max_iter)^power; strictly decreasing for power > 0."""
    if not 0 <= iteration <= max_iter:
        raise ConfigError(f"poly_lr: iteration {iteration} outside [0, {max_iter}]")
    return base * (1.0 - iteration / max_iter) ** power


def step_lr(base: float, epoch: int, milestones, factor: float = 0.1) -> float:
    """base * factor^(milestones passed); milestones must strictly increase."""
    ms = list(milestones)
    if any(b <= a for a, b in zip(ms, ms[1:])):
        raise ConfigError(f"step_lr: milestones must strictly increase, got {ms}")
    return base * factor ** sum(1 for m in ms if epoch >= m)


class Schedule:
    """Learning rate as a function of the iteration counter."""

    def __init__(self, kind: str, base: float, *, max_iter: int = 0, power: float = 0.9,
                 milestones=(), factor: float = 0.1, iters_per_epoch: int = 1):
        if kind not in ("poly", "step", "const"):
            raise ConfigError(f"opt.schedule: unknown schedule {kind!r}")
        self.kind = kind
        self.base = base
        self.max_iter = max_iter
        self.power = power
        self.milestones = tuple(milestones)
        self.factor = factor
        self.iters_per_epoch = max(1, iters_per_epoch)

    def lr(self, iteration: int) -> float:
        if self.kind == "poly":
            return poly_lr(self.base, min(iteration, self.max_iter), self.max_iter, self.power)
        if self.kind == "step":
            return step_lr(self.base, iteration // self.iters_per_epoch,
                           self.milestones, self.factor)
        return self.base


class SGD:
    def __init__(self, params: list[Tensor], momentum: float = 0.9,
                 weight_decay: float = 0.0, nesterov: bool = False,
                 check_finite: bool = False):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nesterov = nesterov
        self.check_finite = check_finite
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        for p, buf in zip(self.params, self.buffers):
            if p.grad is None:
                continue
            g = p.grad
            if self.check_finite and not np.isfinite(g).all():
                raise NumericalError(f"non-finite gradient for {p.name!r}")
            if self.weight_decay and p.kind in DECAYED_KINDS:
                g = g + self.weight_decay * p.data
            buf *= self.momentum
            buf += g
            update = g + self.momentum * buf if self.nesterov else buf
            p.data -= (lr * update).astype(p.data.dtype, copy=False)

    def state_tensors(self) -> dict:
        """Momentum buffers keyed by parameter name (for checkpointing)."""
        return {f"opt/{p.name}": buf for p, buf in zip(self.params, self.buffers)}

    def load_state_tensors(self, state: dict) -> None:
        for i, p in enumerate(self.params):
            key = f"opt/{p.name}"
            if key in state:
                buf = state[key]
                if buf.shape != self.buffers[i].shape:
                    raise ConfigError(f"momentum buffer shape mismatch for {p.name!r}")
                self.buffers[i] = buf.astype(self.buffers[i].dtype, copy=True)
