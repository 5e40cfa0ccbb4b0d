"""SGD with momentum and the cosine-annealed learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from .encoders import ParamDict


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Cosine annealing from lr0 at step 0 down to 0 at the final step:
    lr(t) = lr0 * (1 + cos(pi * t / T)) / 2."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * step / total_steps))


def sgd_step(
    params: ParamDict,
    grads: ParamDict,
    velocities: ParamDict | None,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
) -> tuple[ParamDict, ParamDict]:
    """One SGD update: v <- momentum*v + (grad + wd*param); param <- param - lr*v.

    Pure: returns fresh (params, velocities) dicts.
    """
    new_params: ParamDict = {}
    new_vel: ParamDict = {}
    for name, param in params.items():
        if name not in grads:
            raise ValueError(f"missing gradient for parameter {name!r}")
        grad = grads[name]
        if grad.shape != param.shape:
            raise ValueError(
                f"shape mismatch for {name!r}: param {param.shape}, grad {grad.shape}"
            )
        vel = velocities.get(name) if velocities else None
        if vel is None:
            vel = np.zeros_like(param)
        vel = momentum * vel + (grad + weight_decay * param)
        new_vel[name] = vel
        new_params[name] = param - lr * vel
    return new_params, new_vel
