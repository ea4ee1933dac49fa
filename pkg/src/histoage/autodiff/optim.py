import math

import numpy as np

from histoage.utils.errors import NonFiniteGradientError


def sgd_step(params: dict, grads: dict, lr: float, momentum: float, weight_decay: float,
             velocity: dict | None = None, epoch: int = -1, batch: int = -1) -> tuple[dict, dict]:
    """
    One SGD-with-momentum update on plain arrays:
        v <- momentum * v + grad + weight_decay * p
        p <- p - lr * v
    Returns (new_params, new_velocity); inputs are not modified. The step is
    refused as a whole if any gradient is non-finite.
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not 0 <= momentum < 1:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    if weight_decay < 0:
        raise ValueError(f"weight decay must be non-negative, got {weight_decay}")

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name, epoch, batch)

    velocity = velocity or {}
    new_params, new_velocity = {}, {}
    for name, p in params.items():
        g = grads[name]
        v = velocity.get(name)
        v = g + weight_decay * p if v is None else momentum * v + g + weight_decay * p
        new_velocity[name] = v.astype(p.dtype, copy=False)
        new_params[name] = (p - lr * v).astype(p.dtype, copy=False)
    return new_params, new_velocity


class SGD:
    """Stateful wrapper: keeps the momentum buffers and writes updates into Parameters."""

    def __init__(self, parameters: dict, lr: float = 0.05, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.parameters = parameters
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {}

    def step(self, grads: dict, lr: float | None = None, epoch: int = -1, batch: int = -1):
        current = {name: p.data for name, p in self.parameters.items()}
        updated, self.velocity = sgd_step(
            current, grads, lr or self.lr, self.momentum, self.weight_decay,
            velocity=self.velocity, epoch=epoch, batch=batch,
        )
        for name, p in self.parameters.items():
            p.data = updated[name]


def cosine_lr(base_lr: float, epoch: int, epochs: int) -> float:
    """Cosine decay from base_lr over the epoch budget (epoch is 0-based)."""
    if epochs <= 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))
