"""SGD with momentum and the polynomial learning-rate schedule."""
from dataclasses import dataclass, field

import numpy as np

from ..errors import RejectedInputError


def poly_decay_lr(lr0, t, T, power=0.9):
    """``lr0 * (1 - t/T) ** power``."""
    if T <= 0:
        raise RejectedInputError(f"max epoch T must be positive, got {T}")
    if t < 0 or t > T:
        raise RejectedInputError(f"epoch t={t} outside [0, {T}]")
    return lr0 * (1.0 - t / T) ** power


@dataclass
class OptimizerState:
    lr0: float
    T: int
    momentum: float = 0.99
    t: int = 0
    velocity: list = field(default_factory=list)

    def lr(self):
        return poly_decay_lr(self.lr0, self.t, self.T)


def sgd_momentum_step(params, grads, state, lr):
    """In place: ``v = momentum * v + g``; ``p -= lr * v``.

    ``params`` are Tensors (or arrays); velocity buffers are created on the
    first call and must keep their shapes afterwards.
    """
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise RejectedInputError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.velocity:
        state.velocity = [np.zeros_like(_data(p)) for p in params]
    if len(state.velocity) != len(params):
        raise RejectedInputError("optimizer state was built for a different parameter list")
    for p, g, v in zip(params, grads, state.velocity):
        data = _data(p)
        if data.shape != np.shape(g) or v.shape != data.shape:
            raise RejectedInputError(f"gradient shape {np.shape(g)} does not match parameter shape {data.shape}")
        v *= state.momentum
        v += g
        data -= (lr * v).astype(data.dtype, copy=False)


def _data(p):
    return p.data if hasattr(p, "data") and not isinstance(p, np.ndarray) else p
