import numpy as np

from .errors import ShapeError


def sgd_step(params, grads, velocity, lr, momentum=0.9, weight_decay=0.0):
    """One SGD step with heavy-ball momentum and coupled weight decay.

    ``v <- momentum * v + (grad + weight_decay * param)``,
    ``param <- param - lr * v``.

    ``params`` and ``velocity`` are dicts of arrays updated in place;
    missing velocity buffers are created as zeros.
    """
    if not lr > 0:
        raise ValueError(f"lr must be positive, got {lr}")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        elif v.shape != p.shape:
            raise ShapeError(f"{name}: velocity shape {v.shape} != param shape {p.shape}")
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v
    return params


class SGD:
    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads, lr=None):
        sgd_step(self.params, grads, self.velocity, self.lr if lr is None else lr,
                 self.momentum, self.weight_decay)
