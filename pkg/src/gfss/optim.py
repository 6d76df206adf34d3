"""Full-batch SGD with heavy-ball momentum."""
from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError

FROZEN = frozenset({"W_b_t"})


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             velocity: dict[str, np.ndarray], lr: float, momentum: float):
    """One update ``v <- momentum * v + g``, ``p <- p - lr * v``.

    Returns new ``(params, velocity)`` dicts; the inputs are not modified.
    Missing velocity entries start at zero.
    """
    if FROZEN & params.keys():
        raise ContractError(f"frozen parameters passed to the optimizer: {sorted(FROZEN & params.keys())}")
    new_p, new_v = {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        v = velocity.get(name)
        v = np.zeros_like(g) if v is None else np.asarray(v, dtype=np.float64)
        if g.shape != np.shape(p) or v.shape != g.shape:
            raise ShapeError(f"{name}: param {np.shape(p)}, grad {g.shape}, velocity {v.shape}")
        v = momentum * v + g
        new_v[name] = v
        new_p[name] = p - lr * v
    return new_p, new_v
