"""Central finite-difference check of the autodiff gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .autodiff import Tensor, value_and_grad
from .errors import ContractError


@dataclass(frozen=True)
class GradCheckReport:
    """Per-parameter worst relative error ``|g_ad - g_fd| / max(1, |g_fd|)``."""

    per_param: dict
    epsilon: float

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values(), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def numeric_grad(loss_fn: Callable[..., Tensor], params, epsilon: float = 1e-5):
    """Central-difference gradient of ``loss_fn``; same container layout as ``params``."""
    named = isinstance(params, Mapping)
    keys = list(params) if named else list(range(len(params)))
    base = {k: np.array(params[k], dtype=np.float64) for k in keys}

    def evaluate(values) -> float:
        args = {k: Tensor(v) for k, v in values.items()}
        out = loss_fn(**args) if named else loss_fn(*[args[k] for k in keys])
        return out.item()

    grads = {}
    for k in keys:
        g = np.zeros_like(base[k])
        flat = g.reshape(-1)
        for i in range(flat.size):
            plus = {kk: v.copy() for kk, v in base.items()}
            minus = {kk: v.copy() for kk, v in base.items()}
            plus[k].reshape(-1)[i] += epsilon
            minus[k].reshape(-1)[i] -= epsilon
            flat[i] = (evaluate(plus) - evaluate(minus)) / (2.0 * epsilon)
        grads[k] = g
    return grads if named else [grads[k] for k in keys]


def finite_difference_check(loss_fn: Callable[..., Tensor], params,
                            epsilon: float = 1e-5) -> GradCheckReport:
    """Compare reverse-mode gradients of ``loss_fn`` at ``params`` with central differences."""
    if not 0.0 < epsilon <= 1e-2:
        raise ContractError(f"epsilon must lie in (0, 1e-2], got {epsilon}")
    _, ad = value_and_grad(loss_fn, params)
    fd = numeric_grad(loss_fn, params, epsilon)
    keys = list(params) if isinstance(params, Mapping) else list(range(len(params)))
    per_param = {}
    for k in keys:
        err = np.abs(ad[k] - fd[k]) / np.maximum(1.0, np.abs(fd[k]))
        per_param[k] = float(err.max()) if err.size else 0.0
    return GradCheckReport(per_param=per_param, epsilon=epsilon)


# randomized suite over the objective's building blocks --------------------------

SUITE_KINDS = ("ldam", "l_pi", "kd", "transition", "full")


def _suite_case(kind: str, rng: np.random.Generator):
    """A random small instance: ``(loss_fn, params)`` for one composition."""
    from . import autodiff as ad
    from .head import (ClassPartition, HeadParams, MergeConfig, base_posterior, head_logits,
                       transition_from_posterior)
    from .losses import image_proportions, kd_loss, ldam_loss, pi_regularizer, total_loss

    part = ClassPartition(int(rng.integers(1, 3)), int(rng.integers(1, 3)))
    K, B = part.n_classes, part.n_base_side
    N, F = int(rng.integers(3, 7)), int(rng.integers(3, 6))
    X = rng.normal(size=(N, F))
    labels = rng.integers(0, K, size=N)
    margins = rng.uniform(0.0, 0.5, size=K)
    image = np.arange(N) % 2
    pi = rng.dirichlet(np.ones(K), size=2)

    if kind == "ldam":
        return (lambda z: ldam_loss(z, labels, margins)), [rng.normal(size=(N, K))]
    if kind == "l_pi":
        return (lambda z: pi_regularizer(image_proportions(ad.row_softmax(z), image), pi)), \
            [rng.normal(size=(N, K))]
    if kind == "kd":
        frozen = rng.dirichlet(np.ones(B), size=N)
        return (lambda z: kd_loss(ad.row_softmax(z), frozen, part)), [rng.normal(size=(N, K))]

    W_b_t = rng.normal(size=(B, F))
    head = HeadParams.init(W_b_t, part, rng, hidden=2, out_std=0.5, novel_std=0.5)
    flat = {k: v + rng.normal(0.0, 0.1, size=v.shape) for k, v in head.flat().items()}
    post = base_posterior(X, W_b_t).data
    merge = MergeConfig(mode=str(rng.choice(["log-prob-sum", "raw-sum"])), gamma=float(rng.uniform(0.5, 1.5)))
    if kind == "transition":
        weights = rng.normal(size=(N, K))

        def transition(**p):
            h = head.with_flat(p)
            tr = transition_from_posterior(X, post, h.theta_r, h.theta_c, h.beta)
            return ad.sum_(ad.mul(tr, weights))
        return transition, flat

    lam = float(rng.uniform(0.0, 2.0))

    def full(**p):
        z = head_logits(X, head.with_flat(p), merge, posterior=post)
        l_pi = pi_regularizer(image_proportions(ad.row_softmax(z), image), pi)
        return total_loss(ldam_loss(z, labels, margins), l_pi, lam)
    return full, flat


def gradient_suite(n_instances: int = 100, seed: int = 0, epsilon: float = 1e-5,
                   kinds: tuple[str, ...] = SUITE_KINDS) -> list[tuple[str, GradCheckReport]]:
    """Finite-difference checks on ``n_instances`` random cases, cycling through ``kinds``."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_instances):
        kind = kinds[i % len(kinds)]
        loss_fn, params = _suite_case(kind, rng)
        out.append((kind, finite_difference_check(loss_fn, params, epsilon)))
    return out
