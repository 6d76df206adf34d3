"""Two-branch GFSS head: linear classification branch plus similarity-transition branch.

Class index layout everywhere: ``0`` background, ``1..n_base`` base classes,
``n_base+1..n_base+n_novel`` novel classes. The "base side" is background
plus base classes (``n_base + 1`` entries); the transition matrix maps a
posterior over the base side to a distribution over all classes.

All functions accept numpy arrays or :class:`~gfss.autodiff.Tensor` objects,
so the same code path runs under a gradient tape during adaptation.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .errors import ContractError, ShapeError


@dataclass(frozen=True)
class ClassPartition:
    n_base: int
    n_novel: int

    def __post_init__(self):
        if self.n_base < 1 or self.n_novel < 1:
            raise ContractError(f"need n_base >= 1 and n_novel >= 1, got {self.n_base}, {self.n_novel}")

    @property
    def n_classes(self) -> int:
        return 1 + self.n_base + self.n_novel

    @property
    def n_base_side(self) -> int:
        return 1 + self.n_base

    @property
    def base_ids(self) -> range:
        return range(1, 1 + self.n_base)

    @property
    def novel_ids(self) -> range:
        return range(1 + self.n_base, self.n_classes)


@dataclass(frozen=True)
class MergeConfig:
    """How the transition probabilities are folded into the classification logits.

    ``log-prob-sum`` adds ``gamma * log(tr + epsilon)``; ``raw-sum`` adds
    ``gamma * tr`` unchanged.
    """

    mode: str = "log-prob-sum"
    gamma: float = 1.0
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.mode not in ("log-prob-sum", "raw-sum"):
            raise ContractError(f"unknown merge mode {self.mode!r}")
        if self.gamma < 0:
            raise ContractError(f"gamma must be >= 0, got {self.gamma}")
        if not 0.0 < self.epsilon <= 1e-3:
            raise ContractError(f"epsilon must lie in (0, 1e-3], got {self.epsilon}")


class MLPParams(NamedTuple):
    """One hidden tanh layer: ``tanh(x @ w1 + b1) @ w2 + b2``."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass(frozen=True)
class HeadParams:
    W_b_t: np.ndarray
    W_b_f: np.ndarray
    W_n_f: np.ndarray
    theta_r: MLPParams
    theta_c: MLPParams
    beta: np.ndarray
    partition: ClassPartition

    @classmethod
    def init(cls, W_b_t: np.ndarray, partition: ClassPartition,
             rng: np.random.Generator, hidden: int | None = None,
             kappa: float = 4.0, beta_init: str = "diagonal",
             novel_std: float = 0.01, out_std: float = 0.01,
             row_bias: float = 1.0) -> "HeadParams":
        """Fresh head around a frozen base classifier.

        ``W_b_f`` starts as a copy of ``W_b_t``; novel rows are N(0, novel_std).
        Output layers of both MLPs are scaled near zero; the row MLP's output
        bias is ``row_bias`` so the outer product has a non-vanishing gradient
        on the column factor from the first step. ``beta`` is ``kappa * I`` on
        the base-to-base block (``beta_init="diagonal"``) or all zeros
        (``"uniform"``).
        """
        W_b_t = np.array(W_b_t, dtype=np.float64)
        n_side, F = W_b_t.shape
        if n_side != partition.n_base_side:
            raise ShapeError(f"W_b_t has {n_side} rows, partition needs {partition.n_base_side}")
        hidden = hidden or max(1, F // 4)
        K = partition.n_classes

        def mlp(out_dim: int, bias: float) -> MLPParams:
            return MLPParams(
                w1=rng.normal(0.0, 1.0 / np.sqrt(F), size=(F, hidden)),
                b1=np.zeros(hidden),
                w2=rng.normal(0.0, out_std, size=(hidden, out_dim)),
                b2=np.full(out_dim, bias),
            )

        theta_r = mlp(n_side, row_bias)
        theta_c = mlp(K, 0.0)
        W_n_f = rng.normal(0.0, novel_std, size=(partition.n_novel, F))
        return cls(W_b_t=W_b_t, W_b_f=W_b_t.copy(), W_n_f=W_n_f, theta_r=theta_r,
                   theta_c=theta_c, beta=init_beta(partition, kappa, beta_init),
                   partition=partition)

    # flat name <-> field mapping used by the optimizer
    def flat(self) -> dict[str, np.ndarray]:
        out = {"W_b_f": self.W_b_f, "W_n_f": self.W_n_f, "beta": self.beta}
        for prefix, theta in (("r_", self.theta_r), ("c_", self.theta_c)):
            for name, value in theta._asdict().items():
                out[prefix + name] = value
        return out

    def with_flat(self, values: dict[str, np.ndarray]) -> "HeadParams":
        if "W_b_t" in values:
            raise ContractError("W_b_t is frozen and cannot be updated")
        merged = {**self.flat(), **values}
        return replace(
            self,
            W_b_f=merged["W_b_f"], W_n_f=merged["W_n_f"], beta=merged["beta"],
            theta_r=MLPParams(*(merged["r_" + n] for n in MLPParams._fields)),
            theta_c=MLPParams(*(merged["c_" + n] for n in MLPParams._fields)),
        )


def init_beta(partition: ClassPartition, kappa: float = 4.0, mode: str = "diagonal") -> np.ndarray:
    beta = np.zeros((partition.n_classes, partition.n_base_side))
    if mode == "diagonal":
        beta[: partition.n_base_side] = kappa * np.eye(partition.n_base_side)
    elif mode != "uniform":
        raise ContractError(f"unknown beta init {mode!r}")
    return beta


def mlp_forward(x, theta: MLPParams) -> Tensor:
    """Apply an MLP to one feature vector ``(F,)`` or a batch ``(N, F)``."""
    x = as_tensor(x)
    w1, b1, w2, b2 = (as_tensor(p) for p in theta)
    if x.shape[-1] != w1.shape[0]:
        raise ShapeError(f"feature dim {x.shape[-1]} does not match MLP input {w1.shape[0]}")
    if x.ndim == 1:
        h = ad.tanh(ad.add(x @ w1, b1))
        return ad.add(h @ w2, b2)
    h = ad.tanh(ad.add_row(x @ w1, b1))
    return ad.add_row(h @ w2, b2)


def classification_logits(features, W_b_f, W_n_f) -> Tensor:
    """Bias-free linear logits ``features @ cat([W_b_f, W_n_f]).T``, shape ``(N, K)``."""
    features, W_b_f, W_n_f = as_tensor(features), as_tensor(W_b_f), as_tensor(W_n_f)
    if W_b_f.shape[1] != W_n_f.shape[1] or features.shape[-1] != W_b_f.shape[1]:
        raise ShapeError(
            f"features {features.shape} vs classifiers {W_b_f.shape}, {W_n_f.shape}")
    return features @ ad.concat_rows([W_b_f, W_n_f]).T


def transition_matrix_at(feature, theta_r: MLPParams, theta_c: MLPParams, beta) -> Tensor:
    """Column-stochastic ``(K, n_base_side)`` matrix for a single pixel feature."""
    feature, beta = as_tensor(feature), as_tensor(beta)
    if feature.ndim != 1:
        raise ShapeError(f"expected one feature vector, got shape {feature.shape}")
    cols = mlp_forward(feature, theta_c)
    rows = mlp_forward(feature, theta_r)
    if beta.shape != (cols.shape[0], rows.shape[0]):
        raise ShapeError(f"beta {beta.shape} does not match ({cols.shape[0]}, {rows.shape[0]})")
    return ad.col_softmax(ad.add(ad.outer(cols, rows), beta))


@lru_cache(maxsize=32)
def _sum_over_columns(K: int, B: int) -> np.ndarray:
    # column-major flat index b*K + k -> k
    m = np.zeros((K * B, K))
    m[np.arange(K * B), np.arange(K * B) % K] = 1.0
    m.setflags(write=False)
    return m


def _log_transition_flat(features, theta_r, theta_c, beta) -> Tensor:
    """Per-pixel log transition matrices, flattened column-major to ``(N, B*K)``.

    Column-major keeps each column of a pixel's matrix contiguous, so the
    column softmax becomes a softmax over consecutive blocks of ``K``.
    """
    features, beta = as_tensor(features), as_tensor(beta)
    cols = mlp_forward(features, theta_c)
    rows = mlp_forward(features, theta_r)
    K, B = cols.shape[1], rows.shape[1]
    if beta.shape != (K, B):
        raise ShapeError(f"beta {beta.shape} does not match ({K}, {B})")
    raw = ad.add_row(ad.row_outer(rows, cols), ad.ravel(ad.transpose(beta)))
    return ad.block_log_softmax(raw, K)


def transition_matrices(features, theta_r: MLPParams, theta_c: MLPParams, beta) -> np.ndarray:
    """Numeric per-pixel transition matrices, shape ``(N, K, n_base_side)``."""
    flat = ad.exp(_log_transition_flat(features, theta_r, theta_c, beta)).data
    K, B = as_tensor(beta).shape
    return flat.reshape(-1, B, K).transpose(0, 2, 1)


def transition_from_posterior(features, base_posterior, theta_r, theta_c, beta) -> Tensor:
    """``S(x_j) @ base_posterior_j`` for every pixel; rows lie on the simplex."""
    base_posterior = as_tensor(base_posterior)
    log_s = _log_transition_flat(features, theta_r, theta_c, beta)
    K = as_tensor(beta).shape[0]
    B = base_posterior.shape[1]
    if log_s.shape[1] != K * B:
        raise ShapeError(f"base posterior width {B} does not match transition matrices")
    # weight entry b*K + k of pixel j by p_j[b], then sum over b
    weights = np.repeat(base_posterior.data, K, axis=1)
    return ad.mul(ad.exp(log_s), weights) @ _sum_over_columns(K, B)


def base_posterior(features, W_b_t) -> Tensor:
    """Frozen-classifier posterior ``softmax(features @ W_b_t.T)`` over the base side."""
    features, W_b_t = as_tensor(features), as_tensor(W_b_t)
    if features.shape[-1] != W_b_t.shape[1]:
        raise ShapeError(f"features {features.shape} vs W_b_t {W_b_t.shape}")
    return ad.row_softmax(features @ W_b_t.T)


def transition_logits(features, W_b_t, theta_r: MLPParams, theta_c: MLPParams, beta) -> Tensor:
    """Transition-branch output: per-pixel probability vectors of length K."""
    features = as_tensor(features)
    if features.ndim == 1:
        S = transition_matrix_at(features, theta_r, theta_c, beta)
        return S @ base_posterior(features, W_b_t)
    return transition_from_posterior(features, base_posterior(features, W_b_t),
                                     theta_r, theta_c, beta)


def merge_logits(cls_logits, tr_probs, cfg: MergeConfig = MergeConfig()) -> Tensor:
    cls_logits, tr_probs = as_tensor(cls_logits), as_tensor(tr_probs)
    if cls_logits.shape != tr_probs.shape:
        raise ShapeError(f"merge: shapes {cls_logits.shape} and {tr_probs.shape} differ")
    if cfg.mode == "raw-sum":
        return ad.add(cls_logits, ad.scale(tr_probs, cfg.gamma))
    return ad.add(cls_logits, ad.scale(ad.log(ad.shift(tr_probs, cfg.epsilon)), cfg.gamma))


def head_logits(features, params: HeadParams, cfg: MergeConfig = MergeConfig(),
                posterior=None) -> Tensor:
    """Final pre-softmax logits. With ``gamma == 0`` the transition branch is skipped."""
    cls = classification_logits(features, params.W_b_f, params.W_n_f)
    if cfg.gamma == 0.0:
        return cls
    if posterior is None:
        posterior = base_posterior(features, params.W_b_t)
    tr = transition_from_posterior(features, posterior, params.theta_r, params.theta_c, params.beta)
    return merge_logits(cls, tr, cfg)


def predict(features, params: HeadParams, cfg: MergeConfig = MergeConfig()) -> Tensor:
    """Per-pixel class probabilities ``(N, K)``."""
    return ad.row_softmax(head_logits(features, params, cfg))
