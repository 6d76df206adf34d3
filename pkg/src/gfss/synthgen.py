"""Synthetic GFSS tasks: prototype features, long-tailed class layouts and a base-phase trainer.

Features are generated directly in R^F. Each class has a unit-norm
prototype; a novel class can be pinned at a chosen cosine similarity to a
base "anchor" prototype. A pixel feature is its class prototype plus
isotropic Gaussian noise, rounded to float32 precision so that files written
in the 32-bit feature-map format reload bit-exactly.

Class regions are contiguous runs laid out in boustrophedon (snake) order,
so every region is a 4-connected band of rows.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericalError
from .head import ClassPartition
from .losses import cross_entropy
from .optim import sgd_step


@dataclass(frozen=True)
class TaskSpec:
    feature_dim: int = 32
    n_base: int = 4
    n_novel: int = 2
    # novel class id -> (anchor base class id, cosine similarity)
    similarity: dict = field(default_factory=dict)
    noise_std: float = 0.3
    image_size: tuple = (24, 24)
    head_budget: int = 1024
    decay: float = 0.5
    novel_in_base: bool = True
    n_base_images: int = 8
    n_support_images: int = 5
    support_novel_fraction: tuple = (0.1, 0.3)
    n_query_images: int = 4
    query_alpha: float = 2.0
    seed: int = 0

    def __post_init__(self):
        try:
            sim = {int(k): (int(v[0]), float(v[1])) for k, v in dict(self.similarity).items()}
        except (TypeError, ValueError, IndexError) as exc:
            raise ConfigError(f"expected {{novel: [anchor, cosine]}}: {exc}", key="similarity") from exc
        object.__setattr__(self, "similarity", sim)
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "support_novel_fraction",
                           tuple(float(v) for v in self.support_novel_fraction))
        ints = ("feature_dim", "n_base", "n_novel", "head_budget", "n_base_images",
                "n_support_images", "n_query_images")
        for name in ints:
            if int(getattr(self, name)) < 1:
                raise ConfigError("must be >= 1", key=name)
        if len(self.image_size) != 2 or min(self.image_size) < 1:
            raise ConfigError(f"bad image size {self.image_size}", key="image_size")
        if self.noise_std < 0:
            raise ConfigError("must be >= 0", key="noise_std")
        if not 0.0 < self.decay <= 1.0:
            raise ConfigError("must lie in (0, 1]", key="decay")
        lo, hi = self.support_novel_fraction
        if not 0.0 < lo <= hi < 1.0:
            raise ConfigError("need 0 < lo <= hi < 1", key="support_novel_fraction")
        part = self.partition
        for novel, (anchor, sim) in self.similarity.items():
            if novel not in part.novel_ids:
                raise ConfigError(f"{novel} is not a novel class id", key=f"similarity.{novel}")
            if anchor not in part.base_ids:
                raise ConfigError(f"anchor {anchor} is not a base class id", key=f"similarity.{novel}")
            if not 0.0 <= sim <= 1.0:
                raise ConfigError(f"similarity {sim} outside [0, 1]", key=f"similarity.{novel}")

    @property
    def partition(self) -> ClassPartition:
        return ClassPartition(int(self.n_base), int(self.n_novel))

    @property
    def pixels_per_image(self) -> int:
        return int(self.image_size[0]) * int(self.image_size[1])


@dataclass
class SupportImage:
    features: np.ndarray   # (H*W, F)
    mask: np.ndarray       # (H*W,) 1 = novel class, 0 = background
    novel_class: int


@dataclass
class QueryImage:
    features: np.ndarray   # (H*W, F)
    labels: np.ndarray     # (H*W,) full ground truth


@dataclass
class Episode:
    support: list[SupportImage]
    query: list[QueryImage]
    partition: ClassPartition
    train_histogram: np.ndarray
    image_size: tuple

    def support_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked support features and per-pixel class ids (0 or the image's novel class)."""
        feats = np.concatenate([s.features for s in self.support])
        labels = np.concatenate([np.where(s.mask == 1, s.novel_class, s.mask)
                                 for s in self.support]).astype(np.int64)
        return feats, labels

    def query_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stacked query features, labels and the image index of each pixel."""
        feats = np.concatenate([q.features for q in self.query])
        labels = np.concatenate([q.labels for q in self.query]).astype(np.int64)
        index = np.concatenate([np.full(len(q.labels), i) for i, q in enumerate(self.query)])
        return feats, labels, index


@dataclass
class BaseDataset:
    """Base-phase images. ``labels`` fold novel pixels into background; ``true_labels`` do not."""

    features: list[np.ndarray]
    labels: list[np.ndarray]
    true_labels: list[np.ndarray]
    partition: ClassPartition

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return np.concatenate(self.features), np.concatenate(self.labels).astype(np.int64)

    def histogram(self) -> np.ndarray:
        _, y = self.arrays()
        return np.bincount(y, minlength=self.partition.n_base_side).astype(np.int64)


def long_tail_budgets(head: int, ratio: float, n: int) -> list[int]:
    """Geometric pixel budgets ``head * ratio**i`` (rounded, at least 1) for ``n`` classes."""
    return [max(1, int(round(head * ratio ** i))) for i in range(n)]


def snake_order(h: int, w: int) -> np.ndarray:
    """Flat pixel indices visiting rows left-to-right, then right-to-left, alternately."""
    grid = np.arange(h * w).reshape(h, w)
    grid[1::2] = grid[1::2, ::-1]
    return grid.reshape(-1)


def layout_image(counts: dict[int, int], h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Label image with exactly ``counts[c]`` pixels of class ``c``, one contiguous run each."""
    classes = [c for c in counts if counts[c] > 0]
    order = rng.permutation(len(classes))
    seq = np.concatenate([np.full(counts[classes[i]], classes[i]) for i in order])
    if seq.size != h * w:
        raise ConfigError(f"class counts sum to {seq.size}, image has {h * w} pixels")
    labels = np.empty(h * w, dtype=np.int64)
    labels[snake_order(h, w)] = seq
    return labels


def make_prototypes(spec: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Unit prototypes for every class; pinned novel classes sit at the requested cosine to their anchor."""
    part = spec.partition
    F = spec.feature_dim
    protos = rng.normal(size=(part.n_classes, F))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    for novel in part.novel_ids:
        if novel not in spec.similarity:
            continue
        anchor, sim = spec.similarity[novel]
        a = protos[anchor]
        u = protos[novel] - (protos[novel] @ a) * a
        u /= np.linalg.norm(u)
        protos[novel] = sim * a + np.sqrt(max(0.0, 1.0 - sim ** 2)) * u
    return protos


def _features(protos: np.ndarray, labels: np.ndarray, noise: float,
              rng: np.random.Generator) -> np.ndarray:
    feats = protos[labels] + noise * rng.normal(size=(labels.size, protos.shape[1]))
    return feats.astype(np.float32).astype(np.float64)


def _split(total: int, parts: int) -> list[int]:
    q, r = divmod(total, parts)
    return [q + (1 if i < r else 0) for i in range(parts)]


def _largest_remainder(shares: np.ndarray, total: int) -> np.ndarray:
    raw = shares * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    counts[np.argsort(-(raw - counts), kind="stable")[:short]] += 1
    return counts


def generate_task(spec: TaskSpec) -> tuple[Episode, BaseDataset]:
    """Draw one synthetic episode plus the base-phase dataset that precedes it."""
    rng = np.random.default_rng(spec.seed)
    part = spec.partition
    h, w = (int(v) for v in spec.image_size)
    hw = h * w
    protos = make_prototypes(spec, rng)

    # base phase: exact long-tail budgets, novel pixels relabeled background
    fg = list(part.base_ids) + (list(part.novel_ids) if spec.novel_in_base else [])
    budgets = dict(zip(fg, long_tail_budgets(spec.head_budget, spec.decay, len(fg))))
    per_image = {c: _split(b, spec.n_base_images) for c, b in budgets.items()}
    base_feats, base_labels, base_true = [], [], []
    for i in range(spec.n_base_images):
        counts = {c: per_image[c][i] for c in fg}
        used = sum(counts.values())
        if used > hw:
            raise ConfigError(f"base image {i} needs {used} pixels, only {hw} available",
                              key="head_budget")
        counts[0] = hw - used
        true = layout_image(counts, h, w, rng)
        base_true.append(true)
        base_labels.append(np.where(true >= part.n_base_side, 0, true))
        base_feats.append(_features(protos, true, spec.noise_std, rng))
    base = BaseDataset(base_feats, base_labels, base_true, part)

    support = []
    lo, hi = spec.support_novel_fraction
    for novel in part.novel_ids:
        for _ in range(spec.n_support_images):
            n_fg = min(hw - 1, max(1, int(round(rng.uniform(lo, hi) * hw))))
            labels = layout_image({novel: n_fg, 0: hw - n_fg}, h, w, rng)
            support.append(SupportImage(features=_features(protos, labels, spec.noise_std, rng),
                                        mask=(labels == novel).astype(np.int64),
                                        novel_class=novel))

    query = []
    for _ in range(spec.n_query_images):
        shares = rng.dirichlet(np.full(part.n_classes, spec.query_alpha))
        counts = _largest_remainder(shares, hw)
        labels = layout_image(dict(enumerate(counts.tolist())), h, w, rng)
        query.append(QueryImage(features=_features(protos, labels, spec.noise_std, rng),
                                labels=labels))

    episode = Episode(support=support, query=query, partition=part,
                      train_histogram=base.histogram(), image_size=(h, w))
    return episode, base


def train_base_classifier(dataset: BaseDataset, epochs: int = 100, lr: float = 0.5,
                          momentum: float = 0.9, seed: int = 0,
                          init_std: float = 0.01) -> np.ndarray:
    """Bias-free linear classifier over background + base classes, trained with cross-entropy."""
    X, y = dataset.arrays()
    rng = np.random.default_rng(seed)
    W = rng.normal(0.0, init_std, size=(dataset.partition.n_base_side, X.shape[1]))
    params, velocity = {"W": W}, {}
    Xt = ad.Tensor(X)

    def loss_fn(W):
        return cross_entropy(Xt @ W.T, y)

    for epoch in range(int(epochs)):
        value, grads = ad.value_and_grad(loss_fn, params)
        if not np.isfinite(value) or value > 1e6:
            raise NumericalError(f"base classifier diverged at epoch {epoch} (loss {value}); lower lr")
        params, velocity = sgd_step(params, grads, velocity, lr, momentum)
    return params["W"]
