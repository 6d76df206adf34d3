"""Training objectives: LDAM margin cross-entropy, query-proportion regularizer, distillation."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .errors import ContractError, ShapeError
from .head import ClassPartition

PI_FLOOR = 1e-6
_LOG_FLOOR = 1e-300


@dataclass(frozen=True)
class ClassPrior:
    counts: np.ndarray
    source: str = "merged"


@dataclass(frozen=True)
class MarginVector:
    deltas: np.ndarray
    C: float


def estimate_class_prior(train_histogram: Sequence[float],
                         support_masks: Sequence[tuple[np.ndarray, int]],
                         partition: ClassPartition) -> ClassPrior:
    """Per-class pixel counts over every class of ``partition``.

    Background and base counts come from ``train_histogram``; each novel
    class counts its foreground pixels (mask value 1) across ``support_masks``,
    given as ``(binary_mask, novel_class_id)`` pairs. Counts are clamped to
    at least one; a novel class with no pixels triggers a warning.
    """
    hist = np.asarray(train_histogram, dtype=np.float64)
    if hist.shape != (partition.n_base_side,):
        raise ShapeError(f"train histogram needs {partition.n_base_side} entries, got {hist.shape}")
    counts = np.zeros(partition.n_classes)
    counts[: partition.n_base_side] = hist
    for mask, cls in support_masks:
        if cls not in partition.novel_ids:
            raise ContractError(f"support mask labeled {cls}, which is not a novel class")
        counts[cls] += np.count_nonzero(np.asarray(mask) == 1)
    for cls in partition.novel_ids:
        if counts[cls] == 0:
            warnings.warn(f"novel class {cls} has no support pixels; count clamped to 1",
                          stacklevel=2)
    return ClassPrior(counts=np.maximum(counts, 1.0), source="merged")


def ldam_margins(prior: ClassPrior, C: float) -> MarginVector:
    """``delta_k = C / n_k ** 0.25``."""
    if C < 0:
        raise ContractError(f"margin scale C must be >= 0, got {C}")
    return MarginVector(deltas=C / np.asarray(prior.counts, dtype=np.float64) ** 0.25, C=float(C))


def _one_hot(labels: np.ndarray, K: int) -> np.ndarray:
    out = np.zeros((labels.size, K))
    out[np.arange(labels.size), labels] = 1.0
    return out


def ldam_loss(logits, labels, margins: MarginVector | np.ndarray, mask=None) -> Tensor:
    """Mean margin-rectified cross-entropy over the pixels selected by ``mask``.

    The target logit of each pixel is lowered by its class margin before the
    softmax; every other logit is left as is. Zero margins give plain
    cross-entropy.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels).reshape(-1)
    deltas = np.asarray(getattr(margins, "deltas", margins), dtype=np.float64)
    if logits.ndim != 2 or labels.size != logits.shape[0]:
        raise ShapeError(f"logits {logits.shape} vs {labels.size} labels")
    K = logits.shape[1]
    if deltas.shape != (K,):
        raise ShapeError(f"{deltas.size} margins for {K} classes")
    keep = np.ones(labels.size, bool) if mask is None else np.asarray(mask, bool).reshape(-1)
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        raise ContractError("ldam_loss: no supervised pixels")
    y = labels[idx]
    if y.min() < 0 or y.max() >= K:
        raise ContractError(f"labels outside [0, {K}) on supervised pixels")
    z = logits if idx.size == labels.size else ad.gather_rows(logits, idx)
    onehot = _one_hot(y, K)
    shifted = ad.sub(z, onehot * deltas[y][:, None])
    picked = ad.sum_(ad.mul(ad.row_log_softmax(shifted), onehot))
    return ad.scale(picked, -1.0 / idx.size)


def cross_entropy(logits, labels, mask=None) -> Tensor:
    """Plain softmax cross-entropy (mean over selected pixels)."""
    K = as_tensor(logits).shape[-1]
    return ldam_loss(logits, labels, np.zeros(K), mask)


def query_proportions(prob_map) -> Tensor:
    """Soft class proportions: column means of a ``(N, K)`` probability map."""
    prob_map = as_tensor(prob_map)
    if prob_map.ndim != 2:
        raise ShapeError(f"expected (pixels, classes), got {prob_map.shape}")
    return ad.mean(prob_map, axis=0)


def image_proportions(prob_map, image_index: np.ndarray) -> Tensor:
    """Soft class proportions per image, ``(n_images, K)``; pixel ``j`` belongs to ``image_index[j]``."""
    prob_map = as_tensor(prob_map)
    image_index = np.asarray(image_index)
    if image_index.shape != (prob_map.shape[0],):
        raise ShapeError(f"{image_index.size} image ids for {prob_map.shape[0]} pixels")
    n_img = int(image_index.max()) + 1
    avg = np.zeros((n_img, image_index.size))
    avg[image_index, np.arange(image_index.size)] = 1.0
    avg /= avg.sum(axis=1, keepdims=True)
    return avg @ prob_map


def floor_pi(pi: np.ndarray, floor: float = PI_FLOOR) -> np.ndarray:
    """Clamp entries to ``floor`` and renormalize each distribution."""
    pi = np.maximum(np.asarray(pi, dtype=np.float64), floor)
    return pi / pi.sum(axis=-1, keepdims=True)


def pi_regularizer(proportions, pi) -> Tensor:
    """``sum_k P_k log(P_k / pi_k)``, averaged over rows when given one row per image.

    ``pi`` is a constant: it is floored, renormalized and never receives a
    gradient. ``0 * log 0`` counts as zero.
    """
    proportions = as_tensor(proportions)
    pi = floor_pi(pi.data if isinstance(pi, Tensor) else pi)
    if pi.shape != proportions.shape:
        raise ShapeError(f"proportions {proportions.shape} vs pi {pi.shape}")
    log_p = ad.log(ad.maximum(proportions, _LOG_FLOOR))
    kl = ad.sum_(ad.mul(proportions, ad.sub(log_p, np.log(pi))))
    return kl if proportions.ndim == 1 else ad.scale(kl, 1.0 / proportions.shape[0])


def pi_schedule(t: int, t_pi: int, initial: np.ndarray, at_t_pi: np.ndarray | None) -> np.ndarray:
    """Target proportions in force at epoch ``t``: the epoch-0 estimate through ``t_pi``
    (inclusive), the epoch-``t_pi`` estimate afterwards."""
    if t < 0 or t_pi < 0:
        raise ContractError(f"epochs must be >= 0, got t={t}, t_pi={t_pi}")
    if t <= t_pi:
        return np.array(initial, dtype=np.float64)
    if at_t_pi is None:
        raise ContractError(f"epoch {t} > t_pi={t_pi} but no snapshot was recorded")
    return np.array(at_t_pi, dtype=np.float64)


def _new2old_matrix(partition: ClassPartition) -> np.ndarray:
    m = np.zeros((partition.n_classes, partition.n_base_side))
    m[np.arange(partition.n_base_side), np.arange(partition.n_base_side)] = 1.0
    m[list(partition.novel_ids), 0] = 1.0
    return m


def project_new2old(prob, partition: ClassPartition) -> Tensor:
    """Fold novel-class probability mass into background; works on vectors or ``(N, K)`` maps."""
    prob = as_tensor(prob)
    if prob.shape[-1] != partition.n_classes:
        raise ShapeError(f"expected {partition.n_classes} classes, got {prob.shape}")
    return prob @ _new2old_matrix(partition)


def kd_loss(prob_map, base_prob_map, partition: ClassPartition) -> Tensor:
    """Mean over pixels of ``KL(project_new2old(P_j) || P_hat_j)``."""
    q = project_new2old(prob_map, partition)
    base = np.asarray(as_tensor(base_prob_map).data)
    if base.shape != q.shape:
        raise ShapeError(f"projected {q.shape} vs frozen predictions {base.shape}")
    log_q = ad.log(ad.maximum(q, _LOG_FLOOR))
    kl = ad.sum_(ad.mul(q, ad.sub(log_q, np.log(np.maximum(base, _LOG_FLOOR)))))
    return kl if q.ndim == 1 else ad.scale(kl, 1.0 / q.shape[0])


def total_loss(ldam, l_pi, lam: float):
    """``ldam + lam * l_pi``; works on floats or tensors."""
    if lam < 0:
        raise ContractError(f"lambda must be >= 0, got {lam}")
    if isinstance(ldam, Tensor) or isinstance(l_pi, Tensor):
        return ad.add(as_tensor(ldam), ad.scale(as_tensor(l_pi), lam))
    return ldam + lam * l_pi
