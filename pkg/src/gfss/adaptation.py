"""Few-shot adaptation loop: momentum SGD on LDAM + proportion regularizer, with tracing."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, NumericalError
from .head import HeadParams, MergeConfig, base_posterior, head_logits
from .losses import (estimate_class_prior, image_proportions, kd_loss, ldam_loss, ldam_margins,
                     pi_regularizer, pi_schedule, total_loss)
from .metrics import IGNORE_LABEL, MetricsReport, confusion_accumulate, mean_iou, report_from_confusion
from .optim import sgd_step
from .synthgen import Episode

log = logging.getLogger(__name__)

ARMS = ("transition", "distillation-baseline", "classifier-only")
CLASSIFIER_PARAMS = ("W_b_f", "W_n_f")
TRANSITION_PARAMS = ("r_w1", "r_b1", "r_w2", "r_b2", "c_w1", "c_b1", "c_w2", "c_b2")
DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class AdaptationConfig:
    epochs: int = 800
    lr: float = 0.01
    momentum: float = 0.9
    lam: float = 1.0
    C: float = 0.5
    t_pi: int = 20
    merge: MergeConfig = field(default_factory=MergeConfig)
    arm: str = "transition"
    seed: int = 0
    trace_every: int = 1
    kd_weight: float = 1.0
    kappa: float = 4.0
    beta_init: str = "diagonal"
    train_beta: bool = True
    hidden: int | None = None
    include_background: bool = False

    def __post_init__(self):
        if isinstance(self.merge, dict):
            object.__setattr__(self, "merge", MergeConfig(**self.merge))
        if self.epochs < 1:
            raise ConfigError("must be >= 1", key="epochs")
        if self.lr <= 0:
            raise ConfigError("must be > 0", key="lr")
        if self.lam < 0:
            raise ConfigError("must be >= 0", key="lambda")
        if self.C < 0:
            raise ConfigError("must be >= 0", key="C")
        if not 0 <= self.t_pi < self.epochs:
            raise ConfigError(f"need 0 <= t_pi < epochs ({self.epochs})", key="t_pi")
        if self.arm not in ARMS:
            raise ConfigError(f"unknown arm {self.arm!r}; choose from {ARMS}", key="arm")
        if self.trace_every < 1:
            raise ConfigError("must be >= 1", key="trace_every")
        if self.beta_init not in ("diagonal", "uniform"):
            raise ConfigError(f"unknown beta init {self.beta_init!r}", key="beta_init")

    @property
    def effective_merge(self) -> MergeConfig:
        """Merge settings actually used: only the transition arm keeps ``gamma``."""
        return self.merge if self.arm == "transition" else replace(self.merge, gamma=0.0)

    def trainable(self) -> tuple[str, ...]:
        if self.arm != "transition" or self.effective_merge.gamma == 0.0:
            return CLASSIFIER_PARAMS
        return CLASSIFIER_PARAMS + TRANSITION_PARAMS + (("beta",) if self.train_beta else ())


@dataclass
class TraceRecord:
    epoch: int
    total: float
    ldam: float
    l_pi: float
    kd: float
    support_miou: float
    query_miou: float
    query_base_miou: float
    query_novel_miou: float
    pi: list | None = None


@dataclass
class AdaptationTrace:
    records: list[TraceRecord] = field(default_factory=list)

    CSV_FIELDS = ("epoch", "total", "ldam", "l_pi", "kd", "support_miou", "query_miou",
                  "query_base_miou", "query_novel_miou")

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def rows(self) -> list[tuple]:
        return [tuple(getattr(r, f) for f in self.CSV_FIELDS) for r in self.records]

    def peak(self, name: str = "query_miou") -> tuple[int, float]:
        """Epoch and value of the first maximum of a traced column."""
        values = self.column(name)
        i = int(np.nanargmax(values))
        return self.records[i].epoch, float(values[i])


@dataclass
class AdaptationResult:
    params: HeadParams
    trace: AdaptationTrace
    report: MetricsReport
    config: AdaptationConfig


def _predict_labels(features, params: HeadParams, merge: MergeConfig, posterior=None) -> np.ndarray:
    return np.argmax(head_logits(features, params, merge, posterior=posterior).data, axis=1)


def evaluate(params: HeadParams, episode: Episode, merge: MergeConfig = MergeConfig(),
             include_background: bool = False) -> MetricsReport:
    """Query-set metrics of an adapted head."""
    Xq, yq, _ = episode.query_arrays()
    pred = _predict_labels(Xq, params, merge)
    cm = confusion_accumulate(pred, yq, episode.partition.n_classes)
    return report_from_confusion(cm, episode.partition, include_background=include_background)


def frozen_report(W_b_t: np.ndarray, episode: Episode, include_background: bool = False) -> MetricsReport:
    """Query-set metrics of the frozen base classifier (it never predicts novel classes)."""
    Xq, yq, _ = episode.query_arrays()
    pred = np.argmax(Xq @ np.asarray(W_b_t).T, axis=1)
    cm = confusion_accumulate(pred, yq, episode.partition.n_classes)
    return report_from_confusion(cm, episode.partition, include_background=include_background)


def run_adaptation(episode: Episode, W_b_t: np.ndarray,
                   cfg: AdaptationConfig = AdaptationConfig()) -> tuple[HeadParams, AdaptationTrace]:
    """Adapt a fresh head to ``episode`` and return the final parameters and the trace.

    Support pixels drive the LDAM term. Query pixels enter only through the
    proportion regularizer (and the distillation term of the baseline arm);
    query labels are read solely to fill the trace.
    """
    part = episode.partition
    if not episode.support:
        raise ContractError("episode has no support images")
    Xs, ys = episode.support_arrays()
    supervised = ys != IGNORE_LABEL
    if not supervised.any():
        raise ContractError("support masks contain no labeled pixels")
    Xq, yq, q_index = episode.query_arrays()
    W_b_t = np.array(W_b_t, dtype=np.float64)
    W_b_t.setflags(write=False)

    post_s = base_posterior(Xs, W_b_t).data
    post_q = base_posterior(Xq, W_b_t).data
    prior = estimate_class_prior(episode.train_histogram,
                                 [(s.mask, s.novel_class) for s in episode.support], part)
    margins = ldam_margins(prior, cfg.C)
    merge = cfg.effective_merge
    names = cfg.trainable()
    params = HeadParams.init(W_b_t, part, np.random.default_rng(cfg.seed), hidden=cfg.hidden,
                             kappa=cfg.kappa, beta_init=cfg.beta_init)
    train = {n: params.flat()[n] for n in names}
    velocity: dict[str, np.ndarray] = {}
    Xs_t, Xq_t = ad.Tensor(Xs), ad.Tensor(Xq)
    use_query = cfg.lam > 0 or cfg.arm == "distillation-baseline"
    pi_initial = pi_snapshot = None
    trace = AdaptationTrace()
    K = part.n_classes

    for t in range(cfg.epochs):
        parts: dict = {}

        def loss_fn(**leaves):
            nonlocal pi_initial, pi_snapshot
            p = params.with_flat(leaves)
            z_s = head_logits(Xs_t, p, merge, posterior=post_s)
            parts["z_s"] = z_s.data
            ldam = ldam_loss(z_s, ys, margins, supervised)
            parts["ldam"] = ldam.item()
            if not use_query:
                return ldam
            z_q = head_logits(Xq_t, p, merge, posterior=post_q)
            parts["z_q"] = z_q.data
            probs = ad.row_softmax(z_q)
            props = image_proportions(probs, q_index)
            if t == 0:
                pi_initial = props.data.copy()
            pi = pi_schedule(t, cfg.t_pi, pi_initial, pi_snapshot)
            if t == cfg.t_pi:
                pi_snapshot = props.data.copy()
            parts["pi"] = pi
            l_pi = pi_regularizer(props, pi)
            parts["l_pi"] = l_pi.item()
            loss = total_loss(ldam, l_pi, cfg.lam)
            if cfg.arm == "distillation-baseline":
                kd = kd_loss(probs, post_q, part)
                parts["kd"] = kd.item()
                loss = ad.add(loss, ad.scale(kd, cfg.kd_weight))
            return loss

        value, grads = ad.value_and_grad(loss_fn, train)
        if not np.isfinite(value) or value > DIVERGENCE_LIMIT:
            raise NumericalError(
                f"loss {value} at epoch {t} ({cfg.arm}, lr={cfg.lr}); lower the learning rate")

        if t % cfg.trace_every == 0 or t == cfg.epochs - 1:
            cm_s = confusion_accumulate(np.argmax(parts["z_s"], axis=1)[supervised],
                                        ys[supervised], K)
            z_q = parts.get("z_q")
            if z_q is None:
                z_q = head_logits(Xq_t, params.with_flat(train), merge, posterior=post_q).data
            cm_q = confusion_accumulate(np.argmax(z_q, axis=1), yq, K)
            rep = report_from_confusion(cm_q, part, include_background=cfg.include_background)
            pi = parts.get("pi")
            trace.records.append(TraceRecord(
                epoch=t, total=value, ldam=parts["ldam"], l_pi=parts.get("l_pi", 0.0),
                kd=parts.get("kd", 0.0), support_miou=100.0 * mean_iou(cm_s),
                query_miou=100.0 * mean_iou(cm_q), query_base_miou=rep.base_miou,
                query_novel_miou=rep.novel_miou, pi=None if pi is None else pi.tolist()))

        train, velocity = sgd_step(train, grads, velocity, cfg.lr, cfg.momentum)

    log.debug("adaptation finished: arm=%s final loss=%.4f", cfg.arm, value)
    return params.with_flat(train), trace


def adapt(episode: Episode, W_b_t: np.ndarray,
          cfg: AdaptationConfig = AdaptationConfig()) -> AdaptationResult:
    """:func:`run_adaptation` followed by query evaluation."""
    params, trace = run_adaptation(episode, W_b_t, cfg)
    report = evaluate(params, episode, cfg.effective_merge, cfg.include_background)
    return AdaptationResult(params=params, trace=trace, report=report, config=cfg)


def config_dict(cfg: AdaptationConfig) -> dict:
    d = asdict(cfg)
    d["lambda"] = d.pop("lam")
    return d
