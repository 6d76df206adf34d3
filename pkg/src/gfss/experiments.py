"""Directional synthetic experiments: each one runs a small multi-seed study and reports medians.

Every study returns a :class:`StudyResult` whose ``passed`` flag encodes the
expected direction of the effect. The regimes (image size, noise, learning
rate, horizon) are chosen so a full study finishes in about a minute on one
core; they are exposed as keyword arguments.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .adaptation import AdaptationConfig, adapt, run_adaptation
from .head import HeadParams, base_posterior, head_logits, transition_from_posterior
from .losses import estimate_class_prior
from .metrics import confusion_accumulate, report_from_confusion
from .synthgen import BaseDataset, Episode, TaskSpec, generate_task, train_base_classifier

SEEDS = (1, 2, 3, 4, 5)

# shared small-episode regime
SMALL = dict(image_size=(16, 16), head_budget=512, n_support_images=2)
PINNED = {5: (1, 0.9), 6: (2, 0.9)}


@dataclass
class StudyResult:
    name: str
    passed: bool
    summary: dict
    per_seed: list[dict] = field(default_factory=list)

    def line(self) -> str:
        body = ", ".join(f"{k}={v:.3f}" if isinstance(v, float) else f"{k}={v}"
                         for k, v in self.summary.items())
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {body}"


def prepare_task(spec: TaskSpec, base_epochs: int = 100) -> tuple[Episode, BaseDataset, np.ndarray]:
    """Generate an episode and train its frozen base classifier."""
    episode, base = generate_task(spec)
    return episode, base, train_base_classifier(base, epochs=base_epochs, seed=spec.seed)


def base_side_miou(params: HeadParams | None, episode: Episode, cfg: AdaptationConfig | None = None,
                   W_b_t: np.ndarray | None = None) -> float:
    """Base mIoU on query pixels whose ground truth is background or a base class.

    Novel-class pixels are left out so that the score isolates what happens
    to base knowledge. Pass ``W_b_t`` (and no params) for the frozen classifier.
    """
    Xq, yq, _ = episode.query_arrays()
    if params is None:
        pred = np.argmax(Xq @ np.asarray(W_b_t).T, axis=1)
    else:
        pred = np.argmax(head_logits(Xq, params, cfg.effective_merge).data, axis=1)
    keep = yq < episode.partition.n_base_side
    cm = confusion_accumulate(pred[keep], yq[keep], episode.partition.n_classes)
    return report_from_confusion(cm, episode.partition).base_miou


# base preservation -------------------------------------------------------------

def init_agreement(seed: int, kappa: float = 4.0, **spec_kw) -> float:
    """Share of base-side query pixels where the freshly initialized transition
    branch and the frozen classifier pick the same class."""
    episode, _, W = prepare_task(TaskSpec(**{**spec_kw, "seed": seed}))
    params = HeadParams.init(W, episode.partition, np.random.default_rng(seed), kappa=kappa)
    Xq, yq, _ = episode.query_arrays()
    keep = yq < episode.partition.n_base_side
    post = base_posterior(Xq[keep], W)
    tr = transition_from_posterior(Xq[keep], post, params.theta_r, params.theta_c, params.beta)
    return float(np.mean(np.argmax(tr.data, axis=1) == np.argmax(post.data, axis=1)))


def base_preservation_study(n_episodes: int = 10, kappa: float = 4.0, threshold: float = 0.99,
                            **spec_kw) -> StudyResult:
    rates = [init_agreement(s, kappa, **spec_kw) for s in range(1, n_episodes + 1)]
    overall = float(np.mean(rates))
    return StudyResult("base preservation at init", overall >= threshold,
                       {"agreement": overall, "min_episode": float(min(rates)), "kappa": kappa},
                       [{"seed": s, "agreement": r} for s, r in zip(range(1, n_episodes + 1), rates)])


# imbalance --------------------------------------------------------------------

IMBALANCE_SPEC = dict(image_size=(16, 16), head_budget=512, n_support_images=1, noise_std=0.3,
                      support_novel_fraction=(0.02, 0.05))
IMBALANCE_CFG = dict(arm="classifier-only", lam=0.0, lr=0.05, epochs=300, trace_every=300)


def _imbalance_seed(seed: int, spec_kw: dict, cfg_kw: dict, C: float) -> dict:
    episode, _, W = prepare_task(TaskSpec(**{**spec_kw, "seed": seed}))
    prior = estimate_class_prior(episode.train_histogram,
                                 [(s.mask, s.novel_class) for s in episode.support], episode.partition)
    counts = prior.counts
    out = {"seed": seed, "head_tail_ratio": float(counts.max() / counts.min()),
           "fg_head_tail_ratio": float(counts[1:].max() / counts[1:].min())}
    for tag, c in (("ldam", C), ("ce", 0.0)):
        out[tag] = adapt(episode, W, AdaptationConfig(**{**cfg_kw, "C": c, "seed": seed})).report.novel_miou
    return out


def imbalance_study(seeds: Sequence[int] = SEEDS, C: float = 0.5, min_gain: float = 2.0,
                    min_ratio: float = 50.0, spec_kw: dict | None = None,
                    cfg_kw: dict | None = None) -> StudyResult:
    """Novel mIoU with LDAM margins versus plain cross-entropy on long-tailed episodes."""
    spec_kw = {**IMBALANCE_SPEC, **(spec_kw or {})}
    cfg_kw = {**IMBALANCE_CFG, **(cfg_kw or {})}
    rows = [_imbalance_seed(s, spec_kw, cfg_kw, C) for s in seeds]
    ldam = float(np.median([r["ldam"] for r in rows]))
    ce = float(np.median([r["ce"] for r in rows]))
    ratio = float(min(r["head_tail_ratio"] for r in rows))
    summary = {"novel_ldam": ldam, "novel_ce": ce, "gain": ldam - ce, "min_head_tail_ratio": ratio,
               "min_fg_head_tail_ratio": float(min(r["fg_head_tail_ratio"] for r in rows))}
    return StudyResult("LDAM imbalance benefit", ratio >= min_ratio and ldam - ce >= min_gain,
                       summary, rows)


# similarity -------------------------------------------------------------------

SIMILARITY_SPEC = dict(SMALL, noise_std=0.2)
SIMILARITY_CFG = dict(lam=1.0, lr=0.05, epochs=300, trace_every=300)


def _similarity_seed(seed: int, cosine: float, spec_kw: dict, cfg_kw: dict) -> dict:
    pinned = {n: (a, cosine) for n, (a, _) in PINNED.items()}
    episode, _, W = prepare_task(TaskSpec(**{**spec_kw, "similarity": pinned, "seed": seed}))
    out = {"seed": seed, "cosine": cosine}
    for arm in ("transition", "classifier-only"):
        out[arm] = adapt(episode, W, AdaptationConfig(**{**cfg_kw, "arm": arm, "seed": seed})).report.novel_miou
    out["gap"] = out["transition"] - out["classifier-only"]
    return out


def similarity_study(seeds: Sequence[int] = SEEDS, high: float = 0.9, low: float = 0.0,
                     spec_kw: dict | None = None, cfg_kw: dict | None = None) -> StudyResult:
    """Novel-mIoU gap (transition minus classifier-only) at high versus zero similarity."""
    spec_kw = {**SIMILARITY_SPEC, **(spec_kw or {})}
    cfg_kw = {**SIMILARITY_CFG, **(cfg_kw or {})}
    rows = [_similarity_seed(s, c, spec_kw, cfg_kw) for c in (high, low) for s in seeds]
    gap_hi = float(np.median([r["gap"] for r in rows if r["cosine"] == high]))
    gap_lo = float(np.median([r["gap"] for r in rows if r["cosine"] == low]))
    med = lambda arm, c: float(np.median([r[arm] for r in rows if r["cosine"] == c]))
    summary = {"gap_similar": gap_hi, "gap_orthogonal": gap_lo,
               "transition_similar": med("transition", high),
               "classifier_similar": med("classifier-only", high),
               "transition_orthogonal": med("transition", low),
               "classifier_orthogonal": med("classifier-only", low)}
    return StudyResult("similarity benefit", gap_hi > gap_lo, summary, rows)


# overfitting ------------------------------------------------------------------

OVERFIT_SPEC = dict(SMALL, noise_std=0.1, similarity=PINNED)
OVERFIT_CFG = dict(arm="transition", lr=0.05, epochs=400, trace_every=10)


def _overfit_seed(seed: int, lams: Sequence[float], spec_kw: dict, cfg_kw: dict) -> dict:
    episode, _, W = prepare_task(TaskSpec(**{**spec_kw, "seed": seed}))
    out = {"seed": seed}
    for lam in lams:
        _, trace = run_adaptation(episode, W, AdaptationConfig(**{**cfg_kw, "lam": lam, "seed": seed}))
        epoch, value = trace.peak("query_miou")
        out[f"peak_epoch_{lam:g}"], out[f"peak_{lam:g}"] = epoch, value
        out[f"final_{lam:g}"] = float(trace.column("query_miou")[-1])
    return out


def overfitting_study(seeds: Sequence[int] = SEEDS, spec_kw: dict | None = None,
                      cfg_kw: dict | None = None) -> StudyResult:
    """Epoch and height of the query-mIoU peak with and without the proportion regularizer."""
    spec_kw = {**OVERFIT_SPEC, **(spec_kw or {})}
    cfg_kw = {**OVERFIT_CFG, **(cfg_kw or {})}
    rows = [_overfit_seed(s, (0.0, 1.0), spec_kw, cfg_kw) for s in seeds]
    med = lambda key: float(np.median([r[key] for r in rows]))
    summary = {"peak_epoch_lam0": med("peak_epoch_0"), "peak_epoch_lam1": med("peak_epoch_1"),
               "peak_lam0": med("peak_0"), "peak_lam1": med("peak_1"),
               "final_lam0": med("final_0"), "final_lam1": med("final_1")}
    passed = (summary["peak_epoch_lam1"] > summary["peak_epoch_lam0"]
              and summary["peak_lam1"] >= summary["peak_lam0"])
    return StudyResult("overfitting delay", passed, summary, rows)


# forgetting -------------------------------------------------------------------

FORGET_SPEC = dict(SMALL, noise_std=0.1, similarity=PINNED)
FORGET_CFG = dict(arm="transition", lam=1.0, lr=0.05, epochs=300, trace_every=300)
NO_PRESERVATION = dict(beta_init="uniform", train_beta=False)


def _forget_seed(seed: int, spec_kw: dict, cfg_kw: dict) -> dict:
    episode, _, W = prepare_task(TaskSpec(**{**spec_kw, "seed": seed}))
    frozen = base_side_miou(None, episode, W_b_t=W)
    out = {"seed": seed, "frozen": frozen}
    for tag, extra in (("transition", {}), ("no_preservation", NO_PRESERVATION)):
        cfg = AdaptationConfig(**{**cfg_kw, **extra, "seed": seed})
        params, _ = run_adaptation(episode, W, cfg)
        out[f"drop_{tag}"] = frozen - base_side_miou(params, episode, cfg)
    return out


def forgetting_study(seeds: Sequence[int] = SEEDS, tolerance: float = 5.0,
                     spec_kw: dict | None = None, cfg_kw: dict | None = None) -> StudyResult:
    """Base-mIoU drop relative to the frozen classifier, with and without base preservation."""
    spec_kw = {**FORGET_SPEC, **(spec_kw or {})}
    cfg_kw = {**FORGET_CFG, **(cfg_kw or {})}
    rows = [_forget_seed(s, spec_kw, cfg_kw) for s in seeds]
    drop = float(np.median([r["drop_transition"] for r in rows]))
    drop_np = float(np.median([r["drop_no_preservation"] for r in rows]))
    summary = {"frozen_base": float(np.median([r["frozen"] for r in rows])),
               "drop_transition": drop, "drop_no_preservation": drop_np}
    return StudyResult("forgetting control", drop <= tolerance and drop_np > drop, summary, rows)
