"""Command-line runner: ``python -m gfss {generate,adapt,ablate,check-gradients}``.

A run is described by one YAML (or JSON) file::

    seed: 0
    out: runs/demo
    episode_dir: null          # adapt/ablate: reuse files written by `generate`
    task: {n_base: 4, n_novel: 2, noise_std: 0.3, ...}
    base_training: {epochs: 100, lr: 0.5, momentum: 0.9}
    adaptation: {epochs: 800, lr: 0.01, lambda: 1.0, merge: {mode: log-prob-sum}, ...}
    arms: [transition, classifier-only]
    sweep: {lambda: [0, 1, 4]}

Missing keys take their defaults; unknown keys are rejected with their
dotted path. Every output file carries the config hash and the seed.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .adaptation import ARMS, AdaptationConfig, AdaptationResult, adapt, config_dict, frozen_report
from .errors import ConfigError, ContractError, DataError, GFSSError, IoError, NumericalError
from .gradcheck import SUITE_KINDS, gradient_suite
from .head import MergeConfig, transition_matrices
from .io import config_hash, load_episode, read_json, save_episode, write_json
from .metrics import export_heatmap, write_heatmap_csv
from .synthgen import BaseDataset, Episode, TaskSpec, generate_task, train_base_classifier

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2
EXIT_CODES = ((ConfigError, 3), (IoError, 4), (NumericalError, 5), (DataError, 6), (GFSSError, 7))

ABLATION_ARMS = {
    "w/o-transition": dict(arm="classifier-only"),
    "w/o-LDAM": dict(arm="transition", C=0.0),
    "full": dict(arm="transition"),
}
TOP_KEYS = ("seed", "out", "episode_dir", "task", "base_training", "adaptation", "arms", "sweep")
BASE_TRAINING_DEFAULTS = {"epochs": 100, "lr": 0.5, "momentum": 0.9}
CLASSIFIER_FILE = "classifier.json"


@dataclass
class RunConfig:
    task: TaskSpec
    adaptation: AdaptationConfig
    base_training: dict
    out: Path
    arms: list[str]
    sweep: dict = field(default_factory=dict)
    seed: int = 0
    episode_dir: Path | None = None

    def resolved(self) -> dict:
        """Every setting with defaults filled in; this is what gets hashed."""
        return {
            "seed": self.seed,
            "task": asdict(self.task),
            "base_training": dict(self.base_training),
            "adaptation": config_dict(self.adaptation),
            "arms": list(self.arms),
            "sweep": {k: list(v) for k, v in self.sweep.items()},
        }

    @property
    def hash(self) -> str:
        return config_hash(self.resolved())

    def provenance(self) -> dict:
        return {"config_hash": self.hash, "seed": self.seed}


def _check_keys(section: dict, allowed: Sequence[str], prefix: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError("expected a mapping", key=prefix or "<root>")
    for key in section:
        if key not in allowed:
            raise ConfigError("unknown key", key=f"{prefix}.{key}" if prefix else str(key))


def _coerce_numbers(kind, kwargs: dict) -> dict:
    # YAML 1.1 reads "1e-3" as a string; accept it for numeric fields
    numeric = {f.name: type(f.default) for f in fields(kind) if type(f.default) in (int, float)}
    out = dict(kwargs)
    for name, typ in numeric.items():
        if isinstance(out.get(name), str):
            try:
                out[name] = typ(float(out[name])) if typ is float else int(out[name])
            except ValueError:
                pass
    return out


def _build(kind, kwargs: dict, prefix: str):
    try:
        return kind(**_coerce_numbers(kind, kwargs))
    except ConfigError as exc:
        raise ConfigError(str(exc).split(": ", 1)[-1], key=f"{prefix}.{exc.key}" if exc.key else prefix) from exc
    except (ContractError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc), key=prefix) from exc


def parse_config(raw: dict | None, seed: int | None = None, out: str | None = None,
                 arms: Sequence[str] | None = None) -> RunConfig:
    """Validate a raw config mapping; command-line overrides win over file values."""
    raw = {} if raw is None else raw
    _check_keys(raw, TOP_KEYS, "")
    seed = int(raw.get("seed", 0) if seed is None else seed)

    task_raw = dict(raw.get("task") or {})
    _check_keys(task_raw, [f.name for f in fields(TaskSpec)], "task")
    task = _build(TaskSpec, {**task_raw, "seed": seed}, "task")

    bt = dict(raw.get("base_training") or {})
    _check_keys(bt, BASE_TRAINING_DEFAULTS, "base_training")
    bt = {**BASE_TRAINING_DEFAULTS, **bt}

    ad_raw = dict(raw.get("adaptation") or {})
    names = [f.name for f in fields(AdaptationConfig) if f.name not in ("lam", "seed")] + ["lambda"]
    _check_keys(ad_raw, names, "adaptation")
    if "lambda" in ad_raw:
        ad_raw["lam"] = ad_raw.pop("lambda")
    merge_raw = ad_raw.pop("merge", None) or {}
    _check_keys(merge_raw, [f.name for f in fields(MergeConfig)], "adaptation.merge")
    ad_raw["merge"] = _build(MergeConfig, merge_raw, "adaptation.merge")
    adaptation = _build(AdaptationConfig, {**ad_raw, "seed": seed}, "adaptation")

    arm_list = list(arms) if arms else list(raw.get("arms") or [adaptation.arm])
    sweep = dict(raw.get("sweep") or {})
    _check_keys(sweep, ["lambda"], "sweep")
    if "lambda" in sweep:
        grid = sweep["lambda"]
        if not isinstance(grid, list) or not grid or any(not isinstance(v, (int, float)) or v < 0 for v in grid):
            raise ConfigError("expected a non-empty list of numbers >= 0", key="sweep.lambda")
        sweep["lambda"] = [float(v) for v in grid]

    episode_dir = raw.get("episode_dir")
    return RunConfig(task=task, adaptation=adaptation, base_training=bt,
                     out=Path(out if out is not None else raw.get("out", "runs/default")),
                     arms=arm_list, sweep=sweep, seed=seed,
                     episode_dir=Path(episode_dir) if episode_dir else None)


def load_config(path: str | None, **overrides) -> RunConfig:
    raw = None
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise IoError(f"cannot read config {path}: {exc}") from exc
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"unparseable config: {exc}", key=str(path)) from exc
    return parse_config(raw, **overrides)


def _ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create output directory {path}: {exc}") from exc
    return path


def _train_classifier(base: BaseDataset, rc: RunConfig) -> np.ndarray:
    bt = rc.base_training
    return train_base_classifier(base, epochs=int(bt["epochs"]), lr=float(bt["lr"]),
                                 momentum=float(bt["momentum"]), seed=rc.seed)


def materialize(rc: RunConfig) -> tuple[Episode, np.ndarray]:
    """Episode and frozen classifier: read from ``episode_dir`` if set, else generated in memory."""
    if rc.episode_dir is None:
        episode, base = generate_task(rc.task)
        return episode, _train_classifier(base, rc)
    episode, base, _ = load_episode(rc.episode_dir)
    clf = rc.episode_dir / CLASSIFIER_FILE
    if clf.exists():
        return episode, np.asarray(read_json(clf)["W_b_t"], dtype=np.float64)
    if base is None:
        raise IoError(f"{rc.episode_dir} has neither {CLASSIFIER_FILE} nor base-phase images")
    return episode, _train_classifier(base, rc)


# subcommands --------------------------------------------------------------------

def cmd_generate(rc: RunConfig) -> int:
    out = _ensure_dir(rc.out)
    episode, base = generate_task(rc.task)
    W = _train_classifier(base, rc)
    manifest = save_episode(out, episode, base, provenance={**rc.provenance(), "config": rc.resolved()})
    write_json(out / CLASSIFIER_FILE, {**rc.provenance(), "W_b_t": W})
    print(f"wrote {len(episode.support)} support, {len(episode.query)} query and "
          f"{len(base.features)} base-phase images to {out} (manifest {manifest.name})")
    return EXIT_OK


def _execute(job: tuple[Episode, np.ndarray, AdaptationConfig]) -> AdaptationResult:
    episode, W, cfg = job
    return adapt(episode, W, cfg)


def _run_all(jobs: list, parallel: bool) -> list[AdaptationResult]:
    if parallel and len(jobs) > 1:
        with ProcessPoolExecutor() as pool:
            return list(pool.map(_execute, jobs))
    return [_execute(j) for j in jobs]


def _write_trace(path: Path, result: AdaptationResult, header: dict) -> None:
    try:
        with open(path, "w", newline="") as fh:
            for k, v in header.items():
                fh.write(f"# {k}={v}\n")
            writer = csv.writer(fh)
            writer.writerow(result.trace.CSV_FIELDS)
            for row in result.trace.rows():
                writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    except OSError as exc:
        raise IoError(f"cannot write trace {path}: {exc}") from exc


def mean_transition(result: AdaptationResult, episode: Episode) -> np.ndarray:
    """Transition matrix averaged over every query pixel, ``(K, n_base_side)``."""
    Xq, _, _ = episode.query_arrays()
    p = result.params
    return transition_matrices(Xq, p.theta_r, p.theta_c, p.beta).mean(axis=0)


def cmd_adapt(rc: RunConfig, parallel: bool = False) -> int:
    for arm in rc.arms:
        if arm not in ARMS:
            raise ConfigError(f"unknown arm {arm!r}; choose from {ARMS}", key="arms")
    out = _ensure_dir(rc.out)
    episode, W = materialize(rc)
    lambdas = rc.sweep.get("lambda")
    runs = [(arm, lam) for arm in rc.arms for lam in (lambdas or [rc.adaptation.lam])]
    jobs = [(episode, W, replace(rc.adaptation, arm=arm, lam=lam)) for arm, lam in runs]
    results = _run_all(jobs, parallel)
    frozen = frozen_report(W, episode, rc.adaptation.include_background)
    write_json(out / "config.resolved.json", {**rc.provenance(), "config": rc.resolved()})

    for (arm, lam), res in zip(runs, results):
        tag = arm if lambdas is None else f"{arm}_lambda{lam:g}"
        header = {**rc.provenance(), "arm": arm, "lambda": lam}
        write_json(out / f"metrics_{tag}.json",
                   {**header, "metrics": res.report.to_dict(), "frozen_metrics": frozen.to_dict(),
                    "peak_epoch": res.trace.peak()[0], "adaptation": config_dict(res.config)})
        _write_trace(out / f"trace_{tag}.csv", res, header)
        if arm == "transition":
            write_heatmap_csv(out / f"heatmap_{tag}.csv", export_heatmap(mean_transition(res, episode)),
                              header)
        r = res.report
        print(f"{tag:<32} base {r.base_miou:6.2f}  novel {r.novel_miou:6.2f}  "
              f"avg {r.average_miou:6.2f}  weighted {r.weighted_miou:6.2f}")
    return EXIT_OK


def cmd_ablate(rc: RunConfig, arms: Sequence[str] | None = None, parallel: bool = False) -> int:
    names = list(arms) if arms else list(ABLATION_ARMS)
    for name in names:
        if name not in ABLATION_ARMS:
            raise ConfigError(f"unknown ablation arm {name!r}; choose from {list(ABLATION_ARMS)}",
                              key="arms")
    out = _ensure_dir(rc.out)
    episode, W = materialize(rc)
    jobs = [(episode, W, replace(rc.adaptation, **ABLATION_ARMS[n])) for n in names]
    results = _run_all(jobs, parallel)
    rows = [{"arm": n, "base_miou": r.report.base_miou, "novel_miou": r.report.novel_miou,
             "average_miou": r.report.average_miou, "weighted_miou": r.report.weighted_miou}
            for n, r in zip(names, results)]
    write_json(out / "ablation.json", {**rc.provenance(), "rows": rows})
    try:
        with open(out / "ablation.csv", "w", newline="") as fh:
            for k, v in rc.provenance().items():
                fh.write(f"# {k}={v}\n")
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    except OSError as exc:
        raise IoError(f"cannot write ablation table: {exc}") from exc
    print(f"{'arm':<16}{'base':>8}{'novel':>8}{'avg':>8}{'weighted':>10}")
    for row in rows:
        print(f"{row['arm']:<16}{row['base_miou']:8.2f}{row['novel_miou']:8.2f}"
              f"{row['average_miou']:8.2f}{row['weighted_miou']:10.2f}")
    return EXIT_OK


def cmd_check_gradients(n_instances: int, seed: int, tol: float = 1e-4) -> int:
    reports = gradient_suite(n_instances, seed=seed)
    worst = {k: max((r.max_rel_error for kk, r in reports if kk == k), default=0.0) for k in SUITE_KINDS}
    for kind, err in worst.items():
        print(f"{kind:<12} max relative error {err:.3e}")
    failed = sum(not r.passed(tol) for _, r in reports)
    print(f"{len(reports) - failed}/{len(reports)} instances below {tol:g}")
    return EXIT_OK if failed == 0 else EXIT_FAILED


# entry point --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gfss", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("generate", "write a synthetic episode to disk"),
                        ("adapt", "run adaptation arms and write metrics, traces and heatmaps"),
                        ("ablate", "ablation table: w/o-transition, w/o-LDAM, full")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="YAML or JSON run config")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--seed", type=int, help="seed (overrides the config)")
        if name != "generate":
            p.add_argument("--arms", help="comma-separated arm names")
            p.add_argument("--parallel", action="store_true", help="run arms in worker processes")
    p = sub.add_parser("check-gradients", help="finite-difference check of the objective's gradients")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _split_arms(value: str | None) -> list[str] | None:
    return [a.strip() for a in value.split(",") if a.strip()] if value else None


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "check-gradients":
            return cmd_check_gradients(args.instances, args.seed)
        arms = _split_arms(getattr(args, "arms", None))
        if args.command == "generate":
            return cmd_generate(load_config(args.config, seed=args.seed, out=args.out))
        if args.command == "adapt":
            return cmd_adapt(load_config(args.config, seed=args.seed, out=args.out, arms=arms),
                             parallel=args.parallel)
        rc = load_config(args.config, seed=args.seed, out=args.out)
        return cmd_ablate(rc, arms=arms, parallel=args.parallel)
    except GFSSError as exc:
        code = next(c for kind, c in EXIT_CODES if isinstance(exc, kind))
        print(f"error: {exc}", file=sys.stderr)
        return code
