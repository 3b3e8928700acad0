"""Desk-scale experiment protocols built from :func:`train_run`.

Each protocol expands a base config into independent ``(config, seed)``
jobs, runs them (optionally on a process pool) and returns an
:class:`ExperimentResult` whose rows are ordered by job, never by
completion time.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

from ..config import ExperimentConfig
from ..errors import InvalidConfigurationError
from ..model import VARIANTS, parameter_count
from ..records import beta_rows, rank_rows, records_for_run, summarize
from .train import TaskData, snapshot_steps, train_run

log = logging.getLogger(__name__)

WORKERS_ENV = "MGT_LAB_WORKERS"


@dataclass(frozen=True)
class Job:
    config: ExperimentConfig
    seed: int
    snapshot_at: tuple = ()
    keep_params: bool = False


@dataclass
class ExperimentResult:
    name: str
    runs: list
    records: list
    rank_rows: list = field(default_factory=list)
    beta_rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def worker_count(requested: Optional[int] = None) -> int:
    if requested is None:
        requested = int(os.environ.get(WORKERS_ENV, "1") or 1)
    return max(1, min(requested, os.cpu_count() or 1))


def _execute(job: Job):
    return train_run(job.config, job.seed, snapshot_at=job.snapshot_at, keep_params=job.keep_params)


def run_jobs(jobs: list, workers: Optional[int] = None) -> list:
    """Run ``jobs`` and return results in job order."""
    workers = worker_count(workers)
    if workers == 1 or len(jobs) <= 1:
        out = []
        cache: dict = {}
        for n, job in enumerate(jobs, 1):
            key = (job.config.task, job.config.corpus)
            data = cache.setdefault(key, TaskData(job.config)) if job.config.task == "char_lm" else None
            res = train_run(job.config, job.seed, snapshot_at=job.snapshot_at, data=data,
                            keep_params=job.keep_params)
            log.info("[%d/%d] %s val %.4f (%.1fs)%s", n, len(jobs), res.run_id,
                     res.final.val_loss if res.final else float("nan"), res.wall_seconds,
                     " ABORTED" if res.aborted else "")
            out.append(res)
        return out
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_execute, jobs))


def _finish(name: str, runs: list, target: Optional[float] = None) -> ExperimentResult:
    records = [rec for run in runs for rec in records_for_run(name, run)]
    return ExperimentResult(name=name, runs=runs, records=records, rank_rows=rank_rows(runs),
                            beta_rows=beta_rows(runs), summary=summarize(name, records, target))


def run_single(cfg: ExperimentConfig, workers: Optional[int] = None, keep_params: bool = False) -> ExperimentResult:
    """The ``train`` protocol: the configured model, once per seed."""
    jobs = [Job(cfg, s, keep_params=keep_params) for s in cfg.seeds]
    return _finish("train", run_jobs(jobs, workers))


def rank_jobs(cfg: ExperimentConfig) -> list:
    return [Job(cfg.with_model(variant=v, depth=d), s)
            for v in ("standard", "mgt_full")
            for d in cfg.experiment.rank_depths
            for s in cfg.seeds]


def run_rank_experiment(cfg: ExperimentConfig, workers: Optional[int] = None) -> ExperimentResult:
    """Standard vs full MGT across ``experiment.rank_depths``; rank profile of each trained model."""
    return _finish("rank-scan", run_jobs(rank_jobs(cfg), workers))


def ablation_jobs(cfg: ExperimentConfig) -> list:
    depth = cfg.experiment.ablation_depth
    return [Job(cfg.with_model(variant=v, depth=depth), s) for v in VARIANTS for s in cfg.seeds]


def run_ablation(cfg: ExperimentConfig, workers: Optional[int] = None) -> ExperimentResult:
    """All four variants at one depth with shared seeds, data order and hyperparameters."""
    return _finish("ablate", run_jobs(ablation_jobs(cfg), workers))


def beta_jobs(cfg: ExperimentConfig) -> list:
    snaps = tuple(snapshot_steps(cfg.total_steps, cfg.experiment.beta_checkpoints))
    base = cfg.with_model(variant="mgt_full", depth=cfg.experiment.beta_depth)
    return [Job(base, s, snaps) for s in cfg.seeds]


def run_beta_analysis(cfg: ExperimentConfig, workers: Optional[int] = None) -> ExperimentResult:
    """Deep full-MGT runs with gate statistics captured at fractional checkpoints."""
    return _finish("beta-stats", run_jobs(beta_jobs(cfg), workers))


def solve_width(cfg: ExperimentConfig, variant: str, depth: int, budget: int, tolerance: float = 0.10,
                max_width: int = 4096) -> int:
    """Width (a multiple of ``heads``) whose parameter count is closest to ``budget``.

    Raises :class:`InvalidConfigurationError` when no width lands within
    ``tolerance`` of the budget.
    """
    h = cfg.model.heads
    vocab = TaskData(cfg).vocab if cfg.task == "char_lm" else cfg.model.vocab
    best, best_err = None, float("inf")
    for width in range(h, max_width + 1, h):
        if width < 2:
            continue
        n = parameter_count(cfg.model.replace(variant=variant, depth=depth, width=width, vocab=vocab))
        err = abs(n - budget) / budget
        if err < best_err:
            best, best_err = width, err
        if n > budget:
            break
    if best is None or best_err > tolerance:
        raise InvalidConfigurationError(
            f"no width that is a multiple of heads={h} brings depth {depth} ({variant}) within "
            f"{tolerance:.0%} of {budget} parameters")
    return best


def depth_jobs(cfg: ExperimentConfig) -> list:
    budget = cfg.experiment.param_budget
    jobs = []
    for v in ("standard", "mgt_full"):
        for d in cfg.experiment.scale_depths:
            width = solve_width(cfg, v, d, budget)
            jobs += [Job(cfg.with_model(variant=v, depth=d, width=width), s) for s in cfg.seeds]
    return jobs


def run_depth_scaling(cfg: ExperimentConfig, workers: Optional[int] = None) -> ExperimentResult:
    """Parameter-matched depth sweep for the standard and full MGT variants."""
    return _finish("depth-scale", run_jobs(depth_jobs(cfg), workers), cfg.experiment.target_val_loss)


PROTOCOLS = {
    "train": run_single,
    "rank-scan": run_rank_experiment,
    "ablate": run_ablation,
    "beta-stats": run_beta_analysis,
    "depth-scale": run_depth_scaling,
}


def with_seeds(cfg: ExperimentConfig, seeds) -> ExperimentConfig:
    return replace(cfg, seeds=tuple(seeds))
