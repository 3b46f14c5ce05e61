"""Seeded ablation studies over the two-stage pipeline.

Every study is a grid of fully independent (condition, seed) runs: the
task data, initialisation, and training are all derived from the run seed,
so grids can execute in parallel processes (``LOPE_THREADS``) without
changing any result.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .adapter import DependencyVector
from .config import (
    ExperimentConfig,
    data_noise_spec,
    parse_config,
    pipeline_config,
    serialize_config,
    task_spec,
    with_overrides,
)
from .model import accuracy
from .tasks import make_noisy_split
from .training import PipelineResult, TrainReport, run_pipeline

RATIO_GRID = (0.035, 0.05, 0.10, 0.15)
EXPERT_GRID = ((3, 1), (3, 2), (2, 2))


@dataclass
class RunRecord:
    """One (condition, seed) run: its training reports plus named
    evaluation accuracies on the clean eval split."""

    condition: str
    seed: int
    reports: list[TrainReport]
    evals: dict[str, float]


@dataclass
class StudyResult:
    name: str
    records: list[RunRecord] = field(default_factory=list)

    def conditions(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.condition, None)
        return list(seen)

    def eval_values(self, condition: str, key: str) -> dict[int, float]:
        return {r.seed: r.evals[key] for r in self.records
                if r.condition == condition and key in r.evals}

    def mean_eval(self, condition: str, key: str) -> float:
        vals = list(self.eval_values(condition, key).values())
        if not vals:
            raise KeyError(f"no eval {key!r} for condition {condition!r}")
        return float(np.mean(vals))


def _make_split(cfg: ExperimentConfig):
    return make_noisy_split(task_spec(cfg), cfg.train_size, data_noise_spec(cfg),
                            m_eval=cfg.eval_size)


def restrict_theta(theta: DependencyVector, poison: tuple[int, ...], count: int) -> DependencyVector:
    """Keep the ``count`` largest-magnitude dependencies among the normal
    experts (ties toward the lowest index) and zero the rest; count 0 turns
    compensation off entirely."""
    th = theta.theta
    normals = [i for i in range(th.shape[0]) if i not in poison]
    ranked = sorted(normals, key=lambda i: (-abs(th[i]), i))[:count]
    out = np.zeros_like(th)
    for i in ranked:
        out[i] = th[i]
    return DependencyVector(out)


def evaluate_conditions(result: PipelineResult, eval_data,
                        comp_counts: tuple[int, ...] = ()) -> dict[str, float]:
    """Standard evaluation battery on one trained pipeline: masked with
    calibrated compensation, masked without compensation, and unmasked.
    ``comp_counts`` additionally evaluates compensation restricted to the
    top-n dependent experts."""
    backbone = result.backbone
    thetas = result.thetas
    n = backbone.layer1.num_experts
    zeros = (DependencyVector.zeros(n), DependencyVector.zeros(n))
    out = {
        "masked_comp": accuracy(backbone, eval_data, thetas=thetas, masked=True),
        "masked_nocomp": accuracy(backbone, eval_data, thetas=zeros, masked=True),
        "unmasked": accuracy(backbone, eval_data, masked=False),
    }
    poison = backbone.layer1.poison
    for count in comp_counts:
        limited = (restrict_theta(thetas[0], poison, count),
                   restrict_theta(thetas[1], poison, count))
        out[f"comp_{count}"] = accuracy(backbone, eval_data, thetas=limited, masked=True)
    return out


def run_condition(cfg: ExperimentConfig, seed: int, condition: str,
                  baseline: bool = False, comp_counts: tuple[int, ...] = ()) -> RunRecord:
    """Train one pipeline for (condition, seed) and evaluate it."""
    seeded = with_overrides(cfg, seed=seed)
    split = _make_split(seeded)
    result = run_pipeline(split.train, pipeline_config(seeded, baseline=baseline),
                          eval_data=split.eval, condition=condition)
    if baseline:
        evals = {"unmasked": accuracy(result.backbone, split.eval, masked=False)}
    else:
        evals = evaluate_conditions(result, split.eval, comp_counts=comp_counts)
    return RunRecord(condition=condition, seed=seed, reports=result.reports, evals=evals)


def _worker(args):
    text, seed, condition, baseline, comp_counts = args
    return run_condition(parse_config(text), seed, condition, baseline, tuple(comp_counts))


def _run_grid(tasks) -> list[RunRecord]:
    """Run (config, seed, condition, ...) tasks, honouring LOPE_THREADS."""
    threads = int(os.environ.get("LOPE_THREADS", "1"))
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(_worker, tasks))
    else:
        records = [_worker(t) for t in tasks]
    records.sort(key=lambda r: (r.condition, r.seed))
    return records


def mask_study(cfg: ExperimentConfig, seeds, include_baseline: bool = False) -> StudyResult:
    """Masking vs. not masking (and compensation on/off) per seed; one
    training per seed, three evaluation modes."""
    tasks = [(serialize_config(cfg), seed, "lope", False, ()) for seed in seeds]
    if include_baseline:
        tasks += [(serialize_config(cfg), seed, "baseline", True, ()) for seed in seeds]
    return StudyResult("mask", _run_grid(tasks))


def noise_type_study(cfg: ExperimentConfig, seeds) -> StudyResult:
    """Stage-1 injection ablation: none / continuous / discrete / hybrid."""
    variants = {
        "none": with_overrides(cfg, hynoise_rate=0.0, hynoise_alpha=0.0),
        "continuous": with_overrides(cfg, hynoise_rate=0.0),
        "discrete": with_overrides(cfg, hynoise_alpha=0.0),
        "hybrid": cfg,
    }
    tasks = [(serialize_config(variant), seed, name, False, ())
             for name, variant in variants.items() for seed in seeds]
    return StudyResult("noise-type", _run_grid(tasks))


def ratio_study(cfg: ExperimentConfig, seeds, ratios=RATIO_GRID) -> StudyResult:
    """Sweep the hybrid-injection intensity (discrete rate and alpha move
    together)."""
    tasks = []
    for ratio in ratios:
        variant = with_overrides(cfg, hynoise_rate=ratio, hynoise_alpha=ratio)
        tasks += [(serialize_config(variant), seed, f"ratio_{ratio:g}", False, ())
                  for seed in seeds]
    return StudyResult("hynoise-ratio", _run_grid(tasks))


def compensation_study(cfg: ExperimentConfig, seeds, counts=None) -> StudyResult:
    """Vary how many experts participate in compensation (0 = mask without
    compensating)."""
    if counts is None:
        counts = tuple(range(cfg.num_experts - cfg.poison_experts + 1))
    tasks = [(serialize_config(cfg), seed, "lope", False, tuple(counts)) for seed in seeds]
    return StudyResult("compensation", _run_grid(tasks))


def expert_grid_study(cfg: ExperimentConfig, seeds, grid=EXPERT_GRID) -> StudyResult:
    """Expert-count configurations (normal, poisoning) with top-k pinned to
    the normal-expert count."""
    tasks = []
    for ne, pe in grid:
        variant = with_overrides(cfg, num_experts=ne + pe, poison_experts=pe, top_k=ne)
        tasks += [(serialize_config(variant), seed, f"ne{ne}_pe{pe}", False, ())
                  for seed in seeds]
    return StudyResult("experts", _run_grid(tasks))


STUDIES = {
    "mask": mask_study,
    "noise-type": noise_type_study,
    "hynoise-ratio": ratio_study,
    "compensation": compensation_study,
    "experts": expert_grid_study,
}
