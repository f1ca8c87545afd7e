"""Ground truth -> teacher -> tempered teacher -> student chain."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .gmm import (
    FitConfig,
    GaussianMixture,
    fit_em,
    grid_ground_truth,
    sample,
    temper_weights,
)

logger = logging.getLogger(__name__)

STAGES = ("ground_sample", "teacher_fit", "tempered_sample", "student_fit", "direct_fit")


@dataclass(frozen=True)
class ComponentMapping:
    """Teacher component index -> set of ground-truth component indices."""

    assignment: dict

    def __getitem__(self, k: int) -> frozenset:
        return self.assignment[k]

    def covered(self, teacher_indices) -> frozenset:
        out = set()
        for k in teacher_indices:
            out |= self.assignment[k]
        return frozenset(out)


@dataclass(frozen=True)
class PipelineConfig:
    ground_truth: GaussianMixture = field(default_factory=grid_ground_truth)
    n_teacher_train: int = 10_000
    k_teacher: int = 4
    n_student_train: int = 10_000
    k_student: int = 1
    beta: float = 100.0
    fit: FitConfig = FitConfig()
    epsilon: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_teacher_train < 1 or self.n_student_train < 1:
            raise ValueError("sample counts must be >= 1")
        if self.k_teacher < 1 or self.k_student < 1:
            raise ValueError("component counts must be >= 1")
        if not self.beta >= 1:
            raise ValueError("beta must be >= 1")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if not self.k_student <= self.k_teacher <= self.ground_truth.n_components:
            warnings.warn(
                "expected k_student <= k_teacher <= number of ground-truth components "
                f"(got {self.k_student}, {self.k_teacher}, {self.ground_truth.n_components})",
                stacklevel=3,
            )


@dataclass(frozen=True)
class PipelineResult:
    teacher: GaussianMixture
    tempered_teacher: GaussianMixture
    student_distilled: GaussianMixture
    student_direct: GaussianMixture
    sigma: ComponentMapping
    difficulty: int
    beta: float


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        super().__init__(f"pipeline stage '{stage}' failed: {cause}")


def stage_seeds(seed: int) -> dict:
    children = np.random.SeedSequence(seed).spawn(len(STAGES))
    return {name: int(c.generate_state(1, np.uint64)[0]) for name, c in zip(STAGES, children)}


def component_mapping(ground: GaussianMixture, teacher: GaussianMixture) -> ComponentMapping:
    """Assign each ground-truth mode to the teacher component with the
    highest posterior responsibility at that mode's mean."""
    if ground.dim != teacher.dim:
        raise ValueError("mixtures have different dimensions")
    scores = teacher.component_log_probs(ground.means)
    owner = np.argmax(scores, axis=1)
    return ComponentMapping(
        {k: frozenset(int(i) for i in np.flatnonzero(owner == k)) for k in range(teacher.n_components)}
    )


def active_components(w, epsilon: float) -> frozenset:
    w = np.asarray(w, dtype=float)
    return frozenset(int(k) for k in np.flatnonzero(w >= 1.0 - epsilon))


def difficulty(k_student: int, w_tempered, sigma: ComponentMapping, epsilon: float) -> int:
    return int(k_student - len(sigma.covered(active_components(w_tempered, epsilon))))


def _stage(name, fn, *args):
    try:
        return fn(*args)
    except Exception as exc:
        raise PipelineError(name, exc) from exc


def _fit_cfg(cfg: PipelineConfig, seed: int) -> FitConfig:
    return replace(cfg.fit, seed=seed)


def run_pipeline_sweep(cfg: PipelineConfig, betas: Sequence[float]) -> list:
    """Run the chain once per ``beta`` while sharing the ground-truth data,
    teacher and direct student. Identical to separate ``run_pipeline`` calls
    with the same seed."""
    seeds = stage_seeds(cfg.seed)
    data = _stage("ground_sample", sample, cfg.ground_truth, cfg.n_teacher_train, seeds["ground_sample"])
    teacher = _stage("teacher_fit", fit_em, data, cfg.k_teacher, _fit_cfg(cfg, seeds["teacher_fit"]))
    direct = _stage("direct_fit", fit_em, data, cfg.k_student, _fit_cfg(cfg, seeds["direct_fit"]))
    sigma = component_mapping(cfg.ground_truth, teacher)
    results = []
    for beta in betas:
        tw = _stage("tempered_sample", temper_weights, teacher.weights, beta)
        tempered = teacher.with_weights(tw.tempered)
        data_t = _stage("tempered_sample", sample, tempered, cfg.n_student_train, seeds["tempered_sample"])
        student = _stage("student_fit", fit_em, data_t, cfg.k_student, _fit_cfg(cfg, seeds["student_fit"]))
        results.append(
            PipelineResult(
                teacher=teacher,
                tempered_teacher=tempered,
                student_distilled=student,
                student_direct=direct,
                sigma=sigma,
                difficulty=difficulty(cfg.k_student, tw.tempered, sigma, cfg.epsilon),
                beta=float(beta),
            )
        )
    return results


def run_pipeline(cfg: PipelineConfig) -> PipelineResult:
    return run_pipeline_sweep(cfg, [cfg.beta])[0]

