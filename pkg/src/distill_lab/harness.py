"""Experiment configuration, sweep orchestration and CSV output."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .gmm import FitConfig, GaussianMixture, grid_ground_truth, weight_entropy
from .metrics import density_grid, precision_mc, recall_mc
from .pipeline import PipelineConfig, difficulty, run_pipeline_sweep
from .tokenworld import TokenWorldConfig, mean_row_entropy, run_token_world, token_precision, token_recall

logger = logging.getLogger(__name__)

KINDS = ("gmm-repro", "beta-sweep", "token-sweep", "density-export")
CSV_HEADER = (
    "experiment",
    "seed",
    "knob",
    "precision_mean",
    "precision_se",
    "recall_mean",
    "recall_se",
    "teacher_weight_entropy",
    "difficulty",
    "clamp_count",
)
NO_DIFFICULTY = -999
SUMMARY_SEED = -1

DEFAULTS: dict = {
    "kind": None,
    "master_seed": 0,
    "seeds": 5,
    "beta": 100.0,
    "beta_list": [1.0, 2.0, 5.0, 10.0, 100.0],
    "tau_list": [0.8, 0.875, 0.95, 1.0],
    "output_dir": "results",
    "gmm": {
        "ground_truth": {
            "x_centers": [-3.0, -1.0, 1.0, 3.0],
            "y_centers": [-0.5, 0.5],
            "variance": 0.015,
            "column_weights": [0.15, 0.26, 0.33, 0.24],
        },
        "n_teacher_train": 10_000,
        "k_teacher": 4,
        "n_student_train": 10_000,
        "k_student": 1,
        "epsilon": 0.1,
        "fit": {"max_iter": 500, "tol": 1e-6, "reg_eps": 1e-6, "n_restarts": 10},
        "n_eval": 100_000,
        "score_floor": -700.0,
    },
    "token": {
        "vocab_size": 50,
        "concentration": 0.5,
        "seq_len": 32,
        "n_train": 100_000,
        "teacher_delta": 0.01,
        "student_rank": 8,
        "em_max_iter": 3000,
        "em_tol": 1e-9,
        "em_restarts": 4,
        "n_eval": 100_000,
        "score_floor": -700.0,
    },
    "density": {"x_range": [-4.5, 4.5, 181], "y_range": [-1.5, 1.5, 61]},
}

# Accepted key sets for gmm.ground_truth: grid parameters or explicit arrays.
_GROUND_TRUTH_FORMS = ({"x_centers", "y_centers", "variance", "column_weights"}, {"means", "covariances", "weights"})


class ConfigError(ValueError):
    """Invalid or unparseable experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    master_seed: int
    seeds: int
    beta: float
    beta_list: tuple
    tau_list: tuple
    output_dir: str
    pipeline: PipelineConfig
    n_eval: int
    score_floor: float
    token: TokenWorldConfig
    token_n_eval: int
    token_score_floor: float
    x_range: tuple
    y_range: tuple


@dataclass(frozen=True)
class SweepResultRow:
    experiment: str
    seed: int
    knob: float
    precision_mean: float
    precision_se: float
    recall_mean: float
    recall_se: float
    teacher_weight_entropy: float
    difficulty: int
    clamp_count: int

    @property
    def failed(self) -> bool:
        return self.experiment.endswith(":error")

    def sort_key(self):
        return (self.knob, self.seed, self.experiment)


# ----------------------------------------------------------------------------
# configuration


def _merge(defaults: dict, given: dict, path: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key '{where}'")
        if key == "ground_truth":
            if not isinstance(value, dict) or set(value) not in _GROUND_TRUTH_FORMS:
                raise ConfigError(
                    f"'{where}' needs exactly the keys {sorted(_GROUND_TRUTH_FORMS[0])} or {sorted(_GROUND_TRUTH_FORMS[1])}"
                )
            out[key] = value
        elif isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{where}' must be an object")
            out[key] = _merge(defaults[key], value, where)
        else:
            out[key] = value
    return out


def _require(cond: bool, name: str, what: str) -> None:
    if not cond:
        raise ConfigError(f"invalid value for '{name}': {what}")


def _int(raw: dict, key: str, name: str, minimum: int) -> int:
    value = raw[key]
    _require(isinstance(value, int) and not isinstance(value, bool), name, "expected an integer")
    _require(value >= minimum, name, f"must be >= {minimum}")
    return value


def _real(raw: dict, key: str, name: str) -> float:
    value = raw[key]
    _require(isinstance(value, (int, float)) and not isinstance(value, bool), name, "expected a number")
    _require(math.isfinite(value), name, "must be finite")
    return float(value)


def _real_list(raw: dict, key: str, name: str) -> tuple:
    value = raw[key]
    _require(isinstance(value, list), name, "expected a list")
    _require(len(value) > 0, name, "must not be empty")
    out = []
    for v in value:
        _require(isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v), name, "entries must be numbers")
        out.append(float(v))
    return tuple(out)


def _ground_truth(raw: dict) -> GaussianMixture:
    try:
        if "means" in raw:
            return GaussianMixture.from_arrays(raw["means"], raw["covariances"], raw["weights"])
        return grid_ground_truth(raw["x_centers"], raw["y_centers"], raw["variance"], raw["column_weights"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid value for 'gmm.ground_truth': {exc}") from None


def config_from_dict(data: dict, kind: Optional[str] = None) -> ExperimentConfig:
    """Validate a config mapping on top of ``DEFAULTS``.

    ``kind`` (from the CLI subcommand) fills in a missing ``kind`` and must
    agree with one that is present.
    """
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    raw = _merge(DEFAULTS, data, "")
    if raw["kind"] is None:
        raw["kind"] = kind
    _require(raw["kind"] in KINDS, "kind", f"expected one of {', '.join(KINDS)}")
    if kind is not None and raw["kind"] != kind:
        raise ConfigError(f"invalid value for 'kind': config says '{raw['kind']}' but '{kind}' was requested")
    master = raw["master_seed"]
    _require(isinstance(master, int) and not isinstance(master, bool) and 0 <= master < 2**64, "master_seed",
             "expected an unsigned 64-bit integer")
    beta = _real(raw, "beta", "beta")
    _require(beta >= 1, "beta", "must be >= 1")
    beta_list = _real_list(raw, "beta_list", "beta_list")
    _require(all(b >= 1 for b in beta_list), "beta_list", "entries must be >= 1")
    tau_list = _real_list(raw, "tau_list", "tau_list")
    _require(all(0 < t <= 1 for t in tau_list), "tau_list", "entries must lie in (0, 1]")
    _require(isinstance(raw["output_dir"], str), "output_dir", "expected a path string")

    g = raw["gmm"]
    f = g["fit"]
    try:
        fit = FitConfig(
            max_iter=_int(f, "max_iter", "gmm.fit.max_iter", 1),
            tol=_real(f, "tol", "gmm.fit.tol"),
            reg_eps=_real(f, "reg_eps", "gmm.fit.reg_eps"),
            n_restarts=_int(f, "n_restarts", "gmm.fit.n_restarts", 1),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid value in 'gmm.fit': {exc}") from None
    epsilon = _real(g, "epsilon", "gmm.epsilon")
    _require(0 < epsilon < 1, "gmm.epsilon", "must lie in (0, 1)")
    pipeline = PipelineConfig(
        ground_truth=_ground_truth(g["ground_truth"]),
        n_teacher_train=_int(g, "n_teacher_train", "gmm.n_teacher_train", 1),
        k_teacher=_int(g, "k_teacher", "gmm.k_teacher", 1),
        n_student_train=_int(g, "n_student_train", "gmm.n_student_train", 1),
        k_student=_int(g, "k_student", "gmm.k_student", 1),
        beta=beta,
        fit=fit,
        epsilon=epsilon,
    )
    t = raw["token"]
    token = TokenWorldConfig(
        vocab_size=_int(t, "vocab_size", "token.vocab_size", 2),
        concentration=_real(t, "concentration", "token.concentration"),
        seq_len=_int(t, "seq_len", "token.seq_len", 2),
        n_train=_int(t, "n_train", "token.n_train", 1),
        teacher_delta=_real(t, "teacher_delta", "token.teacher_delta"),
        student_rank=_int(t, "student_rank", "token.student_rank", 1),
        em_max_iter=_int(t, "em_max_iter", "token.em_max_iter", 1),
        em_tol=_real(t, "em_tol", "token.em_tol"),
        em_restarts=_int(t, "em_restarts", "token.em_restarts", 1),
    )
    _require(token.concentration > 0, "token.concentration", "must be > 0")
    _require(token.teacher_delta > 0, "token.teacher_delta", "must be > 0 so the teacher can be tempered")
    _require(token.student_rank <= token.vocab_size, "token.student_rank", "must not exceed vocab_size")

    d = raw["density"]
    ranges = []
    for key in ("x_range", "y_range"):
        value = d[key]
        name = f"density.{key}"
        _require(isinstance(value, list) and len(value) == 3, name, "expected [lo, hi, steps]")
        lo, hi = _real({"v": value[0]}, "v", name), _real({"v": value[1]}, "v", name)
        steps = _int({"v": value[2]}, "v", name, 2)
        _require(lo < hi, name, "lo must be < hi")
        ranges.append((lo, hi, steps))

    return ExperimentConfig(
        kind=raw["kind"],
        master_seed=master,
        seeds=_int(raw, "seeds", "seeds", 1),
        beta=beta,
        beta_list=beta_list,
        tau_list=tau_list,
        output_dir=raw["output_dir"],
        pipeline=pipeline,
        n_eval=_int(g, "n_eval", "gmm.n_eval", 2),
        score_floor=_real(g, "score_floor", "gmm.score_floor"),
        token=token,
        token_n_eval=_int(t, "n_eval", "token.n_eval", 2),
        token_score_floor=_real(t, "score_floor", "token.score_floor"),
        x_range=ranges[0],
        y_range=ranges[1],
    )


def shipped_config_path(name: str) -> Path:
    return Path(str(resources.files("distill_lab") / "configs" / f"{name}.json"))


def load_config_text(path) -> str:
    p = Path(path)
    if not p.exists() and not p.suffix:
        shipped = shipped_config_path(str(path))
        if shipped.exists():
            p = shipped
    try:
        return p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config '{path}': {exc.strerror}") from None


def parse_config(path, kind: Optional[str] = None) -> ExperimentConfig:
    """Read a JSON config file (or the name of a shipped config)."""
    text = load_config_text(path)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return config_from_dict(data, kind)


# ----------------------------------------------------------------------------
# seeding


def derive_seed(master: int, *keys: int) -> int:
    """Stable 64-bit child seed for a position in the sweep grid."""
    state = np.random.SeedSequence(master, spawn_key=tuple(int(k) for k in keys)).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def world_seed(cfg: ExperimentConfig, seed_index: int) -> int:
    return derive_seed(cfg.master_seed, seed_index)


def cell_seed(cfg: ExperimentConfig, seed_index: int, knob_index: int) -> int:
    return derive_seed(cfg.master_seed, seed_index, knob_index)


def eval_seeds(cell: int, count: int) -> list:
    return [derive_seed(cell, i) for i in range(count)]


# ----------------------------------------------------------------------------
# cells


def _error_row(experiment: str, seed: int, knob: float) -> SweepResultRow:
    nan = float("nan")
    return SweepResultRow(f"{experiment}:error", seed, knob, nan, nan, nan, nan, nan, NO_DIFFICULTY, 0)


def _gmm_row(experiment, seed_index, knob, student, cfg, seeds, entropy, diff) -> SweepResultRow:
    p = precision_mc(student, cfg.pipeline.ground_truth, cfg.n_eval, seeds[0], cfg.score_floor)
    r = recall_mc(student, cfg.pipeline.ground_truth, cfg.n_eval, seeds[1], cfg.score_floor)
    return SweepResultRow(experiment, seed_index, float(knob), p.mean, p.std_error, r.mean, r.std_error,
                          entropy, int(diff), p.clamp_count + r.clamp_count)


def _gmm_task(cfg: ExperimentConfig, seed_index: int) -> list:
    """All knob cells of one seed index; they share the teacher."""
    knobs = cfg.beta_list if cfg.kind == "beta-sweep" else (cfg.beta,)
    name = cfg.kind
    try:
        results = run_pipeline_sweep(replace(cfg.pipeline, seed=world_seed(cfg, seed_index)), knobs)
    except Exception:
        logger.exception("%s: seed %d failed", name, seed_index)
        return [_error_row(name, seed_index, k) for k in knobs]
    rows = []
    for j, (knob, res) in enumerate(zip(knobs, results)):
        try:
            seeds = eval_seeds(cell_seed(cfg, seed_index, j), 4)
            tempered_w = res.tempered_teacher.weights
            if cfg.kind == "beta-sweep":
                rows.append(_gmm_row(name, seed_index, knob, res.student_distilled, cfg, seeds[:2],
                                     weight_entropy(tempered_w), res.difficulty))
            else:
                base_w = res.teacher.weights
                direct_diff = difficulty(cfg.pipeline.k_student, base_w, res.sigma, cfg.pipeline.epsilon)
                rows.append(_gmm_row(f"{name}/direct", seed_index, knob, res.student_direct, cfg, seeds[:2],
                                     weight_entropy(base_w), direct_diff))
                rows.append(_gmm_row(f"{name}/distilled", seed_index, knob, res.student_distilled, cfg, seeds[2:],
                                     weight_entropy(tempered_w), res.difficulty))
                if cfg.kind == "density-export" and seed_index == 0:
                    _export_density(cfg, res)
        except Exception:
            logger.exception("%s: cell (seed %d, knob %g) failed", name, seed_index, knob)
            rows.append(_error_row(name, seed_index, knob))
    return rows


def _export_density(cfg: ExperimentConfig, res) -> None:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    models = {
        "ground_truth": cfg.pipeline.ground_truth,
        "teacher": res.teacher,
        "tempered_teacher": res.tempered_teacher,
        "student_direct": res.student_direct,
        "student_distilled": res.student_distilled,
    }
    for label, model in models.items():
        density_grid(model, cfg.x_range, cfg.y_range).write(out / f"density_{label}.txt")


def _token_task(cfg: ExperimentConfig, seed_index: int) -> list:
    name = cfg.kind
    knobs = cfg.tau_list
    try:
        results = run_token_world(replace(cfg.token, seed=world_seed(cfg, seed_index)), knobs)
    except Exception:
        logger.exception("%s: seed %d failed", name, seed_index)
        return [_error_row(name, seed_index, k) for k in knobs]
    rows = []
    t = cfg.token.seq_len
    for j, (knob, res) in enumerate(zip(knobs, results)):
        try:
            s_prec, s_rec = eval_seeds(cell_seed(cfg, seed_index, j), 2)
            p = token_precision(res.student, res.ground, cfg.token_n_eval, t, s_prec, cfg.token_score_floor)
            r = token_recall(res.student, res.ground, cfg.token_n_eval, t, s_rec, cfg.token_score_floor)
            rows.append(SweepResultRow(name, seed_index, float(knob), p.mean, p.std_error, r.mean, r.std_error,
                                       mean_row_entropy(res.tempered_teacher), NO_DIFFICULTY,
                                       p.clamp_count + r.clamp_count))
        except Exception:
            logger.exception("%s: cell (seed %d, knob %g) failed", name, seed_index, knob)
            rows.append(_error_row(name, seed_index, knob))
    return rows


def run_seed(cfg: ExperimentConfig, seed_index: int) -> list:
    if cfg.kind == "token-sweep":
        return _token_task(cfg, seed_index)
    return _gmm_task(cfg, seed_index)


def _summary_rows(rows: list) -> list:
    """Seed-averaged rows (seed = -1) for each experiment/knob group."""
    groups: dict = {}
    for row in rows:
        if not row.failed:
            groups.setdefault((row.experiment, row.knob), []).append(row)
    out = []
    for (experiment, knob), group in groups.items():
        n = len(group)
        diffs = Counter(r.difficulty for r in group)
        out.append(
            SweepResultRow(
                experiment,
                SUMMARY_SEED,
                knob,
                float(np.mean([r.precision_mean for r in group])),
                float(math.sqrt(sum(r.precision_se**2 for r in group)) / n),
                float(np.mean([r.recall_mean for r in group])),
                float(math.sqrt(sum(r.recall_se**2 for r in group)) / n),
                float(np.mean([r.teacher_weight_entropy for r in group])),
                min(diffs, key=lambda d: (-diffs[d], d)),
                sum(r.clamp_count for r in group),
            )
        )
    return out


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> list:
    """Run every (seed, knob) cell and return rows sorted by (knob, seed).

    Cells that share a seed index run in one task. ``gmm-repro`` and
    ``density-export`` also get seed-averaged rows with seed -1.
    """
    indices = list(range(cfg.seeds))
    if jobs > 1 and len(indices) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(indices))) as pool:
            chunks = list(pool.map(run_seed, [cfg] * len(indices), indices))
    else:
        chunks = [run_seed(cfg, i) for i in indices]
    rows = [row for chunk in chunks for row in chunk]
    if cfg.kind in ("gmm-repro", "density-export"):
        rows += _summary_rows(rows)
    return sorted(rows, key=SweepResultRow.sort_key)


# ----------------------------------------------------------------------------
# CSV


def _fmt(value: Any) -> str:
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return format(float(value), ".17g")


def emit_csv(rows, path) -> None:
    if not rows:
        raise ValueError("no rows to write")
    path = Path(path)
    try:
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for row in sorted(rows, key=SweepResultRow.sort_key):
                writer.writerow([row.experiment] + [_fmt(getattr(row, name)) for name in CSV_HEADER[1:]])
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write results to {path}: {exc.strerror}") from None


def read_csv(path) -> list:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError(f"unexpected header {header}")
        rows = []
        for rec in reader:
            rows.append(
                SweepResultRow(
                    rec[0], int(rec[1]), float(rec[2]), float(rec[3]), float(rec[4]), float(rec[5]),
                    float(rec[6]), float(rec[7]), int(rec[8]), int(rec[9]),
                )
            )
    return rows
