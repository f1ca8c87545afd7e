"""Categorical autoregressive (order-1 Markov) mirror of LLM distillation.

The ground truth is a random Markov chain, the teacher a smoothed bigram
fit to its samples, and the student an aggregate (low-rank) Markov model
whose latent bottleneck limits how many next-token modes it can express.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy.special import logsumexp

from .metrics import DEFAULT_FLOOR, MetricEstimate

logger = logging.getLogger(__name__)

DEGENERATE_USAGE = 1e-8


def _check_distribution(p: np.ndarray, name: str, tol: float) -> np.ndarray:
    if np.any(~np.isfinite(p)) or np.any(p < 0):
        raise ValueError(f"{name} must be finite and non-negative")
    sums = p.sum(axis=-1, keepdims=True)
    if np.any(np.abs(sums - 1.0) > tol):
        raise ValueError(f"{name} rows must sum to 1")
    return p / sums


@dataclass(frozen=True)
class MarkovModel:
    vocab_size: int
    start: np.ndarray
    transitions: np.ndarray

    def __post_init__(self):
        v = int(self.vocab_size)
        start = np.asarray(self.start, dtype=float)
        trans = np.asarray(self.transitions, dtype=float)
        if start.shape != (v,) or trans.shape != (v, v):
            raise ValueError(f"expected start ({v},) and transitions ({v}, {v})")
        object.__setattr__(self, "start", _check_distribution(start, "start", 1e-8))
        object.__setattr__(self, "transitions", _check_distribution(trans, "transitions", 1e-8))


@dataclass(frozen=True)
class LowRankMarkov:
    """Aggregate Markov model ``p(next | prev) = sum_z p(z | prev) p(next | z)``."""

    vocab_size: int
    rank: int
    start: np.ndarray
    prev_to_latent: np.ndarray
    latent_to_next: np.ndarray

    def __post_init__(self):
        v, r = int(self.vocab_size), int(self.rank)
        a = np.asarray(self.prev_to_latent, dtype=float)
        b = np.asarray(self.latent_to_next, dtype=float)
        if a.shape != (v, r) or b.shape != (r, v):
            raise ValueError(f"expected factors of shape ({v}, {r}) and ({r}, {v})")
        object.__setattr__(self, "start", _check_distribution(np.asarray(self.start, dtype=float), "start", 1e-8))
        object.__setattr__(self, "prev_to_latent", _check_distribution(a, "prev_to_latent", 1e-8))
        object.__setattr__(self, "latent_to_next", _check_distribution(b, "latent_to_next", 1e-8))

    @functools.cached_property
    def transitions(self) -> np.ndarray:
        return self.prev_to_latent @ self.latent_to_next


Model = Union[MarkovModel, LowRankMarkov]


@dataclass
class SequenceDataset:
    sequences: np.ndarray
    max_len: int = 0

    def __post_init__(self):
        self.sequences = np.atleast_2d(np.asarray(self.sequences, dtype=np.int64))
        if self.sequences.shape[1] < 2:
            raise ValueError("sequences must have length >= 2")
        if np.any(self.sequences < 0):
            raise ValueError("token indices must be non-negative")
        self.max_len = self.sequences.shape[1]

    def __len__(self) -> int:
        return self.sequences.shape[0]

    def check_vocab(self, v: int) -> None:
        if self.sequences.size and int(self.sequences.max()) >= v:
            raise ValueError(f"token {int(self.sequences.max())} out of range for vocabulary size {v}")


@dataclass(frozen=True)
class TokenFitConfig:
    smoothing_delta: float = 0.01
    rank: int = 8
    em_max_iter: int = 1000
    em_tol: float = 1e-8
    seed: int = 0
    init: str = "random"
    n_restarts: int = 1

    def __post_init__(self):
        if self.em_max_iter < 1:
            raise ValueError("em_max_iter must be >= 1")
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be >= 1")
        if self.smoothing_delta < 0:
            raise ValueError("smoothing_delta must be >= 0")
        if self.init not in ("random", "identity"):
            raise ValueError(f"unknown init {self.init!r}")


def make_ground_truth(v: int, concentration: float, seed) -> MarkovModel:
    if v < 2:
        raise ValueError("vocabulary needs at least two tokens")
    if not concentration > 0:
        raise ValueError("concentration must be > 0")
    rng = np.random.default_rng(seed)
    rows = rng.dirichlet(np.full(v, float(concentration)), size=v + 1)
    return MarkovModel(v, rows[0], rows[1:])


def _row_cdf(p: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(p, axis=-1)
    return cdf / cdf[..., -1:]


def sample_sequences(m: Model, n: int, t: int, seed) -> SequenceDataset:
    """Fixed-length sequences by inverse-CDF sampling, one uniform per token."""
    if n < 1 or t < 2:
        raise ValueError("need n >= 1 and t >= 2")
    rng = np.random.default_rng(seed)
    u = rng.random((n, t))
    start_cdf = _row_cdf(m.start)
    trans_cdf = _row_cdf(m.transitions)
    seqs = np.empty((n, t), dtype=np.int64)
    seqs[:, 0] = np.searchsorted(start_cdf, u[:, 0], side="right")
    for s in range(1, t):
        seqs[:, s] = np.count_nonzero(trans_cdf[seqs[:, s - 1]] <= u[:, s, None], axis=1)
    return SequenceDataset(seqs)


def step_log_probs(m: Model, seqs: np.ndarray) -> np.ndarray:
    """Per-position log-probabilities, shape ``(n, t)``; ``-inf`` where the
    model forbids a step."""
    seqs = np.atleast_2d(seqs)
    with np.errstate(divide="ignore"):
        first = np.log(m.start[seqs[:, 0]])
        rest = np.log(m.transitions[seqs[:, :-1], seqs[:, 1:]])
    return np.column_stack([first, rest])


def score_sequences(m: Model, seqs, floor: float = DEFAULT_FLOOR) -> tuple[np.ndarray, int]:
    """Total log-likelihood per sequence with steps below ``floor`` clamped.

    Returns the totals and the number of clamped steps.
    """
    seqs = np.atleast_2d(np.asarray(seqs, dtype=np.int64))
    if seqs.size and (seqs.min() < 0 or seqs.max() >= m.vocab_size):
        raise ValueError("token index out of range")
    steps = step_log_probs(m, seqs)
    low = ~(steps >= floor)
    steps[low] = floor
    return steps.sum(axis=1), int(np.count_nonzero(low))


def seq_log_likelihood(m: Model, seq, floor: float = DEFAULT_FLOOR) -> float:
    totals, clamped = score_sequences(m, seq, floor)
    if clamped:
        logger.warning("%d impossible step(s) clamped to %g nats", clamped, floor)
    return float(totals[0])


def temper_markov(m: MarkovModel, tau: float) -> MarkovModel:
    """Replace every row ``p`` (and the start vector) by ``p**(1/tau)``,
    renormalized."""
    if not 0 < tau <= 1:
        raise ValueError(f"tau must lie in (0, 1], got {tau!r}")
    if tau == 1:
        return m
    if np.any(m.start <= 0) or np.any(m.transitions <= 0):
        raise ValueError("tempering below tau=1 needs strictly positive probabilities; smooth the model first")

    def sharpen(p):
        logits = np.log(p) / tau
        return np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))

    return MarkovModel(m.vocab_size, sharpen(m.start), sharpen(m.transitions))


def bigram_counts(data: SequenceDataset, v: int) -> np.ndarray:
    seqs = data.sequences
    flat = seqs[:, :-1].ravel() * v + seqs[:, 1:].ravel()
    return np.bincount(flat, minlength=v * v).reshape(v, v).astype(float)


def _smoothed(counts: np.ndarray, delta: float) -> np.ndarray:
    counts = counts + delta
    totals = counts.sum(axis=-1, keepdims=True)
    v = counts.shape[-1]
    # unseen rows with delta = 0 fall back to uniform
    return np.divide(counts, totals, out=np.full_like(counts, 1.0 / v), where=totals > 0)


def fit_markov(data: SequenceDataset, v: int, delta: float) -> MarkovModel:
    """Add-``delta`` smoothed bigram model."""
    if len(data) == 0:
        raise ValueError("cannot fit an empty dataset")
    data.check_vocab(v)
    if delta < 0:
        raise ValueError("delta must be >= 0")
    start_counts = np.bincount(data.sequences[:, 0], minlength=v).astype(float)
    return MarkovModel(v, _smoothed(start_counts, delta), _smoothed(bigram_counts(data, v), delta))


@dataclass
class LowRankTrace:
    log_likelihood: list = field(default_factory=list)
    reseeded: list = field(default_factory=list)
    converged: bool = False


def _bigram_ll(counts: np.ndarray, p: np.ndarray, total: float) -> float:
    mask = counts > 0
    with np.errstate(divide="ignore"):
        return float(np.sum(counts[mask] * np.log(p[mask])) / total)


def _lowrank_em_run(counts: np.ndarray, r: int, cfg: TokenFitConfig, rng: np.random.Generator):
    v = counts.shape[0]
    total = counts.sum()
    if cfg.init == "identity":
        if r != v:
            raise ValueError("identity initialization needs rank == vocabulary size")
        a = (1.0 - 1e-6) * np.eye(v) + 1e-6 / v
        b = _smoothed(counts, max(cfg.smoothing_delta, 1e-12))
    else:
        a = rng.dirichlet(np.ones(r), size=v)
        b = rng.dirichlet(np.ones(v), size=r)
    trace = LowRankTrace()
    for it in range(cfg.em_max_iter):
        p = a @ b
        trace.log_likelihood.append(_bigram_ll(counts, p, total))
        if it > 0 and abs(trace.log_likelihood[-1] - trace.log_likelihood[-2]) < cfg.em_tol:
            trace.converged = True
            break
        ratio = np.divide(counts, p, out=np.zeros_like(counts), where=counts > 0)
        exp_a = a * (ratio @ b.T)  # expected (prev, latent) counts
        exp_b = b * (a.T @ ratio)  # expected (latent, next) counts
        row_a = exp_a.sum(axis=1, keepdims=True)
        a = np.divide(exp_a, row_a, out=a.copy(), where=row_a > 0)
        usage = exp_b.sum(axis=1)
        degenerate = usage / total < DEGENERATE_USAGE
        b = np.divide(exp_b, usage[:, None], out=b.copy(), where=~degenerate[:, None])
        if np.any(degenerate):
            for z in np.flatnonzero(degenerate):
                b[z] = rng.dirichlet(np.ones(v))
                logger.info("low-rank EM iteration %d: latent %d unused, re-seeded", it, z)
            trace.reseeded.append(it + 1)
    return a, b, trace


def fit_lowrank_em_trace(data: SequenceDataset, v: int, cfg: TokenFitConfig = TokenFitConfig()):
    """Aggregate-Markov EM on the bigram counts of ``data``, best of
    ``cfg.n_restarts`` random initializations by training likelihood.

    Returns the model and the winning run's trace (nats per transition).
    """
    if len(data) == 0:
        raise ValueError("cannot fit an empty dataset")
    data.check_vocab(v)
    r = int(cfg.rank)
    if not 1 <= r <= v:
        raise ValueError(f"rank must lie in [1, {v}], got {r}")
    counts = bigram_counts(data, v)
    n_runs = 1 if cfg.init == "identity" else cfg.n_restarts
    best = None
    for child in np.random.SeedSequence(cfg.seed).spawn(n_runs):
        run = _lowrank_em_run(counts, r, cfg, np.random.default_rng(child))
        if best is None or run[2].log_likelihood[-1] > best[2].log_likelihood[-1]:
            best = run
    a, b, trace = best
    start_counts = np.bincount(data.sequences[:, 0], minlength=v).astype(float)
    model = LowRankMarkov(v, r, _smoothed(start_counts, cfg.smoothing_delta), a, b)
    return model, trace


def fit_lowrank_em(data: SequenceDataset, v: int, cfg: TokenFitConfig = TokenFitConfig()) -> LowRankMarkov:
    return fit_lowrank_em_trace(data, v, cfg)[0]


def _per_token(sampler: Model, scorer: Model, n: int, t: int, seed, floor: float) -> MetricEstimate:
    if sampler.vocab_size != scorer.vocab_size:
        raise ValueError("models have different vocabulary sizes")
    if n < 2:
        raise ValueError("n must be >= 2")
    seqs = sample_sequences(sampler, n, t, seed).sequences
    totals, clamped = score_sequences(scorer, seqs, floor)
    est = MetricEstimate.from_scores(totals / t, floor)
    return MetricEstimate(est.mean, est.std_error, est.n_samples, clamped)


def token_precision(student: Model, ground: Model, n: int, t: int, seed, floor: float = DEFAULT_FLOOR) -> MetricEstimate:
    """Per-token ground-truth log-likelihood of student samples."""
    return _per_token(student, ground, n, t, seed, floor)


def token_recall(student: Model, ground: Model, n: int, t: int, seed, floor: float = DEFAULT_FLOOR) -> MetricEstimate:
    """Per-token student log-likelihood of ground-truth samples."""
    return _per_token(ground, student, n, t, seed, floor)


def mean_row_entropy(m: Model) -> float:
    p = m.transitions
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(p > 0, p * np.log(p), 0.0).sum(axis=1)
    return float(h.mean())


@dataclass(frozen=True)
class TokenWorldConfig:
    vocab_size: int = 50
    concentration: float = 0.5
    seq_len: int = 32
    n_train: int = 100_000
    teacher_delta: float = 0.01
    student_rank: int = 8
    em_max_iter: int = 3000
    em_tol: float = 1e-9
    em_restarts: int = 4
    seed: int = 0


@dataclass(frozen=True)
class TokenWorldResult:
    tau: float
    ground: MarkovModel
    teacher: MarkovModel
    tempered_teacher: MarkovModel
    student: LowRankMarkov


TOKEN_STAGES = ("ground_model", "ground_sample", "teacher_sample", "student_fit")


def run_token_world(cfg: TokenWorldConfig, taus: Sequence[float]) -> list:
    """Ground truth and teacher are shared across ``taus``; each ``tau``
    gets its own tempered-teacher corpus and student."""
    seeds = [int(c.generate_state(1, np.uint64)[0]) for c in np.random.SeedSequence(cfg.seed).spawn(len(TOKEN_STAGES))]
    seed = dict(zip(TOKEN_STAGES, seeds))
    ground = make_ground_truth(cfg.vocab_size, cfg.concentration, seed["ground_model"])
    data = sample_sequences(ground, cfg.n_train, cfg.seq_len, seed["ground_sample"])
    teacher = fit_markov(data, cfg.vocab_size, cfg.teacher_delta)
    fit_cfg = TokenFitConfig(
        smoothing_delta=cfg.teacher_delta,
        rank=cfg.student_rank,
        em_max_iter=cfg.em_max_iter,
        em_tol=cfg.em_tol,
        n_restarts=cfg.em_restarts,
        seed=seed["student_fit"],
    )
    out = []
    for tau in taus:
        tempered = temper_markov(teacher, tau)
        corpus = sample_sequences(tempered, cfg.n_train, cfg.seq_len, seed["teacher_sample"])
        student = fit_lowrank_em(corpus, cfg.vocab_size, fit_cfg)
        out.append(TokenWorldResult(float(tau), ground, teacher, tempered, student))
    return out
