"""Monte-Carlo precision/recall for generative models and density grids."""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gmm import GaussianMixture, log_density, sample

DEFAULT_FLOOR = -700.0


@dataclass(frozen=True)
class MetricEstimate:
    mean: float
    std_error: float
    n_samples: int
    clamp_count: int = 0

    @classmethod
    def from_scores(cls, scores: np.ndarray, floor: float = DEFAULT_FLOOR) -> "MetricEstimate":
        scores = np.asarray(scores, dtype=float)
        if scores.size < 2:
            raise ValueError("need at least two scores for a standard error")
        low = ~(scores >= floor)  # also catches -inf and nan
        clamped = np.where(low, floor, scores)
        return cls(
            mean=float(np.mean(clamped)),
            std_error=float(np.std(clamped, ddof=1) / np.sqrt(clamped.size)),
            n_samples=int(clamped.size),
            clamp_count=int(np.count_nonzero(low)),
        )


def combined_se(*estimates: MetricEstimate) -> float:
    return float(np.sqrt(sum(e.std_error**2 for e in estimates)))


def _cross_score(sampler: GaussianMixture, scorer: GaussianMixture, n: int, seed, floor: float) -> MetricEstimate:
    if sampler.dim != scorer.dim:
        raise ValueError("mixtures have different dimensions")
    if n < 2:
        raise ValueError("n must be >= 2")
    pts = sample(sampler, n, seed).points
    return MetricEstimate.from_scores(log_density(scorer, pts), floor)


def precision_mc(student: GaussianMixture, ground: GaussianMixture, n: int = 100_000, seed=0,
                 floor: float = DEFAULT_FLOOR) -> MetricEstimate:
    """Mean ground-truth log-density of student samples."""
    return _cross_score(student, ground, n, seed, floor)


def recall_mc(student: GaussianMixture, ground: GaussianMixture, n: int = 100_000, seed=0,
              floor: float = DEFAULT_FLOOR) -> MetricEstimate:
    """Mean student log-density of ground-truth samples."""
    return _cross_score(ground, student, n, seed, floor)


@dataclass(frozen=True)
class DensityGrid:
    x_axis: np.ndarray
    y_axis: np.ndarray
    log_density: np.ndarray

    def __post_init__(self):
        if self.log_density.shape != (self.y_axis.size, self.x_axis.size):
            raise ValueError("log_density must have shape (len(y_axis), len(x_axis))")

    def to_text(self) -> str:
        """Comma-separated table: the first row holds the x axis, the first
        column the y axis, the corner cell is ``nan``."""
        fmt = lambda v: format(float(v), ".17g")  # noqa: E731
        out = io.StringIO()
        out.write(",".join(["nan"] + [fmt(v) for v in self.x_axis]) + "\n")
        for y, row in zip(self.y_axis, self.log_density):
            out.write(",".join([fmt(y)] + [fmt(v) for v in row]) + "\n")
        return out.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8", newline="\n")

    @classmethod
    def from_text(cls, text: str) -> "DensityGrid":
        table = np.loadtxt(io.StringIO(text), delimiter=",", ndmin=2)
        return cls(table[0, 1:], table[1:, 0], table[1:, 1:])


def density_grid(m: GaussianMixture, x_range, y_range) -> DensityGrid:
    """Log-density of a 2-D mixture on a Cartesian grid.

    ``x_range`` and ``y_range`` are ``(lo, hi, steps)`` triples.
    """
    if m.dim != 2:
        raise ValueError(f"density grids need a 2-D mixture, got d={m.dim}")
    (x_lo, x_hi, nx), (y_lo, y_hi, ny) = x_range, y_range
    if int(nx) < 2 or int(ny) < 2:
        raise ValueError("grid axes need at least two steps")
    xs = np.linspace(x_lo, x_hi, int(nx))
    ys = np.linspace(y_lo, y_hi, int(ny))
    gx, gy = np.meshgrid(xs, ys)
    values = log_density(m, np.column_stack([gx.ravel(), gy.ravel()])).reshape(ys.size, xs.size)
    if not np.all(np.isfinite(values)):
        raise ValueError("log-density underflowed on the grid; shrink the range")
    return DensityGrid(xs, ys, values)
