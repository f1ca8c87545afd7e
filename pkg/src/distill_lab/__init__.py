"""Knowledge distillation as a precision/recall trade-off, in two toy worlds.

A Gaussian-mixture world (ground truth, teacher, tempered teacher, student)
and an order-1 Markov token world with a low-rank student.
"""

from .gmm import (
    Dataset,
    FitConfig,
    GaussianComponent,
    GaussianMixture,
    TemperedWeights,
    fit_em,
    gaussian_cross_entropy,
    log_density,
    mixture_cross_entropy_bound,
    sample,
    temper_weights,
    weight_entropy,
)
from .metrics import DensityGrid, MetricEstimate, density_grid, precision_mc, recall_mc
from .pipeline import (
    ComponentMapping,
    PipelineConfig,
    PipelineResult,
    active_components,
    component_mapping,
    difficulty,
    run_pipeline,
)

__version__ = "0.1.0"
