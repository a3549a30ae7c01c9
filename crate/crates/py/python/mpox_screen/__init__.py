"""Python bindings for the mpox-screen pipeline."""

from ._native import (
    FoldPlan,
    Manifest,
    Model,
    __version__,
    compare_models,
    compute_metrics,
    hyperband_schedule,
    pca_project,
    shapiro_wilk,
    t_test,
    wilcoxon_rank_sum,
)

__all__ = [
    "FoldPlan",
    "Manifest",
    "Model",
    "__version__",
    "compare_models",
    "compute_metrics",
    "hyperband_schedule",
    "pca_project",
    "shapiro_wilk",
    "t_test",
    "wilcoxon_rank_sum",
]
