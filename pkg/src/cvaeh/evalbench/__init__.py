"""Experiment runners and metrics."""

from .metrics import (
    CoverageReport,
    MetricError,
    MinMsdReport,
    aggregate_minmsd,
    count_modes,
    min_ade,
    min_fde,
    minmsd,
    mode_coverage,
    msd_per_sample,
    nested_minmsd,
)

__all__ = [
    "CoverageReport", "MetricError", "MinMsdReport", "aggregate_minmsd", "count_modes", "min_ade",
    "min_fde", "minmsd", "mode_coverage", "msd_per_sample", "nested_minmsd",
]
