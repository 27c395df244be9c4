"""Feature selection for longitudinal two-class expression data with SAMGS-based reduction."""

from .dataset import (
    GeneSetCollection,
    LongitudinalMatrix,
    PhenotypeLabels,
    load_expression,
    load_gmt,
    load_labels,
    restrict,
)
from .reduction import ReductionConfig, Signature, simple_samgsr, two_level_samgsr
from .sam_core import SamConfig, compute_sam_matrix, permutation_pvalue, sam_statistic, samgs_screen

__version__ = "0.1.0"

__all__ = [
    "GeneSetCollection",
    "LongitudinalMatrix",
    "PhenotypeLabels",
    "ReductionConfig",
    "SamConfig",
    "Signature",
    "compute_sam_matrix",
    "load_expression",
    "load_gmt",
    "load_labels",
    "permutation_pvalue",
    "restrict",
    "sam_statistic",
    "samgs_screen",
    "simple_samgsr",
    "two_level_samgsr",
]
