"""Bayesian truncated Gaussian copula graphical models with a
phylogenetic-tree prior on edge inclusion, plus simulation and evaluation
tooling for zero-inflated count data."""

__version__ = "0.1.0"

from .tree import (  # noqa: F401
    PhyloTree,
    parse_newick,
    read_newick_file,
    normalize_to_unit_depth,
    tree_correlation,
    tree_distance,
)
from .copula import CountMatrix, fit_ecdf, latent_observed, mclr_transform  # noqa: F401
from .sampler import SamplerConfig, run_chain, run_chains  # noqa: F401
from .analyze import (  # noqa: F401
    PosteriorSummary,
    fdr_cutoff,
    partial_correlations,
    recovery_metrics,
    clustering_coefficient,
    detect_communities,
)
