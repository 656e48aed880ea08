"""Probabilistic reconciliation of hierarchical forecasts.

Turns independently produced (and generally incoherent) forecast
distributions for every node of an aggregation structure into a coherent
joint distribution over the bottom series, by conditioning on the summing
constraints.  Sampling from the reconciled distribution is done with a
bottom-up weight-and-resample scheme that scales to large temporal
hierarchies.
"""

from .distributions import (
    EmpiricalContinuous,
    EmpiricalDiscrete,
    ForecastDistribution,
    Gaussian,
    NegativeBinomial,
    Poisson,
    empirical_pmf,
    fit_gaussian,
    fit_negbin,
    kde_fit,
)
from .hierarchy import (
    GroupedStructure,
    Hierarchy,
    aggregating_matrix,
    bottom_labels,
    build_hierarchy,
    coherence_check,
    dump_structure,
    extract_max_subhierarchy,
    load_structure,
    structure_digest,
    summing_matrix,
    temporal_structure,
)
from .metrics import (
    energy_score,
    mape,
    mase,
    mis,
    skill_score,
    wasserstein2,
)
from .reconcile import (
    BaseForecasts,
    DiscretePosterior,
    GaussianReconciled,
    ReconciledSamples,
    WeightedSample,
    bruteforce_discrete,
    buis,
    buis_grouped,
    buis_sample_based,
    effective_sample_size,
    mh_reconcile,
    plain_is,
    point_reconcile,
    reconcile_gaussian,
    resample,
)

__version__ = "0.1.0"
