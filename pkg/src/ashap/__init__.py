"""Shapley-value attribution of anomaly scores.

The main entry points are :func:`ashap.baselines.ash_attribution` for a single
point and :func:`ashap.bench.run_synth_benchmark` for the synthetic-anomaly
localization protocol.
"""

from ashap.data import (
    DataSplits,
    Dataset,
    NormStats,
    PerturbationRecord,
    generate_synthetic_gaussian,
    inject_anomaly,
    load_csv,
    normalize,
    split,
)
from ashap.detectors import (
    GmmModel,
    ScoreModel,
    SubspaceModel,
    fit_gmm,
    fit_subspace,
    load_model,
    save_model,
    select_model,
)
from ashap.charfn import AshCharFn, ReferenceCharFn, ReferenceSet, build_references
from ashap.shapley import Attribution, SubsetSampler, attribute, exact_shapley
from ashap.errors import AshapError

__version__ = "0.1.0"

__all__ = [
    "AshCharFn",
    "AshapError",
    "Attribution",
    "DataSplits",
    "Dataset",
    "GmmModel",
    "NormStats",
    "PerturbationRecord",
    "ReferenceCharFn",
    "ReferenceSet",
    "ScoreModel",
    "SubsetSampler",
    "SubspaceModel",
    "attribute",
    "build_references",
    "exact_shapley",
    "fit_gmm",
    "fit_subspace",
    "generate_synthetic_gaussian",
    "inject_anomaly",
    "load_csv",
    "load_model",
    "normalize",
    "save_model",
    "select_model",
    "split",
]
