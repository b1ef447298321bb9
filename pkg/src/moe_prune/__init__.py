"""Expert-pruning sandbox for simulated mixture-of-experts layers.

Generates MoE layers with planted specialist/generalist structure,
caches calibration data, and runs five expert-retention strategies
(random, frequency, enumeration exhaustive/greedy, global-variability,
and cluster-then-select) against brute-force oracles and held-out
per-domain evaluations.

Submodules load lazily so the command-line entry point can cap BLAS
threads (MOP_THREADS) before numpy is first imported.
"""

from importlib import import_module

__version__ = "0.1.0"

_EXPORTS = {
    "tensor_store": [
        "ArchiveError",
        "Manifest",
        "read_archive",
        "write_archive",
    ],
    "moe_sim": [
        "CalibrationCache",
        "ExpertTransform",
        "MoELayer",
        "PlantedSpec",
        "cache_from_inputs",
        "domain_centroids",
        "forward_full",
        "forward_single",
        "forward_subset",
        "gate",
        "generate_calibration",
        "generate_layer",
        "load_cache",
        "load_layer",
        "save_cache",
        "save_layer",
    ],
    "metrics": [
        "PerformanceMatrix",
        "VariabilityScores",
        "activation_frequency",
        "performance_matrix",
        "reconstruction_loss",
        "variability_scores",
    ],
    "cluster": [
        "DomainLabeling",
        "ExpertPartition",
        "SimilarityMatrix",
        "kmeans",
        "similarity_matrix",
        "spearman_rho",
        "ward_partition",
    ],
    "prune": [
        "METHODS",
        "PruningPlan",
        "load_plan",
        "prune_enum",
        "prune_frequency",
        "prune_gvp",
        "prune_mop",
        "prune_random",
        "prune_with_method",
        "save_plan",
    ],
    "evaluation": [
        "EvalReport",
        "compare_methods",
        "comparison_to_csv",
        "comparison_to_text",
        "evaluate_plan",
        "export_heatmap_csv",
    ],
}

_NAME_TO_MODULE = {
    name: module for module, names in _EXPORTS.items() for name in names
}

__all__ = sorted(_NAME_TO_MODULE) + ["__version__"]


def __getattr__(name):
    module = _NAME_TO_MODULE.get(name)
    if module is None:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    value = getattr(import_module(f".{module}", __name__), name)
    globals()[name] = value  # cache so the import runs once
    return value


def __dir__():
    return __all__
