"""Pseudo-sample matching fusion of a small RCT with observational data."""

from ._native import (
    Dataset,
    ExperimentConfig,
    UpliftModel,
    default_config_toml,
    evaluate,
    fuse,
    generate,
    mean_smd,
    qini_coefficient,
    random_fuse,
    rct_category_counts,
    run_experiment,
)

__all__ = [
    "Dataset",
    "ExperimentConfig",
    "UpliftModel",
    "default_config_toml",
    "evaluate",
    "fuse",
    "generate",
    "mean_smd",
    "qini_coefficient",
    "random_fuse",
    "rct_category_counts",
    "run_experiment",
]
