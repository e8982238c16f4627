from ._stdemand import (
    ConfigError,
    DataError,
    NumericalError,
    build_adjacency,
    build_covariates,
    build_shift,
    chronological_split,
    compute_metrics,
    forecast,
    functional_edges,
    gpvar_series,
    gradient_check,
    read_demand,
    read_encodings,
    run_joint,
    synth_city,
    write_demand,
    write_encodings,
)

__all__ = [
    "ConfigError",
    "DataError",
    "NumericalError",
    "build_adjacency",
    "build_covariates",
    "build_shift",
    "chronological_split",
    "compute_metrics",
    "forecast",
    "functional_edges",
    "gpvar_series",
    "gradient_check",
    "read_demand",
    "read_encodings",
    "run_joint",
    "synth_city",
    "write_demand",
    "write_encodings",
]
