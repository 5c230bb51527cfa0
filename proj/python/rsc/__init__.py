"""Representation self-challenging workbench (C++ core)."""

from ._rsc import (
    ConfigError,
    IoError,
    ShapeError,
    build_mask,
    corollary2_residual,
    gradient_check,
    make_benchmark,
    mask_properties,
    muted_cell_count,
    pooled_weights,
    run,
    select_batch_subset,
    top_k_indices,
)

__all__ = [
    "ConfigError",
    "IoError",
    "ShapeError",
    "build_mask",
    "corollary2_residual",
    "gradient_check",
    "make_benchmark",
    "mask_properties",
    "muted_cell_count",
    "pooled_weights",
    "run",
    "select_batch_subset",
    "top_k_indices",
]
