"""Vertebra centroid localization: heatmap regression, chain message passing, sparse refinement."""

__version__ = "1.0.0"

# Bumped whenever the on-disk layout of an artifact changes.
FORMAT_VERSIONS = {
    "volume (.svh/.raw)": 1,
    "landmarks (.csv)": 1,
    "network model": 1,
    "kernel bundle": 1,
    "shape dictionary (.csv)": 1,
    "dataset manifest (.csv)": 1,
    "report (.csv)": 1,
}
