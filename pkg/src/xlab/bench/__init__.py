"""Datasets, filters, metrics and experiment drivers."""
from .data import DatasetSplit, IDXError, find_split_files, limited_pool, load_dataset, load_idx, read_idx, write_idx
from .filters import ExclusionFilter, apply_filter
from .metrics import ExclusionMetrics, excluded_class_metrics, exclusion_metrics

__all__ = ["DatasetSplit", "IDXError", "find_split_files", "limited_pool", "load_dataset", "load_idx", "read_idx",
           "write_idx", "ExclusionFilter", "apply_filter", "ExclusionMetrics", "excluded_class_metrics",
           "exclusion_metrics"]
