"""Resample-and-reinitialize reorganization of Gaussian splat models, with diagnostics."""
from .model import GaussianSet, covariance_from_params, logit, params_from_covariance, sigmoid, sym_eig3
from .reorg import ReorgError, ReorgResult, reorganize, reorganize_cascaded
from .resample import ResamplePlan, SampleBatch, sample
from .spatial_index import PointIndex
from .splat_io import DiagnosticsReport, SplatFormatError, read_report, read_splat, write_report, write_splat

__version__ = "0.1.0"

__all__ = [
    "DiagnosticsReport", "GaussianSet", "PointIndex", "ReorgError", "ReorgResult", "ResamplePlan",
    "SampleBatch", "SplatFormatError", "covariance_from_params", "logit", "params_from_covariance",
    "read_report", "read_splat", "reorganize", "reorganize_cascaded", "sample", "sigmoid", "sym_eig3",
    "write_report", "write_splat",
]
