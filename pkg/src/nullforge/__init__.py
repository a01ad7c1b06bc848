"""SVD-based low-rank adapter initialization, null-space extraction and forgetting diagnostics."""

from .activations import (
    ActivationCapture,
    CalibrationSet,
    ToyModel,
    capture_layers,
    extract_null_basis,
    forward_collect,
    gram_accumulate,
    make_calibration_set,
)
from .adapters import SCHEMES, AdapterBundle, apply_adapter, init_bundle, load_bundle, save_bundle
from .linalg import ConvergenceError, SvdResult, pinv_psd, svd, symmetric_eig, truncate_rank
from .nfm import NfmFormatError, read_nfm, write_nfm
from .spectral import effective_rank, singular_distribution, spectral_report

__version__ = "0.1.0"

__all__ = [
    "ActivationCapture",
    "AdapterBundle",
    "CalibrationSet",
    "ConvergenceError",
    "NfmFormatError",
    "SCHEMES",
    "SvdResult",
    "ToyModel",
    "apply_adapter",
    "capture_layers",
    "effective_rank",
    "extract_null_basis",
    "forward_collect",
    "gram_accumulate",
    "init_bundle",
    "load_bundle",
    "make_calibration_set",
    "pinv_psd",
    "read_nfm",
    "save_bundle",
    "singular_distribution",
    "spectral_report",
    "svd",
    "symmetric_eig",
    "truncate_rank",
    "write_nfm",
]
