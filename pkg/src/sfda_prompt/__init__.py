"""Source-free domain adaptation for segmentation via learned input prompts.

A frozen source model is adapted to an unlabeled target domain in two
stages: an additive image prompt is fitted so that target batch-norm
statistics match the stored source statistics, then the model itself is
fine-tuned on prompted target images with pseudo labels and a
low-frequency amplitude-swap consistency term.
"""
from .errors import (
    BadMagicError,
    ConfigError,
    DimOverflowError,
    FormatError,
    RejectedInputError,
    SfdaError,
    TruncatedFileError,
    VersionError,
)

__version__ = "0.1.0"

__all__ = [
    "BadMagicError",
    "ConfigError",
    "DimOverflowError",
    "FormatError",
    "RejectedInputError",
    "SfdaError",
    "TruncatedFileError",
    "VersionError",
    "__version__",
]
