"""Per-block vision-transformer feature export to FMAP1 containers."""

from .clipvit import ExporterError, load_model, preprocess, tap_features
from .export import ExportManifest, export_image, validate_blocks, write_fmap

__version__ = "0.1.0"

__all__ = [
    "ExportManifest",
    "ExporterError",
    "export_image",
    "load_model",
    "preprocess",
    "tap_features",
    "validate_blocks",
    "write_fmap",
]
