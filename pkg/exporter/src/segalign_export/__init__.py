"""Exports frozen pretrained-model embeddings into the segalign archive format."""

from .export import ExportError, ExportJob, run_export

__version__ = "0.1.0"

__all__ = ["ExportJob", "ExportError", "run_export", "__version__"]
