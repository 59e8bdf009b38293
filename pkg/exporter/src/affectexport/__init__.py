"""Bridge from image folders to the affecthead dataset format."""

from .aucsv import ConversionError, ConversionReport, convert_au_csv
from .export import ExportError, ExportJob, ExportReport, export_features

__version__ = "0.1.0"
