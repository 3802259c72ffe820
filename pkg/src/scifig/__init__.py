"""Figure/caption dataset extraction from arXiv sources and PMC OA packages."""

__version__ = "0.1.0"
PIPELINE_VERSION = f"scifig/{__version__}"
