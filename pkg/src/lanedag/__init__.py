"""Lane-boundary DAG extraction from bird's-eye-view intensity rasters."""

__version__ = "0.1.0"
