"""Dynamic feature-interaction kernels for two-branched multi-task perception."""

__version__ = "0.1.0"
