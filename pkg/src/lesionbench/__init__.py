"""Lesion segmentation evaluation and cascade-pipeline toolkit."""

from lesionbench.errors import LesionBenchError

__version__ = "0.1.0"

__all__ = ["LesionBenchError", "__version__"]
