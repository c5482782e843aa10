"""Mixed-supervision segmentation: weak-label synthesis, per-kind losses,
a toy pyramid network and a training/evaluation harness."""

__version__ = "0.1.0"

from .annotations import BoxLabel, PointLabel, ScribbleLabel  # noqa: E402
from .losses import KINDS, LossBreakdown, PredictionMap  # noqa: E402
from .model import ModelConfig, PyramidSegNet  # noqa: E402

__all__ = ["BoxLabel", "KINDS", "LossBreakdown", "ModelConfig", "PointLabel", "PredictionMap",
           "PyramidSegNet", "ScribbleLabel", "__version__"]
