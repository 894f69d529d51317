"""Detection dataset toolkit: annotation I/O, augmentation with box
propagation, structure-preserving color variation, holdout-patient splits
and mAP evaluation."""

from .augment import AugPolicy, default_policy
from .imagery import RasterImage, read_image, write_image
from .labels import Detection, LabeledFrame, Modality, NormBox
from .metrics import EvalReport, evaluate, iou

__version__ = "0.1.0"

__all__ = [
    "AugPolicy",
    "Detection",
    "EvalReport",
    "LabeledFrame",
    "Modality",
    "NormBox",
    "RasterImage",
    "default_policy",
    "evaluate",
    "iou",
    "read_image",
    "write_image",
]
