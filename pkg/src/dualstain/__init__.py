"""Desk-scale toolkit for dual-stain cell detection research.

Modules: ``tensorcore`` (reverse-mode autodiff), ``neuralblocks`` (shifted
window attention, GAM, weighted fusion, SPP), ``boxgeom`` (IoU family, NMS),
``evalkit`` (AP/mAP, fold statistics), ``datasetkit`` (annotation I/O,
splits, augmentation), ``synthgen`` (synthetic slides), ``qclinter``
(annotation lint rules), ``toydetector`` and ``cli``.
"""
from .boxgeom import BBox, eiou_loss, iou, nms
from .datasetkit import Sample
from .evalkit import EvalReport, aggregate_folds, average_precision, map_range
from .tensorcore import Param, Tensor

__all__ = ["BBox", "EvalReport", "Param", "Sample", "Tensor", "aggregate_folds",
           "average_precision", "eiou_loss", "iou", "map_range", "nms"]
__version__ = "0.1.0"
