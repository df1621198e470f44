"""
    A Python library to learn 2D projections of sparsely sampled z-stacks
    jointly with a multi-channel flow-based instance segmentation network.
    The learned projection lives in `penseg.pen`, the segmentation head in
    `penseg.seghead`, training and evaluation in `penseg.harness`.
"""

from penseg.stacks import ImageStack, RgbProjection, VoxelGeometry, load_stack, save_stack
from penseg.annotations import (
    AnnotationSet,
    CellAnnotation,
    Detection,
    DetectionSet,
    load_annotations,
    save_annotations,
)
from penseg.utils import normalize_unit
