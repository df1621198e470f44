"""
    Inference on whole stacks and pooled evaluation over datasets.
"""

from typing import Iterable, List, Sequence, Tuple

import numpy as np

from penseg.annotations import AnnotationSet, DetectionSet
from penseg.augment import subtract_mean
from penseg.harness.training import TrainedModel
from penseg.metrics import (
    DEFAULT_IOU_THRESHOLD,
    Eligibility,
    MatchResult,
    MetricsReport,
    iou_matrix,
    match_detections,
    pooled_metrics,
)
from penseg.seghead import SegPrediction, flows_to_instances, head_forward
from penseg.stacks import ImageStack, RgbProjection
from penseg.utils import ConfigurationError


def prepare_input(stack: ImageStack, z_in: int) -> ImageStack:
    """
    Mean-subtracted stack, centre-padded along z to `z_in` slices, as seen
    by the model during training.
    """
    if stack.depth > z_in:
        raise ConfigurationError(f"Stack depth {stack.depth} exceeds model input depth {z_in}.")
    return ImageStack(subtract_mean(stack), stack.geometry).center_padded(z_in)


def project_stack(model: TrainedModel, stack: ImageStack) -> RgbProjection:
    """
    The model's projection of a raw stack, in eval mode.
    """
    model.eval()
    return model.project(prepare_input(stack, model.config.pen.z_in))


def predict(model: TrainedModel, stack: ImageStack) -> DetectionSet:
    """
    Detections on a raw stack: projection, head forward pass on the image
    zero-padded laterally to the U-Net stride, and flow following on the
    maps cropped back to the stack's frame.
    """
    return predict_prepared(model, prepare_input(stack, model.config.pen.z_in))


def predict_prepared(model: TrainedModel, stack: ImageStack) -> DetectionSet:
    """
    As `predict`, for a stack already passed through `prepare_input`.
    """
    model.eval()
    image = model.project(stack)
    stride = model.config.head.stride
    h, w = image.height, image.width
    ph, pw = -h % stride, -w % stride
    padded = RgbProjection(np.pad(image.pixels, ((0, 0), (0, ph), (0, pw))))
    pred = head_forward(model.head, padded)
    cropped = SegPrediction(pred.as_maps()[:, :h, :w])
    return flows_to_instances(cropped, model.config.head)


def evaluate_detections(
    pairs: Iterable[Tuple[AnnotationSet, DetectionSet]],
    threshold: float = DEFAULT_IOU_THRESHOLD,
    eligibility: Eligibility = "assign_then_demote",
) -> MetricsReport:
    """
    Pooled metrics of given detections against ground truth, image by image.
    """
    matches: List[MatchResult] = [
        match_detections(iou_matrix(gt, pred), threshold, eligibility) for gt, pred in pairs
    ]
    if not matches:
        raise ValueError("Cannot evaluate an empty dataset.")
    return pooled_metrics(matches)


def evaluate(
    model: TrainedModel,
    dataset: Sequence[Tuple[ImageStack, AnnotationSet]],
    threshold: float = DEFAULT_IOU_THRESHOLD,
    eligibility: Eligibility = "assign_then_demote",
) -> MetricsReport:
    """
    Runs `predict` on every stack and pools TP/FP/FN over the dataset.
    """
    if not dataset:
        raise ValueError("Cannot evaluate an empty dataset.")
    return evaluate_detections(
        ((annotations, predict(model, stack)) for stack, annotations in dataset),
        threshold,
        eligibility,
    )
