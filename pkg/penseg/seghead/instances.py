"""
    Recovery of instance masks from predicted flows, channel by channel.
"""

from typing import List

import numpy as np
from scipy import ndimage as ndi  # type: ignore

from penseg.annotations import Detection, DetectionSet
from penseg.seghead.config import HeadConfig
from penseg.seghead.unet import SegPrediction
from penseg.utils import EIGHT_CONNECTED


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def follow_flows(
    flow_y: np.ndarray, flow_x: np.ndarray, ys: np.ndarray, xs: np.ndarray, steps: int, step_size: float
) -> np.ndarray:
    """
    Euler integration of pixel positions along a flow field sampled
    bilinearly, positions clipped to the frame. Returns `(2, N)` positions.
    """
    h, w = flow_y.shape
    pos = np.stack([ys, xs]).astype(np.float64)
    for _ in range(steps):
        dy = ndi.map_coordinates(flow_y, pos, order=1, mode="nearest")
        dx = ndi.map_coordinates(flow_x, pos, order=1, mode="nearest")
        pos[0] = np.clip(pos[0] + step_size * dy, 0, h - 1)
        pos[1] = np.clip(pos[1] + step_size * dx, 0, w - 1)
    return pos


def channel_instances(
    prob: np.ndarray,
    flow_y: np.ndarray,
    flow_x: np.ndarray,
    config: HeadConfig,
    channel: int = 0,
) -> List[Detection]:
    """
    Instances of a single channel: foreground pixels are advected along
    the flow, their end positions binned to pixels, and 8-connected groups
    of occupied bins define the instances.
    """
    fg = prob > config.cellprob_threshold
    ys, xs = np.nonzero(fg)
    if len(ys) == 0:
        return []
    pos = follow_flows(flow_y, flow_x, ys, xs, config.flow_steps, config.flow_step_size)
    bins = np.rint(pos).astype(int)
    occupied = np.zeros(fg.shape, dtype=bool)
    occupied[bins[0], bins[1]] = True
    labels, n_labels = ndi.label(occupied, structure=EIGHT_CONNECTED)
    pixel_labels = labels[bins[0], bins[1]]
    order = np.argsort(pixel_labels, kind="stable")
    bounds = np.searchsorted(pixel_labels[order], np.arange(1, n_labels + 2))
    detections = []
    for label in range(n_labels):
        members = order[bounds[label] : bounds[label + 1]]
        if len(members) < max(config.min_instance_size, 1):
            continue
        my, mx = ys[members], xs[members]
        y0, x0 = my.min(), mx.min()
        crop = np.zeros((my.max() - y0 + 1, mx.max() - x0 + 1), dtype=bool)
        crop[my - y0, mx - x0] = True
        detections.append(Detection(crop, (y0, x0), fg.shape, channel))
    return detections


def suppress_cross_channel(detections: DetectionSet, iou_threshold: float = 0.5) -> DetectionSet:
    """
    Drops every detection whose IoU with an already kept detection of
    another channel exceeds the threshold, visiting detections in order.
    """
    kept: List[Detection] = []
    for det in detections:
        if any(
            other.channel != det.channel and det.iou(other) > iou_threshold for other in kept
        ):
            continue
        kept.append(det)
    return DetectionSet(kept, detections.frame)


def flows_to_instances(pred: SegPrediction, config: HeadConfig) -> DetectionSet:
    """
    Detections of all channels, concatenated in channel order. Instances
    smaller than `config.min_instance_size` pixels are discarded; overlap
    between channels is kept unless `config.cross_channel_suppression`.
    """
    if not isinstance(pred, SegPrediction):
        raise TypeError(f"Expected SegPrediction, found {type(pred)}.")
    prob = _sigmoid(pred.cellprob_logits)
    detections: List[Detection] = []
    for c in range(pred.n_out):
        detections.extend(
            channel_instances(prob[c], pred.flow_y[c], pred.flow_x[c], config, channel=c)
        )
    result = DetectionSet(detections, pred.shape)
    if config.cross_channel_suppression:
        result = suppress_cross_channel(result)
    return result
