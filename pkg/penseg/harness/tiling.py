"""
    Sliding-window inference on stacks larger than a training crop.
"""

from typing import List, Optional, Sequence, Tuple

import networkx as nx  # type: ignore
import numpy as np

from penseg.annotations import Detection, DetectionSet
from penseg.harness.evaluation import predict_prepared, prepare_input
from penseg.harness.training import TrainedModel
from penseg.stacks import ImageStack
from penseg.utils import ConfigurationError

DUPLICATE_IOU = 0.5


def tile_starts(size: int, tile: int, overlap: int) -> List[int]:
    """
    Start offsets of windows of length `tile` covering `[0, size)` with
    stride `tile - overlap`; the last window is aligned with the end.
    """
    if size <= tile:
        return [0]
    stride = tile - overlap
    starts = list(range(0, size - tile + 1, stride))
    if starts[-1] + tile < size:
        starts.append(size - tile)
    return starts


def tile_cores(size: int, tile: int, overlap: int) -> List[Tuple[int, int, float, float]]:
    """
    For each window along one axis: `(start, stop, core_lo, core_hi)`. The
    cores partition the axis, each boundary lying midway through the
    overlap of two neighbouring windows.
    """
    starts = tile_starts(size, tile, overlap)
    stops = [min(s + tile, size) for s in starts]
    bounds = [0.0]
    for i in range(len(starts) - 1):
        bounds.append((starts[i + 1] + stops[i]) / 2)
    bounds.append(float(size))
    return [(starts[i], stops[i], bounds[i], bounds[i + 1]) for i in range(len(starts))]


def merge_duplicates(
    detections: List[Detection], frame: Tuple[int, int], tiles: Optional[Sequence[int]] = None
) -> DetectionSet:
    """
    Unites detections connected by IoU above `DUPLICATE_IOU`, whatever their
    channel. With `tiles` (the source tile of each detection) only pairs from
    different tiles are united, so channel duplicates within one prediction
    survive. A united detection takes the channel of its largest member.
    """
    if tiles is None:
        tiles = range(len(detections))
    if len(tiles) != len(detections):
        raise ValueError(f"Expected {len(detections)} tile indices, found {len(tiles)}.")
    G = nx.Graph()
    G.add_nodes_from(range(len(detections)))
    for i, a in enumerate(detections):
        for j in range(i + 1, len(detections)):
            b = detections[j]
            if tiles[i] != tiles[j] and a.iou(b) > DUPLICATE_IOU:
                G.add_edge(i, j)
    merged = []
    for component in nx.connected_components(G):
        members = sorted(component)
        if len(members) == 1:
            merged.append(detections[members[0]])
            continue
        mask = np.zeros(frame, dtype=bool)
        for idx in members:
            y0, x0, y1, x1 = detections[idx].bbox
            mask[y0:y1, x0:x1] |= detections[idx].crop
        largest = max(members, key=lambda idx: (detections[idx].area, -idx))
        merged.append(Detection.from_mask(mask, detections[largest].channel))
    merged.sort(key=lambda d: (d.channel, d.bbox))
    return DetectionSet(merged, frame)


def infer_large(
    model: TrainedModel, stack: ImageStack, tile: int = 512, overlap: int = 64
) -> DetectionSet:
    """
    Detections on a large stack by lateral tiling. Each tile is predicted
    on its own; a detection is kept only by the tile whose core contains
    its centroid, and remaining duplicates between tiles are merged. Coordinates are in
    the frame of the whole stack.
    """
    if not isinstance(tile, int) or not isinstance(overlap, int):
        raise ConfigurationError("Tile size and overlap must be integers.")
    if overlap < 0 or tile <= 2 * overlap:
        raise ConfigurationError(
            f"Invalid tiling: need tile > 2 * overlap >= 0, found tile={tile}, overlap={overlap}."
        )
    prepared = prepare_input(stack, model.config.pen.z_in)
    frame = (stack.height, stack.width)
    kept: List[Detection] = []
    sources: List[int] = []
    x_cores = tile_cores(stack.width, tile, overlap)
    for iy, (y0, y1, cy_lo, cy_hi) in enumerate(tile_cores(stack.height, tile, overlap)):
        for ix, (x0, x1, cx_lo, cx_hi) in enumerate(x_cores):
            window = ImageStack(prepared.voxels[:, y0:y1, x0:x1], stack.geometry)
            for det in predict_prepared(model, window):
                cy, cx = det.centroid_yx
                if cy_lo <= cy + y0 < cy_hi and cx_lo <= cx + x0 < cx_hi:
                    kept.append(det.shifted(y0, x0, frame))
                    sources.append(iy * len(x_cores) + ix)
    return merge_duplicates(kept, frame, sources)
