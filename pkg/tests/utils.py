import itertools
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from penseg.annotations import AnnotationSet, CellAnnotation
from penseg.augment import AugmentConfig
from penseg.harness.config import TrainConfig
from penseg.pen import PenConfig
from penseg.seghead import HeadConfig
from penseg.stacks import ImageStack, VoxelGeometry
from penseg.synthgen import SceneConfig, gen_cell_scene

COARSE_GEOMETRY = VoxelGeometry(2.0, 2.0, 10.0)
""" Large lateral pixels, so that synthetic cells span few pixels. """


def disk_mask(height: int, width: int, cy: float, cx: float, radius: float) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    return (ys - cy) ** 2 + (xs - cx) ** 2 <= radius**2


def square_mask(height: int, width: int, y0: int, x0: int, size: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=bool)
    mask[y0 : y0 + size, x0 : x0 + size] = True
    return mask


def convex_polygon_oracle(vertices: np.ndarray, height: int, width: int) -> np.ndarray:
    """
    Pixel-by-pixel half-plane test for a counter-clockwise convex polygon:
    a pixel centre is covered if it lies on the inner side of every edge
    or on an edge.
    """
    mask = np.zeros((height, width), dtype=bool)
    n = len(vertices)
    for y in range(height):
        for x in range(width):
            inside = True
            for i in range(n):
                x0, y0 = vertices[i]
                x1, y1 = vertices[(i + 1) % n]
                if (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) < 0:
                    inside = False
                    break
            mask[y, x] = inside
    return mask


def random_convex_polygon(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """
    Counter-clockwise hull of up to 12 random integer points.
    """
    # pylint: disable = import-outside-toplevel
    from scipy.spatial import ConvexHull  # type: ignore

    while True:
        n_points = int(rng.integers(3, 13))
        points = np.stack(
            [rng.integers(0, width, n_points), rng.integers(0, height, n_points)], axis=1
        ).astype(float)
        # collinear points have no hull
        if np.linalg.matrix_rank(points - points.mean(axis=0)) < 2:
            continue
        return points[ConvexHull(points).vertices]


def lloyd_oracle(zs: Sequence[float], n_out: int, z_max: float) -> List[int]:
    """
    Plain-Python channel assignment: sorted order when there are no more
    cells than channels, otherwise Lloyd's iterations from evenly spaced
    centres and channels numbered by ascending centre.
    """
    zs = [float(z) for z in zs]
    if len(zs) <= n_out:
        order = sorted(range(len(zs)), key=lambda i: zs[i])
        channels = [0] * len(zs)
        for rank, i in enumerate(order):
            channels[i] = rank
        return channels
    if n_out == 1:
        centers = [0.0]
    else:
        centers = [z_max * c / (n_out - 1) for c in range(n_out)]
    labels: Optional[List[int]] = None
    for _ in range(300):
        new_labels = []
        for z in zs:
            best = 0
            for c in range(1, n_out):
                if abs(z - centers[c]) < abs(z - centers[best]):
                    best = c
            new_labels.append(best)
        if new_labels == labels:
            break
        labels = new_labels
        for c in range(n_out):
            members = [z for z, l in zip(zs, labels) if l == c]
            if members:
                centers[c] = float(np.mean(members))
    assert labels is not None
    ranking = sorted(range(n_out), key=lambda c: centers[c])
    rank = {c: r for r, c in enumerate(ranking)}
    return [rank[l] for l in labels]


def brute_force_outcomes(
    ious: np.ndarray, threshold: float
) -> Tuple[float, Set[Tuple[int, int, int, float]]]:
    """
    Maximum total IoU over all injections of the smaller side into the
    larger, and the `(tp, fp, fn, sum of tp IoUs)` outcomes of every
    optimal injection after demoting sub-threshold pairs.
    """
    n_gt, n_pred = ious.shape
    candidates: List[Tuple[float, List[Tuple[int, int]]]] = []
    if n_gt <= n_pred:
        for perm in itertools.permutations(range(n_pred), n_gt):
            pairs = list(zip(range(n_gt), perm))
            candidates.append((sum(ious[i, j] for i, j in pairs), pairs))
    else:
        for perm in itertools.permutations(range(n_gt), n_pred):
            pairs = list(zip(perm, range(n_pred)))
            candidates.append((sum(ious[i, j] for i, j in pairs), pairs))
    best = max(total for total, _ in candidates)
    outcomes = set()
    for total, pairs in candidates:
        if total < best - 1e-9:
            continue
        kept = [(i, j) for i, j in pairs if ious[i, j] >= threshold]
        tp = len(kept)
        outcomes.add((tp, n_pred - tp, n_gt - tp, round(sum(ious[i, j] for i, j in kept), 9)))
    return best, outcomes


def pen_direct_sum(voxels: np.ndarray) -> np.ndarray:
    """
    Output of a single `K = 1` PEN branch with unit-fan-in weights, zero
    biases and no batch norm, computed by explicit loops and then
    min-max normalized jointly over the three channels.
    """
    depth, height, width = voxels.shape
    channels = 3
    out = np.zeros((channels, height, width))
    for o in range(channels):
        for y in range(height):
            for x in range(width):
                # axial pool: fan-in channels * depth
                pooled = [0.0] * channels
                for p in range(channels):
                    acc = 0.0
                    for c in range(channels):
                        for z in range(depth):
                            acc += max(voxels[z, y, x], 0.0) / (channels * depth)
                    pooled[p] = acc
                # collect: fan-in channels * 1 branch
                collected = sum(pooled) / channels
                out[o, y, x] = max(collected, 0.0)
    lo, hi = out.min(), out.max()
    if hi <= lo:
        return np.zeros_like(out)
    return (out - lo) / (hi - lo)


def tiny_train_config(**overrides) -> TrainConfig:
    """
    A training config small enough for unit tests on CPU.
    """
    params: Dict = dict(
        input_mode="pen",
        batch_size=2,
        epochs=2,
        iters_per_epoch=2,
        val_size=2,
        seed=0,
        pen=PenConfig(kernel_sizes=(1, 3), z_in=9),
        head=HeadConfig(unet_levels=2, unet_base_width=4, flow_steps=20),
        augment=AugmentConfig(crop_hw=32, z_in=9, n_copies=1),
    )
    params.update(overrides)
    return TrainConfig(**params)


def tiny_scene_config(seed: int = 0, **overrides) -> SceneConfig:
    params: Dict = dict(
        depth=4,
        height=40,
        width=40,
        n_cells=3,
        diameter_um_range=(10.0, 14.0),
        overlap_fraction_target=0.0,
        geometry=COARSE_GEOMETRY,
        seed=seed,
    )
    params.update(overrides)
    return SceneConfig(**params)


def tiny_dataset(n_stacks: int = 2, seed: int = 0) -> List[Tuple[ImageStack, AnnotationSet]]:
    return [gen_cell_scene(tiny_scene_config(seed + i)) for i in range(n_stacks)]


def centered_squares_stack(
    depth: int = 5, size: int = 32, n_cells: int = 4
) -> Tuple[ImageStack, AnnotationSet]:
    """
    Cells `k = 0..n_cells-1` as bright squares in slice `k`, all centred
    on the middle pixel of the frame.
    """
    voxels = np.zeros((depth, size, size), dtype=np.float32)
    center = size // 2
    cells = []
    for k in range(n_cells):
        half = 2 + 2 * k
        mask = np.zeros((size, size), dtype=bool)
        mask[center - half : center + half + 1, center - half : center + half + 1] = True
        voxels[k][mask] = 1.0
        cells.append(CellAnnotation(k, mask, float(k), (k, k)))
    return ImageStack(voxels), AnnotationSet(cells, (depth, size, size))
