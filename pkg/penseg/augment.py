"""
    Density augmentation: annotated stacks are cropped around a random
    cell and overlaid with randomly rotated, flipped and axially shifted
    copies of themselves, raising the number of cells per crop.
"""

from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from penseg.annotations import AnnotationSet, CellAnnotation
from penseg.seghead import (
    ChannelAssignment,
    HeadConfig,
    SegTargets,
    assignment_for,
    make_targets,
)
from penseg.stacks import ImageStack
from penseg.utils import (
    AnnotationError,
    ConfigurationError,
    SeedLike,
    apply_transform2d,
    as_generator,
    random_transform2d,
)


@dataclass(frozen=True)
class AugmentConfig:
    """
    Density augmentation parameters. `max_axial_shift=None` means
    `z_in - depth` of the stack being augmented, so that no slice is lost.
    """

    crop_hw: int = 256
    z_in: int = 27
    n_copies: int = 2
    max_axial_shift: Optional[int] = None
    seed: int = 0
    max_crop_retries: int = 10

    def __post_init__(self):
        for name in ("crop_hw", "z_in", "max_crop_retries"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigurationError(f"Expected positive integer {name}, found {value!r}.")
        if not isinstance(self.n_copies, int) or self.n_copies < 0:
            raise ConfigurationError(f"Expected n_copies >= 0, found {self.n_copies!r}.")
        if self.max_axial_shift is not None and not 0 <= self.max_axial_shift < self.z_in:
            raise ConfigurationError(
                f"Expected 0 <= max_axial_shift < z_in, found {self.max_axial_shift}."
            )

    def axial_shift_for(self, depth: int) -> int:
        if depth > self.z_in:
            raise ConfigurationError(f"Stack depth {depth} exceeds z_in = {self.z_in}.")
        if self.max_axial_shift is None:
            return self.z_in - depth
        if depth + self.max_axial_shift > self.z_in:
            raise ConfigurationError(
                f"Depth {depth} plus max axial shift {self.max_axial_shift} "
                f"exceeds z_in = {self.z_in}."
            )
        return self.max_axial_shift


def subtract_mean(stack: ImageStack) -> np.ndarray:
    """
    Voxels minus their mean, as `float32`.
    """
    voxels = stack.voxels.astype(np.float32)
    return voxels - np.float32(voxels.mean(dtype=np.float64))


def _crop_around(
    voxels: np.ndarray, annotations: AnnotationSet, center: Tuple[int, int], size: int
) -> Tuple[np.ndarray, List[Tuple[np.ndarray, CellAnnotation]]]:
    _, h, w = voxels.shape
    y0 = center[0] - size // 2
    x0 = center[1] - size // 2
    sy0, sx0 = max(y0, 0), max(x0, 0)
    sy1, sx1 = min(y0 + size, h), min(x0 + size, w)
    crop = np.zeros((voxels.shape[0], size, size), dtype=voxels.dtype)
    crop[:, sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = voxels[:, sy0:sy1, sx0:sx1]
    cells = []
    for cell in annotations:
        mask = np.zeros((size, size), dtype=bool)
        mask[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = cell.mask[sy0:sy1, sx0:sx1]
        if mask.any():
            cells.append((mask, cell))
    return crop, cells


def densify(
    stack: ImageStack,
    annotations: AnnotationSet,
    config: AugmentConfig,
    rng: SeedLike = None,
) -> Tuple[ImageStack, AnnotationSet]:
    """
    One density-augmented sample:

    1. subtract the stack mean;
    2. crop `crop_hw x crop_hw` around the centroid of a random cell,
       zero-padding beyond the border;
    3. for each copy, rotate/flip a copy of the crop, shift it by a random
       `t` slices deeper (front padding) and combine with the accumulated
       stack by voxelwise max, end-padding to a common depth;
    4. centre-pad along z to `z_in`;
    5. apply a final random rotate/flip to image and masks jointly.

    Output cells are renumbered `0..N-1`: the cropped originals first,
    then each copy. Uses `config.seed` unless a generator is given.
    """
    if len(annotations) == 0:
        raise AnnotationError("Cannot densify a stack without annotated cells.")
    rng = as_generator(config.seed if rng is None else rng)
    max_shift = config.axial_shift_for(stack.depth)
    voxels = subtract_mean(stack)
    size = config.crop_hw
    for _ in range(config.max_crop_retries):
        anchor = annotations[int(rng.integers(len(annotations)))]
        cy, cx = anchor.centroid_yx
        base, base_cells = _crop_around(
            voxels, annotations, (int(round(cy)), int(round(cx))), size
        )
        if base_cells:
            break
    else:
        raise AnnotationError(
            f"No crop with annotated cells found in {config.max_crop_retries} attempts."
        )
    acc = base
    # (mask, z_centroid, z_range) per output cell
    out_cells: List[Tuple[np.ndarray, float, Tuple[int, int]]] = [
        (mask, cell.z_centroid, cell.z_range) for mask, cell in base_cells
    ]
    for _ in range(config.n_copies):
        transform = random_transform2d(rng)
        shift = int(rng.integers(0, max_shift + 1))
        copy = apply_transform2d(base, transform)
        depth = max(acc.shape[0], base.shape[0] + shift)
        copy = np.pad(copy, ((shift, depth - base.shape[0] - shift), (0, 0), (0, 0)))
        acc = np.pad(acc, ((0, depth - acc.shape[0]), (0, 0), (0, 0)))
        acc = np.maximum(acc, copy)
        for mask, cell in base_cells:
            out_cells.append(
                (
                    apply_transform2d(mask, transform),
                    cell.z_centroid + shift,
                    (cell.z_range[0] + shift, cell.z_range[1] + shift),
                )
            )
    front = (config.z_in - acc.shape[0]) // 2
    acc = np.pad(acc, ((front, config.z_in - acc.shape[0] - front), (0, 0), (0, 0)))
    final = random_transform2d(rng)
    acc = apply_transform2d(acc, final)
    cells = [
        CellAnnotation(
            idx,
            apply_transform2d(mask, final),
            z_centroid + front,
            (z_range[0] + front, z_range[1] + front),
        )
        for idx, (mask, z_centroid, z_range) in enumerate(out_cells)
    ]
    return (
        ImageStack(acc, stack.geometry),
        AnnotationSet(cells, (config.z_in, size, size)),
    )


class TrainingSample(NamedTuple):
    """
    One augmented training example with its supervision.
    """

    stack: ImageStack
    annotations: AnnotationSet
    assignment: ChannelAssignment
    targets: SegTargets


def batch_sample(
    dataset: Sequence[Tuple[ImageStack, AnnotationSet]],
    config: AugmentConfig,
    head_config: HeadConfig,
    rng: np.random.Generator,
) -> TrainingSample:
    """
    Draws a dataset item, densifies it, assigns channels from the
    post-augmentation axial positions and builds the targets.
    """
    if not dataset:
        raise ValueError("Cannot sample from an empty dataset.")
    stack, annotations = dataset[int(rng.integers(len(dataset)))]
    aug_stack, aug_annotations = densify(stack, annotations, config, rng)
    assignment = assignment_for(aug_annotations, head_config, rng)
    targets = make_targets(aug_annotations, assignment, head_config)
    return TrainingSample(aug_stack, aug_annotations, assignment, targets)
