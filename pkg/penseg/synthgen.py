"""
    Generators of synthetic z-stacks with matching annotations:
    the diagonal disk stack used to check depth embeddings, and randomized
    ellipsoid cell scenes with a controlled fraction of cells that overlap
    laterally while being separated axially.
"""

from dataclasses import dataclass, field, replace
from typing import List, NamedTuple, Optional, Sequence, Tuple

import networkx as nx  # type: ignore
import numpy as np

from penseg.annotations import AnnotationSet, CellAnnotation
from penseg.stacks import ImageStack, VoxelGeometry
from penseg.utils import (
    ConfigurationError,
    SceneCapacityError,
    validate_positive_int,
)

FINE_Z_FACTOR = 10
""" Number of fine axial planes per acquired slice. """

MAX_PLACEMENT_RETRIES = 100
""" Placement attempts per cell before a scene is declared too crowded. """

OVERLAP_TOLERANCE = 0.10
""" Allowed deviation of the achieved overlap fraction from its target. """


@dataclass(frozen=True)
class SceneConfig:
    """
    Parameters of a randomized ellipsoid cell scene.

    The `overlap_fraction_target` is the fraction of cells whose MIP mask
    intersects the mask of another cell with a disjoint z-range.
    """

    depth: int = 9
    height: int = 128
    width: int = 128
    n_cells: int = 12
    diameter_um_range: Tuple[float, float] = (10.0, 16.0)
    intensity_range: Tuple[float, float] = (0.5, 1.0)
    noise_sigma: float = 0.02
    overlap_fraction_target: float = 0.35
    geometry: VoxelGeometry = field(default_factory=VoxelGeometry)
    seed: int = 0

    def __post_init__(self):
        for name in ("depth", "height", "width", "n_cells"):
            validate_positive_int(getattr(self, name), name)
        lo, hi = self.diameter_um_range
        if not 0 < lo <= hi:
            raise ConfigurationError(
                f"Invalid diameter range {self.diameter_um_range}, expected 0 < lo <= hi."
            )
        if self.geometry.lateral_px(lo) < 3:
            raise ConfigurationError(
                f"Diameter {lo} um spans fewer than 3 pixels at {self.geometry.dx_um} um/px."
            )
        ilo, ihi = self.intensity_range
        if not 0 < ilo <= ihi <= 1:
            raise ConfigurationError(
                f"Invalid intensity range {self.intensity_range}, expected 0 < lo <= hi <= 1."
            )
        if self.noise_sigma < 0:
            raise ConfigurationError(f"Expected noise_sigma >= 0, found {self.noise_sigma}.")
        if not 0 <= self.overlap_fraction_target <= 1:
            raise ConfigurationError(
                f"Expected overlap_fraction_target in [0, 1], "
                f"found {self.overlap_fraction_target}."
            )
        if not isinstance(self.seed, (int, np.integer)):
            raise TypeError(f"Expected integer seed, found {self.seed!r}.")


def gen_disk_stack(
    depth: int, diameter_um: float, geometry: Optional[VoxelGeometry] = None
) -> Tuple[ImageStack, AnnotationSet]:
    """
    A stack of `depth` slices, slice `k` holding a single filled disk of the
    given diameter centred on pixel `((k+1)d, (k+1)d)`, so that consecutive
    disks step along the main diagonal by one diameter `d`. A disk holds the
    pixels whose centres lie within `d / 2` of its own.
    """
    if geometry is None:
        geometry = VoxelGeometry()
    if not isinstance(depth, int) or depth < 2:
        raise ConfigurationError(f"Expected at least 2 slices, found {depth!r}.")
    d = geometry.lateral_px(diameter_um)
    if d < 3:
        raise ConfigurationError(
            f"Disk diameter {diameter_um} um spans {d} px, at least 3 px required."
        )
    size = (depth + 1) * d
    voxels = np.zeros((depth, size, size), dtype=np.float32)
    r = d // 2
    offsets = np.arange(-r, r + 1)
    disk = offsets[:, None] ** 2 + offsets[None, :] ** 2 <= (d / 2) ** 2
    cells = []
    for k in range(depth):
        lo = (k + 1) * d - r
        mask = np.zeros((size, size), dtype=bool)
        mask[lo : lo + 2 * r + 1, lo : lo + 2 * r + 1] = disk
        voxels[k][mask] = 1.0
        cells.append(CellAnnotation(k, mask, float(k), (k, k)))
    return ImageStack(voxels, geometry), AnnotationSet(cells, (depth, size, size))


class OverlapStatistics(NamedTuple):
    """
    Lateral-overlap statistics of an annotation set, counting only pairs of
    cells with disjoint z-ranges.
    """

    fraction: float
    n_pairs: int
    mean_pair_iou: float


def overlap_graph(annotations: AnnotationSet) -> nx.Graph:
    """
    Graph on cell ids with an edge for each pair of cells whose masks
    intersect while their z-ranges are disjoint; edges carry the MIP IoU.
    """
    G = nx.Graph()
    G.add_nodes_from(annotations.ids)
    boxes = [_bbox(c.mask) for c in annotations]
    cells = annotations.cells
    for i, a in enumerate(cells):
        for j in range(i + 1, len(cells)):
            b = cells[j]
            if not (a.z_range[1] < b.z_range[0] or b.z_range[1] < a.z_range[0]):
                continue
            if not _boxes_intersect(boxes[i], boxes[j]):
                continue
            inter = np.count_nonzero(a.mask & b.mask)
            if inter == 0:
                continue
            union = np.count_nonzero(a.mask | b.mask)
            G.add_edge(a.id, b.id, iou=inter / union)
    return G


def overlap_statistics(annotations: AnnotationSet) -> OverlapStatistics:
    """
    Fraction of cells that laterally overlap an axially disjoint cell,
    with the number and mean IoU of such pairs.
    """
    if len(annotations) == 0:
        return OverlapStatistics(0.0, 0, 0.0)
    G = overlap_graph(annotations)
    overlapping = sum(1 for n in G.nodes if G.degree[n] > 0)
    ious = [iou for _, _, iou in G.edges(data="iou")]
    return OverlapStatistics(
        overlapping / len(annotations),
        len(ious),
        float(np.mean(ious)) if ious else 0.0,
    )


class _Ellipsoid(NamedTuple):
    occupancy: np.ndarray  # (Z, H, W) bool, acquired slices only
    mask: np.ndarray
    z_range: Tuple[int, int]
    z_centroid: float


def gen_cell_scene(config: SceneConfig) -> Tuple[ImageStack, AnnotationSet]:
    """
    Places `config.n_cells` randomly oriented ellipsoids in a scene sampled
    on a fine axial grid, keeps every `FINE_Z_FACTOR`-th plane as the acquired
    stack and adds clamped Gaussian noise.

    Overlap is produced by pairing: `round(f n / 2)` pairs are placed so that
    the two cells of a pair overlap laterally with disjoint z-ranges, the
    remaining cells overlap nothing. Raises `SceneCapacityError` if a cell
    cannot be placed within `MAX_PLACEMENT_RETRIES` attempts, or if the
    achieved overlap fraction misses the target by more than
    `OVERLAP_TOLERANCE`.
    """
    if not isinstance(config, SceneConfig):
        raise TypeError(f"Expected SceneConfig, found {type(config)}.")
    # pylint: disable = import-outside-toplevel
    from scipy.spatial.transform import Rotation  # type: ignore

    rng = np.random.default_rng(config.seed)
    n = config.n_cells
    n_pairs = min(int(np.floor(config.overlap_fraction_target * n / 2 + 0.5)), n // 2)
    occupied = np.zeros((config.height, config.width), dtype=bool)
    placed: List[_Ellipsoid] = []

    def fail(message: str):
        paired = min(len(placed), 2 * n_pairs)
        raise SceneCapacityError(message, paired / n)

    def draw(center: Optional[Tuple[float, float]], avoid_z: Optional[Tuple[int, int]]):
        axes_um = rng.uniform(*config.diameter_um_range, size=3) / 2
        rotation = Rotation.random(None, rng).as_matrix()
        if center is None:
            cy = rng.uniform(0, config.height)
            cx = rng.uniform(0, config.width)
        else:
            cy, cx = center
        if avoid_z is None:
            fine_z = rng.integers(0, (config.depth - 1) * FINE_Z_FACTOR + 1)
        else:
            allowed = [k for k in range(config.depth) if k < avoid_z[0] or k > avoid_z[1]]
            if not allowed:
                return None
            k = allowed[rng.integers(len(allowed))]
            fine_z = k * FINE_Z_FACTOR + rng.integers(-FINE_Z_FACTOR // 2, FINE_Z_FACTOR // 2 + 1)
            fine_z = int(np.clip(fine_z, 0, (config.depth - 1) * FINE_Z_FACTOR))
        cz_um = fine_z * config.geometry.dz_um / FINE_Z_FACTOR
        return _rasterize_ellipsoid(config, (cz_um, cy, cx), axes_um, rotation)

    for _ in range(n_pairs):
        for _attempt in range(MAX_PLACEMENT_RETRIES):
            base = draw(None, None)
            if base is None or (base.mask & occupied).any():
                continue
            partner = None
            for _attempt2 in range(MAX_PLACEMENT_RETRIES):
                ys, xs = np.nonzero(base.mask)
                pick = rng.integers(len(ys))
                candidate = draw((ys[pick] + 0.5, xs[pick] + 0.5), base.z_range)
                if candidate is None:
                    break
                if not (candidate.mask & base.mask).any():
                    continue
                if (candidate.mask & occupied).any():
                    continue
                if not _z_disjoint(candidate.z_range, base.z_range):
                    continue
                partner = candidate
                break
            if partner is None:
                continue
            placed.extend([base, partner])
            occupied |= base.mask | partner.mask
            break
        else:
            fail("Could not place an overlapping pair of cells")
    for _ in range(n - 2 * n_pairs):
        for _attempt in range(MAX_PLACEMENT_RETRIES):
            cell = draw(None, None)
            if cell is None or (cell.mask & occupied).any():
                continue
            placed.append(cell)
            occupied |= cell.mask
            break
        else:
            fail("Could not place a non-overlapping cell")

    voxels = np.zeros((config.depth, config.height, config.width), dtype=np.float64)
    intensities = rng.uniform(*config.intensity_range, size=n)
    for cell, intensity in zip(placed, intensities):
        np.maximum(voxels, cell.occupancy * intensity, out=voxels)
    if config.noise_sigma > 0:
        voxels += rng.normal(0.0, config.noise_sigma, size=voxels.shape)
        np.clip(voxels, 0.0, None, out=voxels)
    cells = [
        CellAnnotation(idx, cell.mask, cell.z_centroid, cell.z_range)
        for idx, cell in enumerate(placed)
    ]
    annotations = AnnotationSet(cells, (config.depth, config.height, config.width))
    achieved = overlap_statistics(annotations).fraction
    if abs(achieved - config.overlap_fraction_target) > OVERLAP_TOLERANCE:
        raise SceneCapacityError(
            f"Overlap fraction target {config.overlap_fraction_target} not reachable "
            f"with {n} cells",
            achieved,
        )
    return ImageStack(voxels.astype(np.float32), config.geometry), annotations


def _rasterize_ellipsoid(
    config: SceneConfig,
    center: Tuple[float, float, float],
    semi_axes_um: np.ndarray,
    rotation: np.ndarray,
) -> Optional[_Ellipsoid]:
    g = config.geometry
    cz_um, cy, cx = center
    reach_um = float(semi_axes_um.max())
    fine_dz = g.dz_um / FINE_Z_FACTOR
    n_fine = (config.depth - 1) * FINE_Z_FACTOR + 1
    fine_planes = np.arange(n_fine)
    fine_planes = fine_planes[np.abs(fine_planes * fine_dz - cz_um) <= reach_um]
    # acquired slices are the fine planes on the coarse grid
    acquired = fine_planes[fine_planes % FINE_Z_FACTOR == 0]
    if len(acquired) == 0:
        return None
    ry = int(np.ceil(reach_um / g.dy_um)) + 1
    rx = int(np.ceil(reach_um / g.dx_um)) + 1
    y0, y1 = max(int(cy) - ry, 0), min(int(cy) + ry + 1, config.height)
    x0, x1 = max(int(cx) - rx, 0), min(int(cx) + rx + 1, config.width)
    if y0 >= y1 or x0 >= x1:
        return None
    zz, yy, xx = np.meshgrid(
        acquired * fine_dz - cz_um,
        (np.arange(y0, y1) + 0.5 - cy) * g.dy_um,
        (np.arange(x0, x1) + 0.5 - cx) * g.dx_um,
        indexing="ij",
    )
    points = np.stack([zz, yy, xx], axis=-1)
    local = points @ rotation
    inside = np.sum((local / semi_axes_um) ** 2, axis=-1) <= 1.0
    counts = inside.sum(axis=(1, 2))
    if counts.sum() == 0:
        return None
    slices = acquired // FINE_Z_FACTOR
    occupancy = np.zeros((config.depth, config.height, config.width), dtype=bool)
    occupancy[slices[0] : slices[-1] + 1, y0:y1, x0:x1] = inside
    present = slices[counts > 0]
    z_range = (int(present.min()), int(present.max()))
    z_centroid = float(np.sum(slices * counts) / counts.sum())
    return _Ellipsoid(occupancy, occupancy.any(axis=0), z_range, z_centroid)


def _z_disjoint(a: Tuple[int, int], b: Tuple[int, int]) -> bool:
    return a[1] < b[0] or b[1] < a[0]


def _bbox(mask: np.ndarray) -> Tuple[int, int, int, int]:
    ys = np.flatnonzero(mask.any(axis=1))
    xs = np.flatnonzero(mask.any(axis=0))
    return int(ys[0]), int(xs[0]), int(ys[-1]) + 1, int(xs[-1]) + 1


def _boxes_intersect(a: Sequence[int], b: Sequence[int]) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def scene_series(config: SceneConfig, n_stacks: int) -> List[Tuple[ImageStack, AnnotationSet]]:
    """
    `n_stacks` scenes generated from consecutive seeds starting at `config.seed`.
    """
    validate_positive_int(n_stacks, "n_stacks")
    return [gen_cell_scene(replace(config, seed=config.seed + i)) for i in range(n_stacks)]
