"""
    Utility classes and functions for the `penseg` library.
"""

import io
import zipfile
from typing import Dict, Final, List, Mapping, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt


class StackFormatError(ValueError):
    """
    Raised when an image file cannot be read as a single-channel z-stack.
    """


class AnnotationError(ValueError):
    """
    Raised when an annotation document or mask violates the annotation schema.
    """


class ConfigurationError(ValueError):
    """
    Raised when a configuration is inconsistent with the data it is applied to.
    """


class SceneCapacityError(RuntimeError):
    """
    Raised when a synthetic scene cannot be placed under its constraints.
    """

    achieved_fraction: float

    def __init__(self, message: str, achieved_fraction: float):
        super().__init__(f"{message} (achieved overlap fraction {achieved_fraction:.3f})")
        self.achieved_fraction = achieved_fraction


class TrainingDivergedError(RuntimeError):
    """
    Raised when the training loss becomes non-finite.
    """

    iteration: int

    def __init__(self, iteration: int):
        super().__init__(f"Non-finite loss at iteration {iteration}.")
        self.iteration = iteration


def normalize_unit(image: npt.ArrayLike) -> np.ndarray:
    """
    Rescales an image to `[0, 1]` with a single min-max over all of its values
    (all channels jointly). A constant image maps to all zeros.
    """
    arr = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("Expected finite values.")
    if arr.size == 0:
        return arr.copy()
    lo = arr.min()
    hi = arr.max()
    if hi <= lo:
        return np.zeros_like(arr)
    return np.clip((arr - lo) / (hi - lo), 0.0, 1.0)


def rasterize_polygon(
    vertices: npt.ArrayLike, height: int, width: int
) -> np.ndarray:
    """
    Rasterizes a polygon given as `(x, y)` vertices in pixel coordinates.

    Pixel centers sit at integer coordinates; a pixel is inside if its center
    is inside the polygon under the even-odd rule, or lies on its boundary.
    """
    verts = np.asarray(vertices, dtype=np.float64)
    if verts.ndim != 2 or verts.shape[1] != 2:
        raise TypeError(f"Expected an (N, 2) array of vertices, found {verts.shape}.")
    ys, xs = np.mgrid[0:height, 0:width]
    px = xs.ravel().astype(np.float64)
    py = ys.ravel().astype(np.float64)
    inside = np.zeros(px.shape, dtype=bool)
    on_edge = np.zeros(px.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        x0, y0 = verts[i]
        x1, y1 = verts[(i + 1) % n]
        # even-odd crossing test on a half-open edge
        crosses = (y0 > py) != (y1 > py)
        if np.any(crosses):
            x_at = x0 + (py[crosses] - y0) * (x1 - x0) / (y1 - y0)
            hit = np.zeros_like(crosses)
            hit[crosses] = px[crosses] < x_at
            inside ^= hit
        cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
        within = (
            (np.minimum(x0, x1) - 1e-9 <= px)
            & (px <= np.maximum(x0, x1) + 1e-9)
            & (np.minimum(y0, y1) - 1e-9 <= py)
            & (py <= np.maximum(y0, y1) + 1e-9)
        )
        on_edge |= within & (np.abs(cross) <= 1e-9)
    return (inside | on_edge).reshape(height, width)


def mask_boundary_vertices(mask: npt.ArrayLike) -> np.ndarray:
    """
    Traces the outer boundary of the largest component of a boolean mask.

    Returns a closed `(N, 2)` array of `(x, y)` vertices (first vertex repeated
    last), lying on the 0.5 iso-contour of the mask, rounded to half pixels
    and clipped to the image.
    """
    try:
        # pylint: disable = import-outside-toplevel
        from skimage.measure import find_contours  # type: ignore
    except ModuleNotFoundError as e:
        raise ModuleNotFoundError("You must install the 'scikit-image' library.") from e
    arr = np.asarray(mask, dtype=bool)
    if not arr.any():
        raise AnnotationError("Cannot trace the boundary of an empty mask.")
    h, w = arr.shape
    padded = np.pad(arr.astype(np.float64), 1)
    contours = find_contours(padded, 0.5)
    contour = max(contours, key=_contour_area)
    rows = np.clip(contour[:, 0] - 1.0, 0.0, h - 1.0)
    cols = np.clip(contour[:, 1] - 1.0, 0.0, w - 1.0)
    verts = np.round(np.stack([cols, rows], axis=1) * 2.0) / 2.0
    # drop consecutive duplicates introduced by clipping
    keep = np.ones(len(verts), dtype=bool)
    keep[1:] = np.any(verts[1:] != verts[:-1], axis=1)
    verts = verts[keep]
    if np.any(verts[0] != verts[-1]):
        verts = np.concatenate([verts, verts[:1]], axis=0)
    return verts


def mask_component_vertices(mask: npt.ArrayLike) -> List[np.ndarray]:
    """
    Traces one boundary polygon per 4-connected component of a boolean mask,
    largest component first (ties broken by first pixel in raster order).
    Each polygon is in the format of `mask_boundary_vertices`.
    """
    from scipy import ndimage as ndi  # pylint: disable = import-outside-toplevel

    arr = np.asarray(mask, dtype=bool)
    if not arr.any():
        raise AnnotationError("Cannot trace the boundary of an empty mask.")
    labels, n = ndi.label(arr)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    order = sorted(range(n), key=lambda i: -int(sizes[i]))
    return [mask_boundary_vertices(labels == i + 1) for i in order]


def _contour_area(contour: np.ndarray) -> float:
    y = contour[:, 0]
    x = contour[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, 1)) - np.dot(y, np.roll(x, 1))))


def mask_edges(mask: npt.ArrayLike) -> np.ndarray:
    """
    In-mask pixels with at least one out-of-mask 4-neighbour
    (pixels beyond the image border count as out-of-mask).
    """
    from scipy import ndimage as ndi  # pylint: disable = import-outside-toplevel

    arr = np.asarray(mask, dtype=bool)
    eroded = ndi.binary_erosion(arr, structure=FOUR_CONNECTED, border_value=0)
    return arr & ~eroded


FOUR_CONNECTED: Final[np.ndarray] = np.array(
    [[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool
)
""" Structuring element for 4-connectivity. """

EIGHT_CONNECTED: Final[np.ndarray] = np.ones((3, 3), dtype=bool)
""" Structuring element for 8-connectivity. """


def mask_iou(a: npt.ArrayLike, b: npt.ArrayLike) -> float:
    """
    Intersection over union of two boolean masks of equal shape.
    """
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"Mask shapes differ: {a.shape} vs {b.shape}.")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


Transform2D = Tuple[int, bool]
"""
    A lateral dihedral transform: number of 90 degree rotations and whether
    to flip left-right afterwards.
"""


def apply_transform2d(array: np.ndarray, transform: Transform2D) -> np.ndarray:
    """
    Applies a lateral dihedral transform to the last two axes of an array.
    """
    k, flip = transform
    out = np.rot90(array, k=k, axes=(-2, -1))
    if flip:
        out = np.flip(out, axis=-1)
    return np.ascontiguousarray(out)


def random_transform2d(rng: np.random.Generator) -> Transform2D:
    """
    Draws a uniformly random lateral dihedral transform.
    """
    return int(rng.integers(4)), bool(rng.integers(2))


_ZIP_EPOCH: Final[Tuple[int, int, int, int, int, int]] = (1980, 1, 1, 0, 0, 0)


def save_arrays(path: str, arrays: Mapping[str, npt.ArrayLike]) -> None:
    """
    Saves named arrays into a flat `.npz`-compatible container.

    Keys are written in sorted order with fixed timestamps, so that saving the
    same arrays twice produces byte-identical files. Each entry carries the
    standard `.npy` header with dtype and shape.
    """
    with zipfile.ZipFile(path, mode="w", compression=zipfile.ZIP_STORED) as zf:
        for key in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(
                buf, np.ascontiguousarray(arrays[key]), allow_pickle=False
            )
            info = zipfile.ZipInfo(f"{key}.npy", date_time=_ZIP_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())


def load_arrays(path: str) -> Dict[str, np.ndarray]:
    """
    Loads the named arrays written by `save_arrays`.
    """
    with np.load(path, allow_pickle=False) as data:
        return {key: data[key] for key in data.files}


SeedLike = Union[None, int, np.random.Generator]


def as_generator(seed: SeedLike) -> np.random.Generator:
    """
    Returns a numpy generator for an integer seed, a generator, or `None`.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is not None and not isinstance(seed, (int, np.integer)):
        raise TypeError("RNG seed must be integer, Generator or None.")
    return np.random.default_rng(seed=seed)


def validate_positive_int(value: int, name: str) -> None:
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value <= 0:
        raise TypeError(f"Expected positive integer for {name}, found {value!r}.")


def validate_choice(value: str, choices: Sequence[str], name: str) -> None:
    if value not in choices:
        raise ConfigurationError(
            f"Invalid {name} {value!r}, allowed values are: {list(choices)}"
        )
