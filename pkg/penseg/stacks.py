"""
    Containers for z-stacks and 2D RGB projections, with OME-TIFF input/output.
"""

import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
import numpy.typing as npt

from penseg.utils import StackFormatError, normalize_unit


@dataclass(frozen=True)
class VoxelGeometry:
    """
    Physical voxel pitch of a stack, in micrometres.
    Defaults to the confocal setup of the training data:
    0.538 µm lateral pixels and a 10 µm axial step.
    """

    dx_um: float = 0.538
    dy_um: float = 0.538
    dz_um: float = 10.0

    def __post_init__(self):
        for name in ("dx_um", "dy_um", "dz_um"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise TypeError(f"Expected a real number for {name}, found {value!r}.")
            if not np.isfinite(value) or value <= 0:
                raise ValueError(f"Expected {name} > 0, found {value}.")

    def lateral_px(self, length_um: float) -> int:
        """
        Number of lateral pixels spanned by the given length (rounded).
        """
        return int(round(length_um / self.dx_um))


class ImageStack:
    """
    A grayscale Z x H x W voxel grid with its voxel geometry.

    Voxels are stored as a read-only floating-point array; integer input is
    converted to `float32`, floating input keeps its precision.
    """

    _voxels: np.ndarray
    _geometry: VoxelGeometry

    def __init__(
        self, voxels: npt.ArrayLike, geometry: Optional[VoxelGeometry] = None
    ):
        arr = np.asarray(voxels)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        if arr.ndim == 2:
            arr = arr[np.newaxis]
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"Expected a non-empty Z x H x W array, found {arr.shape}.")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Stack voxels must be finite.")
        if geometry is None:
            geometry = VoxelGeometry()
        if not isinstance(geometry, VoxelGeometry):
            raise TypeError(f"Expected VoxelGeometry, found {type(geometry)}.")
        arr = np.array(arr, copy=True)
        arr.setflags(write=False)
        self._voxels = arr
        self._geometry = geometry

    @property
    def voxels(self) -> np.ndarray:
        """
        Readonly Z x H x W voxel array.
        """
        return self._voxels

    @property
    def geometry(self) -> VoxelGeometry:
        return self._geometry

    @property
    def depth(self) -> int:
        return self._voxels.shape[0]

    @property
    def height(self) -> int:
        return self._voxels.shape[1]

    @property
    def width(self) -> int:
        return self._voxels.shape[2]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self._voxels.shape  # type: ignore[return-value]

    def center_padded(self, z_in: int) -> "ImageStack":
        """
        Returns this stack zero-padded along z to `z_in` slices, with the extra
        slices split evenly between front and back (front gets the floor).
        """
        if z_in < self.depth:
            raise ValueError(f"Cannot pad depth {self.depth} down to {z_in}.")
        front = (z_in - self.depth) // 2
        back = z_in - self.depth - front
        padded = np.pad(self._voxels, ((front, back), (0, 0), (0, 0)))
        return ImageStack(padded, self._geometry)

    def __repr__(self) -> str:
        return f"ImageStack(shape={self.shape}, geometry={self._geometry})"


class RgbProjection:
    """
    A 3 x H x W image with values in `[0, 1]`,
    the common output of MIP, linear depth embedding and PEN.
    """

    _pixels: np.ndarray

    def __init__(self, pixels: npt.ArrayLike):
        arr = np.asarray(pixels, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise ValueError(f"Expected a 3 x H x W array, found {arr.shape}.")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Projection values must be finite.")
        arr = np.clip(arr, 0.0, 1.0)
        arr.setflags(write=False)
        self._pixels = arr

    @staticmethod
    def from_unnormalized(image: npt.ArrayLike) -> "RgbProjection":
        """
        Builds a projection from raw channel values via `normalize_unit`.
        """
        return RgbProjection(normalize_unit(image))

    @property
    def pixels(self) -> np.ndarray:
        return self._pixels

    @property
    def height(self) -> int:
        return self._pixels.shape[1]

    @property
    def width(self) -> int:
        return self._pixels.shape[2]

    def __repr__(self) -> str:
        return f"RgbProjection(shape={self._pixels.shape})"


PathLike = Union[str, "os.PathLike[str]"]


def load_stack(path: PathLike) -> ImageStack:
    """
    Loads a single-channel (OME-)TIFF z-stack, one grayscale page per slice in
    ascending z order. Voxel geometry is read from OME metadata when present,
    then from ImageJ metadata, and otherwise defaults to `VoxelGeometry()`.
    """
    try:
        # pylint: disable = import-outside-toplevel
        import tifffile  # type: ignore
    except ModuleNotFoundError as e:
        raise ModuleNotFoundError("You must install the 'tifffile' library.") from e
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise FileNotFoundError(f"No such stack file: {path}")
    with tifffile.TiffFile(path) as tif:
        pages = list(tif.pages)
        if not pages:
            raise StackFormatError(f"No image pages found in {path}.")
        _check_single_channel(tif)
        first_shape = None
        slices = []
        for idx, page in enumerate(pages):
            if page.samplesperpixel != 1 or len(page.shape) != 2:
                raise StackFormatError(
                    f"Page {idx} is not single-channel grayscale (shape {page.shape})."
                )
            if first_shape is None:
                first_shape = page.shape
            elif page.shape != first_shape:
                raise StackFormatError(
                    f"Page {idx} has shape {page.shape}, expected {first_shape}."
                )
            slices.append(page.asarray())
        geometry = _geometry_from_ome(tif.ome_metadata)
        if geometry is None:
            geometry = _geometry_from_imagej(tif.imagej_metadata)
    return ImageStack(np.stack(slices), geometry)


def save_stack(stack: ImageStack, path: PathLike) -> None:
    """
    Writes a stack as OME-TIFF, one page per slice, with the voxel geometry
    stored as OME physical sizes in micrometres.
    """
    try:
        # pylint: disable = import-outside-toplevel
        import tifffile  # type: ignore
    except ModuleNotFoundError as e:
        raise ModuleNotFoundError("You must install the 'tifffile' library.") from e
    if not isinstance(stack, ImageStack):
        raise TypeError(f"Expected ImageStack, found {type(stack)}.")
    g = stack.geometry
    tifffile.imwrite(
        os.fspath(path),
        stack.voxels,
        ome=True,
        photometric="minisblack",
        metadata={
            "axes": "ZYX",
            "PhysicalSizeX": g.dx_um,
            "PhysicalSizeXUnit": "µm",
            "PhysicalSizeY": g.dy_um,
            "PhysicalSizeYUnit": "µm",
            "PhysicalSizeZ": g.dz_um,
            "PhysicalSizeZUnit": "µm",
        },
    )


def _check_single_channel(tif) -> None:
    """
    Rejects files whose first series, or whose OME pixel metadata, declares
    more than one channel, naming the first page of the second channel.
    """
    if tif.series:
        series = tif.series[0]
        for axis, size in zip(series.axes, series.shape):
            if axis == "S" and size > 1:
                raise StackFormatError(f"Page 0 has {size} samples per pixel, expected 1.")
        page_axes = [(a, n) for a, n in zip(series.axes, series.shape) if a not in "YXS"]
        for axis, size in page_axes:
            if axis == "C" and size > 1:
                dims = [n for _, n in page_axes]
                coords = [1 if a == "C" else 0 for a, _ in page_axes]
                page = int(np.ravel_multi_index(coords, dims))
                raise StackFormatError(
                    f"Page {page} holds channel 1 of {size}; "
                    "only single-channel stacks are supported."
                )
    size_c, stride = _ome_channel_layout(tif.ome_metadata)
    if size_c > 1:
        raise StackFormatError(
            f"Page {stride} holds channel 1 of {size_c}; "
            "only single-channel stacks are supported."
        )


def _ome_channel_layout(ome_xml: Optional[str]) -> Tuple[int, int]:
    """
    Returns `(SizeC, page stride of C)` from the first OME `Pixels` element,
    or `(1, 1)` when there is no usable OME metadata.
    """
    if not ome_xml:
        return 1, 1
    try:
        root = ET.fromstring(ome_xml)
    except ET.ParseError:
        return 1, 1
    for elem in root.iter():
        if elem.tag.split("}")[-1] != "Pixels":
            continue
        size_c = int(elem.attrib.get("SizeC", 1))
        stride = 1
        for axis in elem.attrib.get("DimensionOrder", "XYZCT")[2:]:
            if axis == "C":
                break
            stride *= int(elem.attrib.get(f"Size{axis}", 1))
        return size_c, stride
    return 1, 1


def _geometry_from_ome(ome_xml: Optional[str]) -> Optional[VoxelGeometry]:
    if not ome_xml:
        return None
    try:
        root = ET.fromstring(ome_xml)
    except ET.ParseError:
        return None
    default = VoxelGeometry()
    for elem in root.iter():
        if elem.tag.split("}")[-1] != "Pixels":
            continue
        sizes = []
        for axis, fallback in (("X", default.dx_um), ("Y", default.dy_um), ("Z", default.dz_um)):
            raw = elem.attrib.get(f"PhysicalSize{axis}")
            unit = elem.attrib.get(f"PhysicalSize{axis}Unit", "µm")
            value = fallback if raw is None else float(raw) * _UM_PER_UNIT.get(unit, 1.0)
            sizes.append(value)
        return VoxelGeometry(*sizes)
    return None


def _geometry_from_imagej(metadata: Optional[dict]) -> VoxelGeometry:
    default = VoxelGeometry()
    if not metadata or "spacing" not in metadata:
        return default
    return VoxelGeometry(default.dx_um, default.dy_um, float(metadata["spacing"]))


_UM_PER_UNIT = {"µm": 1.0, "um": 1.0, "nm": 1e-3, "mm": 1e3, "m": 1e6}
