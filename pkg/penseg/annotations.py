"""
    Per-cell ground truth (2D masks with axial position) and 2D detections,
    with their JSON representation as polygon vertex lists.
"""

import json
import os
from typing import (
    Any,
    Dict,
    Iterator,
    List,
    Optional,
    Sequence,
    Tuple,
    TypedDict,
    Union,
)

import numpy as np
import numpy.typing as npt

from penseg.utils import (
    AnnotationError,
    mask_boundary_vertices,
    mask_component_vertices,
    rasterize_polygon,
)

Vertices = Tuple[Tuple[float, float], ...]
Dims = Tuple[int, int, int]


class CellDict(TypedDict, total=False):
    """
    JSON form of a single cell, as stored in annotation files.
    """

    id: int
    z_centroid: float
    z_range: List[int]
    vertices: List[List[float]]
    parts: List[List[List[float]]]
    channel: int


class AnnotationDict(TypedDict, total=True):
    """
    JSON form of an annotation file.
    """

    image: Dict[str, int]
    cells: List[CellDict]


class CellAnnotation:
    """
    A single annotated cell: its 2D (MIP) mask and its axial position,
    in slice-index units.
    """

    _id: int
    _mask: np.ndarray
    _z_centroid: float
    _z_range: Tuple[int, int]
    _vertices: Optional[Vertices]

    def __init__(
        self,
        cell_id: int,
        mask: npt.ArrayLike,
        z_centroid: float,
        z_range: Tuple[int, int],
        *,
        vertices: Optional[Sequence[Sequence[float]]] = None,
    ):
        if not isinstance(cell_id, (int, np.integer)) or isinstance(cell_id, bool):
            raise TypeError(f"Expected integer cell id, found {cell_id!r}.")
        arr = np.array(mask, dtype=bool)
        if arr.ndim != 2:
            raise AnnotationError(f"Expected a 2D mask, found shape {arr.shape}.")
        if not arr.any():
            raise AnnotationError(f"Mask of cell {cell_id} is empty.")
        z_min, z_max = (int(z) for z in z_range)
        z_centroid = float(z_centroid)
        if not 0 <= z_min <= z_centroid <= z_max:
            raise AnnotationError(
                f"Cell {cell_id}: expected 0 <= z_min <= z_centroid <= z_max, "
                f"found z_range {(z_min, z_max)} and z_centroid {z_centroid}."
            )
        arr.setflags(write=False)
        self._id = int(cell_id)
        self._mask = arr
        self._z_centroid = z_centroid
        self._z_range = (z_min, z_max)
        self._vertices = (
            None if vertices is None else tuple((v[0], v[1]) for v in vertices)
        )

    @property
    def id(self) -> int:
        return self._id

    @property
    def mask(self) -> np.ndarray:
        """
        Readonly H x W boolean mask.
        """
        return self._mask

    @property
    def z_centroid(self) -> float:
        return self._z_centroid

    @property
    def z_range(self) -> Tuple[int, int]:
        return self._z_range

    @property
    def vertices(self) -> Vertices:
        """
        Boundary polygon as `(x, y)` pixel coordinates: the source vertices
        if this cell was loaded from a polygon, else the traced mask boundary.
        """
        if self._vertices is None:
            traced = mask_boundary_vertices(self._mask)
            self._vertices = tuple((float(x), float(y)) for x, y in traced)
        return self._vertices

    @property
    def centroid_yx(self) -> Tuple[float, float]:
        ys, xs = np.nonzero(self._mask)
        return float(ys.mean()), float(xs.mean())

    def replaced(
        self,
        *,
        cell_id: Optional[int] = None,
        mask: Optional[np.ndarray] = None,
        z_shift: int = 0,
    ) -> "CellAnnotation":
        """
        Returns a copy with a new id, mask and/or an axial shift.
        Source vertices are dropped when the mask changes.
        """
        new_mask = self._mask if mask is None else mask
        return CellAnnotation(
            self._id if cell_id is None else cell_id,
            new_mask,
            self._z_centroid + z_shift,
            (self._z_range[0] + z_shift, self._z_range[1] + z_shift),
            vertices=self._vertices if mask is None else None,
        )

    def __repr__(self) -> str:
        return (
            f"CellAnnotation(id={self._id}, area={int(self._mask.sum())}, "
            f"z_centroid={self._z_centroid}, z_range={self._z_range})"
        )


class AnnotationSet:
    """
    Ordered collection of annotated cells for a Z x H x W image.
    """

    _cells: Tuple[CellAnnotation, ...]
    _dims: Dims

    def __init__(self, cells: Sequence[CellAnnotation], dims: Sequence[int]):
        if len(dims) != 3 or any(int(d) < 1 for d in dims):
            raise AnnotationError(f"Expected positive (Z, H, W) dims, found {dims}.")
        depth, height, width = (int(d) for d in dims)
        seen = set()
        for cell in cells:
            if not isinstance(cell, CellAnnotation):
                raise TypeError(f"Expected CellAnnotation, found {type(cell)}.")
            if cell.id in seen:
                raise AnnotationError(f"Duplicate cell id {cell.id}.")
            seen.add(cell.id)
            if cell.mask.shape != (height, width):
                raise AnnotationError(
                    f"Mask of cell {cell.id} has shape {cell.mask.shape}, "
                    f"expected {(height, width)}."
                )
            if cell.z_range[1] >= depth:
                raise AnnotationError(
                    f"Cell {cell.id} has z_max {cell.z_range[1]} beyond depth {depth}."
                )
        self._cells = tuple(cells)
        self._dims = (depth, height, width)

    @property
    def cells(self) -> Tuple[CellAnnotation, ...]:
        return self._cells

    @property
    def dims(self) -> Dims:
        return self._dims

    @property
    def ids(self) -> List[int]:
        return [c.id for c in self._cells]

    @property
    def z_centroids(self) -> List[float]:
        return [c.z_centroid for c in self._cells]

    def __len__(self) -> int:
        return len(self._cells)

    def __iter__(self) -> Iterator[CellAnnotation]:
        return iter(self._cells)

    def __getitem__(self, idx: int) -> CellAnnotation:
        return self._cells[idx]

    @property
    def as_dict(self) -> AnnotationDict:
        """
        This annotation set as a dictionary matching the annotation JSON schema.
        """
        depth, height, width = self._dims
        return {
            "image": {"depth": depth, "height": height, "width": width},
            "cells": [
                {
                    "id": c.id,
                    "z_centroid": c.z_centroid,
                    "z_range": [c.z_range[0], c.z_range[1]],
                    "vertices": [[x, y] for x, y in c.vertices],
                }
                for c in self._cells
            ],
        }

    def __repr__(self) -> str:
        return f"AnnotationSet({len(self._cells)} cells, dims={self._dims})"


class Detection:
    """
    A predicted 2D instance: a boolean mask in an H x W frame plus the output
    channel it was found in. The mask is stored cropped to its bounding box.
    """

    _crop: np.ndarray
    _offset: Tuple[int, int]
    _frame: Tuple[int, int]
    _channel: int

    def __init__(
        self,
        crop: npt.ArrayLike,
        offset: Tuple[int, int],
        frame: Tuple[int, int],
        channel: int = 0,
    ):
        arr = np.array(crop, dtype=bool)
        if arr.ndim != 2 or not arr.any():
            raise AnnotationError("Detection masks must be non-empty 2D arrays.")
        y0, x0 = int(offset[0]), int(offset[1])
        h, w = int(frame[0]), int(frame[1])
        if y0 < 0 or x0 < 0 or y0 + arr.shape[0] > h or x0 + arr.shape[1] > w:
            raise AnnotationError(
                f"Detection crop {arr.shape} at {(y0, x0)} exceeds frame {(h, w)}."
            )
        arr.setflags(write=False)
        self._crop = arr
        self._offset = (y0, x0)
        self._frame = (h, w)
        self._channel = int(channel)

    @staticmethod
    def from_mask(mask: npt.ArrayLike, channel: int = 0) -> "Detection":
        arr = np.asarray(mask, dtype=bool)
        if not arr.any():
            raise AnnotationError("Detection masks must be non-empty.")
        ys, xs = np.nonzero(arr)
        y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
        return Detection(arr[y0:y1, x0:x1], (y0, x0), arr.shape, channel)

    @property
    def mask(self) -> np.ndarray:
        """
        The full-frame boolean mask (materialized on each access).
        """
        full = np.zeros(self._frame, dtype=bool)
        y0, x0 = self._offset
        full[y0 : y0 + self._crop.shape[0], x0 : x0 + self._crop.shape[1]] = self._crop
        return full

    @property
    def crop(self) -> np.ndarray:
        return self._crop

    @property
    def offset(self) -> Tuple[int, int]:
        return self._offset

    @property
    def frame(self) -> Tuple[int, int]:
        return self._frame

    @property
    def channel(self) -> int:
        return self._channel

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self._crop))

    @property
    def bbox(self) -> Tuple[int, int, int, int]:
        """
        `(y0, x0, y1, x1)`, exclusive upper bounds.
        """
        y0, x0 = self._offset
        return (y0, x0, y0 + self._crop.shape[0], x0 + self._crop.shape[1])

    @property
    def centroid_yx(self) -> Tuple[float, float]:
        ys, xs = np.nonzero(self._crop)
        return float(ys.mean() + self._offset[0]), float(xs.mean() + self._offset[1])

    def shifted(self, dy: int, dx: int, frame: Tuple[int, int]) -> "Detection":
        """
        The same mask translated by `(dy, dx)` into another frame.
        """
        return Detection(
            self._crop, (self._offset[0] + dy, self._offset[1] + dx), frame, self._channel
        )

    def intersection(self, other: "Detection") -> int:
        ay0, ax0, ay1, ax1 = self.bbox
        by0, bx0, by1, bx1 = other.bbox
        y0, x0, y1, x1 = max(ay0, by0), max(ax0, bx0), min(ay1, by1), min(ax1, bx1)
        if y0 >= y1 or x0 >= x1:
            return 0
        a = self._crop[y0 - ay0 : y1 - ay0, x0 - ax0 : x1 - ax0]
        b = other._crop[y0 - by0 : y1 - by0, x0 - bx0 : x1 - bx0]
        return int(np.count_nonzero(a & b))

    def iou(self, other: "Detection") -> float:
        inter = self.intersection(other)
        if inter == 0:
            return 0.0
        return inter / (self.area + other.area - inter)

    def __repr__(self) -> str:
        return f"Detection(area={self.area}, bbox={self.bbox}, channel={self._channel})"


class DetectionSet:
    """
    Detections in a common H x W frame. Detections from different channels may overlap.
    """

    _detections: Tuple[Detection, ...]
    _frame: Tuple[int, int]

    def __init__(self, detections: Sequence[Detection], frame: Tuple[int, int]):
        frame = (int(frame[0]), int(frame[1]))
        for det in detections:
            if not isinstance(det, Detection):
                raise TypeError(f"Expected Detection, found {type(det)}.")
            if det.frame != frame:
                raise ValueError(f"Detection frame {det.frame} differs from {frame}.")
        self._detections = tuple(detections)
        self._frame = frame

    @staticmethod
    def from_annotations(annotations: AnnotationSet) -> "DetectionSet":
        """
        The cells of an annotation set viewed as detections (all in channel 0).
        """
        _, h, w = annotations.dims
        return DetectionSet([Detection.from_mask(c.mask) for c in annotations], (h, w))

    @property
    def detections(self) -> Tuple[Detection, ...]:
        return self._detections

    @property
    def frame(self) -> Tuple[int, int]:
        return self._frame

    def __len__(self) -> int:
        return len(self._detections)

    def __iter__(self) -> Iterator[Detection]:
        return iter(self._detections)

    def __getitem__(self, idx: int) -> Detection:
        return self._detections[idx]

    def __repr__(self) -> str:
        return f"DetectionSet({len(self._detections)} detections, frame={self._frame})"


def _json_dump(doc: Any, path: Union[str, "os.PathLike[str]"]) -> None:
    text = json.dumps(doc, indent=1, ensure_ascii=False)
    with open(os.fspath(path), "w", encoding="utf-8") as f:
        f.write(text + "\n")


def _parse_vertices(raw: Any, cell_id: int, height: int, width: int) -> List[Tuple[Any, Any]]:
    if not isinstance(raw, list) or len(raw) < 3:
        raise AnnotationError(f"Cell {cell_id}: a polygon needs at least 3 vertices.")
    verts = []
    for v in raw:
        if not isinstance(v, (list, tuple)) or len(v) != 2:
            raise AnnotationError(f"Cell {cell_id}: vertices must be [x, y] pairs.")
        x, y = v
        if not (0 <= x < width and 0 <= y < height):
            raise AnnotationError(
                f"Cell {cell_id}: vertex {[x, y]} outside [0, {width}) x [0, {height})."
            )
        verts.append((x, y))
    distinct = {(float(x), float(y)) for x, y in verts}
    if len(distinct) < 3:
        raise AnnotationError(f"Cell {cell_id}: a polygon needs at least 3 vertices.")
    return verts


def load_annotations(
    path: Union[str, "os.PathLike[str]"], dims: Optional[Sequence[int]] = None
) -> AnnotationSet:
    """
    Loads an annotation JSON document, rasterizing every polygon to a mask.
    If `dims` is given it must agree with the document's image header.
    """
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise FileNotFoundError(f"No such annotation file: {path}")
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    header_dims, cells = _parse_document(doc)
    if dims is not None and tuple(int(d) for d in dims) != header_dims:
        raise AnnotationError(
            f"Annotation image header {header_dims} does not match dims {tuple(dims)}."
        )
    _, height, width = header_dims
    parsed = []
    for cell in cells:
        cell_id, verts = cell["id"], cell["vertices"]
        mask = rasterize_polygon(verts, height, width)
        for part in cell["parts"]:
            mask |= rasterize_polygon(part, height, width)
        parsed.append(
            CellAnnotation(
                cell_id,
                mask,
                cell["z_centroid"],
                (cell["z_range"][0], cell["z_range"][1]),
                vertices=verts,
            )
        )
    return AnnotationSet(parsed, header_dims)


def _parse_document(doc: Any) -> Tuple[Dims, List[Dict[str, Any]]]:
    try:
        image = doc["image"]
        dims = (int(image["depth"]), int(image["height"]), int(image["width"]))
        raw_cells = doc["cells"]
    except (KeyError, TypeError) as e:
        raise AnnotationError(f"Annotation document does not match the schema: {e}") from e
    if not isinstance(raw_cells, list):
        raise AnnotationError("Expected 'cells' to be a list.")
    _, height, width = dims
    cells = []
    for raw in raw_cells:
        try:
            cell_id = raw["id"]
            cell = {
                "id": cell_id,
                "z_centroid": raw["z_centroid"],
                "z_range": list(raw["z_range"]),
                "vertices": _parse_vertices(raw["vertices"], cell_id, height, width),
                "channel": raw.get("channel", 0),
                "parts": [
                    _parse_vertices(part, cell_id, height, width)
                    for part in raw.get("parts", [])
                ],
            }
        except (KeyError, TypeError) as e:
            raise AnnotationError(f"Cell entry does not match the schema: {e}") from e
        if len(cell["z_range"]) != 2:
            raise AnnotationError(f"Cell {cell_id}: z_range must be [z_min, z_max].")
        cells.append(cell)
    return dims, cells


def save_annotations(
    annotations: AnnotationSet, path: Union[str, "os.PathLike[str]"]
) -> None:
    """
    Writes an annotation set as JSON, each mask as a closed, ordered boundary
    polygon. Output is deterministic for a given set.
    """
    if not isinstance(annotations, AnnotationSet):
        raise TypeError(f"Expected AnnotationSet, found {type(annotations)}.")
    _json_dump(annotations.as_dict, path)


def save_detections(
    detections: DetectionSet, path: Union[str, "os.PathLike[str]"], depth: int = 1
) -> None:
    """
    Writes detections in the annotation schema, with an extra `"channel"`
    per cell. Axial fields carry the channel index, the only depth a
    detection knows about. A mask with several separate pieces keeps its
    largest piece in `"vertices"` and the others in `"parts"`.
    """
    h, w = detections.frame
    cells: List[CellDict] = []
    for idx, det in enumerate(detections):
        verts, *parts = mask_component_vertices(det.mask)
        z = min(det.channel, depth - 1)
        cell: CellDict = {
            "id": idx,
            "z_centroid": float(z),
            "z_range": [z, z],
            "vertices": _vertex_list(verts),
            "channel": det.channel,
        }
        if parts:
            cell["parts"] = [_vertex_list(part) for part in parts]
        cells.append(cell)
    _json_dump({"image": {"depth": depth, "height": h, "width": w}, "cells": cells}, path)


def _vertex_list(verts: np.ndarray) -> List[List[float]]:
    return [[float(x), float(y)] for x, y in verts]


def load_detections(path: Union[str, "os.PathLike[str]"]) -> DetectionSet:
    """
    Loads a detection (or plain annotation) JSON file as a `DetectionSet`;
    cells without a `"channel"` field are put in channel 0.
    """
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise FileNotFoundError(f"No such detection file: {path}")
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    (_, height, width), cells = _parse_document(doc)
    dets = []
    for cell in cells:
        mask = rasterize_polygon(cell["vertices"], height, width)
        for part in cell["parts"]:
            mask |= rasterize_polygon(part, height, width)
        if not mask.any():
            raise AnnotationError(f"Cell {cell['id']}: polygon covers no pixel centre.")
        dets.append(Detection.from_mask(mask, int(cell["channel"])))
    return DetectionSet(dets, (height, width))
