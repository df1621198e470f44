"""
    Supervision targets of the head: per-channel cell probability, cell
    edges and heat-diffusion flow fields.
"""

from typing import Tuple

import numpy as np
import numpy.typing as npt
from scipy import ndimage as ndi  # type: ignore

from penseg.annotations import AnnotationSet
from penseg.seghead.assignment import ChannelAssignment
from penseg.seghead.config import HeadConfig
from penseg.utils import FOUR_CONNECTED, ConfigurationError, mask_edges


def heat_flow(mask: npt.ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    """
    Unit flow field `(flow_y, flow_x)` pointing up the gradient of a heat
    field diffused inside the mask from its medoid pixel.

    Each 4-connected component is handled on its own. Per iteration the
    medoid gains one unit of heat and every pixel takes the mean heat of
    itself and its in-mask 4-neighbours; the number of iterations is twice
    the bounding-box diagonal. Flows are zero outside the mask and wherever
    the centred difference vanishes.
    """
    arr = np.asarray(mask, dtype=bool)
    if arr.ndim != 2:
        raise ValueError(f"Expected a 2D mask, found shape {arr.shape}.")
    flow_y = np.zeros(arr.shape)
    flow_x = np.zeros(arr.shape)
    labels, _ = ndi.label(arr, structure=FOUR_CONNECTED)
    for idx, region in enumerate(ndi.find_objects(labels), start=1):
        ys, xs = region
        # one pixel of margin so neighbour lookups stay in bounds
        y0, x0 = max(ys.start - 1, 0), max(xs.start - 1, 0)
        y1, x1 = min(ys.stop + 1, arr.shape[0]), min(xs.stop + 1, arr.shape[1])
        component = labels[y0:y1, x0:x1] == idx
        fy, fx = _component_flow(component)
        flow_y[y0:y1, x0:x1][component] = fy[component]
        flow_x[y0:y1, x0:x1][component] = fx[component]
    return flow_y, flow_x


def _component_flow(component: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    ys, xs = np.nonzero(component)
    if len(ys) == 1:
        return np.zeros(component.shape), np.zeros(component.shape)
    cy, cx = ys.mean(), xs.mean()
    medoid = int(np.argmin((ys - cy) ** 2 + (xs - cx) ** 2))
    my, mx = ys[medoid], xs[medoid]
    height = ys.max() - ys.min() + 1
    width = xs.max() - xs.min() + 1
    n_iters = int(np.ceil(2 * np.hypot(height, width)))
    inside = np.pad(component, 1)
    counts = 1.0 + (
        inside[:-2, 1:-1].astype(float)
        + inside[2:, 1:-1]
        + inside[1:-1, :-2]
        + inside[1:-1, 2:]
    )
    heat = np.zeros(component.shape)
    for _ in range(n_iters):
        heat[my, mx] += 1.0
        padded = np.pad(heat, 1)
        total = (
            heat
            + padded[:-2, 1:-1]
            + padded[2:, 1:-1]
            + padded[1:-1, :-2]
            + padded[1:-1, 2:]
        )
        heat = np.where(component, total / counts, 0.0)
    padded = np.pad(heat, 1)
    gy = (padded[2:, 1:-1] - padded[:-2, 1:-1]) / 2
    gx = (padded[1:-1, 2:] - padded[1:-1, :-2]) / 2
    norm = np.hypot(gy, gx)
    valid = component & (norm > 0)
    safe = np.where(valid, norm, 1.0)
    return np.where(valid, gy / safe, 0.0), np.where(valid, gx / safe, 0.0)


class SegTargets:
    """
    Targets for `n_out` channels over an `H x W` frame: binary cell
    probability and edge maps, and unit flow fields (zero outside cells).
    """

    _cellprob: np.ndarray
    _edges: np.ndarray
    _flows: np.ndarray

    def __init__(self, cellprob: np.ndarray, edges: np.ndarray, flows: np.ndarray):
        cellprob = np.asarray(cellprob, dtype=bool)
        edges = np.asarray(edges, dtype=bool)
        flows = np.asarray(flows, dtype=np.float64)
        if cellprob.ndim != 3 or edges.shape != cellprob.shape:
            raise ValueError(
                f"Expected (n_out, H, W) cellprob and edges, found {cellprob.shape}, {edges.shape}."
            )
        if flows.shape != (cellprob.shape[0], 2) + cellprob.shape[1:]:
            raise ValueError(f"Expected (n_out, 2, H, W) flows, found {flows.shape}.")
        for arr in (cellprob, edges, flows):
            arr.setflags(write=False)
        self._cellprob = cellprob
        self._edges = edges
        self._flows = flows

    @property
    def n_out(self) -> int:
        return self._cellprob.shape[0]

    @property
    def shape(self) -> Tuple[int, int]:
        return self._cellprob.shape[1:]  # type: ignore[return-value]

    @property
    def cellprob(self) -> np.ndarray:
        return self._cellprob

    @property
    def edges(self) -> np.ndarray:
        return self._edges

    @property
    def flow_y(self) -> np.ndarray:
        return self._flows[:, 0]

    @property
    def flow_x(self) -> np.ndarray:
        return self._flows[:, 1]

    def as_maps(self) -> np.ndarray:
        """
        The `(4 n_out, H, W)` stack `[cellprob, edges, flow_y, flow_x]`,
        each block holding `n_out` channels, in the head's output order.
        """
        return np.concatenate(
            [
                self._cellprob.astype(np.float64),
                self._edges.astype(np.float64),
                self.flow_y,
                self.flow_x,
            ],
            axis=0,
        )

    def __repr__(self) -> str:
        return f"SegTargets(n_out={self.n_out}, shape={self.shape})"


def make_targets(
    annotations: AnnotationSet, assignment: ChannelAssignment, config: HeadConfig
) -> SegTargets:
    """
    Builds the per-channel targets. Cell probability is the union of the
    masks assigned to a channel and edges are the union of their
    boundaries; flows of cells sharing a channel are composited in
    ascending id order, later cells overwriting earlier ones.
    """
    n_out = config.n_out
    if assignment.n_out != n_out:
        raise ConfigurationError(
            f"Assignment has {assignment.n_out} channels, head config has {n_out}."
        )
    _, h, w = annotations.dims
    cellprob = np.zeros((n_out, h, w), dtype=bool)
    edges = np.zeros((n_out, h, w), dtype=bool)
    flows = np.zeros((n_out, 2, h, w))
    for cell in sorted(annotations, key=lambda c: c.id):
        if cell.id not in assignment:
            raise ConfigurationError(f"Cell {cell.id} has no channel assignment.")
        c = assignment[cell.id]
        mask = cell.mask
        cellprob[c] |= mask
        edges[c] |= mask_edges(mask)
        fy, fx = heat_flow(mask)
        flows[c, 0][mask] = fy[mask]
        flows[c, 1][mask] = fx[mask]
    return SegTargets(cellprob, edges, flows)
