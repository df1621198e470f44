"""
    Assignment of annotated cells to the output channels of the head.
"""

from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from penseg.annotations import AnnotationSet
from penseg.seghead.config import HeadConfig
from penseg.utils import ConfigurationError, SeedLike, as_generator

KMEANS_MAX_ITERS = 300


class ChannelAssignment(Mapping[int, int]):
    """
    Immutable map from cell id to output channel in `range(n_out)`.
    """

    _channels: Dict[int, int]
    _n_out: int

    def __init__(self, channels: Mapping[int, int], n_out: int):
        if not isinstance(n_out, int) or n_out < 1:
            raise ConfigurationError(f"Expected n_out >= 1, found {n_out!r}.")
        for cell_id, channel in channels.items():
            if not 0 <= channel < n_out:
                raise ConfigurationError(
                    f"Cell {cell_id} assigned to channel {channel}, expected [0, {n_out})."
                )
        self._channels = {int(k): int(v) for k, v in channels.items()}
        self._n_out = n_out

    @property
    def n_out(self) -> int:
        return self._n_out

    def __getitem__(self, cell_id: int) -> int:
        return self._channels[cell_id]

    def __iter__(self) -> Iterator[int]:
        return iter(self._channels)

    def __len__(self) -> int:
        return len(self._channels)

    def channels_of(self, ids: Sequence[int]) -> List[int]:
        return [self._channels[i] for i in ids]

    def __repr__(self) -> str:
        return f"ChannelAssignment({self._channels}, n_out={self._n_out})"


def kmeans_1d(
    zs: Sequence[float], init: Sequence[float], max_iters: int = KMEANS_MAX_ITERS
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Lloyd's algorithm in one dimension. Points go to the nearest centre
    (lowest index on ties); centres of empty clusters stay put.
    Returns `(labels, centers)`.
    """
    points = np.asarray(zs, dtype=np.float64)
    centers = np.array(init, dtype=np.float64)
    labels = np.full(len(points), -1)
    for _ in range(max_iters):
        new_labels = np.argmin(np.abs(points[:, None] - centers[None, :]), axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(len(centers)):
            members = points[labels == c]
            if len(members):
                centers[c] = members.mean()
    return labels, centers


def assign_channels(
    zs: Sequence[float],
    n_out: int,
    z_extent: Tuple[float, float],
    ids: Optional[Sequence[int]] = None,
) -> ChannelAssignment:
    """
    Channel assignment from axial positions.

    With no more cells than channels, cells take channels `0, 1, ...` in
    ascending z order. Otherwise 1D k-means with centres initialized evenly
    over `z_extent`, and channels numbered by ascending final centre.
    Cell ids default to positions in `zs`.
    """
    if not isinstance(n_out, int) or n_out < 1:
        raise ConfigurationError(f"Expected n_out >= 1, found {n_out!r}.")
    if ids is None:
        ids = list(range(len(zs)))
    if len(ids) != len(zs):
        raise ValueError(f"Found {len(ids)} ids for {len(zs)} positions.")
    lo, hi = z_extent
    points = np.asarray(zs, dtype=np.float64)
    if np.any(points < lo) or np.any(points > hi):
        raise ValueError(f"Axial positions must lie within {tuple(z_extent)}.")
    if len(points) <= n_out:
        order = np.argsort(points, kind="stable")
        return ChannelAssignment(
            {ids[idx]: rank for rank, idx in enumerate(order)}, n_out
        )
    labels, centers = kmeans_1d(points, np.linspace(lo, hi, n_out))
    rank = np.empty(n_out, dtype=int)
    rank[np.argsort(centers, kind="stable")] = np.arange(n_out)
    return ChannelAssignment(
        {cell_id: int(rank[label]) for cell_id, label in zip(ids, labels)}, n_out
    )


def random_assignment(ids: Sequence[int], n_out: int, seed: SeedLike = None) -> ChannelAssignment:
    """
    Independent uniformly random channel for each cell.
    """
    if not isinstance(n_out, int) or n_out < 1:
        raise ConfigurationError(f"Expected n_out >= 1, found {n_out!r}.")
    rng = as_generator(seed)
    channels = rng.integers(n_out, size=len(ids))
    return ChannelAssignment({i: int(c) for i, c in zip(ids, channels)}, n_out)


def assignment_for(
    annotations: AnnotationSet, config: HeadConfig, seed: SeedLike = None
) -> ChannelAssignment:
    """
    Channel assignment of an annotation set according to `config.gt_assignment`.
    """
    ids = annotations.ids
    if config.gt_assignment == "single":
        return ChannelAssignment({i: 0 for i in ids}, 1)
    if config.gt_assignment == "random":
        return random_assignment(ids, config.n_out, seed)
    depth = annotations.dims[0]
    return assign_channels(annotations.z_centroids, config.n_out, (0, depth - 1), ids)
