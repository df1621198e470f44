"""
    PNG renderings of projections and of detections overlaid on them.
"""

import os
from typing import Optional, Tuple, Union

import numpy as np

from penseg.annotations import DetectionSet
from penseg.stacks import RgbProjection

PathLike = Union[str, "os.PathLike[str]"]


def _matplotlib():
    try:
        # pylint: disable = import-outside-toplevel
        from matplotlib.figure import Figure  # type: ignore
    except ModuleNotFoundError as e:
        raise ModuleNotFoundError("You must install the 'matplotlib' library.") from e
    return Figure


def render_projection(projection: RgbProjection, path: PathLike) -> None:
    """
    Saves a projection as an RGB PNG at its native resolution.
    """
    try:
        # pylint: disable = import-outside-toplevel
        from matplotlib.image import imsave  # type: ignore
    except ModuleNotFoundError as e:
        raise ModuleNotFoundError("You must install the 'matplotlib' library.") from e
    imsave(os.fspath(path), np.moveaxis(projection.pixels, 0, -1))


def render_detections(
    projection: RgbProjection,
    detections: DetectionSet,
    path: PathLike,
    *,
    figsize: Optional[Tuple[float, float]] = None,
    seed: int = 0,
) -> None:
    """
    Saves a figure of the projection with the outline of every detection
    drawn in a random colour; line style encodes the output channel.
    """
    Figure = _matplotlib()
    if (projection.height, projection.width) != detections.frame:
        raise ValueError(
            f"Projection size {(projection.height, projection.width)} "
            f"differs from detection frame {detections.frame}."
        )
    rng = np.random.default_rng(seed)
    if figsize is None:
        figsize = (6.0, 6.0 * projection.height / projection.width)
    fig = Figure(figsize=figsize)
    ax = fig.add_subplot(1, 1, 1)
    ax.imshow(np.moveaxis(projection.pixels, 0, -1), interpolation="nearest")
    styles = ("solid", "dashed", "dotted", "dashdot")
    for det in detections:
        ax.contour(
            det.mask.astype(float),
            levels=[0.5],
            colors=[tuple(rng.uniform(0.3, 1.0, size=3))],
            linestyles=styles[det.channel % len(styles)],
            linewidths=1.0,
        )
    ax.set_axis_off()
    fig.savefig(os.fspath(path), bbox_inches="tight", dpi=150)
