"""
    Non-learned 3D to 2D projections: maximum intensity projection and the
    Gaussian linear depth embedding.
"""

from dataclasses import dataclass
from typing import Final, Literal, Sequence

import numpy as np

from penseg.stacks import ImageStack, RgbProjection
from penseg.utils import ConfigurationError, normalize_unit, validate_choice

DepthReduction = Literal["max", "sum"]

DEPTH_REDUCTIONS: Final[Sequence[str]] = ("max", "sum")

FWHM_PER_SIGMA: Final[float] = 2.0 * np.sqrt(2.0 * np.log(2.0))
""" Full width at half maximum of a Gaussian, in units of its standard deviation. """


@dataclass(frozen=True)
class DepthEmbedConfig:
    """
    Configuration for the linear depth embedding: number of Gaussian depth
    channels and the reduction over z of the weighted slices.
    """

    n_channels: int = 3
    reduction: DepthReduction = "max"

    def __post_init__(self):
        if not isinstance(self.n_channels, int) or self.n_channels < 1:
            raise ConfigurationError(
                f"Expected a positive number of channels, found {self.n_channels!r}."
            )
        validate_choice(self.reduction, DEPTH_REDUCTIONS, "reduction")


def mip(stack: ImageStack) -> RgbProjection:
    """
    Maximum intensity projection, replicated into the three RGB channels.
    """
    if not isinstance(stack, ImageStack):
        raise TypeError(f"Expected ImageStack, found {type(stack)}.")
    projected = stack.voxels.max(axis=0).astype(np.float64)
    return RgbProjection(np.repeat(normalize_unit(projected)[np.newaxis], 3, axis=0))


def gaussian_weights(depth: int, n_channels: int) -> np.ndarray:
    """
    The `n_channels x depth` matrix of Gaussian depth weights.

    Channel means are equally spaced on `[0, depth-1]` and all channels share
    the standard deviation for which adjacent Gaussians cross at half
    maximum, midway between their peaks. Each row peaks at value 1.
    A single channel weighs all slices equally.
    """
    if not isinstance(depth, int) or depth < 1:
        raise ConfigurationError(f"Expected a positive depth, found {depth!r}.")
    if not isinstance(n_channels, int) or n_channels < 1:
        raise ConfigurationError(f"Expected a positive channel count, found {n_channels!r}.")
    if n_channels > depth:
        raise ConfigurationError(
            f"Cannot embed {depth} slices into {n_channels} depth channels."
        )
    if n_channels == 1:
        return np.ones((1, depth))
    spacing = (depth - 1) / (n_channels - 1)
    sigma = spacing / FWHM_PER_SIGMA
    mus = np.arange(n_channels) * spacing
    z = np.arange(depth, dtype=np.float64)
    return np.exp(-((z[np.newaxis, :] - mus[:, np.newaxis]) ** 2) / (2 * sigma**2))


def depth_embed_channels(
    stack: ImageStack, n_channels: int, reduction: DepthReduction = "max"
) -> np.ndarray:
    """
    Unnormalized `n_channels x H x W` depth embedding: channel `c` is the
    reduction over z of the slices weighted by `gaussian_weights(Z, n)[c]`.
    """
    validate_choice(reduction, DEPTH_REDUCTIONS, "reduction")
    weights = gaussian_weights(stack.depth, n_channels)
    voxels = stack.voxels
    if reduction == "sum":
        return np.tensordot(weights, voxels.astype(np.float64), axes=(1, 0))
    out = np.full((n_channels, stack.height, stack.width), -np.inf)
    for z in range(stack.depth):
        plane = voxels[z].astype(np.float64)
        for c in range(n_channels):
            np.maximum(out[c], weights[c, z] * plane, out=out[c])
    return out


def linear_depth_embed(
    stack: ImageStack, config: DepthEmbedConfig = DepthEmbedConfig()
) -> RgbProjection:
    """
    Linear depth embedding packed into RGB, low z in red and high z in blue.
    One channel is replicated to gray, two channels fill red and green.
    """
    if not isinstance(config, DepthEmbedConfig):
        raise TypeError(f"Expected DepthEmbedConfig, found {type(config)}.")
    if config.n_channels > 3:
        raise ConfigurationError(
            f"An RGB projection holds at most 3 depth channels, found {config.n_channels}."
        )
    channels = depth_embed_channels(stack, config.n_channels, config.reduction)
    if config.n_channels == 1:
        rgb = np.repeat(channels, 3, axis=0)
    elif config.n_channels == 2:
        rgb = np.concatenate([channels, np.zeros_like(channels[:1])], axis=0)
    else:
        rgb = channels
    return RgbProjection(normalize_unit(rgb))
