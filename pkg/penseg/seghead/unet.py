"""
    A small 2D U-Net predicting, for each of `n_out` channels, cell
    probability logits, edge logits and a 2D flow field.
"""

from typing import Dict, List, Tuple

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from penseg.seghead.config import HeadConfig
from penseg.stacks import RgbProjection
from penseg.utils import ConfigurationError


class ConvBlock(nn.Sequential):
    """
    Two 3x3 convolutions, each followed by batch norm and ReLU.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, 3, padding=1),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 3, padding=1),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )


class HeadModel(nn.Module):
    """
    U-Net with `unet_levels` downsampling steps, channel widths doubling
    from `unet_base_width`, skip connections by concatenation and a final
    1x1 convolution emitting `4 n_out` maps ordered
    `[cellprob, edge, flow_y, flow_x]`, each block holding `n_out` channels.
    """

    config: HeadConfig

    def __init__(self, config: HeadConfig = HeadConfig(), in_channels: int = 3):
        super().__init__()
        if not isinstance(config, HeadConfig):
            raise TypeError(f"Expected HeadConfig, found {type(config)}.")
        self.config = config
        widths = [config.unet_base_width * 2**i for i in range(config.unet_levels + 1)]
        self.down = nn.ModuleList()
        prev = in_channels
        for width in widths[:-1]:
            self.down.append(ConvBlock(prev, width))
            prev = width
        self.bottom = ConvBlock(widths[-2], widths[-1])
        self.up = nn.ModuleList(
            ConvBlock(widths[i + 1] + widths[i], widths[i])
            for i in reversed(range(config.unet_levels))
        )
        self.output = nn.Conv2d(widths[0], 4 * config.n_out, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        stride = self.config.stride
        if x.shape[-2] % stride or x.shape[-1] % stride:
            raise ConfigurationError(
                f"Lateral size {tuple(x.shape[-2:])} is not divisible by {stride}."
            )
        skips: List[torch.Tensor] = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottom(x)
        for block, skip in zip(self.up, reversed(skips)):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(torch.cat([x, skip], dim=1))
        return self.output(x)


def head_init(config: HeadConfig = HeadConfig(), seed: int = 0) -> HeadModel:
    """
    A freshly initialized head, deterministic under `seed`.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = HeadModel(config)
    return model


class SegPrediction:
    """
    Raw head output for one image: per-channel cell probability logits,
    edge logits and flows, each `(n_out, H, W)`.
    """

    _maps: np.ndarray

    def __init__(self, maps: np.ndarray):
        maps = np.asarray(maps, dtype=np.float64)
        if maps.ndim != 3 or maps.shape[0] % 4 or maps.shape[0] == 0:
            raise ValueError(f"Expected (4 n_out, H, W) maps, found {maps.shape}.")
        if not np.all(np.isfinite(maps)):
            raise ValueError("Prediction maps must be finite.")
        maps.setflags(write=False)
        self._maps = maps

    @staticmethod
    def from_parts(
        cellprob_logits: np.ndarray,
        edge_logits: np.ndarray,
        flow_y: np.ndarray,
        flow_x: np.ndarray,
    ) -> "SegPrediction":
        return SegPrediction(
            np.concatenate([cellprob_logits, edge_logits, flow_y, flow_x], axis=0)
        )

    @property
    def n_out(self) -> int:
        return self._maps.shape[0] // 4

    @property
    def shape(self) -> Tuple[int, int]:
        return self._maps.shape[1:]  # type: ignore[return-value]

    def _block(self, idx: int) -> np.ndarray:
        n = self.n_out
        return self._maps[idx * n : (idx + 1) * n]

    @property
    def cellprob_logits(self) -> np.ndarray:
        return self._block(0)

    @property
    def edge_logits(self) -> np.ndarray:
        return self._block(1)

    @property
    def flow_y(self) -> np.ndarray:
        return self._block(2)

    @property
    def flow_x(self) -> np.ndarray:
        return self._block(3)

    def as_maps(self) -> np.ndarray:
        return self._maps

    def __repr__(self) -> str:
        return f"SegPrediction(n_out={self.n_out}, shape={self.shape})"


def head_forward(model: HeadModel, image: RgbProjection) -> SegPrediction:
    """
    Runs the head on a single projection, without tracking gradients.
    """
    if not isinstance(model, HeadModel):
        raise TypeError(f"Expected HeadModel, found {type(model)}.")
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.array(image.pixels), dtype=dtype)[None]
    with torch.no_grad():
        maps = model(x)[0]
    return SegPrediction(maps.double().numpy())


def head_state_arrays(model: HeadModel) -> Dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def load_head_state(config: HeadConfig, arrays: Dict[str, np.ndarray]) -> HeadModel:
    """
    Rebuilds a head from the arrays written by `head_state_arrays`.
    """
    model = HeadModel(config)
    expected = set(model.state_dict())
    if set(arrays) != expected:
        raise ConfigurationError(
            f"Head state keys do not match config: missing {sorted(expected - set(arrays))}, "
            f"unexpected {sorted(set(arrays) - expected)}."
        )
    model.load_state_dict({k: torch.as_tensor(v) for k, v in arrays.items()})
    return model
