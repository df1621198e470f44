"""
    The projection enhancement network (PEN): a shallow multi-branch 3D
    convolutional module compressing a z-stack into a 3-channel image,
    trained only through the loss of the segmentation head it feeds.
"""

from dataclasses import dataclass
from typing import Dict, Final, Literal, Sequence, Tuple

import numpy as np
import numpy.typing as npt
import torch
from torch import nn

from penseg.stacks import ImageStack, RgbProjection
from penseg.utils import ConfigurationError, validate_choice

PenVariant = Literal["base", "branch_max", "collect_max"]

PEN_VARIANTS: Final[Sequence[str]] = ("base", "branch_max", "collect_max")


@dataclass(frozen=True)
class PenConfig:
    """
    Architecture of a PEN module.

    - `kernel_sizes`: cubic kernel sizes of the branches (odd integers);
    - `z_in`: fixed input depth, shorter stacks are zero-padded to it;
    - `variant`: `"branch_max"` pools each branch axially by max instead of
      a learned convolution, `"collect_max"` merges the branches by max;
    - `dropped_kernels`: branches removed for ablation.
    """

    kernel_sizes: Tuple[int, ...] = (1, 3, 5, 7, 11)
    branch_channels: int = 3
    z_in: int = 27
    out_channels: int = 3
    variant: PenVariant = "base"
    dropped_kernels: Tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        object.__setattr__(
            self, "dropped_kernels", tuple(int(k) for k in self.dropped_kernels)
        )
        validate_choice(self.variant, PEN_VARIANTS, "PEN variant")
        if not isinstance(self.z_in, int) or self.z_in < 1:
            raise ConfigurationError(f"Expected positive z_in, found {self.z_in!r}.")
        if self.out_channels != 3:
            raise ConfigurationError(
                f"PEN must emit 3 channels, found out_channels={self.out_channels}."
            )
        if not isinstance(self.branch_channels, int) or self.branch_channels < 1:
            raise ConfigurationError(
                f"Expected positive branch_channels, found {self.branch_channels!r}."
            )
        if len(set(self.kernel_sizes)) != len(self.kernel_sizes):
            raise ConfigurationError(f"Duplicate kernel sizes in {self.kernel_sizes}.")
        for k in self.kernel_sizes:
            if k < 1 or k % 2 == 0:
                raise ConfigurationError(f"Kernel sizes must be odd and positive, found {k}.")
            if k > self.z_in:
                raise ConfigurationError(f"Kernel size {k} exceeds input depth {self.z_in}.")
        for k in self.dropped_kernels:
            if k not in self.kernel_sizes:
                raise ConfigurationError(f"Dropped kernel {k} is not one of {self.kernel_sizes}.")
        if not self.active_kernels:
            raise ConfigurationError("No PEN branch left after dropping kernels.")

    @property
    def active_kernels(self) -> Tuple[int, ...]:
        return tuple(k for k in self.kernel_sizes if k not in self.dropped_kernels)


class PenBranch(nn.Module):
    """
    One PEN branch: a cubic `K x K x K` convolution (valid along z, same
    laterally), ReLU, batch norm, then an axial pool to a single plane.
    """

    def __init__(self, kernel_size: int, z_in: int, channels: int, pool_by_max: bool):
        super().__init__()
        k = kernel_size
        self.kernel_size = k
        self.conv = nn.Conv3d(
            1, channels, (k, k, k), padding=(0, k // 2, k // 2), padding_mode="replicate"
        )
        self.bn = nn.BatchNorm3d(channels)
        self.pool = None if pool_by_max else nn.Conv3d(channels, channels, (z_in - k + 1, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.bn(torch.relu(self.conv(x)))
        if self.pool is None:
            return y.amax(dim=2)
        return self.pool(y).squeeze(2)


class PenCollect(nn.Module):
    """
    Merges the stacked branch outputs `(B, C, N, H, W)` into `(B, C, H, W)`.
    """

    def __init__(self, n_branches: int, channels: int, collect_by_max: bool):
        super().__init__()
        self.conv = None if collect_by_max else nn.Conv3d(channels, channels, (n_branches, 1, 1))
        self.bn = nn.BatchNorm3d(channels)

    def forward(self, stacked: torch.Tensor) -> torch.Tensor:
        if self.conv is None:
            merged = stacked.amax(dim=2, keepdim=True)
        else:
            merged = self.conv(stacked)
        return self.bn(torch.relu(merged)).squeeze(2)


class PenModel(nn.Module):
    """
    The PEN module. Input `(B, 1, z_in, H, W)`, output `(B, 3, H, W)` with
    every sample min-max normalized to `[0, 1]`.

    Branch submodules are registered as `branch{K}`, so that parameter names
    read `branch{K}.conv.weight`, `branch{K}.bn.running_mean`,
    `collect.conv.weight` and so on.
    """

    config: PenConfig

    def __init__(self, config: PenConfig = PenConfig()):
        super().__init__()
        if not isinstance(config, PenConfig):
            raise TypeError(f"Expected PenConfig, found {type(config)}.")
        self.config = config
        c = config.branch_channels
        for k in config.active_kernels:
            self.add_module(
                f"branch{k}", PenBranch(k, config.z_in, c, config.variant == "branch_max")
            )
        self.collect = PenCollect(
            len(config.active_kernels), c, config.variant == "collect_max"
        )

    @property
    def branches(self) -> Tuple[PenBranch, ...]:
        return tuple(getattr(self, f"branch{k}") for k in self.config.active_kernels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 4:
            x = x.unsqueeze(1)
        if x.dim() != 5 or x.shape[1] != 1 or x.shape[2] != self.config.z_in:
            raise ConfigurationError(
                f"Expected input (B, 1, {self.config.z_in}, H, W), found {tuple(x.shape)}."
            )
        stacked = torch.stack([branch(x) for branch in self.branches], dim=2)
        return normalize_batch(self.collect(stacked))

    @property
    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def normalize_batch(x: torch.Tensor) -> torch.Tensor:
    """
    Differentiable per-sample min-max normalization of a `(B, ...)` tensor
    over all non-batch dimensions jointly; constant samples map to zeros.
    """
    flat = x.flatten(1)
    lo = flat.min(dim=1).values
    hi = flat.max(dim=1).values
    span = hi - lo
    shape = (-1,) + (1,) * (x.dim() - 1)
    safe = torch.where(span > 0, span, torch.ones_like(span)).view(shape)
    out = (x - lo.view(shape)) / safe
    return torch.where((span > 0).view(shape), out, torch.zeros_like(out))


def pen_init(config: PenConfig = PenConfig(), seed: int = 0) -> PenModel:
    """
    A freshly initialized PEN: fan-in scaled uniform weights and biases,
    batch norm with unit scale, zero shift and unit running variance.
    Deterministic under `seed`; the global torch RNG state is left untouched.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = PenModel(config)
    return model


def stack_tensor(stack: ImageStack, z_in: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """
    The `(1, 1, z_in, H, W)` input tensor of a stack, centre-padded along z.
    """
    if stack.depth > z_in:
        raise ConfigurationError(f"Stack depth {stack.depth} exceeds PEN input depth {z_in}.")
    padded = stack.center_padded(z_in).voxels
    return torch.as_tensor(np.array(padded), dtype=dtype)[None, None]


def _param_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def pen_forward(model: PenModel, stack: ImageStack) -> RgbProjection:
    """
    Projects a stack through the PEN in its current mode (running batch-norm
    statistics in eval mode, batch statistics in train mode).
    """
    if not isinstance(model, PenModel):
        raise TypeError(f"Expected PenModel, found {type(model)}.")
    x = stack_tensor(stack, model.config.z_in, _param_dtype(model))
    with torch.no_grad():
        out = model(x)[0]
    return RgbProjection(out.double().numpy())


def pen_gradients(
    model: PenModel, stack: ImageStack, upstream_grad: npt.ArrayLike
) -> Dict[str, np.ndarray]:
    """
    Gradients of `sum(upstream_grad * pen_forward(model, stack))` with respect
    to every parameter of the model, keyed by parameter name. The model must
    be in train mode; its batch-norm running statistics are updated.
    """
    if not isinstance(model, PenModel):
        raise TypeError(f"Expected PenModel, found {type(model)}.")
    if not model.training:
        raise RuntimeError("PEN gradients require a model in train mode.")
    dtype = _param_dtype(model)
    x = stack_tensor(stack, model.config.z_in, dtype)
    upstream = torch.as_tensor(np.asarray(upstream_grad), dtype=dtype)
    if upstream.shape != (3, stack.height, stack.width):
        raise ValueError(
            f"Expected upstream gradient of shape {(3, stack.height, stack.width)}, "
            f"found {tuple(upstream.shape)}."
        )
    model.zero_grad(set_to_none=True)
    out = model(x)
    out.backward(upstream[None])
    grads = {}
    for name, param in model.named_parameters():
        grad = param.grad
        grads[name] = (
            np.zeros(tuple(param.shape)) if grad is None else grad.detach().double().numpy().copy()
        )
    model.zero_grad(set_to_none=True)
    return grads


def pen_state_arrays(model: PenModel) -> Dict[str, np.ndarray]:
    """
    Parameters and batch-norm buffers as named numpy arrays.
    """
    return {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def load_pen_state(config: PenConfig, arrays: Dict[str, np.ndarray]) -> PenModel:
    """
    Rebuilds a PEN from the arrays written by `pen_state_arrays`.
    """
    model = PenModel(config)
    expected = set(model.state_dict())
    if set(arrays) != expected:
        raise ConfigurationError(
            f"PEN state keys do not match config: missing {sorted(expected - set(arrays))}, "
            f"unexpected {sorted(set(arrays) - expected)}."
        )
    model.load_state_dict({k: torch.as_tensor(v) for k, v in arrays.items()})
    return model
