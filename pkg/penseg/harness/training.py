"""
    Joint training of the input projection (PEN, or a fixed MIP/linear
    projection) and the segmentation head, and persistence of trained models.
"""

import copy
import json
import os
from dataclasses import dataclass, field
from typing import (
    Any,
    Dict,
    List,
    Optional,
    Protocol,
    Sequence,
    Tuple,
    TypedDict,
    Union,
    runtime_checkable,
)

import numpy as np
import torch

from penseg.annotations import AnnotationSet
from penseg.augment import TrainingSample, batch_sample
from penseg.harness.config import TrainConfig, load_config, save_config
from penseg.pen import (
    PenModel,
    load_pen_state,
    pen_init,
    pen_state_arrays,
    stack_tensor,
)
from penseg.projections import linear_depth_embed, mip
from penseg.seghead import (
    HeadModel,
    LossBreakdown,
    head_init,
    head_state_arrays,
    load_head_state,
    seg_loss,
)
from penseg.stacks import ImageStack, RgbProjection
from penseg.utils import TrainingDivergedError, load_arrays, save_arrays


@runtime_checkable
class TrainStartLogger(Protocol):
    """
    Protocol for logging the start of training.
    """

    def __call__(self, num_iters: int):
        ...


@runtime_checkable
class TrainIterLogger(Protocol):
    """
    Protocol for logging of iteration info in training.
    """

    def __call__(self, it: int, losses: Dict[str, float], grad_norm: float):
        ...


@runtime_checkable
class TrainEpochLogger(Protocol):
    """
    Protocol for logging the validation loss at the end of an epoch.
    """

    def __call__(self, epoch: int, val_total: float, is_best: bool):
        ...


@runtime_checkable
class TrainEndLogger(Protocol):
    """
    Protocol for logging the selected epoch at the end of training.
    """

    def __call__(self, best_epoch: int, best_val_total: float):
        ...


class TrainingLoggers(TypedDict, total=False):
    """
    Typed dictionary of loggers for training.
    """

    log_start: TrainStartLogger
    log_iter: TrainIterLogger
    log_epoch: TrainEpochLogger
    log_end: TrainEndLogger


def _validate_loggers(
    loggers: TrainingLoggers,
) -> Tuple[
    Optional[TrainStartLogger],
    Optional[TrainIterLogger],
    Optional[TrainEpochLogger],
    Optional[TrainEndLogger],
]:
    expected = (
        ("log_start", TrainStartLogger),
        ("log_iter", TrainIterLogger),
        ("log_epoch", TrainEpochLogger),
        ("log_end", TrainEndLogger),
    )
    validated: List[Any] = []
    for key, protocol in expected:
        logger = loggers.get(key, None)
        if logger is not None and not isinstance(logger, protocol):
            raise TypeError(f"Expected {protocol.__name__}, found {type(logger)}")
        validated.append(logger)
    return validated[0], validated[1], validated[2], validated[3]


@dataclass
class TrainHistory:
    """
    Per-iteration training losses (with the clipped gradient norm),
    per-epoch validation totals and the selected epoch.
    """

    iterations: List[Dict[str, float]] = field(default_factory=list)
    val_totals: List[float] = field(default_factory=list)
    best_epoch: int = -1

    @property
    def as_dict(self) -> Dict[str, Any]:
        return {
            "iterations": self.iterations,
            "val_totals": self.val_totals,
            "best_epoch": self.best_epoch,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict, sort_keys=True, indent=1)

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> "TrainHistory":
        return TrainHistory(
            [dict(it) for it in data["iterations"]],
            [float(v) for v in data["val_totals"]],
            int(data["best_epoch"]),
        )


PathLike = Union[str, "os.PathLike[str]"]


class TrainedModel:
    """
    A projection (PEN for `input_mode="pen"`, nothing otherwise) together
    with a segmentation head and the config they were built from.
    """

    _config: TrainConfig
    _pen: Optional[PenModel]
    _head: HeadModel
    history: Optional[TrainHistory]

    def __init__(
        self,
        config: TrainConfig,
        pen: Optional[PenModel],
        head: HeadModel,
        history: Optional[TrainHistory] = None,
    ):
        if not isinstance(config, TrainConfig):
            raise TypeError(f"Expected TrainConfig, found {type(config)}.")
        if (config.input_mode == "pen") != (pen is not None):
            raise ValueError(
                f"A PEN module is required exactly when input_mode is 'pen', "
                f"found input_mode={config.input_mode!r}."
            )
        self._config = config
        self._pen = pen
        self._head = head
        self.history = history

    @staticmethod
    def initialize(config: TrainConfig) -> "TrainedModel":
        """
        Freshly initialized modules, deterministic under `config.seed`.
        """
        pen = pen_init(config.pen, config.seed) if config.input_mode == "pen" else None
        head = head_init(config.head, config.seed + 1)
        return TrainedModel(config, pen, head)

    @property
    def config(self) -> TrainConfig:
        return self._config

    @property
    def pen(self) -> Optional[PenModel]:
        return self._pen

    @property
    def head(self) -> HeadModel:
        return self._head

    def modules(self) -> List[torch.nn.Module]:
        return [m for m in (self._pen, self._head) if m is not None]

    def parameters(self) -> List[torch.nn.Parameter]:
        return [p for m in self.modules() for p in m.parameters()]

    def train(self, mode: bool = True) -> "TrainedModel":
        for m in self.modules():
            m.train(mode)
        return self

    def eval(self) -> "TrainedModel":
        return self.train(False)

    def project_batch(self, stacks: Sequence[ImageStack]) -> torch.Tensor:
        """
        `(B, 3, H, W)` projections of stacks already padded to `z_in`.
        Differentiable with respect to the PEN parameters in pen mode.
        """
        cfg = self._config
        if cfg.input_mode == "pen":
            assert self._pen is not None
            x = torch.cat([stack_tensor(s, cfg.pen.z_in) for s in stacks], dim=0)
            return self._pen(x)
        if cfg.input_mode == "mip":
            images = [mip(s).pixels for s in stacks]
        else:
            images = [linear_depth_embed(s, cfg.embed).pixels for s in stacks]
        return torch.as_tensor(np.stack(images), dtype=torch.float32)

    def project(self, stack: ImageStack) -> RgbProjection:
        """
        Projection of a single stack already padded to `z_in`, without gradients.
        """
        with torch.no_grad():
            out = self.project_batch([stack])[0]
        return RgbProjection(out.double().numpy())

    def save(self, directory: PathLike) -> None:
        """
        Writes `config.yaml`, `pen.npz` (pen mode only), `head.npz` and,
        when available, `history.json`.
        """
        directory = os.fspath(directory)
        os.makedirs(directory, exist_ok=True)
        save_config(self._config, os.path.join(directory, "config.yaml"))
        if self._pen is not None:
            save_arrays(os.path.join(directory, "pen.npz"), pen_state_arrays(self._pen))
        save_arrays(os.path.join(directory, "head.npz"), head_state_arrays(self._head))
        if self.history is not None:
            with open(os.path.join(directory, "history.json"), "w", encoding="utf-8") as f:
                f.write(self.history.to_json() + "\n")

    @staticmethod
    def load(directory: PathLike) -> "TrainedModel":
        """
        Loads a model directory written by `save`, in eval mode.
        """
        directory = os.fspath(directory)
        if not os.path.isdir(directory):
            raise FileNotFoundError(f"No such model directory: {directory}")
        config = load_config(TrainConfig, os.path.join(directory, "config.yaml"))
        pen = None
        if config.input_mode == "pen":
            pen = load_pen_state(config.pen, load_arrays(os.path.join(directory, "pen.npz")))
        head = load_head_state(config.head, load_arrays(os.path.join(directory, "head.npz")))
        history = None
        history_path = os.path.join(directory, "history.json")
        if os.path.isfile(history_path):
            with open(history_path, "r", encoding="utf-8") as f:
                history = TrainHistory.from_dict(json.load(f))
        return TrainedModel(config, pen, head, history).eval()

    def state_snapshot(self) -> List[Dict[str, torch.Tensor]]:
        return [copy.deepcopy(m.state_dict()) for m in self.modules()]

    def restore_snapshot(self, snapshot: List[Dict[str, torch.Tensor]]) -> None:
        for m, state in zip(self.modules(), snapshot):
            m.load_state_dict(state)


def _target_batch(samples: Sequence[TrainingSample]) -> torch.Tensor:
    return torch.as_tensor(
        np.stack([s.targets.as_maps() for s in samples]), dtype=torch.float32
    )


def batch_loss(model: TrainedModel, samples: Sequence[TrainingSample]) -> LossBreakdown:
    """
    Loss of the model's current mode on a batch of training samples.
    """
    maps = model.head(model.project_batch([s.stack for s in samples]))
    return seg_loss(maps, _target_batch(samples))


def validation_loss(
    model: TrainedModel, samples: Sequence[TrainingSample], batch_size: int
) -> float:
    """
    Mean total loss over validation samples, in eval mode.
    """
    model.eval()
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            batch = samples[start : start + batch_size]
            total += float(batch_loss(model, batch).total) * len(batch)
    return total / len(samples)


def validation_samples(
    config: TrainConfig, dataset: Sequence[Tuple[ImageStack, AnnotationSet]]
) -> List[TrainingSample]:
    """
    The fixed validation set of a training run: `config.val_size` augmented
    samples from a stream seeded by `config.seed` only.
    """
    if not dataset:
        raise ValueError("Cannot validate on an empty dataset.")
    rng = np.random.default_rng([config.seed, 1])
    return [
        batch_sample(dataset, config.augment, config.head, rng) for _ in range(config.val_size)
    ]


def _grad_norm(params: Sequence[torch.nn.Parameter]) -> float:
    norms = [torch.linalg.vector_norm(p.grad.detach()) for p in params if p.grad is not None]
    if not norms:
        return 0.0
    return float(torch.linalg.vector_norm(torch.stack(norms)))


def train(
    config: TrainConfig,
    dataset: Sequence[Tuple[ImageStack, AnnotationSet]],
    val_dataset: Optional[Sequence[Tuple[ImageStack, AnnotationSet]]] = None,
    loggers: TrainingLoggers = {},
) -> TrainedModel:
    # pylint: disable = dangerous-default-value, too-many-locals
    """
    Trains projection and head jointly by SGD with momentum, weight decay
    and global gradient-norm clipping, on density-augmented samples drawn
    from `dataset`. PEN parameters only receive gradients through the
    segmentation loss.

    The validation set is `config.val_size` samples drawn once, with the
    same augmentation, from `val_dataset` (default: `dataset`). After each
    epoch the validation total loss is computed in eval mode; the returned
    model holds the weights of the best epoch and the training history.
    Raises `TrainingDivergedError` on a non-finite loss.
    """
    if not isinstance(config, TrainConfig):
        raise TypeError(f"Expected TrainConfig, found {type(config)}.")
    if not dataset:
        raise ValueError("Cannot train on an empty dataset.")
    log_start, log_iter, log_epoch, log_end = _validate_loggers(loggers)
    sample_rng = np.random.default_rng([config.seed, 0])
    val_samples = validation_samples(config, dataset if val_dataset is None else val_dataset)
    model = TrainedModel.initialize(config)
    params = model.parameters()
    optimizer = torch.optim.SGD(
        params, lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay
    )
    history = TrainHistory()
    best_snapshot = model.state_snapshot()
    best_val = float("inf")
    num_iters = config.epochs * config.iters_per_epoch
    if log_start is not None:
        log_start(num_iters)
    it = 0
    for epoch in range(config.epochs):
        model.train()
        for _ in range(config.iters_per_epoch):
            samples = [
                batch_sample(dataset, config.augment, config.head, sample_rng)
                for _ in range(config.batch_size)
            ]
            losses = batch_loss(model, samples)
            if not torch.isfinite(losses.total):
                raise TrainingDivergedError(it)
            optimizer.zero_grad(set_to_none=True)
            losses.total.backward()
            torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            grad_norm = _grad_norm(params)
            optimizer.step()
            record = losses.as_floats()
            record["grad_norm"] = grad_norm
            history.iterations.append(record)
            if log_iter is not None:
                log_iter(it, record, grad_norm)
            it += 1
        val_total = validation_loss(model, val_samples, config.batch_size)
        if not np.isfinite(val_total):
            raise TrainingDivergedError(it - 1)
        history.val_totals.append(val_total)
        is_best = val_total < best_val
        if is_best:
            best_val = val_total
            history.best_epoch = epoch
            best_snapshot = model.state_snapshot()
        if log_epoch is not None:
            log_epoch(epoch, val_total, is_best)
    model.restore_snapshot(best_snapshot)
    model.history = history
    model.eval()
    if log_end is not None:
        log_end(history.best_epoch, best_val)
    return model
