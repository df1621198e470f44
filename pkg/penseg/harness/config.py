"""
    Training and synthesis configurations, and their flat YAML files.

    Nested configurations are flattened to dotted keys, e.g.
    `pen.kernel_sizes`, `head.n_out` or `scene.geometry.dz_um`.
"""

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Final, Literal, Sequence, Type, TypeVar, Union

import yaml  # type: ignore

from penseg.augment import AugmentConfig
from penseg.pen import PenConfig
from penseg.projections import DepthEmbedConfig
from penseg.seghead import HeadConfig
from penseg.synthgen import SceneConfig
from penseg.utils import ConfigurationError, validate_choice

InputMode = Literal["pen", "mip", "linear"]

INPUT_MODES: Final[Sequence[str]] = ("pen", "mip", "linear")


@dataclass(frozen=True)
class TrainConfig:
    """
    Joint training of the input projection and the segmentation head.
    Defaults are the full training recipe; see `desk_scale` for the reduced
    budget used on a single CPU.
    """

    input_mode: InputMode = "pen"
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-5
    grad_clip: float = 5.0
    batch_size: int = 8
    epochs: int = 50
    iters_per_epoch: int = 50
    val_size: int = 100
    seed: int = 0
    pen: PenConfig = field(default_factory=PenConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    embed: DepthEmbedConfig = field(default_factory=DepthEmbedConfig)

    def __post_init__(self):
        validate_choice(self.input_mode, INPUT_MODES, "input mode")
        for name in ("lr", "momentum", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"Expected {name} >= 0, found {getattr(self, name)}.")
        if self.grad_clip <= 0:
            raise ConfigurationError(f"Expected grad_clip > 0, found {self.grad_clip}.")
        for name in ("batch_size", "epochs", "iters_per_epoch", "val_size"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigurationError(f"Expected positive integer {name}, found {value!r}.")
        if self.pen.z_in != self.augment.z_in:
            raise ConfigurationError(
                f"PEN input depth {self.pen.z_in} differs from augmentation "
                f"depth {self.augment.z_in}."
            )
        if self.augment.crop_hw % self.head.stride:
            raise ConfigurationError(
                f"Crop size {self.augment.crop_hw} is not a multiple of the "
                f"U-Net stride {self.head.stride}."
            )

    @property
    def crop(self) -> int:
        return self.augment.crop_hw

    def desk_scale(self) -> "TrainConfig":
        """
        This config with the reduced single-CPU budget: 10 epochs of 50
        iterations, batch size 4, 128 x 128 crops and 16 validation samples.
        """
        return dataclasses.replace(
            self,
            epochs=10,
            iters_per_epoch=50,
            batch_size=4,
            val_size=16,
            augment=dataclasses.replace(self.augment, crop_hw=128),
        )


@dataclass(frozen=True)
class SynthConfig:
    """
    A synthetic dataset: `n_stacks` scenes from consecutive seeds.
    """

    n_stacks: int = 5
    scene: SceneConfig = field(default_factory=SceneConfig)

    def __post_init__(self):
        if not isinstance(self.n_stacks, int) or self.n_stacks < 1:
            raise ConfigurationError(f"Expected positive n_stacks, found {self.n_stacks!r}.")


C = TypeVar("C")


def flatten_config(config: Any, prefix: str = "") -> Dict[str, Any]:
    """
    Flat `{dotted.key: value}` view of a (nested) config dataclass,
    with tuples turned into lists.
    """
    flat: Dict[str, Any] = {}
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(value):
            flat.update(flatten_config(value, key + "."))
        elif isinstance(value, tuple):
            flat[key] = list(value)
        else:
            flat[key] = value
    return flat


def unflatten_config(cls: Type[C], flat: Dict[str, Any]) -> C:
    """
    Builds a config dataclass from dotted keys; unspecified fields keep
    their defaults, unknown keys are an error.
    """
    if not isinstance(flat, dict):
        raise ConfigurationError(f"Expected a key-value document, found {type(flat)}.")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    direct: Dict[str, Any] = {}
    nested: Dict[str, Dict[str, Any]] = {}
    for key, value in flat.items():
        head, _, rest = str(key).partition(".")
        if head not in fields:
            raise ConfigurationError(f"Unknown configuration key {key!r} for {cls.__name__}.")
        if rest:
            nested.setdefault(head, {})[rest] = value
        else:
            direct[head] = value
    kwargs: Dict[str, Any] = {}
    for name, f in fields.items():
        default = _default_of(f)
        if dataclasses.is_dataclass(default):
            if name in direct:
                raise ConfigurationError(f"Key {name!r} needs dotted sub-keys.")
            if name in nested:
                kwargs[name] = unflatten_config(type(default), nested[name])
        elif name in nested:
            raise ConfigurationError(f"Key {name!r} has no sub-keys.")
        elif name in direct:
            value = direct[name]
            kwargs[name] = tuple(value) if isinstance(value, list) else value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigurationError(f"Invalid {cls.__name__}: {e}") from e


def _default_of(f: "dataclasses.Field[Any]") -> Any:
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
        return f.default_factory()  # type: ignore[misc]
    return None


PathLike = Union[str, "os.PathLike[str]"]


def save_config(config: Any, path: PathLike) -> None:
    """
    Writes a config as a flat YAML document with sorted keys.
    """
    with open(os.fspath(path), "w", encoding="utf-8") as f:
        yaml.safe_dump(flatten_config(config), f, sort_keys=True, default_flow_style=None)


def load_config(cls: Type[C], path: PathLike) -> C:
    """
    Reads a flat YAML config document into the given config class.
    """
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise FileNotFoundError(f"No such config file: {path}")
    with open(path, "r", encoding="utf-8") as f:
        flat = yaml.safe_load(f) or {}
    return unflatten_config(cls, flat)
