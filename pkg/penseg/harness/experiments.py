"""
    Named training variants for ablations, their comparison over seeds,
    and the depth-encoding check of trained PEN projections.
"""

import dataclasses
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from penseg.annotations import AnnotationSet
from penseg.harness.config import TrainConfig
from penseg.harness.evaluation import evaluate, project_stack
from penseg.harness.training import TrainedModel, TrainingLoggers, train
from penseg.stacks import ImageStack
from penseg.utils import ConfigurationError

Dataset = Sequence[Tuple[ImageStack, AnnotationSet]]


def _drop_kernel(k: int) -> Callable[[TrainConfig], TrainConfig]:
    def variant(config: TrainConfig) -> TrainConfig:
        return dataclasses.replace(
            config,
            input_mode="pen",
            pen=dataclasses.replace(config.pen, dropped_kernels=(k,)),
        )

    return variant


VARIANTS: Mapping[str, Callable[[TrainConfig], TrainConfig]] = {
    "pen": lambda c: dataclasses.replace(c, input_mode="pen"),
    "mip": lambda c: dataclasses.replace(c, input_mode="mip"),
    "linear": lambda c: dataclasses.replace(c, input_mode="linear"),
    "minus_k1": _drop_kernel(1),
    "minus_k11": _drop_kernel(11),
    "branch_max": lambda c: dataclasses.replace(
        c, input_mode="pen", pen=dataclasses.replace(c.pen, variant="branch_max")
    ),
    "collect_max": lambda c: dataclasses.replace(
        c, input_mode="pen", pen=dataclasses.replace(c.pen, variant="collect_max")
    ),
    "random_gt": lambda c: dataclasses.replace(
        c, input_mode="pen", head=dataclasses.replace(c.head, gt_assignment="random")
    ),
    "n_out_1": lambda c: dataclasses.replace(
        c, input_mode="pen", head=dataclasses.replace(c.head, n_out=1, gt_assignment="single")
    ),
    "no_aug": lambda c: dataclasses.replace(
        c, input_mode="pen", augment=dataclasses.replace(c.augment, n_copies=0)
    ),
}
"""
    Training variants by name, each a transformation of a base config:
    input projections (`pen`, `mip`, `linear`), PEN ablations (`minus_k1`,
    `minus_k11`, `branch_max`, `collect_max`), head ablations (`random_gt`,
    `n_out_1`) and training without density augmentation (`no_aug`).
"""


def variant_config(config: TrainConfig, name: str) -> TrainConfig:
    if name not in VARIANTS:
        raise ConfigurationError(
            f"Unknown variant {name!r}, available variants are: {list(VARIANTS)}"
        )
    return VARIANTS[name](config)


def depth_encoding_correlation(model: TrainedModel, dataset: Dataset) -> float:
    """
    Spearman rank correlation between the ground-truth z-centroid of each
    cell and the argmax channel of the model's mean projected colour inside
    the cell's mask, over all cells of the dataset. Returns 0 when the
    correlation is undefined (e.g. a constant channel for every cell).
    """
    # pylint: disable = import-outside-toplevel
    from scipy.stats import spearmanr  # type: ignore

    zs: List[float] = []
    channels: List[int] = []
    for stack, annotations in dataset:
        image = project_stack(model, stack).pixels
        for cell in annotations:
            colour = image[:, cell.mask].mean(axis=1)
            zs.append(cell.z_centroid)
            channels.append(int(np.argmax(colour)))
    if len(zs) < 2 or len(set(channels)) < 2 or len(set(zs)) < 2:
        return 0.0
    rho = spearmanr(zs, channels).correlation
    return float(rho) if np.isfinite(rho) else 0.0


def compare_variants(
    config: TrainConfig,
    train_set: Dataset,
    test_set: Dataset,
    variants: Sequence[str],
    seeds: Sequence[int],
    threshold: float = 0.5,
    loggers: Optional[TrainingLoggers] = None,
) -> Dict[str, List[Dict[str, float]]]:
    """
    Trains every variant once per seed and evaluates on the test set.
    Returns, per variant, one row per seed with the metrics and, for PEN
    variants, the depth-encoding correlation.
    """
    results: Dict[str, List[Dict[str, float]]] = {}
    for name in variants:
        rows = []
        for seed in seeds:
            cfg = dataclasses.replace(variant_config(config, name), seed=seed)
            model = train(cfg, train_set, loggers=loggers or {})
            row: Dict[str, float] = {"seed": seed}
            row.update(evaluate(model, test_set, threshold).as_dict)
            if cfg.input_mode == "pen":
                row["depth_correlation"] = depth_encoding_correlation(model, test_set)
            rows.append(row)
        results[name] = rows
    return results
