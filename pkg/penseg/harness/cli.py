"""
    Command-line interface: `python -m penseg <command> ...`.
"""

import argparse
import json
import logging
import sys
from typing import Any, Dict, Optional, Sequence

from penseg.annotations import load_annotations, load_detections, save_detections
from penseg.harness.config import SynthConfig, TrainConfig, load_config
from penseg.harness.dataset import load_dataset, save_dataset
from penseg.harness.evaluation import evaluate, evaluate_detections, predict, project_stack
from penseg.harness.experiments import VARIANTS, compare_variants
from penseg.harness.rendering import render_detections, render_projection
from penseg.harness.tiling import infer_large
from penseg.harness.training import TrainedModel, TrainingLoggers, train
from penseg.metrics import ELIGIBILITY_RULES
from penseg.projections import linear_depth_embed, mip
from penseg.stacks import load_stack
from penseg.synthgen import overlap_statistics, scene_series

logger = logging.getLogger("penseg")


def training_loggers(log: logging.Logger = logger) -> TrainingLoggers:
    """
    Training loggers writing to a standard library logger: iterations at
    DEBUG level, epochs and the final selection at INFO level.
    """

    def log_start(num_iters: int):
        log.info("Training for %d iterations", num_iters)

    def log_iter(it: int, losses: Dict[str, float], grad_norm: float):
        log.debug(
            "Iter #%d: total=%.4f bce=%.4f mse=%.4f dice=%.4f |g|=%.3f",
            it,
            losses["total"],
            losses["bce"],
            losses["mse"],
            losses["dice"],
            grad_norm,
        )

    def log_epoch(epoch: int, val_total: float, is_best: bool):
        log.info("Epoch #%d: validation loss %.4f%s", epoch, val_total, " (best)" if is_best else "")

    def log_end(best_epoch: int, best_val_total: float):
        log.info("Selected epoch #%d with validation loss %.4f", best_epoch, best_val_total)

    return {
        "log_start": log_start,
        "log_iter": log_iter,
        "log_epoch": log_epoch,
        "log_end": log_end,
    }


def _write_json(doc: Any, path: Optional[str]) -> None:
    text = json.dumps(doc, sort_keys=True, indent=1)
    if path is None:
        sys.stdout.write(text + "\n")
        return
    with open(path, "w", encoding="utf-8") as f:
        f.write(text + "\n")


def _cmd_synth(args: argparse.Namespace) -> None:
    config = load_config(SynthConfig, args.config) if args.config else SynthConfig()
    dataset = scene_series(config.scene, config.n_stacks)
    names = save_dataset(dataset, args.out)
    for name, (_, annotations) in zip(names, dataset):
        stats = overlap_statistics(annotations)
        logger.info(
            "%s: %d cells, overlap fraction %.3f, %d overlapping pairs (mean IoU %.3f)",
            name,
            len(annotations),
            stats.fraction,
            stats.n_pairs,
            stats.mean_pair_iou,
        )


def _cmd_train(args: argparse.Namespace) -> None:
    config = load_config(TrainConfig, args.config) if args.config else TrainConfig()
    if args.desk_scale:
        config = config.desk_scale()
    dataset = load_dataset(args.data)
    val_dataset = load_dataset(args.val_data) if args.val_data else None
    model = train(config, dataset, val_dataset, loggers=training_loggers())
    model.save(args.out)
    logger.info("Model saved to %s", args.out)


def _cmd_eval(args: argparse.Namespace) -> None:
    model = TrainedModel.load(args.model)
    report = evaluate(model, load_dataset(args.data), args.iou, args.eligibility)
    _write_json(report.as_dict, args.out)


def _cmd_project(args: argparse.Namespace) -> None:
    stack = load_stack(args.stack)
    if args.model is not None:
        model = TrainedModel.load(args.model)
        image = project_stack(model, stack)
    elif args.mode == "mip":
        image = mip(stack)
    else:
        image = linear_depth_embed(stack)
    if args.overlay:
        if args.model is None:
            raise ValueError("Detection overlays require --model.")
        render_detections(image, predict(model, stack), args.out)
    else:
        render_projection(image, args.out)


def _cmd_infer(args: argparse.Namespace) -> None:
    model = TrainedModel.load(args.model)
    stack = load_stack(args.stack)
    detections = infer_large(model, stack, args.tile, args.overlap)
    save_detections(detections, args.out, depth=model.config.head.n_out)
    logger.info("%d detections written to %s", len(detections), args.out)


def _cmd_metrics(args: argparse.Namespace) -> None:
    gt = load_annotations(args.gt)
    pred = load_detections(args.pred)
    if gt.dims[1:] != pred.frame:
        raise ValueError(f"Image sizes differ: {gt.dims[1:]} vs {pred.frame}.")
    report = evaluate_detections([(gt, pred)], args.iou, args.eligibility)
    _write_json(report.as_dict, args.out)


def _cmd_ablate(args: argparse.Namespace) -> None:
    config = load_config(TrainConfig, args.config) if args.config else TrainConfig()
    if args.desk_scale:
        config = config.desk_scale()
    train_set = load_dataset(args.data)
    test_set = load_dataset(args.test_data) if args.test_data else train_set
    results = compare_variants(
        config, train_set, test_set, args.variants, args.seeds, args.iou, training_loggers()
    )
    _write_json(results, args.out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="penseg",
        description="Projection enhancement and multi-channel segmentation of z-stacks.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log every iteration")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", help="flat YAML synthesis config")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train a projection and segmentation head")
    p.add_argument("--config", help="flat YAML training config")
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--val-data", help="validation dataset directory (default: --data)")
    p.add_argument("--out", required=True, help="output model directory")
    p.add_argument("--desk-scale", action="store_true", help="use the reduced CPU budget")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a model on a dataset")
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--iou", type=float, default=0.5, help="IoU threshold")
    p.add_argument("--eligibility", choices=ELIGIBILITY_RULES, default=ELIGIBILITY_RULES[0])
    p.add_argument("--out", help="report path (default: stdout)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("project", help="render the projection of a stack as PNG")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--model", help="model directory")
    source.add_argument("--mode", choices=("mip", "linear"), help="fixed projection")
    p.add_argument("--stack", required=True, help="input (OME-)TIFF stack")
    p.add_argument("--out", required=True, help="output PNG")
    p.add_argument("--overlay", action="store_true", help="draw predicted detections")
    p.set_defaults(func=_cmd_project)

    p = sub.add_parser("infer", help="tiled detection on a large stack")
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--stack", required=True, help="input (OME-)TIFF stack")
    p.add_argument("--tile", type=int, default=512)
    p.add_argument("--overlap", type=int, default=64)
    p.add_argument("--out", required=True, help="output detection JSON")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("metrics", help="score predicted against ground-truth annotations")
    p.add_argument("--gt", required=True, help="ground-truth annotation JSON")
    p.add_argument("--pred", required=True, help="predicted detection JSON")
    p.add_argument("--iou", type=float, default=0.5, help="IoU threshold")
    p.add_argument("--eligibility", choices=ELIGIBILITY_RULES, default=ELIGIBILITY_RULES[0])
    p.add_argument("--out", help="report path (default: stdout)")
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("ablate", help="train and compare named variants over seeds")
    p.add_argument("--config", help="flat YAML base training config")
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--test-data", help="test dataset directory (default: --data)")
    p.add_argument("--variants", nargs="+", choices=sorted(VARIANTS), default=["pen", "mip"])
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--iou", type=float, default=0.5, help="IoU threshold")
    p.add_argument("--desk-scale", action="store_true", help="use the reduced CPU budget")
    p.add_argument("--out", help="results path (default: stdout)")
    p.set_defaults(func=_cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s: %(message)s",
    )
    try:
        args.func(args)
    except (FileNotFoundError, ValueError, RuntimeError) as e:
        logger.error("%s", e)
        return 1
    return 0
