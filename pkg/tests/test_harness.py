import dataclasses
import json
import os
import tempfile
import unittest
from unittest import mock

import numpy as np
import torch

from penseg.annotations import (
    Detection,
    DetectionSet,
    load_detections,
    save_annotations,
    save_detections,
)
from penseg.harness import (
    SynthConfig,
    TrainConfig,
    TrainedModel,
    compare_variants,
    depth_encoding_correlation,
    evaluate,
    evaluate_detections,
    infer_large,
    load_config,
    load_dataset,
    predict,
    save_config,
    save_dataset,
    train,
    variant_config,
)
from penseg.harness.cli import main
from penseg.harness.rendering import render_detections
from penseg.harness.tiling import merge_duplicates, tile_cores, tile_starts
from penseg.harness.training import validation_loss, validation_samples
from penseg.projections import linear_depth_embed, mip
from penseg.stacks import ImageStack, save_stack
from penseg.synthgen import gen_disk_stack
from penseg.utils import ConfigurationError
from tests.utils import COARSE_GEOMETRY, disk_mask, tiny_dataset, tiny_train_config


def _parameters(model: TrainedModel):
    return [p.detach().clone() for p in model.parameters()]


def _detection_keys(detections: DetectionSet):
    return sorted((d.channel, d.bbox, d.crop.tobytes()) for d in detections)


SMALL_CELL_CENTERS = [
    (20, 50), (20, 62), (50, 20), (56, 56), (60, 90), (86, 30),
    (90, 60), (110, 86), (56, 110), (30, 88), (100, 110), (75, 75),
]


def _small_cells(shift: int = 0, size: int = 128):
    """
    Disks of radius 4 around `SMALL_CELL_CENTERS`, several straddling the
    tile boundaries of a 64 px tiling with 16 px overlap.
    """
    return [disk_mask(size, size, cy + shift, cx + shift, 4) for cy, cx in SMALL_CELL_CENTERS]


def _ground_truth_predictor(masks, size: int, tile: int, overlap: int):
    """
    Stands in for `predict_prepared`: each window yields the ground-truth
    masks it sees, cut to the window. Windows arrive in row-major tile order.
    """
    cores = tile_cores(size, tile, overlap)
    origins = iter([(y0, x0) for y0, *_ in cores for x0, *_ in cores])

    def fake(_model, window):
        y0, x0 = next(origins)
        h, w = window.height, window.width
        crops = [m[y0 : y0 + h, x0 : x0 + w] for m in masks]
        return DetectionSet([Detection.from_mask(c) for c in crops if c.any()], (h, w))

    return fake


class TestTraining(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.dataset = tiny_dataset()
        cls.config = tiny_train_config()
        cls.model = train(cls.config, cls.dataset)

    def test_deterministic(self):
        again = train(self.config, self.dataset)
        self.assertEqual(self.model.history.as_dict, again.history.as_dict)
        for a, b in zip(_parameters(self.model), _parameters(again)):
            self.assertTrue(torch.equal(a, b))

    def test_history_contents(self):
        history = self.model.history
        self.assertEqual(len(history.iterations), 4)
        self.assertEqual(len(history.val_totals), 2)
        self.assertIn(history.best_epoch, (0, 1))
        self.assertEqual(history.val_totals[history.best_epoch], min(history.val_totals))
        for record in history.iterations:
            self.assertEqual(set(record), {"bce", "mse", "dice", "total", "grad_norm"})
            self.assertAlmostEqual(
                record["total"], record["bce"] + record["mse"] + record["dice"], places=5
            )

    def test_best_epoch_is_restored(self):
        samples = validation_samples(self.config, self.dataset)
        val = validation_loss(self.model, samples, self.config.batch_size)
        best = self.model.history.val_totals[self.model.history.best_epoch]
        self.assertAlmostEqual(val, best, places=5)

    def test_zero_learning_rate(self):
        config = tiny_train_config(lr=0.0, epochs=1)
        model = train(config, self.dataset)
        initial = TrainedModel.initialize(config)
        for a, b in zip(_parameters(model), _parameters(initial)):
            self.assertTrue(torch.equal(a, b))

    def test_gradient_clipping(self):
        model = train(tiny_train_config(grad_clip=1e-3, epochs=1), self.dataset)
        for record in model.history.iterations:
            self.assertLessEqual(record["grad_norm"], 1e-3 * (1 + 1e-4))

    def test_pen_receives_gradients(self):
        config = tiny_train_config(epochs=1, iters_per_epoch=1)
        model = train(config, self.dataset)
        initial = TrainedModel.initialize(config)
        self.assertTrue(
            any(
                not torch.equal(a, b)
                for a, b in zip(model.pen.parameters(), initial.pen.parameters())
            )
        )

    def test_fixed_projection_has_no_pen(self):
        config = tiny_train_config(input_mode="mip", epochs=1, iters_per_epoch=1)
        model = train(config, self.dataset)
        self.assertIsNone(model.pen)
        initial = TrainedModel.initialize(config)
        self.assertTrue(
            any(
                not torch.equal(a, b)
                for a, b in zip(model.head.parameters(), initial.head.parameters())
            )
        )

    def test_separate_validation_set(self):
        config = tiny_train_config(epochs=1)
        val_dataset = tiny_dataset(seed=10)
        model = train(config, self.dataset, val_dataset)
        samples = validation_samples(config, val_dataset)
        self.assertAlmostEqual(
            validation_loss(model, samples, config.batch_size),
            model.history.val_totals[0],
            places=5,
        )

    def test_loggers(self):
        events = []
        loggers = {
            "log_start": lambda num_iters: events.append(("start", num_iters)),
            "log_epoch": lambda epoch, val_total, is_best: events.append(("epoch", epoch)),
            "log_end": lambda best_epoch, best_val_total: events.append(("end", best_epoch)),
        }
        model = train(tiny_train_config(epochs=1), self.dataset, loggers=loggers)
        self.assertEqual(events, [("start", 2), ("epoch", 0), ("end", model.history.best_epoch)])

    def test_invalid_inputs(self):
        with self.assertRaises(ValueError):
            train(self.config, [])
        with self.assertRaises(TypeError):
            train(dataclasses.asdict(self.config), self.dataset)

    def test_save_and_load(self):
        stack, _ = self.dataset[0]
        with tempfile.TemporaryDirectory() as tmp:
            self.model.save(tmp)
            self.assertTrue(os.path.isfile(os.path.join(tmp, "pen.npz")))
            loaded = TrainedModel.load(tmp)
        self.assertEqual(loaded.config, self.config)
        self.assertEqual(loaded.history.as_dict, self.model.history.as_dict)
        np.testing.assert_array_equal(
            self.model.eval().project(stack.center_padded(9)).pixels,
            loaded.project(stack.center_padded(9)).pixels,
        )
        self.assertEqual(
            _detection_keys(predict(self.model, stack)), _detection_keys(predict(loaded, stack))
        )

    def test_missing_model_directory(self):
        with self.assertRaises(FileNotFoundError):
            TrainedModel.load(os.path.join(tempfile.gettempdir(), "penseg-missing-model"))


class TestConfig(unittest.TestCase):
    def test_round_trip(self):
        config = tiny_train_config(lr=0.005, weight_decay=1e-5)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "config.yaml")
            save_config(config, path)
            self.assertEqual(load_config(TrainConfig, path), config)

    def test_partial_document_keeps_defaults(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "config.yaml")
            with open(path, "w", encoding="utf-8") as f:
                f.write("epochs: 3\nhead.n_out: 2\n")
            config = load_config(TrainConfig, path)
        self.assertEqual((config.epochs, config.head.n_out), (3, 2))
        self.assertEqual(config.pen, TrainConfig().pen)

    def test_unknown_keys(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "config.yaml")
            for text in ("epoch: 3\n", "head.width: 3\n", "lr.value: 1\n", "pen: 3\n"):
                with open(path, "w", encoding="utf-8") as f:
                    f.write(text)
                with self.assertRaises(ConfigurationError, msg=text):
                    load_config(TrainConfig, path)

    def test_inconsistent_depths(self):
        with self.assertRaises(ConfigurationError):
            tiny_train_config(augment=dataclasses.replace(tiny_train_config().augment, z_in=11))

    def test_desk_scale(self):
        config = TrainConfig().desk_scale()
        self.assertEqual((config.epochs, config.batch_size, config.crop), (10, 4, 128))

    def test_variants(self):
        config = tiny_train_config()
        self.assertEqual(variant_config(config, "minus_k1").pen.dropped_kernels, (1,))
        self.assertEqual(variant_config(config, "mip").input_mode, "mip")
        single = variant_config(config, "n_out_1").head
        self.assertEqual((single.n_out, single.gt_assignment), (1, "single"))
        self.assertEqual(variant_config(config, "no_aug").augment.n_copies, 0)
        with self.assertRaises(ConfigurationError):
            variant_config(config, "minus_k11")
        with self.assertRaises(ConfigurationError):
            variant_config(config, "unknown")

    def test_compare_variants_rows(self):
        config = tiny_train_config(epochs=1, iters_per_epoch=1, val_size=1)
        test_set = tiny_dataset(1, seed=7)
        results = compare_variants(config, tiny_dataset(), test_set, ["pen", "mip"], [0, 1])
        self.assertEqual(sorted(results), ["mip", "pen"])
        self.assertEqual([row["seed"] for row in results["pen"]], [0, 1])
        self.assertIn("depth_correlation", results["pen"][0])
        self.assertNotIn("depth_correlation", results["mip"][0])
        for row in results["pen"] + results["mip"]:
            self.assertEqual(row["tp"] + row["fn"], 3)


class TestEvaluation(unittest.TestCase):
    def test_ground_truth_scores_perfectly(self):
        dataset = tiny_dataset()
        report = evaluate_detections(
            (annotations, DetectionSet.from_annotations(annotations)) for _, annotations in dataset
        )
        self.assertEqual(report.fp + report.fn, 0)
        self.assertEqual(report.tp, sum(len(a) for _, a in dataset))
        for value in (report.jaccard, report.precision, report.recall, report.quality):
            self.assertEqual(value, 1.0)

    def test_silent_head_recalls_nothing(self):
        model = TrainedModel.initialize(tiny_train_config())
        with torch.no_grad():
            model.head.output.weight.zero_()
            model.head.output.bias.fill_(-5.0)
        report = evaluate(model, tiny_dataset())
        self.assertEqual((report.tp, report.fp), (0, 0))
        self.assertEqual(report.recall, 0.0)

    def test_single_tile_matches_predict(self):
        model = TrainedModel.initialize(tiny_train_config())
        stack, _ = tiny_dataset(n_stacks=1)[0]
        self.assertEqual(
            _detection_keys(infer_large(model, stack, tile=64, overlap=0)),
            _detection_keys(predict(model, stack)),
        )

    def _tiled_ground_truth(self, masks, tile=64, overlap=16):
        size = masks[0].shape[0]
        model = TrainedModel.initialize(tiny_train_config())
        stack = ImageStack(np.zeros((5, size, size), dtype=np.float32))
        fake = _ground_truth_predictor(masks, size, tile, overlap)
        with mock.patch("penseg.harness.tiling.predict_prepared", fake):
            return infer_large(model, stack, tile=tile, overlap=overlap)

    def test_cells_across_tile_boundaries_are_found_once(self):
        masks = _small_cells()
        detections = self._tiled_ground_truth(masks)
        self.assertEqual(len(detections), len(masks))
        self.assertEqual(detections.frame, (128, 128))
        for mask in masks:
            source = Detection.from_mask(mask)
            self.assertEqual(max(d.iou(source) for d in detections), 1.0)

    def test_count_does_not_depend_on_tile_offset(self):
        counts = [len(self._tiled_ground_truth(_small_cells(shift))) for shift in range(8)]
        self.assertEqual(counts, [len(SMALL_CELL_CENTERS)] * 8)

    def test_duplicates_merge_across_tiles_only(self):
        small = Detection.from_mask(disk_mask(32, 32, 16, 16, 5), 0)
        large = Detection.from_mask(disk_mask(32, 32, 16, 16, 6), 2)
        merged = merge_duplicates([small, large], (32, 32), tiles=[0, 1])
        self.assertEqual(len(merged), 1)
        self.assertEqual(merged[0].channel, 2)
        self.assertEqual(merged[0].area, large.area)
        same_tile = merge_duplicates([small, large], (32, 32), tiles=[0, 0])
        self.assertEqual(sorted(d.channel for d in same_tile), [0, 2])
        with self.assertRaises(ValueError):
            merge_duplicates([small, large], (32, 32), tiles=[0])

    def test_invalid_tiling(self):
        model = TrainedModel.initialize(tiny_train_config())
        stack, _ = tiny_dataset(n_stacks=1)[0]
        with self.assertRaises(ConfigurationError):
            infer_large(model, stack, tile=32, overlap=16)

    def test_tile_cores_partition_the_axis(self):
        for size, tile, overlap in ((100, 32, 8), (64, 64, 8), (97, 40, 12), (10, 32, 4)):
            cores = tile_cores(size, tile, overlap)
            self.assertEqual(cores[0][2], 0.0)
            self.assertEqual(cores[-1][3], float(size))
            for (_, _, _, hi), (_, _, lo, _) in zip(cores, cores[1:]):
                self.assertEqual(hi, lo)
            for start, stop, lo, hi in cores:
                self.assertTrue(start <= lo < hi <= stop)
        self.assertEqual(tile_starts(100, 32, 8), [0, 24, 48, 68])

    def test_depth_encoding_of_linear_projection(self):
        model = TrainedModel.initialize(tiny_train_config(input_mode="linear"))
        dataset = [gen_disk_stack(9, 30.0, COARSE_GEOMETRY)]
        self.assertGreater(depth_encoding_correlation(model, dataset), 0.8)
        mip_model = TrainedModel.initialize(tiny_train_config(input_mode="mip"))
        self.assertEqual(depth_encoding_correlation(mip_model, dataset), 0.0)


class TestDatasets(unittest.TestCase):
    def test_round_trip(self):
        dataset = tiny_dataset()
        with tempfile.TemporaryDirectory() as tmp:
            names = save_dataset(dataset, tmp)
            loaded = load_dataset(tmp)
        self.assertEqual(names, ["stack_000", "stack_001"])
        for (stack, annotations), (l_stack, l_annotations) in zip(dataset, loaded):
            np.testing.assert_allclose(l_stack.voxels, stack.voxels, rtol=1e-6)
            self.assertEqual(l_annotations.ids, annotations.ids)
            self.assertEqual(l_annotations.dims, annotations.dims)

    def test_empty_directory(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(FileNotFoundError):
                load_dataset(tmp)


class TestCli(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = self._tmp.name

    def tearDown(self):
        self._tmp.cleanup()

    def test_metrics(self):
        _, annotations = tiny_dataset(n_stacks=1)[0]
        gt_path = os.path.join(self.tmp, "gt.json")
        pred_path = os.path.join(self.tmp, "pred.json")
        out_path = os.path.join(self.tmp, "report.json")
        save_annotations(annotations, gt_path)
        save_detections(DetectionSet.from_annotations(annotations), pred_path)
        code = main(["metrics", "--gt", gt_path, "--pred", pred_path, "--out", out_path])
        self.assertEqual(code, 0)
        with open(out_path, "r", encoding="utf-8") as f:
            report = json.load(f)
        self.assertEqual(report["tp"], len(annotations))
        self.assertEqual(report["fp"], 0)

    def test_synth(self):
        config_path = os.path.join(self.tmp, "synth.yaml")
        out_dir = os.path.join(self.tmp, "data")
        with open(config_path, "w", encoding="utf-8") as f:
            f.write(
                "n_stacks: 2\n"
                "scene.depth: 4\n"
                "scene.height: 40\n"
                "scene.width: 40\n"
                "scene.n_cells: 3\n"
                "scene.diameter_um_range: [10.0, 14.0]\n"
                "scene.overlap_fraction_target: 0.0\n"
                "scene.geometry.dx_um: 2.0\n"
                "scene.geometry.dy_um: 2.0\n"
            )
        self.assertEqual(main(["synth", "--config", config_path, "--out", out_dir]), 0)
        dataset = load_dataset(out_dir)
        self.assertEqual(len(dataset), 2)
        self.assertEqual(dataset[0][0].shape, (4, 40, 40))
        self.assertEqual(load_config(SynthConfig, config_path).scene.geometry, COARSE_GEOMETRY)

    def test_project(self):
        stack, _ = tiny_dataset(n_stacks=1)[0]
        stack_path = os.path.join(self.tmp, "stack.ome.tif")
        out_path = os.path.join(self.tmp, "mip.png")
        save_stack(stack, stack_path)
        self.assertEqual(
            main(["project", "--mode", "mip", "--stack", stack_path, "--out", out_path]), 0
        )
        self.assertGreater(os.path.getsize(out_path), 0)
        self.assertEqual(
            main(["project", "--mode", "mip", "--overlay", "--stack", stack_path, "--out", out_path]),
            1,
        )

    def _read_bytes(self, *parts):
        with open(os.path.join(self.tmp, *parts), "rb") as f:
            return f.read()

    def _train_fixture(self):
        data_dir = os.path.join(self.tmp, "data")
        config_path = os.path.join(self.tmp, "train.yaml")
        save_dataset(tiny_dataset(), data_dir)
        save_config(tiny_train_config(epochs=1, iters_per_epoch=2, val_size=1), config_path)
        return data_dir, config_path

    def test_train_eval_infer_are_reproducible(self):
        data_dir, config_path = self._train_fixture()
        for run in ("a", "b"):
            model_dir = os.path.join(self.tmp, f"model_{run}")
            self.assertEqual(
                main(["train", "--config", config_path, "--data", data_dir, "--out", model_dir]), 0
            )
            report = os.path.join(self.tmp, f"report_{run}.json")
            self.assertEqual(
                main(["eval", "--model", model_dir, "--data", data_dir, "--out", report]), 0
            )
            detections = os.path.join(self.tmp, f"detections_{run}.json")
            stack_path = os.path.join(data_dir, "stack_000.ome.tif")
            self.assertEqual(
                main(
                    ["infer", "--model", model_dir, "--stack", stack_path, "--out", detections]
                    + ["--tile", "32", "--overlap", "8"]
                ),
                0,
            )
        for name in ("history.json", "head.npz", "pen.npz", "config.yaml"):
            self.assertEqual(self._read_bytes("model_a", name), self._read_bytes("model_b", name))
        self.assertEqual(self._read_bytes("report_a.json"), self._read_bytes("report_b.json"))
        self.assertEqual(
            self._read_bytes("detections_a.json"), self._read_bytes("detections_b.json")
        )
        history = json.loads(self._read_bytes("model_a", "history.json"))
        self.assertEqual(len(history["iterations"]), 2)
        report = json.loads(self._read_bytes("report_a.json"))
        self.assertEqual(report["tp"] + report["fn"], sum(len(a) for _, a in tiny_dataset()))
        loaded = load_detections(os.path.join(self.tmp, "detections_a.json"))
        self.assertEqual(loaded.frame, (40, 40))

    def test_ablate(self):
        data_dir, config_path = self._train_fixture()
        out_path = os.path.join(self.tmp, "ablation.json")
        argv = ["ablate", "--config", config_path, "--data", data_dir, "--out", out_path]
        self.assertEqual(main(argv + ["--variants", "pen", "mip", "--seeds", "0"]), 0)
        with open(out_path, "r", encoding="utf-8") as f:
            results = json.load(f)
        self.assertEqual(sorted(results), ["mip", "pen"])
        self.assertEqual([row["seed"] for row in results["pen"]], [0])
        self.assertIn("depth_correlation", results["pen"][0])

    def test_missing_files(self):
        missing = os.path.join(self.tmp, "missing.json")
        self.assertEqual(main(["metrics", "--gt", missing, "--pred", missing]), 1)
        self.assertEqual(main(["eval", "--model", self.tmp, "--data", self.tmp]), 1)


class TestRendering(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = self._tmp.name

    def tearDown(self):
        self._tmp.cleanup()

    def _assert_png(self, path):
        with open(path, "rb") as f:
            self.assertEqual(f.read(8), b"\x89PNG\r\n\x1a\n")

    def test_detection_overlay(self):
        stack, annotations = tiny_dataset(n_stacks=1)[0]
        detections = DetectionSet(
            [Detection.from_mask(cell.mask, i % 3) for i, cell in enumerate(annotations)],
            (stack.height, stack.width),
        )
        path = os.path.join(self.tmp, "overlay.png")
        render_detections(linear_depth_embed(stack), detections, path)
        self._assert_png(path)
        with self.assertRaises(ValueError):
            render_detections(mip(stack), DetectionSet([], (8, 8)), path)

    def test_overlay_from_cli(self):
        stack, _ = tiny_dataset(n_stacks=1)[0]
        model_dir = os.path.join(self.tmp, "model")
        stack_path = os.path.join(self.tmp, "stack.ome.tif")
        out_path = os.path.join(self.tmp, "pen.png")
        TrainedModel.initialize(tiny_train_config()).save(model_dir)
        save_stack(stack, stack_path)
        argv = ["project", "--model", model_dir, "--stack", stack_path, "--out", out_path]
        self.assertEqual(main(argv + ["--overlay"]), 0)
        self._assert_png(out_path)

if __name__ == "__main__":
    unittest.main()
