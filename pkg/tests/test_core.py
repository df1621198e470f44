import json
import os
import tempfile
import unittest

import numpy as np
from parameterized import parameterized
from scipy import ndimage as ndi

from penseg.annotations import (
    AnnotationSet,
    CellAnnotation,
    Detection,
    DetectionSet,
    load_annotations,
    load_detections,
    save_annotations,
    save_detections,
)
from penseg.stacks import ImageStack, RgbProjection, VoxelGeometry, load_stack, save_stack
from penseg.utils import (
    AnnotationError,
    StackFormatError,
    load_arrays,
    normalize_unit,
    rasterize_polygon,
    save_arrays,
)
from tests.utils import convex_polygon_oracle, disk_mask, random_convex_polygon


def _write_doc(path, doc):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)


class TestNormalization(unittest.TestCase):
    def test_affine_rescale(self):
        np.testing.assert_allclose(normalize_unit([2.0, 4.0, 6.0]), [0.0, 0.5, 1.0])

    def test_constant_image_maps_to_zeros(self):
        out = normalize_unit(np.full((3, 4, 4), 7.5))
        self.assertTrue(np.all(out == 0.0))

    def test_unit_range_is_unchanged(self):
        rng = np.random.default_rng(0)
        image = rng.uniform(size=(3, 5, 5))
        image[0, 0, 0], image[2, 4, 4] = 0.0, 1.0
        np.testing.assert_allclose(normalize_unit(image), image)

    def test_channels_share_one_range(self):
        image = np.stack([np.full((2, 2), 1.0), np.full((2, 2), 3.0), np.full((2, 2), 5.0)])
        out = normalize_unit(image)
        np.testing.assert_allclose(out[:, 0, 0], [0.0, 0.5, 1.0])

    def test_non_finite_values_are_rejected(self):
        with self.assertRaises(ValueError):
            normalize_unit([0.0, np.nan])


class TestRasterization(unittest.TestCase):
    def test_square_is_center_inclusive(self):
        mask = rasterize_polygon([(1, 1), (5, 1), (5, 5), (1, 5)], 8, 8)
        self.assertEqual(mask.sum(), 25)
        self.assertTrue(mask[1:6, 1:6].all())

    @parameterized.expand([(seed,) for seed in range(20)])
    def test_convex_polygons_match_half_plane_oracle(self, seed):
        rng = np.random.default_rng(seed)
        height, width = (int(v) for v in rng.integers(8, 65, size=2))
        verts = random_convex_polygon(rng, height, width)
        np.testing.assert_array_equal(
            rasterize_polygon(verts, height, width),
            convex_polygon_oracle(verts, height, width),
        )

    def test_vertex_order_does_not_matter(self):
        verts = [(2.0, 1.0), (9.0, 3.0), (6.0, 8.0), (1.0, 6.0)]
        np.testing.assert_array_equal(
            rasterize_polygon(verts, 10, 10), rasterize_polygon(verts[::-1], 10, 10)
        )


class TestAnnotations(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = self._tmp.name

    def tearDown(self):
        self._tmp.cleanup()

    def _cells(self):
        return [
            CellAnnotation(3, disk_mask(32, 40, 10, 12, 6), 1.5, (1, 2)),
            CellAnnotation(7, disk_mask(32, 40, 20, 28, 5), 0.0, (0, 0)),
        ]

    def test_load_square(self):
        path = os.path.join(self.tmp, "square.json")
        _write_doc(
            path,
            {
                "image": {"depth": 3, "height": 8, "width": 8},
                "cells": [
                    {
                        "id": 0,
                        "z_centroid": 1.0,
                        "z_range": [0, 2],
                        "vertices": [[1, 1], [5, 1], [5, 5], [1, 5]],
                    }
                ],
            },
        )
        annotations = load_annotations(path, (3, 8, 8))
        self.assertEqual(len(annotations), 1)
        self.assertEqual(annotations[0].mask.sum(), 25)
        self.assertEqual(annotations[0].z_range, (0, 2))

    def test_empty_cells(self):
        path = os.path.join(self.tmp, "empty.json")
        _write_doc(path, {"image": {"depth": 2, "height": 4, "width": 4}, "cells": []})
        self.assertEqual(len(load_annotations(path)), 0)

    @parameterized.expand(
        [
            ("outside", [[1, 1], [8, 1], [1, 5]]),
            ("negative", [[-1, 1], [5, 1], [1, 5]]),
            ("two_vertices", [[1, 1], [5, 1]]),
            ("repeated_vertices", [[1, 1], [5, 1], [1, 1], [5, 1]]),
        ]
    )
    def test_invalid_polygons(self, _name, vertices):
        path = os.path.join(self.tmp, "bad.json")
        _write_doc(
            path,
            {
                "image": {"depth": 1, "height": 8, "width": 8},
                "cells": [{"id": 0, "z_centroid": 0, "z_range": [0, 0], "vertices": vertices}],
            },
        )
        with self.assertRaises(AnnotationError):
            load_annotations(path)

    def test_header_must_match_dims(self):
        path = os.path.join(self.tmp, "dims.json")
        _write_doc(path, {"image": {"depth": 2, "height": 4, "width": 4}, "cells": []})
        with self.assertRaises(AnnotationError):
            load_annotations(path, (3, 4, 4))

    def test_missing_file(self):
        with self.assertRaises(FileNotFoundError):
            load_annotations(os.path.join(self.tmp, "missing.json"))

    def test_round_trip_preserves_vertices_and_z(self):
        first = os.path.join(self.tmp, "first.json")
        second = os.path.join(self.tmp, "second.json")
        save_annotations(AnnotationSet(self._cells(), (3, 32, 40)), first)
        loaded = load_annotations(first)
        save_annotations(loaded, second)
        reloaded = load_annotations(second)
        for a, b in zip(loaded, reloaded):
            self.assertEqual(a.vertices, b.vertices)
            self.assertEqual((a.id, a.z_centroid, a.z_range), (b.id, b.z_centroid, b.z_range))
        with open(first, "rb") as f1, open(second, "rb") as f2:
            self.assertEqual(f1.read(), f2.read())

    def test_round_trip_mask_within_one_pixel(self):
        path = os.path.join(self.tmp, "masks.json")
        cells = self._cells()
        save_annotations(AnnotationSet(cells, (3, 32, 40)), path)
        for original, loaded in zip(cells, load_annotations(path)):
            a, b = original.mask, loaded.mask
            # Hausdorff distance between the two pixel sets
            to_a = ndi.distance_transform_edt(~a)
            to_b = ndi.distance_transform_edt(~b)
            self.assertLessEqual(to_a[b].max(), 1.0)
            self.assertLessEqual(to_b[a].max(), 1.0)

    def test_saving_is_deterministic(self):
        annotations = AnnotationSet(self._cells(), (3, 32, 40))
        paths = [os.path.join(self.tmp, f"{i}.json") for i in range(2)]
        for path in paths:
            save_annotations(annotations, path)
        with open(paths[0], "rb") as f1, open(paths[1], "rb") as f2:
            self.assertEqual(f1.read(), f2.read())

    def test_single_cell_document(self):
        path = os.path.join(self.tmp, "one.json")
        save_annotations(AnnotationSet(self._cells()[:1], (3, 32, 40)), path)
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        self.assertEqual(doc["image"], {"depth": 3, "height": 32, "width": 40})
        self.assertEqual(len(doc["cells"]), 1)
        self.assertEqual(doc["cells"][0]["vertices"][0], doc["cells"][0]["vertices"][-1])

    def test_invalid_cells(self):
        with self.assertRaises(AnnotationError):
            CellAnnotation(0, np.zeros((4, 4), dtype=bool), 0.0, (0, 0))
        with self.assertRaises(AnnotationError):
            CellAnnotation(0, np.ones((4, 4), dtype=bool), 3.0, (0, 2))
        cell = CellAnnotation(0, np.ones((4, 4), dtype=bool), 0.0, (0, 0))
        with self.assertRaises(AnnotationError):
            AnnotationSet([cell, cell], (1, 4, 4))
        with self.assertRaises(AnnotationError):
            AnnotationSet([cell], (1, 5, 4))

    def test_detections_round_trip(self):
        mask = disk_mask(24, 24, 12, 12, 5)
        detections = DetectionSet(
            [Detection.from_mask(mask, 0), Detection.from_mask(mask, 2)], (24, 24)
        )
        path = os.path.join(self.tmp, "detections.json")
        save_detections(detections, path, depth=3)
        loaded = load_detections(path)
        self.assertEqual([d.channel for d in loaded], [0, 2])
        self.assertEqual(loaded.frame, (24, 24))
        for det in loaded:
            self.assertGreaterEqual(det.iou(detections[0]), 0.8)

    def test_disconnected_detection_keeps_every_piece(self):
        mask = np.zeros((32, 32), dtype=bool)
        mask[2:8, 2:8] = True
        mask[15:25, 15:25] = True
        path = os.path.join(self.tmp, "pieces.json")
        save_detections(DetectionSet([Detection.from_mask(mask, 1)], (32, 32)), path, depth=3)
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        self.assertEqual(len(doc["cells"]), 1)
        self.assertEqual(len(doc["cells"][0]["parts"]), 1)
        loaded = load_detections(path)
        self.assertEqual(len(loaded), 1)
        self.assertEqual(loaded[0].channel, 1)
        self.assertEqual(int(loaded[0].mask.sum()), 136)
        np.testing.assert_array_equal(loaded[0].mask, mask)


class TestStacks(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = self._tmp.name

    def tearDown(self):
        self._tmp.cleanup()

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        voxels = rng.uniform(size=(4, 8, 8)).astype(np.float32)
        path = os.path.join(self.tmp, "stack.ome.tif")
        save_stack(ImageStack(voxels, VoxelGeometry(0.5, 0.5, 10.0)), path)
        stack = load_stack(path)
        self.assertEqual(stack.depth, 4)
        np.testing.assert_array_equal(stack.voxels, voxels)
        self.assertAlmostEqual(stack.geometry.dz_um, 10.0)
        self.assertAlmostEqual(stack.geometry.dx_um, 0.5)

    def test_ragged_pages(self):
        import tifffile  # pylint: disable = import-outside-toplevel

        path = os.path.join(self.tmp, "ragged.tif")
        with tifffile.TiffWriter(path) as tif:
            tif.write(np.zeros((8, 8), dtype=np.uint16))
            tif.write(np.zeros((6, 8), dtype=np.uint16))
        with self.assertRaises(StackFormatError):
            load_stack(path)

    def test_multichannel_pages(self):
        import tifffile  # pylint: disable = import-outside-toplevel

        path = os.path.join(self.tmp, "rgb.tif")
        tifffile.imwrite(path, np.zeros((8, 8, 3), dtype=np.uint8), photometric="rgb")
        with self.assertRaises(StackFormatError):
            load_stack(path)

    def test_channel_axis_is_rejected(self):
        import tifffile  # pylint: disable = import-outside-toplevel

        path = os.path.join(self.tmp, "zcyx.ome.tif")
        voxels = np.zeros((4, 2, 8, 8), dtype=np.uint16)
        tifffile.imwrite(path, voxels, ome=True, photometric="minisblack", metadata={"axes": "ZCYX"})
        with self.assertRaisesRegex(StackFormatError, "Page 1"):
            load_stack(path)

    def test_missing_file(self):
        with self.assertRaises(FileNotFoundError):
            load_stack(os.path.join(self.tmp, "missing.tif"))

    def test_center_padding(self):
        stack = ImageStack(np.ones((3, 2, 2)))
        padded = stack.center_padded(8).voxels
        self.assertEqual(padded.shape, (8, 2, 2))
        np.testing.assert_array_equal(padded[:, 0, 0], [0, 0, 1, 1, 1, 0, 0, 0])

    def test_projection_contract(self):
        with self.assertRaises(ValueError):
            RgbProjection(np.zeros((2, 4, 4)))
        self.assertEqual(RgbProjection(np.full((3, 2, 2), 2.0)).pixels.max(), 1.0)


class TestArrayFiles(unittest.TestCase):
    def test_saving_is_deterministic(self):
        arrays = {"b": np.arange(6.0).reshape(2, 3), "a": np.ones(3, dtype=np.float32)}
        with tempfile.TemporaryDirectory() as tmp:
            paths = [os.path.join(tmp, f"{i}.npz") for i in range(2)]
            for path in paths:
                save_arrays(path, arrays)
            with open(paths[0], "rb") as f1, open(paths[1], "rb") as f2:
                self.assertEqual(f1.read(), f2.read())
            loaded = load_arrays(paths[0])
        self.assertEqual(sorted(loaded), ["a", "b"])
        np.testing.assert_array_equal(loaded["b"], arrays["b"])
        self.assertEqual(loaded["a"].dtype, np.float32)


if __name__ == "__main__":
    unittest.main()
