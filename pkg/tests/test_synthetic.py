import math
import tempfile
import unittest
from pathlib import Path

import numpy as np

from depth_forge.augment import ImageDims
from depth_forge.data import load_frame, load_manifest
from depth_forge.errors import ConfigError
from depth_forge.geometry import Intrinsics, ray_norm_factor_array
from depth_forge.synthetic import Plane, Sphere, render_plane_scene, render_room_scene, write_synthetic_manifest
from depth_forge.tasks import TaskConfig, pose_distance, pose_partners


def euclid_map(frame) -> np.ndarray:
    us, vs = np.meshgrid(np.arange(frame.width, dtype=np.float64), np.arange(frame.height, dtype=np.float64))
    return frame.depth * ray_norm_factor_array(us, vs, frame.intrinsics)


class TestRenderers(unittest.TestCase):
    def test_tilted_plane(self):
        k = Intrinsics(50.0, 50.0, 20.0, 15.0)
        tilt = 0.3
        _, depth, mask = render_plane_scene(ImageDims(40, 30), k, Plane((0.0, math.sin(tilt), math.cos(tilt)), 3.0))
        self.assertTrue(mask.all())
        b = (np.arange(30) - 15.0) / 50.0
        expected = 3.0 / (b * math.sin(tilt) + math.cos(tilt))
        np.testing.assert_allclose(depth[:, 7], expected, rtol=1e-12)

    def test_plane_behind_camera_is_masked(self):
        k = Intrinsics(50.0, 50.0, 20.0, 15.0)
        image, depth, mask = render_plane_scene(ImageDims(40, 30), k, Plane((0.0, 1.0, 0.0), 1.0))
        # Floor below the camera: only rays pointing down (+v) hit it.
        self.assertFalse(mask[:15].any())
        self.assertTrue(mask[16:].all())
        self.assertTrue((depth[~mask] == 0).all())
        self.assertEqual(np.asarray(image)[0, 0].tolist(), [0, 0, 0])

    def test_room_is_closed(self):
        k = Intrinsics(40.0, 40.0, 32.0, 24.0)
        _, depth, mask = render_room_scene(ImageDims(64, 48), k, np.random.default_rng(3))
        self.assertTrue(mask.all())
        self.assertTrue((depth > 0).all())
        self.assertLessEqual(depth.max(), 9.0 + 1e-9)

    def test_sphere_is_hashable(self):
        self.assertEqual(Sphere((0.0, 0.0, 3.0), 1.0), Sphere((0.0, 0.0, 3.0), 1.0))


class TestSyntheticManifest(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_room_manifest(self):
        path = write_synthetic_manifest(self.root, 4, datasets=("a", "b"), rng=np.random.default_rng(1),
                                        dims=(64, 48))
        index = load_manifest(path)
        self.assertEqual(index.counts(), {"a": 2, "b": 2})
        for entry in index:
            self.assertEqual(entry.depth_encoding, "png16")
            self.assertEqual(entry.split, "eval")
            frame = load_frame(index, entry)
            self.assertEqual((frame.width, frame.height), (64, 48))
            euclid = euclid_map(frame)[frame.mask]
            self.assertGreater(euclid.size, 0)
            self.assertGreaterEqual(euclid.min(), 0.5 - 0.05)
            self.assertLessEqual(euclid.max(), 80.0 + 0.05)

    def test_scatter_distances_stay_in_range(self):
        path = write_synthetic_manifest(self.root, 2, scene="scatter", depth_range=(1.0, 20.0),
                                        encoding="npy", dims=(50, 40), rng=np.random.default_rng(2))
        index = load_manifest(path)
        values = []
        for entry in index:
            frame = load_frame(index, entry)
            self.assertTrue(frame.mask.all())
            values.append(euclid_map(frame).ravel())
        values = np.concatenate(values)
        self.assertGreaterEqual(values.min(), 1.0 - 1e-4)
        self.assertLessEqual(values.max(), 20.0 + 1e-4)
        # Log-uniform: the median sits near the geometric mean of the range.
        self.assertAlmostEqual(float(np.median(values)), math.sqrt(20.0), delta=0.5)

    def test_uniform_scatter(self):
        path = write_synthetic_manifest(self.root, 1, scene="scatter", depth_range=(1.0, 21.0), encoding="pfm",
                                        dims=(50, 40), log_uniform=False, rng=np.random.default_rng(2))
        index = load_manifest(path)
        frame = load_frame(index, index.entries[0])
        self.assertAlmostEqual(float(np.median(euclid_map(frame))), 11.0, delta=1.0)

    def test_poses_share_scenes(self):
        path = write_synthetic_manifest(self.root, 8, with_poses=True, dims=(32, 24), rng=np.random.default_rng(0))
        index = load_manifest(path)
        scenes = [e.scene for e in index]
        self.assertEqual(len(set(scenes[:4])), 1)
        self.assertNotEqual(scenes[0], scenes[4])
        step = pose_distance(index.entries[0].pose_matrix, index.entries[1].pose_matrix)
        self.assertAlmostEqual(step, math.hypot(0.8, 1.2), places=9)
        partners = pose_partners(index.entries[0], list(index), TaskConfig())
        self.assertEqual([p.id for p in partners], [e.id for e in index.entries[1:4]])

    def test_png16_scale_for_far_ranges(self):
        path = write_synthetic_manifest(self.root, 1, depth_range=(0.5, 300.0), dims=(32, 24))
        self.assertEqual(load_manifest(path).entries[0].depth_scale, 0.01)

    def test_bad_arguments(self):
        with self.assertRaises(ConfigError):
            write_synthetic_manifest(self.root, 1, scene="forest")
        with self.assertRaises(ConfigError):
            write_synthetic_manifest(self.root, 0)
        with self.assertRaises(ConfigError):
            write_synthetic_manifest(self.root, 1, depth_range=(5.0, 1.0))


if __name__ == "__main__":
    unittest.main()
