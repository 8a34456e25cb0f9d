import math
import unittest

import numpy as np

from depth_forge.augment import AugmentConfig, ImageDims
from depth_forge.errors import ConfigError, DomainError
from depth_forge.geometry import Intrinsics, Pixel, back_project, euclid_from_principal
from depth_forge.prompts import parse_answer
from depth_forge.schemas import PromptVariant, TaskKind
from depth_forge.synthetic import Plane, render_plane_scene
from depth_forge.tasks import (
    Frame,
    QaOptions,
    TaskConfig,
    compute_ground_truth,
    make_qa,
    pose_distance,
    pose_partners,
    sample_query_pixels,
)
from depth_forge.utils import image_to_png_bytes, round2

K = Intrinsics(100.0, 100.0, 40.0, 30.0)


def plane_frame(frame_id="f0", z=2.0, split="eval", pose=None, scene=None, normal=(0.0, 0.0, 1.0)):
    image, depth, mask = render_plane_scene(ImageDims(80, 60), K, Plane(normal, z))
    return Frame(frame_id, "synthetic", image, depth, mask, K, split, pose, scene)


def translation(x, y, z, yaw=0.0):
    pose = np.eye(4)
    c, s = math.cos(yaw), math.sin(yaw)
    pose[:3, :3] = [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
    pose[:3, 3] = [x, y, z]
    return pose


class TestGroundTruth(unittest.TestCase):
    def setUp(self):
        self.frame = plane_frame()

    def test_distance_and_principal(self):
        center = Pixel(40.0, 30.0)
        self.assertEqual(compute_ground_truth(TaskKind.DISTANCE, [self.frame], [center]), 2.0)
        corner = Pixel(0.0, 0.0)
        self.assertAlmostEqual(
            compute_ground_truth(TaskKind.DISTANCE, [self.frame], [corner]),
            euclid_from_principal(corner, 2.0, K),
            places=12,
        )
        self.assertEqual(compute_ground_truth(TaskKind.PRINCIPAL_AXIS_DISTANCE, [self.frame], [corner]), 2.0)

    def test_speed_time_identities(self):
        p = Pixel(10.0, 50.0)
        distance = compute_ground_truth(TaskKind.DISTANCE, [self.frame], [p])
        speed = compute_ground_truth(TaskKind.SPEED, [self.frame], [p], {"given_time": 4.0})
        time = compute_ground_truth(TaskKind.TIME, [self.frame], [p], {"given_speed": 1.5})
        self.assertLess(abs(speed * 4.0 - distance), 1e-9)
        self.assertLess(abs(time * 1.5 - distance), 1e-9)

    def test_two_point_symmetric(self):
        a, b = Pixel(5.0, 5.0), Pixel(70.0, 40.0)
        ab = compute_ground_truth(TaskKind.TWO_POINT_DISTANCE, [self.frame], [a, b])
        ba = compute_ground_truth(TaskKind.TWO_POINT_DISTANCE, [self.frame], [b, a])
        self.assertEqual(ab, ba)
        self.assertAlmostEqual(ab, back_project(a, 2.0, K).distance_to(back_project(b, 2.0, K)), places=12)

    def test_pose_three_four_five(self):
        frames = [plane_frame("a", pose=translation(0, 0, 0)), plane_frame("b", pose=translation(3, 4, 0))]
        self.assertEqual(compute_ground_truth(TaskKind.POSE, frames, []), 5.0)

    def test_pose_invariant_under_common_motion(self):
        a, b = translation(1.0, 2.0, 3.0, 0.2), translation(-4.0, 0.5, 7.0, -0.7)
        common = translation(10.0, -3.0, 2.5, 1.1)
        self.assertLess(abs(pose_distance(a, b) - pose_distance(common @ a, common @ b)), 1e-9)

    def test_pose_needs_poses(self):
        with self.assertRaises(ConfigError):
            compute_ground_truth(TaskKind.POSE, [plane_frame("a"), plane_frame("b")], [])

    def test_invalid_pixel(self):
        frame = plane_frame()
        frame.mask[0, 0] = False
        frame.depth[0, 0] = 0.0
        with self.assertRaises(DomainError):
            compute_ground_truth(TaskKind.DISTANCE, [frame], [Pixel(0.0, 0.0)])


class TestSampleQueryPixels(unittest.TestCase):
    def test_draws_valid_distinct_pixels(self):
        depth = np.zeros((10, 10))
        mask = np.zeros((10, 10), dtype=bool)
        depth[2:5, 3:6] = 1.0
        mask[2:5, 3:6] = True
        pixels = sample_query_pixels(depth, mask, 9, np.random.default_rng(0))
        self.assertEqual(len(set(pixels)), 9)
        for p in pixels:
            row, col = p.to_index()
            self.assertTrue(mask[row, col])

    def test_not_enough_pixels(self):
        mask = np.zeros((4, 4), dtype=bool)
        mask[0, 0] = True
        with self.assertRaises(DomainError):
            sample_query_pixels(np.ones((4, 4)), mask, 2, np.random.default_rng(0))

    def test_same_seed(self):
        depth, mask = np.ones((20, 20)), np.ones((20, 20), dtype=bool)
        a = sample_query_pixels(depth, mask, 5, np.random.default_rng(3))
        b = sample_query_pixels(depth, mask, 5, np.random.default_rng(3))
        self.assertEqual(a, b)


class TestMakeQa(unittest.TestCase):
    def setUp(self):
        self.frame = plane_frame()
        self.options = QaOptions(augment=AugmentConfig(unify_focal=False))

    def test_distance_record(self):
        p = Pixel(10.0, 20.0)
        record = make_qa([self.frame], TaskKind.DISTANCE, [p], np.random.default_rng(0), options=self.options,
                         sample_id="s0")
        self.assertEqual(record.sample_id, "s0")
        self.assertEqual(record.question, "How many meters is this point from the camera?")
        self.assertAlmostEqual(record.gt_value, euclid_from_principal(p, 2.0, K), places=12)
        self.assertEqual(parse_answer(record.answer, record.variant).value, round2(record.gt_value))
        self.assertEqual(record.query_pixels[0]["original"], [10.0, 20.0])
        self.assertEqual(record.source_ids, ["f0"])
        self.assertEqual(record.unit, "m")
        self.assertEqual(len(record.images), 1)
        self.assertNotEqual(record.images[0].tobytes(), self.frame.image.tobytes())

    def test_unified_focal_moves_pixel(self):
        record = make_qa([self.frame], TaskKind.DISTANCE, [Pixel(10.0, 20.0)], np.random.default_rng(0))
        self.assertEqual(record.images[0].size, (800, 600))
        self.assertEqual(record.query_pixels[0]["transformed"], [100.0, 200.0])
        self.assertEqual(record.transforms[0]["scale_x"], 10.0)

    def test_invalid_pixel_is_resampled(self):
        frame = plane_frame()
        frame.mask[:, :40] = False
        frame.depth[:, :40] = 0.0
        record = make_qa([frame], TaskKind.DISTANCE, [Pixel(5.0, 5.0)], np.random.default_rng(1),
                         options=self.options)
        self.assertGreaterEqual(record.query_pixels[0]["original"][0], 40.0)

    def test_deterministic(self):
        a = make_qa([self.frame], TaskKind.SPEED, [Pixel(30.0, 30.0)], np.random.default_rng(9), options=self.options)
        b = make_qa([self.frame], TaskKind.SPEED, [Pixel(30.0, 30.0)], np.random.default_rng(9), options=self.options)
        self.assertEqual((a.question, a.answer, a.aux), (b.question, b.answer, b.aux))
        self.assertEqual(image_to_png_bytes(a.images[0]), image_to_png_bytes(b.images[0]))

    def test_given_value_in_range(self):
        record = make_qa([self.frame], TaskKind.SPEED, [Pixel(30.0, 30.0)], np.random.default_rng(2),
                         options=self.options)
        lo, hi = TaskConfig().given_time_range
        self.assertTrue(lo <= record.aux["given_time"] <= hi)
        self.assertIn("seconds", record.question)
        self.assertAlmostEqual(record.gt_value * record.aux["given_time"],
                               euclid_from_principal(Pixel(30.0, 30.0), 2.0, K), places=9)
        self.assertEqual(record.unit, "m/s")

    def test_two_point_text_coordinates(self):
        record = make_qa([self.frame], TaskKind.TWO_POINT_DISTANCE, [Pixel(5.0, 5.0), Pixel(60.0, 50.0)],
                         np.random.default_rng(0), PromptVariant.TEXT_COORDINATE, self.options)
        self.assertIn("(5, 5)", record.question)
        self.assertIn("(60, 50)", record.question)
        self.assertEqual(record.images[0].tobytes(), self.frame.image.tobytes())

    def test_ray_then_depth(self):
        record = make_qa([self.frame], TaskKind.DISTANCE, [Pixel(60.0, 10.0)], np.random.default_rng(0),
                         PromptVariant.RAY_THEN_DEPTH, self.options)
        horizontal, vertical = record.aux["ray_angles"]
        self.assertGreater(horizontal, 0.0)
        self.assertGreater(vertical, 0.0)
        self.assertIn("to the right", record.answer)
        self.assertIn("above", record.answer)

    def test_train_split_is_cropped(self):
        frame = plane_frame(split="train")
        options = QaOptions(augment=AugmentConfig(crop_width_range=(300, 400), crop_height_range=(200, 300)))
        record = make_qa([frame], TaskKind.DISTANCE, [Pixel(70.0, 55.0)], np.random.default_rng(4), options=options)
        width, height = record.images[0].size
        self.assertTrue(300 <= width <= 400 and 200 <= height <= 300)
        u, v = record.query_pixels[0]["transformed"]
        self.assertTrue(0 <= u < width and 0 <= v < height)

    def test_pose_record(self):
        frames = [plane_frame("a", pose=translation(0, 0, 0)), plane_frame("b", pose=translation(0.6, 0, 0.8))]
        record = make_qa(frames, TaskKind.POSE, [], np.random.default_rng(0), options=self.options)
        self.assertEqual(len(record.images), 2)
        self.assertAlmostEqual(record.gt_value, 1.0, places=12)
        self.assertIn("1.00", record.answer)

    def test_wrong_pixel_count(self):
        with self.assertRaises(ConfigError):
            make_qa([self.frame], TaskKind.TWO_POINT_DISTANCE, [Pixel(1.0, 1.0)], np.random.default_rng(0))


class TestPosePartners(unittest.TestCase):
    def test_same_scene_and_range(self):
        anchor = plane_frame("a", pose=translation(0, 0, 0), scene="s1")
        near = plane_frame("b", pose=translation(0.1, 0, 0), scene="s1")
        good = plane_frame("c", pose=translation(2.0, 0, 0), scene="s1")
        other_scene = plane_frame("d", pose=translation(2.0, 0, 0), scene="s2")
        no_pose = plane_frame("e", scene="s1")
        partners = pose_partners(anchor, [anchor, near, good, other_scene, no_pose], TaskConfig())
        self.assertEqual([p.id for p in partners], ["c"])


if __name__ == "__main__":
    unittest.main()
