import math
import unittest

import numpy as np
from hypothesis import given, strategies as st

from depth_forge.errors import BehindCameraError, DomainError
from depth_forge.geometry import (
    Intrinsics,
    Pixel,
    Point3,
    back_project,
    back_project_array,
    camera_center,
    euclid_from_principal,
    is_rigid,
    principal_from_euclid,
    project,
    ray_angles,
    ray_norm_factor,
    ray_norm_factor_array,
)

focals = st.floats(min_value=50.0, max_value=5000.0)
centers = st.floats(min_value=0.0, max_value=2000.0)
coords = st.floats(min_value=0.0, max_value=4000.0)
depths = st.floats(min_value=0.01, max_value=1000.0)


class TestBackProjection(unittest.TestCase):
    def test_principal_point_lies_on_axis(self):
        k = Intrinsics(1000.0, 1000.0, 640.0, 480.0)
        pt = back_project(Pixel(640.0, 480.0), 2.0, k)
        self.assertEqual((pt.x, pt.y, pt.z), (0.0, 0.0, 2.0))

    def test_one_focal_length_off_axis(self):
        k = Intrinsics(1000.0, 1000.0, 640.0, 480.0)
        pt = back_project(Pixel(1640.0, 480.0), 1.0, k)
        self.assertAlmostEqual(pt.x, 1.0)
        self.assertAlmostEqual(pt.y, 0.0)
        self.assertAlmostEqual(pt.norm(), math.sqrt(2.0))

    def test_rejects_non_positive_depth(self):
        k = Intrinsics(500.0, 500.0, 320.0, 240.0)
        for z in (0.0, -1.0, float("nan"), float("inf")):
            with self.assertRaises(DomainError):
                back_project(Pixel(10.0, 10.0), z, k)

    def test_project_behind_camera(self):
        k = Intrinsics(500.0, 500.0, 320.0, 240.0)
        with self.assertRaises(BehindCameraError):
            project(Point3(0.0, 0.0, -1.0), k)
        with self.assertRaises(BehindCameraError):
            project(Point3(1.0, 0.0, 0.0), k)

    def test_intrinsics_validation(self):
        with self.assertRaises(DomainError):
            Intrinsics(0.0, 500.0, 320.0, 240.0)
        with self.assertRaises(DomainError):
            Intrinsics(500.0, 500.0, float("nan"), 240.0)

    @given(focals, focals, centers, centers, coords, coords, depths)
    def test_round_trip(self, fx, fy, cx, cy, u, v, z):
        k = Intrinsics(fx, fy, cx, cy)
        p = project(back_project(Pixel(u, v), z, k), k)
        self.assertAlmostEqual(p.u, u, delta=1e-6)
        self.assertAlmostEqual(p.v, v, delta=1e-6)

    def test_round_trip_vectorised(self):
        rng = np.random.default_rng(0)
        n = 10000
        fx, fy = rng.uniform(50, 5000, n), rng.uniform(50, 5000, n)
        cx, cy = rng.uniform(0, 2000, n), rng.uniform(0, 2000, n)
        us, vs, zs = rng.uniform(0, 4000, n), rng.uniform(0, 4000, n), rng.uniform(0.01, 1000, n)
        x = (us - cx) / fx * zs
        y = (vs - cy) / fy * zs
        self.assertLess(np.max(np.abs(fx * x / zs + cx - us)), 1e-6)
        self.assertLess(np.max(np.abs(fy * y / zs + cy - vs)), 1e-6)

    def test_array_matches_scalar(self):
        k = Intrinsics(700.0, 710.0, 300.0, 200.0)
        us = np.array([0.0, 150.5, 599.0])
        vs = np.array([10.0, 200.0, 399.5])
        zs = np.array([0.5, 3.0, 40.0])
        points = back_project_array(us, vs, zs, k)
        for i in range(3):
            pt = back_project(Pixel(us[i], vs[i]), zs[i], k)
            np.testing.assert_allclose(points[i], pt.as_array(), rtol=0, atol=1e-12)
        np.testing.assert_allclose(
            ray_norm_factor_array(us, vs, k),
            [ray_norm_factor(Pixel(u, v), k) for u, v in zip(us, vs)],
            rtol=1e-15,
        )

    def test_array_rejects_bad_depth(self):
        k = Intrinsics(700.0, 700.0, 300.0, 200.0)
        with self.assertRaises(DomainError):
            back_project_array(np.array([1.0]), np.array([1.0]), np.array([0.0]), k)


class TestDistanceConversion(unittest.TestCase):
    def test_equal_on_axis(self):
        k = Intrinsics(800.0, 800.0, 400.0, 300.0)
        self.assertEqual(euclid_from_principal(Pixel(400.0, 300.0), 5.0, k), 5.0)

    def test_diagonal_example(self):
        k = Intrinsics(1000.0, 1000.0, 500.0, 500.0)
        d = euclid_from_principal(Pixel(1500.0, 1500.0), 1.0, k)
        self.assertAlmostEqual(d, math.sqrt(3.0), places=12)

    @given(focals, focals, centers, centers, coords, coords, depths)
    def test_round_trip_and_ordering(self, fx, fy, cx, cy, u, v, z):
        k = Intrinsics(fx, fy, cx, cy)
        p = Pixel(u, v)
        d = euclid_from_principal(p, z, k)
        self.assertGreaterEqual(d, z)
        back = principal_from_euclid(p, d, k)
        self.assertLessEqual(abs(back - z) / z, 1e-12)

    @given(focals, centers, depths, st.floats(min_value=1.0, max_value=500.0))
    def test_strictly_greater_off_axis(self, f, c, z, offset):
        k = Intrinsics(f, f, c, c)
        self.assertGreater(euclid_from_principal(Pixel(c + offset, c), z, k), z)

    def test_euclid_is_point_norm(self):
        k = Intrinsics(600.0, 620.0, 320.0, 240.0)
        p = Pixel(17.0, 401.0)
        self.assertAlmostEqual(euclid_from_principal(p, 3.5, k), back_project(p, 3.5, k).norm(), places=12)


class TestRayAngles(unittest.TestCase):
    def test_signs(self):
        k = Intrinsics(1000.0, 1000.0, 500.0, 500.0)
        h, v = ray_angles(Pixel(1500.0, 0.0), k)
        self.assertAlmostEqual(h, 45.0)
        self.assertGreater(v, 0.0)
        h, v = ray_angles(Pixel(0.0, 1500.0), k)
        self.assertLess(h, 0.0)
        self.assertAlmostEqual(v, -45.0)

    def test_center_is_zero(self):
        k = Intrinsics(1000.0, 1000.0, 500.0, 500.0)
        self.assertEqual(ray_angles(Pixel(500.0, 500.0), k), (0.0, 0.0))


class TestPoses(unittest.TestCase):
    def test_camera_center(self):
        pose = np.eye(4)
        pose[:3, 3] = [3.0, 4.0, 0.0]
        np.testing.assert_array_equal(camera_center(pose), [3.0, 4.0, 0.0])

    def test_rigidity(self):
        angle = 0.3
        pose = np.eye(4)
        pose[:3, :3] = [[math.cos(angle), -math.sin(angle), 0], [math.sin(angle), math.cos(angle), 0], [0, 0, 1]]
        self.assertTrue(is_rigid(pose))
        scaled = pose.copy()
        scaled[:3, :3] *= 1.1
        self.assertFalse(is_rigid(scaled))
        self.assertFalse(is_rigid(np.eye(3)))

    def test_pixel_index(self):
        self.assertEqual(Pixel(3.7, 5.2).to_index(), (5, 3))
        self.assertTrue(Pixel(0.0, 0.0).inside(2, 2))
        self.assertFalse(Pixel(2.0, 0.0).inside(2, 2))


if __name__ == "__main__":
    unittest.main()
