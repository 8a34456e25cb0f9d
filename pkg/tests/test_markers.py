import unittest

import numpy as np
from PIL import Image
from pydantic import ValidationError

from depth_forge.errors import ConfigError, OutOfBoundsError
from depth_forge.geometry import Pixel
from depth_forge.markers import (
    MarkerSpec,
    MarkerStyle,
    choose_direction,
    labelled_specs,
    marker_bbox,
    render_marker,
    render_multi,
)


def changed_mask(before: Image.Image, after: Image.Image) -> np.ndarray:
    return np.any(np.asarray(before, dtype=np.int16) != np.asarray(after, dtype=np.int16), axis=2)


def inside_boxes(shape, boxes) -> np.ndarray:
    allowed = np.zeros(shape, dtype=bool)
    for x0, y0, x1, y1 in boxes:
        allowed[max(y0, 0):max(y1, 0), max(x0, 0):max(x1, 0)] = True
    return allowed


class TestRenderMarker(unittest.TestCase):
    def setUp(self):
        self.image = Image.new("RGB", (200, 160), (0, 0, 0))

    def test_changes_only_inside_bbox(self):
        p = Pixel(100.0, 80.0)
        for style in MarkerStyle:
            spec = MarkerSpec(style=style)
            rendered = render_marker(self.image, p, spec)
            changed = changed_mask(self.image, rendered)
            self.assertTrue(changed.any(), style)
            direction = choose_direction(p, spec, self.image.size)
            allowed = inside_boxes(changed.shape, marker_bbox(p, spec, direction, self.image.size))
            self.assertFalse((changed & ~allowed).any(), style)

    def test_tip_is_colored(self):
        rendered = render_marker(self.image, Pixel(100.0, 80.0), MarkerSpec(color=(0, 255, 0)))
        self.assertEqual(rendered.getpixel((100, 80)), (0, 255, 0))

    def test_input_is_untouched(self):
        render_marker(self.image, Pixel(50.0, 50.0))
        self.assertFalse(np.asarray(self.image).any())

    def test_styles_differ(self):
        p = Pixel(100.0, 80.0)
        outputs = {render_marker(self.image, p, MarkerSpec(style=s)).tobytes() for s in MarkerStyle}
        self.assertEqual(len(outputs), 3)

    def test_out_of_bounds(self):
        with self.assertRaises(OutOfBoundsError):
            render_marker(self.image, Pixel(200.0, 10.0))
        with self.assertRaises(OutOfBoundsError):
            render_marker(self.image, Pixel(-1.0, 10.0))

    def test_corner_marker_stays_visible(self):
        spec = MarkerSpec()
        self.assertEqual(choose_direction(Pixel(2.0, 2.0), spec, self.image.size), (-1, -1))
        self.assertEqual(choose_direction(Pixel(150.0, 120.0), spec, self.image.size), (1, 1))
        rendered = render_marker(self.image, Pixel(2.0, 2.0), spec)
        self.assertGreater(changed_mask(self.image, rendered).sum(), spec.size)


class TestRenderMulti(unittest.TestCase):
    def setUp(self):
        self.image = Image.new("RGB", (240, 180), (0, 0, 0))

    def test_labels_are_drawn(self):
        points = [Pixel(80.0, 90.0), Pixel(180.0, 120.0)]
        specs = labelled_specs(MarkerSpec(), 2)
        self.assertEqual([s.label for s in specs], ["A", "B"])
        labelled = render_multi(self.image, list(zip(points, specs)))
        plain = render_multi(self.image, [(p, MarkerSpec()) for p in points])
        diff = changed_mask(plain, labelled)
        for p, spec in zip(points, specs):
            direction = choose_direction(p, spec, self.image.size)
            x0, y0, x1, y1 = marker_bbox(p, spec, direction, self.image.size)[1]
            region = np.asarray(labelled)[y0:y1, x0:x1]
            self.assertTrue(diff[y0:y1, x0:x1].any())
            # Red box, red marker and black background have no green; only the white text does.
            self.assertGreater(int(region[..., 1].max()), 0, spec.label)

    def test_duplicate_labels(self):
        spec = MarkerSpec(label="A")
        with self.assertRaises(ConfigError):
            render_multi(self.image, [(Pixel(10.0, 10.0), spec), (Pixel(50.0, 50.0), spec)])

    def test_needs_points(self):
        with self.assertRaises(ConfigError):
            render_multi(self.image, [])


class TestMarkerSpec(unittest.TestCase):
    def test_defaults(self):
        spec = MarkerSpec()
        self.assertEqual(spec.style, MarkerStyle.ARROW)
        self.assertEqual(spec.stroke_width, 5)

    def test_validation(self):
        with self.assertRaises(ValidationError):
            MarkerSpec(stroke_width=0)
        with self.assertRaises(ValidationError):
            MarkerSpec(color=(0, 0, 300))
        with self.assertRaises(ValidationError):
            MarkerSpec(label="")
        with self.assertRaises(ValidationError):
            MarkerSpec(size=2, stroke_width=5)


if __name__ == "__main__":
    unittest.main()
