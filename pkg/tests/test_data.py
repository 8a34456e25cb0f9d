import json
import os
import tempfile
import unittest
from collections import Counter
from itertools import islice
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.stats import chisquare

from depth_forge.augment import AugmentConfig, ImageDims
from depth_forge.errors import ConfigError, ManifestError
from depth_forge.geometry import Intrinsics, Pixel
from depth_forge.data import (
    MixtureSpec,
    SampleManifestEntry,
    eval_budget,
    export_sft,
    load_frame,
    load_manifest,
    mixture_stream,
    read_depth,
    read_pfm,
    write_manifest,
    write_pfm,
)
from depth_forge.schemas import TaskKind
from depth_forge.synthetic import render_plane_scene
from depth_forge.tasks import QaOptions, make_qa
from tests.test_tasks import plane_frame


def entry_dict(entry_id="e0", dataset="synthetic", **extra):
    raw = {
        "id": entry_id,
        "image_path": f"{entry_id}.png",
        "depth_path": f"{entry_id}.npy",
        "depth_encoding": "npy",
        "depth_scale": 1.0,
        "intrinsics": {"fx": 100.0, "fy": 100.0, "cx": 40.0, "cy": 30.0},
        "dataset": dataset,
    }
    raw.update(extra)
    return raw


def write_lines(path, lines):
    with open(path, "w") as f:
        for line in lines:
            f.write((line if isinstance(line, str) else json.dumps(line)) + "\n")


class TestManifest(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "manifest.jsonl")

    def tearDown(self):
        self.tmp.cleanup()

    def load_error(self, lines) -> ManifestError:
        write_lines(self.path, lines)
        with self.assertRaises(ManifestError) as ctx:
            load_manifest(self.path)
        return ctx.exception

    def test_loads_and_groups(self):
        write_lines(self.path, [entry_dict("a", "B"), "", entry_dict("b", "A"), entry_dict("c", "B", split="train")])
        index = load_manifest(self.path)
        self.assertEqual(len(index), 3)
        self.assertEqual(index.counts(), {"A": 1, "B": 2})
        self.assertEqual(list(index.by_dataset("eval")), ["A", "B"])
        self.assertEqual([e.id for e in index.by_dataset("eval")["B"]], ["a"])
        self.assertEqual(index.resolve("a.png"), Path(self.tmp.name) / "a.png")

    def test_missing_field(self):
        raw = entry_dict()
        del raw["intrinsics"]
        error = self.load_error([entry_dict("ok"), raw])
        self.assertEqual(error.line, 2)
        self.assertEqual(error.field, "intrinsics")
        self.assertIn("line 2", str(error))

    def test_bad_values(self):
        bad_focal = entry_dict(intrinsics={"fx": 0.0, "fy": 100.0, "cx": 1.0, "cy": 1.0})
        self.assertEqual(self.load_error([bad_focal]).field, "intrinsics.fx")
        self.assertEqual(self.load_error([entry_dict(depth_encoding="exr")]).field, "depth_encoding")
        self.assertEqual(self.load_error([entry_dict(schema_version="2")]).field, "schema_version")
        scaled = np.eye(4).tolist()
        scaled[0][0] = 2.0
        self.assertEqual(self.load_error([entry_dict(pose=scaled)]).field, "pose")

    def test_duplicate_and_garbage(self):
        error = self.load_error([entry_dict("x"), entry_dict("x")])
        self.assertEqual((error.line, error.field), (2, "id"))
        self.assertEqual(self.load_error(["{not json"]).line, 1)
        self.assertEqual(self.load_error(["[1, 2]"]).line, 1)

    def test_empty_and_missing(self):
        write_lines(self.path, [""])
        with self.assertRaises(ManifestError):
            load_manifest(self.path)
        with self.assertRaises(ConfigError):
            load_manifest(os.path.join(self.tmp.name, "nope.jsonl"))

    def test_write_round_trip(self):
        entries = [SampleManifestEntry.model_validate(entry_dict(f"e{i}")) for i in range(3)]
        write_manifest(entries, self.path)
        self.assertEqual([e.id for e in load_manifest(self.path)], ["e0", "e1", "e2"])


class TestDepthIO(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_png16_millimeters(self):
        raw = np.array([[0, 1500], [2000, 65000]], dtype=np.uint16)
        Image.fromarray(raw).save(self.root / "d.png")
        entry = SampleManifestEntry.model_validate(
            entry_dict(depth_path="d.png", depth_encoding="png16", depth_scale=0.001)
        )
        depth, mask = read_depth(entry, self.root, max_depth=50.0)
        np.testing.assert_array_equal(mask, [[False, True], [True, False]])
        np.testing.assert_allclose(depth, [[0.0, 1.5], [2.0, 0.0]])

    def test_pfm(self):
        data = np.arange(12, dtype=np.float64).reshape(3, 4) + 0.5
        write_pfm(self.root / "d.pfm", data)
        np.testing.assert_array_equal(read_pfm(self.root / "d.pfm"), data)
        entry = SampleManifestEntry.model_validate(entry_dict(depth_path="d.pfm", depth_encoding="pfm"))
        depth, mask = read_depth(entry, self.root)
        self.assertTrue(mask.all())

    def test_npy_non_finite(self):
        np.save(self.root / "d.npy", np.array([[np.nan, 1.0], [np.inf, -2.0]]))
        entry = SampleManifestEntry.model_validate(entry_dict(depth_path="d.npy"))
        depth, mask = read_depth(entry, self.root)
        np.testing.assert_array_equal(mask, [[False, True], [False, False]])
        self.assertTrue(np.isfinite(depth).all())

    def test_shape_mismatch(self):
        np.save(self.root / "d.npy", np.ones((2, 3)))
        entry = SampleManifestEntry.model_validate(entry_dict(depth_path="d.npy"))
        with self.assertRaises(ConfigError):
            read_depth(entry, self.root, expected_size=(2, 3))
        with self.assertRaises(ConfigError):
            read_depth(SampleManifestEntry.model_validate(entry_dict(depth_path="missing.npy")), self.root)

    def test_load_frame(self):
        image, depth, _ = render_plane_scene(ImageDims(80, 60), Intrinsics(100.0, 100.0, 40.0, 30.0))
        image.save(self.root / "e0.png")
        np.save(self.root / "e0.npy", depth)
        write_lines(self.root / "m.jsonl", [entry_dict("e0", pose=np.eye(4).tolist(), scene="s")])
        index = load_manifest(self.root / "m.jsonl")
        frame = load_frame(index, index.entries[0])
        self.assertEqual((frame.width, frame.height), (80, 60))
        self.assertEqual(frame.depth_at(Pixel(40.0, 30.0)), 2.0)
        self.assertEqual(frame.scene, "s")
        np.testing.assert_array_equal(frame.pose, np.eye(4))


class TestMixture(unittest.TestCase):
    def setUp(self):
        self.datasets = {
            "a": [("a", i) for i in range(7)],
            "b": [("b", i) for i in range(50)],
            "matterport3d": [("matterport3d", i) for i in range(3)],
        }

    def test_weights_follow_spec(self):
        spec = MixtureSpec(weights={"a": 1.0, "b": 3.0}, seed=1)
        weights = spec.resolved_weights(list(self.datasets))
        self.assertEqual(weights, {"a": 1.0, "b": 3.0, "matterport3d": 0.1})
        draws = list(islice(mixture_stream(spec, self.datasets), 100000))
        counts = Counter(name for name, _ in draws)
        total = sum(weights.values())
        observed = [counts[n] for n in weights]
        expected = [100000 * w / total for w in weights.values()]
        self.assertGreater(chisquare(observed, expected).pvalue, 0.01)
        for n, w in weights.items():
            self.assertAlmostEqual(counts[n] / 100000, w / total, delta=0.01)

    def test_epochs_cover_every_item(self):
        spec = MixtureSpec(weights={"a": 1.0, "b": 0.0, "matterport3d": 0.0}, seed=4)
        draws = list(islice(mixture_stream(spec, self.datasets), 14))
        self.assertEqual(sorted(draws[:7]), self.datasets["a"])
        self.assertEqual(sorted(draws[7:]), self.datasets["a"])

    def test_deterministic(self):
        spec = MixtureSpec(seed=9)
        first = list(islice(mixture_stream(spec, self.datasets), 200))
        second = list(islice(mixture_stream(spec, self.datasets), 200))
        self.assertEqual(first, second)
        other = list(islice(mixture_stream(MixtureSpec(seed=10), self.datasets), 200))
        self.assertNotEqual(first, other)

    def test_bad_specs(self):
        with self.assertRaises(ConfigError):
            MixtureSpec(weights={"zzz": 1.0}).resolved_weights(["a"])
        with self.assertRaises(ConfigError):
            MixtureSpec(weights={"a": 0.0}).resolved_weights(["a"])
        with self.assertRaises(ValueError):
            MixtureSpec(weights={"a": -1.0})
        with self.assertRaises(ConfigError):
            next(mixture_stream(MixtureSpec(), {"a": []}))


class TestEvalBudget(unittest.TestCase):
    def test_round_robin(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "m.jsonl")
            lines = [entry_dict(f"x{i}", "X") for i in range(3)] + [entry_dict("y0", "Y")]
            lines.append(entry_dict("t0", "X", split="train"))
            write_lines(path, lines)
            budget = eval_budget(load_manifest(path), 8)
        self.assertEqual(budget, {"x0": 3, "x1": 3, "x2": 2, "y0": 8})

    def test_small_budget_skips_entries(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "m.jsonl")
            write_lines(path, [entry_dict(f"x{i}", "X") for i in range(3)])
            self.assertEqual(eval_budget(load_manifest(path), 2), {"x0": 1, "x1": 1})


class TestExportSft(unittest.TestCase):
    def setUp(self):
        self.frame = plane_frame()
        self.options = QaOptions(augment=AugmentConfig(unify_focal=False))

    def record(self, sample_id, task=TaskKind.DISTANCE):
        return make_qa([self.frame], task, [Pixel(10.0, 10.0)], np.random.default_rng(0),
                       options=self.options, sample_id=sample_id)

    def test_lines_and_images(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = export_sft((self.record(f"s/{i}") for i in range(3)), tmp)
            with open(path) as f:
                lines = [json.loads(line) for line in f]
            self.assertEqual([line["id"] for line in lines], ["s/0", "s/1", "s/2"])
            first = lines[0]
            self.assertEqual(first["images"], ["images/s_0_0.png"])
            self.assertTrue(os.path.isfile(os.path.join(tmp, first["images"][0])))
            self.assertEqual(first["unit"], "m")
            self.assertEqual(first["schema_version"], "1")
            self.assertEqual(first["meta"]["source_ids"], ["f0"])
            self.assertEqual(first["meta"]["query_pixels"][0]["original"], [10.0, 10.0])

    def test_collision(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ConfigError):
                export_sft([self.record("a/b"), self.record("a_b")], tmp)


if __name__ == "__main__":
    unittest.main()
