import copy
import json
import os
import tempfile
import unittest

import numpy as np

from pyspacedet import config, datasetio, raster, scenegen
from pyspacedet.raster import Frame, Sprite

# -----------------------------------------------------------------------------
# fixtures


def disk_sprite(n=40, r=18, value=0.8, native_gsd_m=0.003421, sprite_id="disk"):
    yy, xx = np.mgrid[0:n, 0:n]
    c = (n - 1) / 2
    alpha = (xx - c) ** 2 + (yy - c) ** 2 <= r ** 2
    return Sprite(Frame(np.where(alpha, value, 0.0)), alpha, native_gsd_m, sprite_id)


def write_assets(tmp):
    '''
    A 100x80 px noise background at 156 m/px, a 40 px disk sprite and a
    config for a 64x48 px frame that reads them.
    '''
    rng = np.random.default_rng(5)
    raster.write_frame(Frame(0.2 + 0.6 * rng.random((80, 100))), os.path.join(tmp, "earth.png"))
    raster.write_frame(disk_sprite().image, os.path.join(tmp, "sat.png"))
    cfg = {"camera": {"width_px": 64, "height_px": 48},
           "crop_extent_m": [64 * 156.0, 48 * 156.0],
           "assets": {"backgrounds": [{"path": "earth.png"}],
                      "sprites": [{"path": "sat.png", "native_gsd_m": 0.003421}]}}
    path = os.path.join(tmp, "scene.json")
    with open(path, "w") as fh:
        json.dump(cfg, fh)
    return path


def read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()

# -----------------------------------------------------------------------------
# unit tests


class Test_geometry(unittest.TestCase):

    def test_ifov(self):
        cam = scenegen.camera_from_orbit(156, 456000, 641, 512)
        self.assertAlmostEqual(cam.ifov_rad, 3.42105e-4, delta=1e-9)
        self.assertEqual(scenegen.camera_from_orbit(1, 1, 1, 1).ifov_rad, 1.0)

    def test_frame_dims(self):
        self.assertEqual(scenegen.frame_dims_for_crop(100000, 80000, 156), (641, 512))

    def test_default_camera(self):
        cam = scenegen.camera_from_config(config.DEFAULT_CONFIG)
        self.assertEqual((cam.width_px, cam.height_px), (641, 512))

    def test_bad_orbit(self):
        with self.assertRaises(ValueError):
            scenegen.camera_from_orbit(0, 456000, 641, 512)
        with self.assertRaises(ValueError):
            scenegen.camera_from_orbit(156, -1, 641, 512)

    def test_sprite_scale(self):
        cam = scenegen.camera_from_orbit(156, 456000, 641, 512)
        sprite = disk_sprite(native_gsd_m=0.005)
        self.assertAlmostEqual(scenegen.sprite_scale(100, cam, sprite), 0.14615, places=5)
        fixed = sprite.native_gsd_m / cam.ifov_rad
        self.assertAlmostEqual(scenegen.sprite_scale(fixed, cam, sprite), 1.0, places=12)
        with self.assertRaises(ValueError):
            scenegen.sprite_scale(0, cam, sprite)


class Test_sample_scene(unittest.TestCase):

    def setUp(self):
        self.config = copy.deepcopy(config.DEFAULT_CONFIG)
        self.camera = scenegen.camera_from_config(self.config)
        self.sprite = disk_sprite()

    def test_deterministic(self):
        a = scenegen.sample_scene(42, 7, self.config, [self.sprite], camera=self.camera)
        b = scenegen.sample_scene(42, 7, self.config, [self.sprite], camera=self.camera)
        self.assertEqual(a, b)
        c = scenegen.sample_scene(42, 8, self.config, [self.sprite], camera=self.camera)
        self.assertNotEqual(a, c)

    def test_distributions(self):
        n = 10000
        specs = [scenegen.sample_scene(3, i, self.config, [self.sprite], camera=self.camera)
                 for i in range(n)]
        d = np.array([s.distance_m for s in specs])
        t = np.array([s.orientation_rad for s in specs])
        self.assertTrue(np.all((d >= 20) & (d <= 150)))
        self.assertTrue(np.all((t >= 0) & (t < 2 * np.pi)))
        frac = np.mean([s.blend == "multiply" for s in specs])
        print(f"[pyspacedet.test_scenegen] multiply fraction {frac:.4f}")
        self.assertLess(abs(frac - 0.5), 0.02)

    def test_placement_inside_frame(self):
        for i in range(200):
            spec = scenegen.sample_scene(9, i, self.config, [self.sprite], camera=self.camera)
            w = raster.scaled_size(self.sprite.image.width, spec.scale)
            h = raster.scaled_size(self.sprite.image.height, spec.scale)
            cw, ch = raster.rotated_canvas(w, h, spec.orientation_rad)
            x, y = spec.position_px
            self.assertTrue(0 <= x and x + cw <= self.camera.width_px)
            self.assertTrue(0 <= y and y + ch <= self.camera.height_px)

    def test_unsatisfiable(self):
        huge = disk_sprite(n=40, native_gsd_m=5.0)
        with self.assertRaises(scenegen.UnsatisfiablePlacementError):
            scenegen.sample_scene(0, 0, self.config, [huge], camera=self.camera)

    def test_spec_round_trip(self):
        spec = scenegen.sample_scene(1, 2, self.config, [self.sprite], camera=self.camera)
        back = scenegen.SceneSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
        self.assertEqual(back, spec)


class Test_render_scene(unittest.TestCase):

    def test_identity_transform(self):
        camera = scenegen.CameraModel(0.5, 32, 24)
        rng = np.random.default_rng(0)
        alpha = rng.random((6, 9)) > 0.4
        alpha[0, 0] = True
        sprite = Sprite(Frame(np.where(alpha, 0.9, 0.0)), alpha, native_gsd_m=1.0)
        spec = scenegen.SceneSpec(0, 3, "bg", "s", (0.0, 0.0), 2.0, 0.0, (5, 4), "replace")
        background = Frame(np.full((24, 32), 0.3))
        frame, ann = scenegen.render_scene(spec, background, sprite, camera)
        expected = np.zeros((24, 32), dtype=bool)
        expected[4:10, 5:14] = alpha
        self.assertTrue(np.array_equal(ann.decode_mask(), expected))
        self.assertTrue(np.allclose(frame.data[expected], 0.9))
        self.assertTrue(np.allclose(frame.data[~expected], 0.3))
        self.assertEqual(ann.image_id, "000003")

    def test_bbox_tight(self):
        cfg = copy.deepcopy(config.DEFAULT_CONFIG)
        cfg["camera"].update(width_px=96, height_px=80)
        camera = scenegen.camera_from_config(cfg)
        sprite = disk_sprite()
        background = Frame(np.full((80, 96), 0.5))
        for i in range(200):
            spec = scenegen.sample_scene(11, i, cfg, [sprite], camera=camera)
            frame, ann = scenegen.render_scene(spec, background, sprite, camera)
            mask = ann.decode_mask()
            with self.subTest(i=i):
                self.assertEqual(ann.bbox, datasetio.bbox_from_mask(mask))
                x0, y0, x1, y1 = ann.bbox
                self.assertEqual(mask.sum(), mask[y0:y1, x0:x1].sum())

    def test_area_ratio(self):
        camera = scenegen.camera_from_config(config.DEFAULT_CONFIG)
        alpha = np.ones((300, 300), dtype=bool)
        sprite = Sprite(Frame(np.full((300, 300), 0.9)), alpha, native_gsd_m=0.0035)
        background = Frame(np.full((512, 641), 0.5))
        areas = {}
        for d in (20.0, 150.0):
            spec = scenegen.SceneSpec(0, 0, "bg", "s", (0.0, 0.0), d, 0.0, (10, 10), "multiply")
            _, ann = scenegen.render_scene(spec, background, sprite, camera)
            x0, y0, x1, y1 = ann.bbox
            areas[d] = (x1 - x0) * (y1 - y0)
        ratio = areas[150.0] / areas[20.0]
        expected = (20 / 150) ** 2
        print(f"[pyspacedet.test_scenegen] bbox area ratio {ratio:.5f} vs {expected:.5f}")
        self.assertLess(abs(ratio - expected) / expected, 0.10)

    def bbox_diagonal(self, sprite, distance, theta, camera, background):
        spec = scenegen.SceneSpec(0, 0, "bg", sprite.sprite_id, (0.0, 0.0), distance, theta,
                                  (10, 10), "replace")
        _, ann = scenegen.render_scene(spec, background, sprite, camera)
        x0, y0, x1, y1 = ann.bbox
        return float(np.hypot(x1 - x0, y1 - y0))

    def test_size_shrinks_with_distance(self):
        camera = scenegen.camera_from_config(config.DEFAULT_CONFIG)
        background = Frame(np.full((512, 641), 0.5))
        alpha = np.ones((80, 120), dtype=bool)
        plate = Sprite(Frame(np.full((80, 120), 0.9)), alpha, native_gsd_m=0.0035, sprite_id="plate")
        distances = np.linspace(20.0, 150.0, 60)
        for theta in (0.0, np.pi / 2, np.pi, 3 * np.pi / 2):
            diags = [self.bbox_diagonal(plate, float(d), theta, camera, background) for d in distances]
            with self.subTest(theta=theta):
                self.assertTrue(all(b <= a for a, b in zip(diags[:-1], diags[1:])))
                self.assertGreater(diags[0], diags[-1])
        rng = np.random.default_rng(17)
        sprite = disk_sprite()
        for theta in rng.uniform(0, 2 * np.pi, size=10):
            diags = [self.bbox_diagonal(sprite, d, float(theta), camera, background)
                     for d in (20.0, 30.0, 45.0, 70.0)]
            with self.subTest(theta=float(theta)):
                self.assertTrue(all(b <= a for a, b in zip(diags[:-1], diags[1:])))

    def test_partial_placement(self):
        camera = scenegen.CameraModel(0.5, 32, 24)
        alpha = np.ones((8, 8), dtype=bool)
        sprite = Sprite(Frame(np.full((8, 8), 0.9)), alpha, native_gsd_m=1.0)
        spec = scenegen.SceneSpec(0, 0, "bg", "s", (0.0, 0.0), 2.0, 0.0, (-3, 20), "replace")
        background = Frame(np.zeros((24, 32)))
        with self.assertRaises(raster.PlacementError):
            scenegen.render_scene(spec, background, sprite, camera)
        _, ann = scenegen.render_scene(spec, background, sprite, camera, allow_partial=True)
        self.assertEqual(ann.bbox, (0, 20, 5, 24))

    def test_background_size_mismatch(self):
        camera = scenegen.CameraModel(0.5, 32, 24)
        spec = scenegen.SceneSpec(0, 0, "bg", "s", (0.0, 0.0), 2.0, 0.0, (0, 0), "replace")
        with self.assertRaises(raster.RasterError):
            scenegen.render_scene(spec, Frame(np.zeros((10, 10))), disk_sprite(), camera)


class Test_prepare_background(unittest.TestCase):

    def test_crop_and_resample(self):
        source = scenegen.BackgroundSource(Frame(np.full((80, 100), 0.4)), 156.0, "earth")
        camera = scenegen.CameraModel(156.0 / 456000, 64, 48)
        frame = scenegen.prepare_background(source, 156.0, (1000.0, 2000.0),
                                            (64 * 156.0, 48 * 156.0), camera)
        self.assertEqual((frame.width, frame.height), (64, 48))
        self.assertTrue(np.allclose(frame.data, 0.4))


class Test_generate_dataset(unittest.TestCase):

    def test_layout_and_labels(self):
        with tempfile.TemporaryDirectory() as tmp:
            cfg = config.load_config(write_assets(tmp))
            out = os.path.join(tmp, "d")
            manifest = scenegen.generate_dataset(cfg, 5, master_seed=1, out_dir=out)
            self.assertEqual(len(manifest.entries), 5)
            for name in ("annotations.json", "manifest.jsonl", "classes.txt"):
                self.assertTrue(os.path.exists(os.path.join(out, name)))
            for entry in manifest.entries:
                self.assertTrue(os.path.exists(os.path.join(out, entry.image_path)))
                self.assertTrue(os.path.exists(os.path.join(out, "labels", entry.image_id + ".txt")))
                self.assertEqual(len(entry.annotations), 1)
                self.assertEqual((entry.width, entry.height), (64, 48))
            back = datasetio.read_coco(os.path.join(out, "annotations.json"))
            self.assertEqual(back.image_ids, manifest.image_ids)

    def test_deterministic_across_workers(self):
        with tempfile.TemporaryDirectory() as tmp:
            cfg = config.load_config(write_assets(tmp))
            runs = {}
            for name, workers in [("a", 1), ("b", 1), ("c", 3)]:
                out = os.path.join(tmp, name)
                scenegen.generate_dataset(cfg, 8, master_seed=1, out_dir=out, workers=workers)
                runs[name] = (read_bytes(os.path.join(out, "annotations.json")),
                              read_bytes(os.path.join(out, "manifest.jsonl")),
                              read_bytes(os.path.join(out, "images", "000007.png")))
            self.assertEqual(runs["a"], runs["b"])
            self.assertEqual(runs["a"], runs["c"])

    def test_missing_asset(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = write_assets(tmp)
            os.remove(os.path.join(tmp, "sat.png"))
            cfg = config.load_config(path)
            with self.assertRaises(scenegen.AssetError) as ctx:
                scenegen.generate_dataset(cfg, 1, out_dir=os.path.join(tmp, "d"))
            self.assertIn("sat.png", str(ctx.exception))

    def test_no_assets(self):
        with self.assertRaises(config.ConfigError):
            scenegen.load_assets(config.DEFAULT_CONFIG)
