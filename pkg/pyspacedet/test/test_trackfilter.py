import json
import os
import tempfile
import unittest

import numpy as np
from scipy import ndimage

from pyspacedet import trackfilter
from pyspacedet.metrics import Detection
from pyspacedet.trackfilter import FlowEstimate, Track

# -----------------------------------------------------------------------------
# fixtures


def det_at(cx, cy, frame, size=4.0):
    h = size / 2
    return Detection(f"f{frame}", 0, (cx - h, cy - h, cx + h, cy + h), 0.9, frame_index=frame)


def track_with_velocity(track_id, v, n=3, start=(0.0, 0.0)):
    track = Track(track_id)
    for k in range(n):
        track.add(det_at(start[0] + v[0] * k, start[1] + v[1] * k, k), k)
    return track


def sequence(rng, n_background=4, n_frames=3, flow=(5.0, 0.0), target_v=(1.0, 2.0)):
    '''
    Background objects drifting with the flow plus one target moving at
    target_v, spread far enough apart that the gate never confuses them.
    '''
    starts = [(50.0 + 60 * i, 40.0 + 25 * (i % 3)) for i in range(n_background + 1)]
    dets = []
    for i, (x, y) in enumerate(starts):
        v = target_v if i == n_background else flow
        for k in range(n_frames):
            jitter = rng.uniform(-0.05, 0.05, size=2)
            dets.append(det_at(x + v[0] * k + jitter[0], y + v[1] * k + jitter[1], k))
    rng.shuffle(dets)
    return dets

# -----------------------------------------------------------------------------
# unit tests


class Test_associate(unittest.TestCase):

    def test_single_mover(self):
        frames = [[det_at(10 + 2 * k, 20, k)] for k in range(5)]
        tracks = trackfilter.associate(frames, gate_px=10)
        self.assertEqual(len(tracks), 1)
        vx, vy = tracks[0].velocity_px_per_frame
        self.assertAlmostEqual(vx, 2.0, places=9)
        self.assertAlmostEqual(vy, 0.0, places=9)

    def test_gating(self):
        frames = [[det_at(0, 0, 0)], [det_at(100, 0, 1)]]
        tracks = trackfilter.associate(frames, gate_px=10)
        self.assertEqual(len(tracks), 2)

    def test_single_frame(self):
        frames = [[det_at(0, 0, 0), det_at(50, 0, 0), det_at(0, 50, 0)]]
        tracks = trackfilter.associate(frames, gate_px=10)
        self.assertEqual(len(tracks), 3)
        self.assertTrue(all(t.velocity_px_per_frame is None for t in tracks))

    def test_tie_break_lowest_detection(self):
        frames = [[det_at(10, 10, 0)], [det_at(7, 10, 1), det_at(13, 10, 1)]]
        tracks = trackfilter.associate(frames, gate_px=10)
        self.assertEqual(len(tracks), 2)
        self.assertEqual(tracks[0].detections[1].bbox, det_at(7, 10, 1).bbox)

    def test_missed_frames(self):
        frames = [[det_at(0, 0, 0)], [], [det_at(2, 0, 2)]]
        self.assertEqual(len(trackfilter.associate(frames, gate_px=10, max_missed=1)), 1)
        frames = [[det_at(0, 0, 0)], [], [], [], [det_at(2, 0, 4)]]
        self.assertEqual(len(trackfilter.associate(frames, gate_px=10, max_missed=2)), 2)

    def test_group_by_frame(self):
        dets = [det_at(0, 0, 3), det_at(5, 5, 1)]
        indices, frames = trackfilter.group_by_frame(dets)
        self.assertEqual(indices, [1, 2, 3])
        self.assertEqual([len(f) for f in frames], [1, 0, 1])

    def test_track_order(self):
        track = Track(0)
        track.add(det_at(0, 0, 2), 2)
        with self.assertRaises(trackfilter.TrackError):
            track.add(det_at(1, 0, 2), 2)

    def test_bad_gate(self):
        with self.assertRaises(ValueError):
            trackfilter.CentroidTracker(gate_px=0)


class Test_background_flow(unittest.TestCase):

    def test_config_pass_through(self):
        flow = trackfilter.background_flow([], "ephemeris_config", (5, 0))
        self.assertEqual(flow.background_velocity_px_per_frame, (5.0, 0.0))
        self.assertEqual(flow.source, "ephemeris_config")
        with self.assertRaises(trackfilter.TrackError):
            trackfilter.background_flow([], "ephemeris_config", None)

    def test_median_of_tracks(self):
        vels = [(5, 0), (5.1, 0.1), (4.9, -0.1), (1, 2)]
        tracks = [track_with_velocity(i, v) for i, v in enumerate(vels)]
        median = trackfilter.background_flow(tracks, "median_of_tracks")
        # component-wise median of the four velocities
        self.assertAlmostEqual(median.background_velocity_px_per_frame[0], 4.95, places=9)
        self.assertAlmostEqual(median.background_velocity_px_per_frame[1], 0.05, places=9)
        medoid = trackfilter.background_flow(tracks, "median_of_tracks", estimator="medoid")
        self.assertAlmostEqual(medoid.background_velocity_px_per_frame[0], 5.0, places=9)
        self.assertAlmostEqual(medoid.background_velocity_px_per_frame[1], 0.0, places=9)

    def test_too_few_tracks(self):
        tracks = [track_with_velocity(i, (5, 0)) for i in range(2)]
        with self.assertRaises(trackfilter.TrackError):
            trackfilter.background_flow(tracks, "median_of_tracks")

    def test_bad_flow(self):
        with self.assertRaises(trackfilter.TrackError):
            FlowEstimate((np.nan, 0.0), "ephemeris_config")

    def test_phase_correlation(self):
        rng = np.random.default_rng(4)
        base = rng.random((40, 48))
        frames = [np.roll(base, (2 * k, -3 * k), axis=(0, 1)) for k in range(4)]
        dx, dy = trackfilter.phase_correlation_shift(frames[0], frames[1])
        self.assertAlmostEqual(dx, -3.0, places=9)
        self.assertAlmostEqual(dy, 2.0, places=9)
        flow = trackfilter.flow_from_frames(frames)
        vx, vy = flow.background_velocity_px_per_frame
        self.assertAlmostEqual(vx, -3.0, places=9)
        self.assertAlmostEqual(vy, 2.0, places=9)
        self.assertEqual(flow.source, "phase_correlation")

    def test_phase_correlation_subpixel(self):
        rng = np.random.default_rng(5)
        base = ndimage.gaussian_filter(rng.random((64, 64)), 2.0, mode="wrap")
        for dx, dy in [(-2.6, 1.4), (0.5, 0.0), (3.3, -1.7)]:
            moved = np.real(np.fft.ifft2(ndimage.fourier_shift(np.fft.fft2(base), (dy, dx))))
            with self.subTest(shift=(dx, dy)):
                got = trackfilter.phase_correlation_shift(base, moved, upsample_factor=20)
                print(f"[pyspacedet.test_trackfilter] shift ({dx}, {dy}) -> {got}")
                self.assertAlmostEqual(got[0], dx, delta=0.1)
                self.assertAlmostEqual(got[1], dy, delta=0.1)
        with self.assertRaises(ValueError):
            trackfilter.phase_correlation_shift(base, base, upsample_factor=0)
        with self.assertRaises(trackfilter.TrackError):
            trackfilter.phase_correlation_shift(base, base[:32])


class Test_classify(unittest.TestCase):

    def setUp(self):
        self.flow = FlowEstimate((5.0, 0.0), "ephemeris_config")

    def test_residuals(self):
        tracks = [track_with_velocity(0, (1, 2)),
                  track_with_velocity(1, (5.1, 0.05)),
                  track_with_velocity(2, (5, 0))]
        labels = trackfilter.classify(tracks, self.flow, 1.0)
        self.assertEqual(labels, {0: "target", 1: "background", 2: "background"})

    def test_single_detection_unknown(self):
        track = Track(0)
        track.add(det_at(0, 0, 0), 0)
        self.assertEqual(trackfilter.classify([track], self.flow, 1.0), {0: "unknown"})

    def test_shared_offset_invariance(self):
        rng = np.random.default_rng(11)
        for trial in range(100):
            vels = rng.uniform(-8, 8, size=(5, 2))
            flow = rng.uniform(-8, 8, size=2)
            offset = rng.uniform(-20, 20, size=2)
            thresh = float(rng.uniform(0.5, 4))
            a = trackfilter.classify([track_with_velocity(i, v) for i, v in enumerate(vels)],
                                     FlowEstimate(tuple(flow), "ephemeris_config"), thresh)
            b = trackfilter.classify([track_with_velocity(i, v + offset) for i, v in enumerate(vels)],
                                     FlowEstimate(tuple(flow + offset), "ephemeris_config"), thresh)
            with self.subTest(trial=trial):
                self.assertEqual(a, b)

    def test_bad_threshold(self):
        with self.assertRaises(ValueError):
            trackfilter.classify([], self.flow, 0.0)


class Test_filter_sequence(unittest.TestCase):

    def test_synthetic_suite(self):
        rng = np.random.default_rng(0)
        for trial in range(20):
            n_bg = int(rng.integers(3, 7))
            target_v = (5.0 + float(rng.uniform(1.2, 3)) * float(rng.choice([-1, 1])),
                        float(rng.uniform(-1, 1)))
            dets = sequence(rng, n_background=n_bg, n_frames=int(rng.integers(3, 6)),
                            target_v=target_v)
            for mode in ("ephemeris_config", "median_of_tracks"):
                tracks, flow, labels = trackfilter.filter_sequence(
                    dets, gate_px=10, residual_thresh_px=1.0, mode=mode, config_flow=(5, 0))
                with self.subTest(trial=trial, mode=mode):
                    self.assertEqual(len(tracks), n_bg + 1)
                    targets = [t for t in tracks if labels[t.track_id] == "target"]
                    self.assertEqual(len(targets), 1)
                    tv = targets[0].velocity_px_per_frame
                    self.assertLess(abs(tv[0] - target_v[0]), 0.2)
                    self.assertEqual(sum(1 for v in labels.values() if v == "background"), n_bg)

    def test_precomputed_flow(self):
        dets = sequence(np.random.default_rng(1))
        flow = FlowEstimate((5.0, 0.0), "phase_correlation")
        _, used, labels = trackfilter.filter_sequence(dets, flow=flow)
        self.assertIs(used, flow)
        self.assertEqual(sum(1 for v in labels.values() if v == "target"), 1)

    def test_write_tracks(self):
        dets = sequence(np.random.default_rng(2))
        tracks, flow, labels = trackfilter.filter_sequence(dets, config_flow=(5, 0))
        with tempfile.TemporaryDirectory() as tmp:
            path = trackfilter.write_tracks_json(tracks, labels, flow, os.path.join(tmp, "t.json"))
            with open(path) as fh:
                data = json.load(fh)
        self.assertEqual(data["background_flow"]["velocity_px_per_frame"], [5.0, 0.0])
        self.assertEqual(len(data["tracks"]), 5)
        self.assertEqual(sorted(r["label"] for r in data["tracks"]).count("target"), 1)
