'''
pyspacedet/trackfilter.py

Multi-frame background rejection. Detections are linked across frames into
tracks by gated nearest-neighbour centroid association, each track gets a
least-squares pixel velocity, and tracks whose velocity departs from the
expected background flow by more than a threshold are labelled targets.
'''

import json
import logging
import os
from dataclasses import dataclass, field
from typing import List

import numpy as np
from scipy.spatial import distance as dist
from skimage.registration import phase_cross_correlation

from pyspacedet.metrics import box_center

logger = logging.getLogger(__name__)

FLOW_SOURCES = ("ephemeris_config", "median_of_tracks", "phase_correlation")
ESTIMATORS = ("median", "medoid")
TARGET, BACKGROUND, UNKNOWN = "target", "background", "unknown"

# -----------------------------------------------------------------------------


class TrackError(ValueError):
    """Raised when a flow estimate or track operation lacks the data it needs."""
    pass


@dataclass
class Track:
    '''
    Detections of one object in increasing frame order. frames holds the
    frame index each detection was observed at.
    '''
    track_id: int
    detections: list = field(default_factory=list)
    frames: List[int] = field(default_factory=list)

    @property
    def length(self):
        return len(self.detections)

    @property
    def centers(self):
        return np.array([box_center(d.bbox) for d in self.detections], dtype=float)

    @property
    def velocity_px_per_frame(self):
        '''
        Slope of the least-squares line through centre vs frame index, or
        None for single-detection tracks.
        '''
        if self.length < 2:
            return None
        t = np.asarray(self.frames, dtype=float)
        c = self.centers
        vx = np.polyfit(t, c[:, 0], 1)[0]
        vy = np.polyfit(t, c[:, 1], 1)[0]
        return (float(vx), float(vy))

    def predict(self, frame):
        last = self.centers[-1]
        v = self.velocity_px_per_frame
        if v is None:
            return last
        return last + np.array(v) * (frame - self.frames[-1])

    def add(self, det, frame):
        if self.frames and frame <= self.frames[-1]:
            raise TrackError(
                f"track {self.track_id}: frame {frame} does not follow {self.frames[-1]}")
        self.detections.append(det)
        self.frames.append(int(frame))

    def to_dict(self):
        v = self.velocity_px_per_frame
        return {"id": self.track_id, "frames": list(self.frames),
                "centers": self.centers.tolist(),
                "velocity_px_per_frame": list(v) if v is not None else None,
                "length": self.length}


@dataclass
class FlowEstimate:
    background_velocity_px_per_frame: tuple
    source: str

    def __post_init__(self):
        v = tuple(float(x) for x in self.background_velocity_px_per_frame)
        if len(v) != 2 or not np.all(np.isfinite(v)):
            raise TrackError(f"background flow must be two finite numbers, got {v}")
        if self.source not in FLOW_SOURCES:
            raise TrackError(f"unknown flow source {self.source}")
        self.background_velocity_px_per_frame = v

# -----------------------------------------------------------------------------
# association


class CentroidTracker:
    '''
    Frame-by-frame gated nearest-neighbour association. Each update links
    detections to the heads of live tracks, globally greedy by distance to
    the predicted position (ties: lower detection index, then lower track
    id). Tracks that go more than max_missed frames without a detection
    stop accepting new ones.
    '''

    def __init__(self, gate_px=10.0, max_missed=2):
        if not gate_px > 0:
            raise ValueError(f"gate_px must be positive, got {gate_px}")
        self.gate_px = float(gate_px)
        self.max_missed = max_missed
        self.tracks = []
        self.next_id = 0

    def register(self, det, frame):
        track = Track(self.next_id)
        track.add(det, frame)
        self.tracks.append(track)
        self.next_id += 1
        return track

    def live_tracks(self, frame):
        if self.max_missed is None:
            return list(self.tracks)
        return [t for t in self.tracks if frame - t.frames[-1] - 1 <= self.max_missed]

    def update(self, dets, frame):
        live = self.live_tracks(frame)
        used_dets, used_tracks = set(), set()
        if dets and live:
            det_centers = np.array([box_center(d.bbox) for d in dets], dtype=float)
            predicted = np.array([t.predict(frame) for t in live], dtype=float)
            D = dist.cdist(det_centers, predicted)
            pairs = sorted((D[i, j], i, live[j].track_id, j)
                           for i in range(len(dets)) for j in range(len(live))
                           if D[i, j] <= self.gate_px)
            for _, i, _, j in pairs:
                if i in used_dets or j in used_tracks:
                    continue
                live[j].add(dets[i], frame)
                used_dets.add(i)
                used_tracks.add(j)
        for i, det in enumerate(dets):
            if i not in used_dets:
                self.register(det, frame)
        return self.tracks


def group_by_frame(dets):
    '''
    Bucket detections by frame_index. Returns (frame_indices, frames) with
    every index between the first and last present, empty frames included.
    '''
    if not dets:
        return [], []
    lo = min(d.frame_index for d in dets)
    hi = max(d.frame_index for d in dets)
    frames = [[] for _ in range(hi - lo + 1)]
    for det in dets:
        frames[det.frame_index - lo].append(det)
    return list(range(lo, hi + 1)), frames


def associate(frames, gate_px=10.0, max_missed=2, frame_indices=None):
    '''
    Link per-frame detection lists into tracks. frames[k] holds the
    detections of frame frame_indices[k] (default k).
    '''
    if frame_indices is None:
        frame_indices = range(len(frames))
    tracker = CentroidTracker(gate_px, max_missed)
    for frame, dets in zip(frame_indices, frames):
        tracker.update(list(dets), frame)
    logger.info("[trackfilter] %d frames -> %d tracks", len(frames), len(tracker.tracks))
    return tracker.tracks

# -----------------------------------------------------------------------------
# background flow


def background_flow(tracks, mode="median_of_tracks", config_flow=None, estimator="median"):
    '''
    Expected background velocity, either taken from configuration
    (ephemeris_config) or estimated from at least three track velocities
    (median_of_tracks). The estimate is the component-wise median, or with
    estimator="medoid" the observed velocity with the smallest summed
    distance to the others.
    '''
    if mode == "ephemeris_config":
        if config_flow is None:
            raise TrackError("ephemeris_config mode needs a configured background_flow")
        return FlowEstimate(tuple(config_flow), "ephemeris_config")
    if mode != "median_of_tracks":
        raise ValueError(f"unknown flow mode {mode}")
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator}, expected one of {ESTIMATORS}")
    vels = np.array([t.velocity_px_per_frame for t in tracks if t.length >= 2], dtype=float)
    if len(vels) < 3:
        raise TrackError(
            f"median_of_tracks needs at least 3 tracks with a velocity, got {len(vels)}")
    if estimator == "median":
        v = np.median(vels, axis=0)
    else:
        v = vels[int(np.argmin(dist.cdist(vels, vels).sum(axis=1)))]
    return FlowEstimate((float(v[0]), float(v[1])), "median_of_tracks")


def phase_correlation_shift(frame_a, frame_b, upsample_factor=10):
    '''
    Global shift (dx, dy) that moves frame_a onto frame_b, resolved to
    1/upsample_factor px by upsampled phase cross-correlation.
    '''
    if int(upsample_factor) < 1:
        raise ValueError(f"upsample_factor must be >= 1, got {upsample_factor}")
    a = np.asarray(getattr(frame_a, "data", frame_a), dtype=float)
    b = np.asarray(getattr(frame_b, "data", frame_b), dtype=float)
    if a.ndim == 3:
        a = a.mean(axis=2)
    if b.ndim == 3:
        b = b.mean(axis=2)
    if a.shape != b.shape:
        raise TrackError(f"frames differ in shape: {a.shape} vs {b.shape}")
    # registering a onto b returns the displacement of b relative to a, as (row, col)
    shift = phase_cross_correlation(b, a, upsample_factor=int(upsample_factor))[0]
    u = float(upsample_factor)
    dy, dx = (float(np.round(s * u) / u) + 0.0 for s in shift)
    return (dx, dy)


def flow_from_frames(frames, upsample_factor=10):
    '''
    Background flow from raw frames: median of the phase-correlation shifts
    between consecutive frames.
    '''
    if len(frames) < 2:
        raise TrackError("flow_from_frames needs at least 2 frames")
    shifts = np.array([phase_correlation_shift(a, b, upsample_factor)
                       for a, b in zip(frames[:-1], frames[1:])])
    v = np.median(shifts, axis=0)
    return FlowEstimate((float(v[0]), float(v[1])), "phase_correlation")

# -----------------------------------------------------------------------------
# classification


def classify(tracks, flow, residual_thresh_px=1.0):
    '''
    Label each track by the norm of its velocity relative to the background
    flow: above residual_thresh_px is a target, otherwise background.
    Single-detection tracks are unknown. Returns {track_id: label}.
    '''
    if not residual_thresh_px > 0:
        raise ValueError(f"residual_thresh_px must be positive, got {residual_thresh_px}")
    bg = np.array(flow.background_velocity_px_per_frame)
    labels = {}
    for track in tracks:
        v = track.velocity_px_per_frame
        if v is None:
            labels[track.track_id] = UNKNOWN
            continue
        residual = float(np.linalg.norm(np.array(v) - bg))
        labels[track.track_id] = TARGET if residual > residual_thresh_px else BACKGROUND
        logger.debug("[trackfilter] track %d residual %.4f -> %s",
                     track.track_id, residual, labels[track.track_id])
    return labels


def filter_sequence(dets, gate_px=10.0, residual_thresh_px=1.0, mode=None,
                    config_flow=None, estimator="median", max_missed=2, flow=None):
    '''
    Group detections by frame, associate, estimate the background flow and
    classify. mode defaults to ephemeris_config when config_flow is given,
    else median_of_tracks; a precomputed FlowEstimate (for example from
    flow_from_frames) skips estimation. Returns (tracks, flow, labels).
    '''
    if mode is None:
        mode = "ephemeris_config" if config_flow is not None else "median_of_tracks"
    frame_indices, frames = group_by_frame(dets)
    tracks = associate(frames, gate_px, max_missed, frame_indices)
    if flow is None:
        flow = background_flow(tracks, mode, config_flow, estimator)
    labels = classify(tracks, flow, residual_thresh_px)
    n_targets = sum(1 for v in labels.values() if v == TARGET)
    logger.info("[trackfilter] flow %s from %s; %d target track(s)",
                flow.background_velocity_px_per_frame, flow.source, n_targets)
    return tracks, flow, labels


def write_tracks_json(tracks, labels, flow, path):
    records = []
    for track in tracks:
        record = track.to_dict()
        record["label"] = labels.get(track.track_id, UNKNOWN)
        records.append(record)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump({"background_flow": {"velocity_px_per_frame": list(flow.background_velocity_px_per_frame),
                                       "source": flow.source},
                   "tracks": records}, fh, indent=2)
        fh.write("\n")
    return path
