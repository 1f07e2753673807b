'''
pyspacedet/bench.py

Latency benchmark harness: warmup passes, then n timed prediction passes on
one fixed input, each timed with a monotonic clock.
'''

import json
import logging
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from pyspacedet import distillkernel, metrics, raster, scenegen

logger = logging.getLogger(__name__)

DEFAULT_INPUT_SPEC = (832, 832, 3)

# -----------------------------------------------------------------------------


class BenchError(RuntimeError):
    """Raised when a predictor fails during a benchmark pass."""

    def __init__(self, pass_index, phase, err):
        self.pass_index = pass_index
        self.phase = phase
        super().__init__(f"predictor raised on {phase} pass {pass_index}: {err!r}")


@dataclass
class BenchReport:
    n_passes: int
    warmup_passes: int
    mean_ms: float
    p50_ms: float
    p95_ms: float
    min_ms: float
    max_ms: float
    input_spec: tuple
    predictor: str = "custom"

    def to_dict(self):
        out = asdict(self)
        out["input_spec"] = list(self.input_spec)
        return out


def make_input(input_spec=DEFAULT_INPUT_SPEC, seed=0):
    h, w, channels = (int(v) for v in input_spec)
    if h < 1 or w < 1 or channels not in (1, 3):
        raise ValueError(f"input_spec must be (H, W, 1|3), got {input_spec}")
    rng = np.random.default_rng(seed)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return raster.Frame(rng.random(shape), band="RGB" if channels == 3 else "LWIR")


def benchmark(predictor, input_spec=DEFAULT_INPUT_SPEC, n_passes=500, warmup=10, seed=0,
              name=None):
    '''
    Time predictor(image) over n_passes after warmup untimed passes.
    Statistics cover the timed passes only.
    '''
    if int(n_passes) < 1:
        raise ValueError(f"n_passes must be >= 1, got {n_passes}")
    if int(warmup) < 0:
        raise ValueError(f"warmup must be >= 0, got {warmup}")
    image = make_input(input_spec, seed)

    for i in range(int(warmup)):
        try:
            predictor(image)
        except Exception as err:
            raise BenchError(i, "warmup", err) from err

    times_ns = np.zeros(int(n_passes), dtype=np.int64)
    for i in range(int(n_passes)):
        start = time.perf_counter_ns()
        try:
            predictor(image)
        except Exception as err:
            raise BenchError(i, "timed", err) from err
        times_ns[i] = time.perf_counter_ns() - start

    ms = times_ns / 1e6
    report = BenchReport(n_passes=int(n_passes), warmup_passes=int(warmup),
                         mean_ms=float(ms.mean()),
                         p50_ms=float(np.percentile(ms, 50)),
                         p95_ms=float(np.percentile(ms, 95)),
                         min_ms=float(ms.min()), max_ms=float(ms.max()),
                         input_spec=tuple(int(v) for v in input_spec),
                         predictor=name or getattr(predictor, "__name__", type(predictor).__name__))
    logger.info("[bench] %s: mean %.3f ms, p50 %.3f, p95 %.3f over %d passes",
                report.predictor, report.mean_ms, report.p50_ms, report.p95_ms, n_passes)
    return report


def write_report_json(report, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
    return path

# -----------------------------------------------------------------------------
# built-in predictors


class NoopPredictor:

    def __init__(self, input_spec=DEFAULT_INPUT_SPEC, seed=0):
        pass

    def help(self):
        return "Does nothing; measures harness overhead"

    def __call__(self, image):
        return None


class RenderPredictor:
    '''
    Renders one scene per pass: a mid-grey background of the input size and
    a disk-shaped sprite at a fixed range and orientation.
    '''

    def __init__(self, input_spec=DEFAULT_INPUT_SPEC, seed=0):
        h, w = int(input_spec[0]), int(input_spec[1])
        self.camera = scenegen.camera_from_orbit(156.0, 456000.0, w, h)
        self.background = raster.Frame(np.full((h, w), 0.5))
        yy, xx = np.mgrid[0:64, 0:64]
        alpha = (xx - 31.5) ** 2 + (yy - 31.5) ** 2 <= 30 ** 2
        image = raster.Frame(np.where(alpha, 0.9, 0.0))
        # 64 px wide at 20 m shrinks to about 16 px at 80 m
        self.sprite = raster.Sprite(image, alpha, native_gsd_m=80 * self.camera.ifov_rad / 4)
        self.spec = scenegen.SceneSpec(
            seed=seed, scene_index=0, background_id="bench", sprite_id="disk",
            crop_origin=(0.0, 0.0), distance_m=80.0, orientation_rad=0.7,
            position_px=(max(0, w // 2 - 16), max(0, h // 2 - 16)), blend="multiply")

    def help(self):
        return "Scene render (scale, rotate, composite, label) at the input size"

    def __call__(self, image):
        return scenegen.render_scene(self.spec, self.background, self.sprite, self.camera)


class MetricsPredictor:
    '''
    Thresholds the input into a two-class map and scores it against a
    shifted copy (confusion matrix, mIoU).
    '''

    def __init__(self, input_spec=DEFAULT_INPUT_SPEC, seed=0):
        self.class_names = ["background", "spacecraft"]

    def help(self):
        return "Segmentation metric pass (confusion matrix and mIoU) on the input"

    def __call__(self, image):
        data = image.data if image.channels == 1 else image.data.mean(axis=2)
        pred = (data > 0.5).astype(np.int64)
        gt = np.roll(pred, 1, axis=1)
        return metrics.miou(metrics.SegSample(pred, gt, self.class_names))


class DistillPredictor:
    '''
    One distillation SGD step (teacher, student, upsample, loss, update) on
    the input with an 8-channel student.
    '''

    def __init__(self, input_spec=DEFAULT_INPUT_SPEC, seed=0, c=8):
        self.teacher = distillkernel.MockTeacher(c, seed)
        self.student = distillkernel.ToyStudent.init(c, seed=seed + 1)

    def help(self):
        return "Single distillation step with the mock teacher (c=8)"

    def __call__(self, image):
        if image.channels != 3:
            raise ValueError("distill predictor needs an RGB input_spec")
        loss, grads = distillkernel.batch_gradients(self.teacher, self.student, [image])
        self.student = self.student.with_params(
            distillkernel.sgd_step(self.student.params(), grads, 1e-6))
        return loss


bench_predictors = {"noop": NoopPredictor,
                    "render": RenderPredictor,
                    "metrics": MetricsPredictor,
                    "distill": DistillPredictor}


def make_predictor(name, input_spec=DEFAULT_INPUT_SPEC, seed=0):
    if name not in bench_predictors:
        raise ValueError(f"unknown predictor {name}, expected one of {sorted(bench_predictors)}")
    return bench_predictors[name](input_spec, seed)
