'''
pyspacedet/distillkernel.py

Desk-scale feature distillation from a frozen teacher into a small strided
convolutional student:

    for each batch:
        z_t   = teacher(x)                      (H/16 x W/16 x c tokens grid)
        z_s   = student(x)                      (H/8  x W/8  x c)
        z_t'  = upsample(z_t) to z_s dims       (bicubic or bilinear)
        L     = || z_s - z_t' ||^2              (sum or mean)
        theta = theta - eta * dL/dtheta

The student is linear in its parameters, so gradients are exact and the
regression is convex. The teacher is any callable image -> FeatureMap; a
seeded linear patch projection stands in for a large vision model.
'''

import copy
import logging
import os
from dataclasses import dataclass, field
from typing import List

import numpy as np

from pyspacedet.raster import Frame, interpolation_matrix

logger = logging.getLogger(__name__)

TEACHER_PATCH = 16
STUDENT_STRIDE = 8
REDUCTIONS = ("sum_sq", "mean_sq")
UPSAMPLE_KERNELS = ("bilinear", "bicubic")

# -----------------------------------------------------------------------------


class ShapeError(ValueError):
    """Raised when feature maps, tokens or parameters have incompatible shapes."""
    pass


class DivergenceError(ArithmeticError):
    """Raised when the distillation loss stops being finite."""
    pass


@dataclass
class FeatureMap:
    '''
    h x w grid of c-channel feature vectors, stored as an (h, w, c) array.
    '''
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ShapeError(f"feature map must be h x w x c, got shape {self.data.shape}")

    @property
    def h(self):
        return self.data.shape[0]

    @property
    def w(self):
        return self.data.shape[1]

    @property
    def c(self):
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    def is_finite(self):
        return bool(np.all(np.isfinite(self.data)))


def normalize_image(image):
    '''
    (x - 0.5) / 0.25 on an RGB frame with intensities in [0, 1].
    '''
    data = image.data if isinstance(image, Frame) else np.asarray(image, dtype=np.float64)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ShapeError(f"expected an H x W x 3 image, got shape {data.shape}")
    return (data - 0.5) / 0.25


def _windows(x, size, k):
    '''
    (Hc, k, Wc, k, 3) view of the top-left k x k pixels of each size x size
    cell of x.
    '''
    hc, wc = x.shape[0] // size, x.shape[1] // size
    cells = x[:hc * size, :wc * size].reshape(hc, size, wc, size, x.shape[2])
    return cells[:, :k, :, :k, :]

# -----------------------------------------------------------------------------
# teacher


def reshape_tokens(tokens, H, W):
    '''
    Lay a c x T token matrix out on the (floor(H/16), floor(W/16)) grid in
    row-major token order.
    '''
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2:
        raise ShapeError(f"tokens must be a c x T matrix, got shape {tokens.shape}")
    hp, wp = H // TEACHER_PATCH, W // TEACHER_PATCH
    c, T = tokens.shape
    if T != hp * wp:
        raise ShapeError(
            f"expected {hp * wp} tokens for a {H}x{W} image ({hp}x{wp} grid), got {T}")
    return FeatureMap(tokens.T.reshape(hp, wp, c))


class MockTeacher:
    '''
    Fixed seeded linear projection of non-overlapping 16x16 patches to c
    channels. Deterministic and stateless: the same image always yields the
    same features.
    '''

    def __init__(self, c=384, seed=0):
        self.c = int(c)
        self.seed = seed
        rng = np.random.default_rng(seed)
        n_in = TEACHER_PATCH * TEACHER_PATCH * 3
        self.weights = rng.standard_normal((n_in, self.c)) / np.sqrt(n_in)

    def help(self):
        return "Seeded linear projection of 16x16 patches (stand-in for a vision foundation model)"

    def tokens(self, image):
        x = normalize_image(image)
        H, W = x.shape[:2]
        if H < TEACHER_PATCH or W < TEACHER_PATCH:
            raise ShapeError(f"image {H}x{W} is smaller than one {TEACHER_PATCH}px patch")
        patches = _windows(x, TEACHER_PATCH, TEACHER_PATCH).transpose(0, 2, 1, 3, 4)
        flat = patches.reshape(-1, TEACHER_PATCH * TEACHER_PATCH * 3)
        return (flat @ self.weights).T

    def __call__(self, image):
        H, W = image.data.shape[:2] if isinstance(image, Frame) else np.shape(image)[:2]
        return reshape_tokens(self.tokens(image), H, W)


class CallableTeacher:
    '''
    Wrap any function image -> FeatureMap (or h x w x c array) as a teacher.
    '''

    def __init__(self, fn, name="callable"):
        self.fn = fn
        self.name = name

    def help(self):
        return f"Teacher features from {self.name}"

    def __call__(self, image):
        out = self.fn(image)
        return out if isinstance(out, FeatureMap) else FeatureMap(out)


teacher_providers = {"mock": MockTeacher}

# -----------------------------------------------------------------------------
# student


class ToyStudent:
    '''
    Single strided cross-correlation with bias: kernel (k, k, 3, c), stride
    8, k <= 8. Output dims are (floor(H/8), floor(W/8), c).
    '''

    def __init__(self, kernel, bias, stride=STUDENT_STRIDE):
        self.kernel = np.asarray(kernel, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        self.stride = int(stride)
        k = self.kernel.shape[0]
        if self.kernel.ndim != 4 or self.kernel.shape[1] != k or self.kernel.shape[2] != 3:
            raise ShapeError(f"kernel must be k x k x 3 x c, got {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[3],):
            raise ShapeError(
                f"bias must have {self.kernel.shape[3]} entries, got {self.bias.shape}")
        if not 1 <= k <= self.stride:
            raise ShapeError(f"kernel size {k} must lie in [1, stride={self.stride}]")

    @classmethod
    def init(cls, c=384, k=STUDENT_STRIDE, seed=1, stride=STUDENT_STRIDE):
        rng = np.random.default_rng(seed)
        kernel = rng.standard_normal((k, k, 3, c)) / np.sqrt(k * k * 3)
        return cls(kernel, np.zeros(c), stride)

    @property
    def c(self):
        return self.kernel.shape[3]

    @property
    def k(self):
        return self.kernel.shape[0]

    def params(self):
        return {"kernel": self.kernel, "bias": self.bias}

    def with_params(self, params):
        return ToyStudent(params["kernel"], params["bias"], self.stride)

    def windows(self, image):
        x = normalize_image(image)
        if x.shape[0] < self.stride or x.shape[1] < self.stride:
            raise ShapeError(
                f"image {x.shape[1]}x{x.shape[0]} is smaller than the stride {self.stride}")
        return _windows(x, self.stride, self.k)


def student_forward(student, image):
    patches = student.windows(image)
    out = np.einsum("iajbd,abdc->ijc", patches, student.kernel) + student.bias
    return FeatureMap(out)


def student_backward(student, image, grad_out):
    '''
    Parameter gradients of a scalar loss given its gradient with respect to
    the student's output map.
    '''
    g = grad_out.data if isinstance(grad_out, FeatureMap) else np.asarray(grad_out)
    patches = student.windows(image)
    expected = (patches.shape[0], patches.shape[2], student.c)
    if g.shape != expected:
        raise ShapeError(f"output gradient has shape {g.shape}, expected {expected}")
    return {"kernel": np.einsum("iajbd,ijc->abdc", patches, g),
            "bias": g.sum(axis=(0, 1))}

# -----------------------------------------------------------------------------
# loss and update


def upsample_features(fm, target_h, target_w, kernel="bicubic"):
    '''
    Per-channel upsampling with corner-aligned sampling and clamped edge
    taps, so constant channels stay constant.
    '''
    if kernel not in UPSAMPLE_KERNELS:
        raise ValueError(f"unknown upsample kernel {kernel}, expected one of {UPSAMPLE_KERNELS}")
    if target_h < fm.h or target_w < fm.w:
        raise ValueError(
            f"upsample_features cannot downscale {fm.h}x{fm.w} to {target_h}x{target_w}")
    if (target_h, target_w) == (fm.h, fm.w):
        return FeatureMap(fm.data.copy())
    My = interpolation_matrix(fm.h, target_h, kernel, align_corners=True)
    Mx = interpolation_matrix(fm.w, target_w, kernel, align_corners=True)
    return FeatureMap(np.einsum("yi,ijc,xj->yxc", My, fm.data, Mx))


def distill_loss(z_cnn, z_teacher_up, reduction="mean_sq"):
    '''
    Squared feature-regression error and its gradient with respect to z_cnn.
    '''
    if reduction not in REDUCTIONS:
        raise ValueError(f"unknown reduction {reduction}, expected one of {REDUCTIONS}")
    if z_cnn.shape != z_teacher_up.shape:
        raise ShapeError(f"student map {z_cnn.shape} != teacher map {z_teacher_up.shape}")
    diff = z_cnn.data - z_teacher_up.data
    loss = float(np.sum(diff * diff))
    grad = 2.0 * diff
    if reduction == "mean_sq":
        loss /= diff.size
        grad /= diff.size
    return loss, FeatureMap(grad)


def sgd_step(params, grads, eta):
    '''
    theta - eta * g, element-wise, for a dict of parameter arrays (or a
    single array/scalar).
    '''
    if not eta > 0:
        raise ValueError(f"eta must be positive, got {eta}")
    if not isinstance(params, dict):
        p, g = np.asarray(params, dtype=np.float64), np.asarray(grads, dtype=np.float64)
        if p.shape != g.shape:
            raise ShapeError(f"parameter shape {p.shape} != gradient shape {g.shape}")
        out = p - eta * g
        return float(out) if out.ndim == 0 else out
    if set(params) != set(grads):
        raise ShapeError(f"parameter keys {sorted(params)} != gradient keys {sorted(grads)}")
    return {name: sgd_step(params[name], grads[name], eta) for name in params}


def image_loss(teacher, student, image, reduction="mean_sq", upsample_kernel="bicubic"):
    '''
    Loss, output gradient and student map for one image, in the order:
    teacher features, student features, upsample, loss.
    '''
    z_t = teacher(image)
    z_s = student_forward(student, image)
    z_up = upsample_features(z_t, z_s.h, z_s.w, upsample_kernel)
    loss, grad = distill_loss(z_s, z_up, reduction)
    return loss, grad


def batch_gradients(teacher, student, images, reduction="mean_sq", upsample_kernel="bicubic"):
    '''
    Mean loss and mean parameter gradients over a batch, accumulated in
    index order.
    '''
    total = 0.0
    grads = {"kernel": np.zeros_like(student.kernel), "bias": np.zeros_like(student.bias)}
    for image in images:
        loss, g_out = image_loss(teacher, student, image, reduction, upsample_kernel)
        g = student_backward(student, image, g_out)
        total += loss
        grads["kernel"] += g["kernel"]
        grads["bias"] += g["bias"]
    n = float(len(images))
    return total / n, {name: value / n for name, value in grads.items()}


def full_batch_loss(teacher, student, dataset, reduction="mean_sq", upsample_kernel="bicubic"):
    return float(np.mean([image_loss(teacher, student, im, reduction, upsample_kernel)[0]
                          for im in dataset]))

# -----------------------------------------------------------------------------
# training loop


@dataclass
class LossTrace:
    initial_loss: float
    epoch_loss: List[float] = field(default_factory=list)
    full_batch: List[float] = field(default_factory=list)

    @property
    def final_loss(self):
        if self.full_batch:
            return self.full_batch[-1]
        return self.epoch_loss[-1] if self.epoch_loss else self.initial_loss


def distill(teacher, student, dataset, epochs=200, eta=1e-3, batch=4,
            reduction="mean_sq", upsample_kernel="bicubic", order_seed=2,
            track_full_batch=False):
    '''
    Train a copy of the student to regress the upsampled teacher features.

    Each epoch visits the dataset in a seeded random order, batch images
    per SGD step. Returns (trained student, LossTrace) where epoch_loss
    holds the mean batch loss of each epoch and, with track_full_batch, the
    full-dataset loss after each epoch.
    '''
    if not dataset:
        raise ValueError("distill needs a non-empty dataset")
    if not eta > 0:
        raise ValueError(f"eta must be positive, got {eta}")
    if int(batch) < 1 or int(epochs) < 0:
        raise ValueError(f"batch must be >= 1 and epochs >= 0, got {batch}, {epochs}")
    batch = min(int(batch), len(dataset))
    rng = np.random.default_rng(order_seed)
    student = copy.deepcopy(student)
    trace = LossTrace(full_batch_loss(teacher, student, dataset, reduction, upsample_kernel))
    logger.info("[distillkernel] initial loss %.6g (%d images, c=%d, eta=%g, batch=%d)",
                trace.initial_loss, len(dataset), student.c, eta, batch)

    for epoch in range(int(epochs)):
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), batch):
            images = [dataset[i] for i in order[start:start + batch]]
            loss, grads = batch_gradients(teacher, student, images, reduction, upsample_kernel)
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"loss became non-finite at epoch {epoch} step {start // batch}; "
                    f"eta={eta} is too large, reduce it")
            student = student.with_params(sgd_step(student.params(), grads, eta))
            losses.append(loss)
        trace.epoch_loss.append(float(np.mean(losses)))
        if track_full_batch:
            trace.full_batch.append(
                full_batch_loss(teacher, student, dataset, reduction, upsample_kernel))
        logger.debug("[distillkernel] epoch %d mean loss %.6g", epoch, trace.epoch_loss[-1])

    if not np.isfinite(trace.final_loss):
        raise DivergenceError(f"final loss is non-finite; eta={eta} is too large, reduce it")
    logger.info("[distillkernel] final loss %.6g after %d epochs", trace.final_loss, epochs)
    return student, trace

# -----------------------------------------------------------------------------


def synthetic_images(n=16, h=32, w=32, seed=0, mode="flat"):
    '''
    Fixture RGB frames. "flat" frames are single colours 0.5 +/- 0.4 per
    channel, cycling through the eight sign patterns in a seeded order
    (balanced around mid-grey); "noise" frames are uniform noise.
    '''
    if int(n) < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    if mode == "flat":
        signs = np.array([[(p >> b) & 1 for b in range(3)] for p in range(8)]) * 2.0 - 1.0
        frames = []
        for start in range(0, n, 8):
            for p in rng.permutation(8)[:n - start]:
                colour = 0.5 + 0.4 * signs[p]
                frames.append(Frame(np.broadcast_to(colour, (h, w, 3)).copy(), band="RGB"))
        return frames
    if mode == "noise":
        return [Frame(rng.random((h, w, 3)), band="RGB") for _ in range(n)]
    raise ValueError(f"unknown synthetic image mode {mode}")


def write_loss_trace(trace, path):
    import pandas as pd
    epochs = list(range(1, len(trace.epoch_loss) + 1))
    table = pd.DataFrame({"epoch": [0] + epochs,
                          "mean_loss": [trace.initial_loss] + list(trace.epoch_loss)})
    if trace.full_batch:
        table["full_batch_loss"] = [trace.initial_loss] + list(trace.full_batch)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    table.to_csv(path, index=False)
    return path
