'''
pyspacedet/raster.py

Image kernels on normalized-intensity rasters: resampling, rotation,
compositing, and PNG/TIFF I/O.
'''

import logging
import math
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

KERNELS = ("nearest", "bilinear", "bicubic")
BANDS = ("LWIR", "RGB")

# -----------------------------------------------------------------------------


class RasterError(Exception):
    """Raised when a frame or sprite is malformed or bands are incompatible."""
    pass


class PlacementError(Exception):
    """Raised when a sprite does not fit inside the background."""
    pass

# -----------------------------------------------------------------------------


@dataclass
class Frame:
    '''
    2-D raster with intensities normalized to [0,1].

    data has shape (height, width) for single-channel frames and
    (height, width, 3) for RGB frames.
    '''
    data: np.ndarray
    band: str = "LWIR"
    frame_index: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 3 and self.data.shape[2] == 1:
            self.data = self.data[:, :, 0]
        if self.data.ndim not in (2, 3) or (
                self.data.ndim == 3 and self.data.shape[2] != 3):
            raise RasterError(
                f"frame data must be HxW or HxWx3, got shape {self.data.shape}")
        if self.data.size == 0:
            raise RasterError("frame is empty")
        if not np.isfinite(self.data).all():
            raise RasterError("frame has non-finite intensities")
        lo, hi = float(self.data.min()), float(self.data.max())
        if lo < 0.0 or hi > 1.0:
            raise RasterError(
                f"frame intensities must lie in [0, 1], got [{lo:g}, {hi:g}]")
        if self.band not in BANDS:
            raise RasterError(f"unknown band {self.band}")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return 1 if self.data.ndim == 2 else self.data.shape[2]

    def with_data(self, data):
        return Frame(data, band=self.band, frame_index=self.frame_index,
                     meta=dict(self.meta))


@dataclass
class Sprite:
    '''
    Cut-out object image with a binary alpha mask and the metres/pixel of
    its source capture.
    '''
    image: Frame
    alpha: np.ndarray
    native_gsd_m: float
    sprite_id: str = "sprite"

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha).astype(bool)
        if self.alpha.shape != self.image.data.shape[:2]:
            raise RasterError(
                f"alpha shape {self.alpha.shape} != image shape {self.image.data.shape[:2]}")
        if not self.native_gsd_m > 0:
            raise ValueError(
                f"native_gsd_m must be positive, got {self.native_gsd_m}")

# -----------------------------------------------------------------------------
# interpolation kernels


def cubic_weights(t, a=-0.5):
    '''
    Catmull-Rom (Keys, a=-0.5) weights for the four taps at offsets
    -1, 0, 1, 2 around a sample with fractional position t in [0, 1).
    '''
    t = np.asarray(t, dtype=np.float64)

    def near(x):
        return ((a + 2) * x - (a + 3)) * x * x + 1

    def far(x):
        return ((a * x - 5 * a) * x + 8 * a) * x - 4 * a

    return np.stack([far(t + 1), near(t), near(1 - t), far(2 - t)], axis=-1)


def _source_positions(n_in, n_out, align_corners):
    out = np.arange(n_out, dtype=np.float64)
    if align_corners:
        if n_out == 1:
            return np.zeros(1)
        return out * (n_in - 1) / (n_out - 1)
    return (out + 0.5) * (n_in / n_out) - 0.5


def interpolation_matrix(n_in, n_out, kernel="bilinear", align_corners=False):
    '''
    Dense (n_out, n_in) matrix M such that M @ signal resamples a 1-D signal
    with the named kernel. Taps falling off the ends are clamped to the edge
    samples, so every row sums to one.
    '''
    if kernel not in KERNELS:
        raise ValueError(f"unknown kernel {kernel}, expected one of {KERNELS}")
    if n_in < 1 or n_out < 1:
        raise ValueError(f"invalid sizes n_in={n_in}, n_out={n_out}")
    M = np.zeros((n_out, n_in))
    if n_in == n_out:
        return np.eye(n_in)
    pos = _source_positions(n_in, n_out, align_corners)
    rows = np.arange(n_out)
    if kernel == "nearest":
        idx = np.clip(np.floor(pos + 0.5).astype(int), 0, n_in - 1)
        M[rows, idx] = 1.0
        return M
    base = np.floor(pos).astype(int)
    t = pos - base
    if kernel == "bilinear":
        offsets = (0, 1)
        weights = np.stack([1 - t, t], axis=-1)
    else:
        offsets = (-1, 0, 1, 2)
        weights = cubic_weights(t)
    for k, off in enumerate(offsets):
        idx = np.clip(base + off, 0, n_in - 1)
        np.add.at(M, (rows, idx), weights[:, k])
    return M


def _apply_separable(data, My, Mx):
    if data.ndim == 2:
        return My @ data @ Mx.T
    return np.einsum("yi,ijc,xj->yxc", My, data, Mx)

# -----------------------------------------------------------------------------


def resample_to(src, out_w, out_h, kernel="bilinear"):
    '''
    Resample a frame to exactly (out_w, out_h) pixels, sampling at pixel
    centres with clamp-to-edge boundaries.
    '''
    out_w, out_h = int(out_w), int(out_h)
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output size must be positive, got {out_w}x{out_h}")
    if (out_w, out_h) == (src.width, src.height):
        return src.with_data(src.data.copy())
    Mx = interpolation_matrix(src.width, out_w, kernel)
    My = interpolation_matrix(src.height, out_h, kernel)
    out = _apply_separable(src.data, My, Mx)
    return src.with_data(np.clip(out, 0.0, 1.0))


def scaled_size(n, scale):
    # the epsilon keeps floor(w * s) stable when s is a rounded ratio of 1
    return max(1, int(math.floor(n * scale + 1e-9)))


def resample(src, scale_x, scale_y, kernel="bilinear"):
    '''
    Resample a frame by the given scale factors; output dims are
    max(1, floor(width * scale_x)) x max(1, floor(height * scale_y)).
    '''
    if not (scale_x > 0 and scale_y > 0):
        raise ValueError(
            f"scale factors must be positive, got ({scale_x}, {scale_y})")
    return resample_to(src, scaled_size(src.width, scale_x),
                       scaled_size(src.height, scale_y), kernel)


def resample_mask(mask, out_w, out_h):
    '''
    Nearest-neighbour resize of a binary mask; the result stays binary.
    '''
    mask = np.asarray(mask, dtype=np.float64)
    Mx = interpolation_matrix(mask.shape[1], out_w, "nearest")
    My = interpolation_matrix(mask.shape[0], out_h, "nearest")
    return (My @ mask @ Mx.T) > 0.5

# -----------------------------------------------------------------------------


def _quarter_turns(theta):
    k = round(theta / (np.pi / 2))
    if abs(theta - k * np.pi / 2) < 1e-12:
        return k % 4
    return None


def rotated_canvas(width, height, theta):
    '''
    Size of the axis-aligned box that holds a width x height raster rotated
    by theta about its centre.
    '''
    k = _quarter_turns(theta)
    if k is not None:
        return (width, height) if k % 2 == 0 else (height, width)
    c, s = abs(math.cos(theta)), abs(math.sin(theta))
    out_w = int(math.ceil(width * c + height * s - 1e-9))
    out_h = int(math.ceil(width * s + height * c - 1e-9))
    return max(1, out_w), max(1, out_h)


def sample_points(data, xs, ys, kernel):
    '''
    Evaluate data at real-valued pixel coordinates (xs, ys) with
    clamp-to-edge taps. Returns an array shaped like xs (plus a channel axis
    for RGB data).
    '''
    h, w = data.shape[:2]
    if kernel == "nearest":
        ix = np.clip(np.floor(xs + 0.5).astype(int), 0, w - 1)
        iy = np.clip(np.floor(ys + 0.5).astype(int), 0, h - 1)
        return data[iy, ix]
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    tx, ty = xs - x0, ys - y0
    if kernel == "bilinear":
        offsets = (0, 1)
        wx = np.stack([1 - tx, tx], axis=-1)
        wy = np.stack([1 - ty, ty], axis=-1)
    elif kernel == "bicubic":
        offsets = (-1, 0, 1, 2)
        wx, wy = cubic_weights(tx), cubic_weights(ty)
    else:
        raise ValueError(f"unknown kernel {kernel}, expected one of {KERNELS}")
    out = np.zeros(xs.shape + data.shape[2:])
    for j, oy in enumerate(offsets):
        iy = np.clip(y0 + oy, 0, h - 1)
        for i, ox in enumerate(offsets):
            ix = np.clip(x0 + ox, 0, w - 1)
            weight = wx[..., i] * wy[..., j]
            if data.ndim == 3:
                weight = weight[..., None]
            out += weight * data[iy, ix]
    return out


def rotate(src, theta, fill=0.0, mask=None, kernel="bilinear"):
    '''
    Rotate a frame counter-clockwise (as displayed) by theta radians about
    its centre onto a canvas sized to the rotated bounding box.

    Returns (frame, alpha). alpha is the rotated mask (nearest neighbour, so
    it stays binary), or the source support when no mask is given. Pixels
    outside the source support take the fill value. Multiples of pi/2 are
    exact index permutations.
    '''
    if not (0 <= theta < 2 * np.pi):
        raise ValueError(f"theta must lie in [0, 2pi), got {theta}")
    h, w = src.height, src.width
    if mask is None:
        mask = np.ones((h, w), dtype=bool)
    mask = np.asarray(mask).astype(bool)
    if mask.shape != (h, w):
        raise RasterError(f"mask shape {mask.shape} != frame shape {(h, w)}")

    k = _quarter_turns(theta)
    if k is not None:
        data = np.rot90(src.data, k, axes=(0, 1)).copy()
        return src.with_data(data), np.rot90(mask, k).copy()

    out_w, out_h = rotated_canvas(w, h, theta)
    c, s = math.cos(theta), math.sin(theta)
    yy, xx = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    u = xx - (out_w - 1) / 2.0
    v = yy - (out_h - 1) / 2.0
    xs = u * c - v * s + (w - 1) / 2.0
    ys = u * s + v * c + (h - 1) / 2.0

    inside = (xs >= -0.5) & (xs < w - 0.5) & (ys >= -0.5) & (ys < h - 0.5)
    values = sample_points(src.data, xs, ys, kernel)
    fill_mask = ~inside if values.ndim == 2 else ~inside[..., None]
    values = np.where(fill_mask, fill, values)

    ix = np.clip(np.floor(xs + 0.5).astype(int), 0, w - 1)
    iy = np.clip(np.floor(ys + 0.5).astype(int), 0, h - 1)
    alpha = inside & mask[iy, ix]
    return src.with_data(np.clip(values, 0.0, 1.0)), alpha

# -----------------------------------------------------------------------------


def crop(src, x0, y0, width, height):
    x0, y0, width, height = int(x0), int(y0), int(width), int(height)
    if x0 < 0 or y0 < 0 or x0 + width > src.width or y0 + height > src.height:
        raise PlacementError(
            f"crop ({x0},{y0},{width}x{height}) exceeds frame {src.width}x{src.height}")
    return src.with_data(src.data[y0:y0 + height, x0:x0 + width].copy())


def composite(background, sprite, top_left, mode="replace"):
    '''
    Superimpose a sprite on a background at top_left = (x, y).

    Under the sprite's alpha the output is the sprite value ("replace") or
    the product background * sprite ("multiply"); elsewhere the background is
    unchanged.
    '''
    if mode not in ("replace", "multiply"):
        raise ValueError(f"unknown blend mode {mode}")
    if background.channels != sprite.image.channels:
        raise RasterError(
            f"band mismatch: background has {background.channels} channel(s), "
            f"sprite has {sprite.image.channels}")
    x, y = int(top_left[0]), int(top_left[1])
    sh, sw = sprite.alpha.shape
    if x < 0 or y < 0 or x + sw > background.width or y + sh > background.height:
        raise PlacementError(
            f"sprite {sw}x{sh} at ({x},{y}) exceeds frame "
            f"{background.width}x{background.height}")
    out = background.data.copy()
    region = out[y:y + sh, x:x + sw]
    alpha = sprite.alpha
    if mode == "replace":
        region[alpha] = sprite.image.data[alpha]
    else:
        region[alpha] = region[alpha] * sprite.image.data[alpha]
    out[y:y + sh, x:x + sw] = np.clip(region, 0.0, 1.0)
    return background.with_data(out)

# -----------------------------------------------------------------------------
# file I/O


def _to_unit(arr):
    arr = np.asarray(arr)
    if arr.dtype == np.uint16:
        return arr.astype(np.float64) / 65535.0
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.dtype == bool:
        return arr.astype(np.float64)
    if np.issubdtype(arr.dtype, np.integer):
        # 16-bit PNGs may come back from Pillow as 32-bit "I" mode
        if arr.size and 0 <= arr.min() and arr.max() <= 65535:
            return arr.astype(np.float64) / 65535.0
        return arr.astype(np.float64) / float(np.iinfo(arr.dtype).max)
    return np.clip(arr.astype(np.float64), 0.0, 1.0)


def read_raster(path):
    import imageio.v2 as imageio
    try:
        return np.asarray(imageio.imread(path))
    except FileNotFoundError:
        raise
    except Exception as err:
        raise RasterError(f"failed to read raster {path}: {err}")


def read_frame(path, band=None):
    '''
    Read a PNG or TIFF raster as a Frame. Alpha channels are dropped; use
    read_sprite to keep them.
    '''
    arr = read_raster(path)
    if arr.ndim == 3 and arr.shape[2] in (2, 4):
        arr = arr[:, :, :-1]
    data = _to_unit(arr)
    frame = Frame(data, band="RGB" if data.ndim == 3 else "LWIR",
                  meta={"path": str(path)})
    if band == "LWIR":
        frame = to_mono(frame)
    return frame


def read_sprite(path, native_gsd_m, mask_path=None, band="LWIR", sprite_id=None):
    '''
    Read a background-removed object capture. The alpha mask comes from the
    file's alpha channel, a separate mask raster, or the non-zero pixels, in
    that order of preference.
    '''
    arr = read_raster(path)
    alpha = None
    if arr.ndim == 3 and arr.shape[2] in (2, 4):
        alpha = arr[:, :, -1] > 0
        arr = arr[:, :, :-1]
    if mask_path is not None:
        alpha = read_raster(mask_path)
        if alpha.ndim == 3:
            alpha = alpha[:, :, 0]
        alpha = alpha > 0
    data = _to_unit(arr)
    frame = Frame(data, band="RGB" if data.ndim == 3 else "LWIR",
                  meta={"path": str(path)})
    if band == "LWIR":
        frame = to_mono(frame)
    if alpha is None:
        alpha = frame.data > 0 if frame.channels == 1 else frame.data.max(axis=2) > 0
    return Sprite(frame, alpha, native_gsd_m,
                  sprite_id=sprite_id or str(path))


def to_mono(frame):
    '''
    Luminance (Rec. 601) of an RGB frame, as a single-channel LWIR frame.
    '''
    if frame.channels == 1:
        return frame
    data = frame.data @ np.array([0.299, 0.587, 0.114])
    return Frame(np.clip(data, 0.0, 1.0), band="LWIR",
                 frame_index=frame.frame_index, meta=dict(frame.meta))


def quantize(frame, bit_depth=16):
    if bit_depth == 16:
        return np.round(frame.data * 65535.0).astype(np.uint16)
    if bit_depth == 8:
        return np.round(frame.data * 255.0).astype(np.uint8)
    raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")


def write_frame(frame, path, bit_depth=None):
    '''
    Write a frame as PNG (8- or 16-bit) or TIFF (16-bit). Single-channel
    frames default to 16 bits, RGB frames to 8 bits.
    '''
    import imageio.v2 as imageio
    path = str(path)
    if bit_depth is None:
        bit_depth = 16 if frame.channels == 1 else 8
    if path.lower().endswith((".tif", ".tiff")) and bit_depth != 16:
        raise ValueError("TIFF output is 16-bit only")
    imageio.imwrite(path, quantize(frame, bit_depth))
    logger.debug("[raster] wrote %s (%d-bit)", path, bit_depth)
