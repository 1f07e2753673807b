'''
pyspacedet/scenegen.py

Scene sampling and rendering for synthetic long-range detection datasets.

A camera model turns orbit geometry (ground sampling distance at an
altitude) into an angular pixel size. Each scene draws a background crop, a
range, an orientation, a position and a blend mode from a counter-based
generator keyed by (master_seed, scene_index), scales the object sprite to
its apparent size at that range, composites it, and derives the label from
the final rasterized alpha.
'''

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from pyspacedet import raster
from pyspacedet.config import ConfigError, DEFAULT_CONFIG
from pyspacedet.datasetio import (Annotation, DatasetManifest, ManifestEntry,
                                  write_coco, write_manifest_jsonl, write_yolo)

logger = logging.getLogger(__name__)

BLEND_MODES = ("replace", "multiply")

# -----------------------------------------------------------------------------


class UnsatisfiablePlacementError(ValueError):
    """Raised when the sprite cannot fit inside the frame at the minimum range."""
    pass


class AssetError(OSError):
    """Raised when a background or sprite asset cannot be read."""

    def __init__(self, path, reason="missing asset"):
        self.path = str(path)
        super().__init__(f"{reason}: {self.path}")


@dataclass
class CameraModel:
    ifov_rad: float
    width_px: int
    height_px: int
    band: str = "LWIR"

    def __post_init__(self):
        if not self.ifov_rad > 0:
            raise ValueError(f"ifov_rad must be positive, got {self.ifov_rad}")
        if int(self.width_px) < 1 or int(self.height_px) < 1:
            raise ValueError(
                f"frame size must be positive, got {self.width_px}x{self.height_px}")
        if self.band not in raster.BANDS:
            raise ValueError(f"unknown band {self.band}")
        self.width_px, self.height_px = int(self.width_px), int(self.height_px)


@dataclass
class SceneSpec:
    '''
    Every random draw behind one composite. Together with the assets and
    config it reproduces the image and its label exactly.
    '''
    seed: int
    scene_index: int
    background_id: str
    sprite_id: str
    crop_origin: tuple
    distance_m: float
    orientation_rad: float
    position_px: tuple
    blend: str
    contrast_jitter: float = 1.0
    scale: float = 1.0

    def to_dict(self):
        out = asdict(self)
        out["crop_origin"] = list(self.crop_origin)
        out["position_px"] = list(self.position_px)
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["crop_origin"] = tuple(data["crop_origin"])
        data["position_px"] = tuple(data["position_px"])
        return cls(**data)


@dataclass
class BackgroundSource:
    '''
    Large source raster from which scene backgrounds are cropped, with its
    own ground sampling distance.
    '''
    frame: raster.Frame
    gsd_m: float
    background_id: str = "background"

    @property
    def extent_m(self):
        return (self.frame.width * self.gsd_m, self.frame.height * self.gsd_m)

# -----------------------------------------------------------------------------
# geometry


def camera_from_orbit(gsd_m, altitude_m, width_px, height_px, band="LWIR"):
    '''
    Camera whose instantaneous field of view is gsd_m / altitude_m radians
    per pixel.
    '''
    if not (gsd_m > 0 and altitude_m > 0):
        raise ValueError(
            f"gsd_m and altitude_m must be positive, got ({gsd_m}, {altitude_m})")
    return CameraModel(gsd_m / altitude_m, width_px, height_px, band)


def camera_from_config(config):
    cam = config["camera"]
    return camera_from_orbit(float(cam["gsd_m"]), float(cam["altitude_m"]),
                             int(cam["width_px"]), int(cam["height_px"]),
                             cam.get("band", "LWIR"))


def frame_dims_for_crop(extent_x_m, extent_y_m, gsd_m):
    if not (extent_x_m > 0 and extent_y_m > 0 and gsd_m > 0):
        raise ValueError("crop extent and gsd_m must be positive")
    return (max(1, int(math.floor(extent_x_m / gsd_m + 1e-9))),
            max(1, int(math.floor(extent_y_m / gsd_m + 1e-9))))


def sprite_scale(distance_m, camera, sprite):
    '''
    Linear scale from the sprite's capture to its apparent size at range:
    native metres/pixel over apparent metres/pixel (distance * ifov).
    '''
    if not distance_m > 0:
        raise ValueError(f"distance_m must be positive, got {distance_m}")
    return sprite.native_gsd_m / (distance_m * camera.ifov_rad)


def sprite_extent_bound(sprite, scale):
    '''
    Largest rotated canvas side of the scaled sprite over all orientations.
    '''
    w = raster.scaled_size(sprite.image.width, scale)
    h = raster.scaled_size(sprite.image.height, scale)
    return int(math.ceil(math.hypot(w, h) - 1e-9))


def check_placement(sprite, camera, min_distance_m):
    bound = sprite_extent_bound(sprite, sprite_scale(min_distance_m, camera, sprite))
    if bound > min(camera.width_px, camera.height_px):
        raise UnsatisfiablePlacementError(
            f"sprite {sprite.sprite_id} spans up to {bound} px at {min_distance_m} m "
            f"but the frame is {camera.width_px}x{camera.height_px} px; "
            f"raise the minimum distance or use a smaller native_gsd_m")

# -----------------------------------------------------------------------------
# sampling


def scene_rng(master_seed, scene_index):
    '''
    Counter-based generator for one scene; draws depend only on
    (master_seed, scene_index), never on scheduling.
    '''
    seq = np.random.SeedSequence([int(master_seed), int(scene_index)])
    return np.random.Generator(np.random.Philox(seq))


def sample_scene(master_seed, scene_index, config, sprites, backgrounds=None, camera=None):
    '''
    Draw the SceneSpec for one scene.

    Draw order: background, sprite, crop origin, distance, orientation,
    blend, contrast jitter, position. Distance and orientation are uniform,
    blend is multiply with probability p_multiply, and the position is
    uniform over the placements that keep the rotated sprite inside the
    frame (or its centre inside the frame when allow_partial).
    '''
    if isinstance(sprites, raster.Sprite):
        sprites = [sprites]
    if not sprites:
        raise ValueError("sample_scene needs at least one sprite")
    camera = camera or camera_from_config(config)
    rng = scene_rng(master_seed, scene_index)
    lo, hi = (float(v) for v in config["distance_range_m"])
    allow_partial = bool(config.get("allow_partial", False))

    bg_index = int(rng.integers(len(backgrounds))) if backgrounds else 0
    sprite = sprites[int(rng.integers(len(sprites)))]
    if not allow_partial:
        check_placement(sprite, camera, lo)

    crop_origin = (0.0, 0.0)
    background_id = ""
    if backgrounds:
        bg = backgrounds[bg_index]
        background_id = bg.background_id
        ex, ey = (float(v) for v in config["crop_extent_m"])
        sx, sy = bg.extent_m
        crop_origin = (float(rng.uniform(0.0, max(0.0, sx - ex))),
                       float(rng.uniform(0.0, max(0.0, sy - ey))))

    distance = float(rng.uniform(lo, hi))
    theta = float(rng.uniform(0.0, 2 * np.pi))
    if theta >= 2 * np.pi:
        theta = 0.0
    blend = "multiply" if rng.random() < float(config["p_multiply"]) else "replace"
    jlo, jhi = (float(v) for v in config["contrast_jitter_range"])
    jitter = float(rng.uniform(jlo, jhi)) if jhi > jlo else jlo

    scale = sprite_scale(distance, camera, sprite)
    cw, ch = raster.rotated_canvas(raster.scaled_size(sprite.image.width, scale),
                                   raster.scaled_size(sprite.image.height, scale), theta)
    if allow_partial:
        x = int(rng.integers(-(cw // 2), camera.width_px - cw // 2))
        y = int(rng.integers(-(ch // 2), camera.height_px - ch // 2))
    else:
        x = int(rng.integers(0, camera.width_px - cw + 1))
        y = int(rng.integers(0, camera.height_px - ch + 1))

    return SceneSpec(seed=int(master_seed), scene_index=int(scene_index),
                     background_id=background_id, sprite_id=sprite.sprite_id,
                     crop_origin=crop_origin, distance_m=distance,
                     orientation_rad=theta, position_px=(x, y), blend=blend,
                     contrast_jitter=jitter, scale=scale)

# -----------------------------------------------------------------------------
# rendering


def prepare_background(source, source_gsd_m, crop_origin_m, crop_extent_m,
                       camera, kernel="bicubic"):
    '''
    Crop crop_extent_m metres of a source raster at crop_origin_m and
    resample the crop to exactly the camera frame size. Crops that run past
    the source are clamped to it.
    '''
    if isinstance(source, BackgroundSource):
        source = source.frame
    w = max(1, min(source.width, int(round(crop_extent_m[0] / source_gsd_m))))
    h = max(1, min(source.height, int(round(crop_extent_m[1] / source_gsd_m))))
    x0 = min(int(math.floor(crop_origin_m[0] / source_gsd_m)), source.width - w)
    y0 = min(int(math.floor(crop_origin_m[1] / source_gsd_m)), source.height - h)
    frame = raster.crop(source, max(0, x0), max(0, y0), w, h)
    frame = raster.resample_to(frame, camera.width_px, camera.height_px, kernel)
    if camera.band == "LWIR":
        frame = raster.to_mono(frame)
    return frame


def render_scene(spec, background, sprite, camera, kernel="bicubic", allow_partial=False):
    '''
    Scale, rotate and composite the sprite described by spec onto a
    background of the camera's frame size.

    Returns (frame, annotation). The annotation mask is the rasterized alpha
    of the sprite as placed, and its bbox the tight bounds of that mask.
    '''
    if (background.width, background.height) != (camera.width_px, camera.height_px):
        raise raster.RasterError(
            f"background is {background.width}x{background.height}, camera frame is "
            f"{camera.width_px}x{camera.height_px}")
    image = sprite.image
    if image.channels != background.channels:
        image = raster.to_mono(image)

    scale = sprite_scale(spec.distance_m, camera, sprite)
    sw = raster.scaled_size(image.width, scale)
    sh = raster.scaled_size(image.height, scale)
    scaled = raster.resample_to(image, sw, sh, kernel)
    alpha = raster.resample_mask(sprite.alpha, sw, sh)
    rotated, alpha = raster.rotate(scaled, spec.orientation_rad, fill=0.0,
                                   mask=alpha, kernel=kernel)
    rotated = rotated.with_data(np.clip(rotated.data * spec.contrast_jitter, 0.0, 1.0))

    x, y = spec.position_px
    if allow_partial:
        ch, cw = alpha.shape
        x0, y0 = max(0, -x), max(0, -y)
        x1 = min(cw, camera.width_px - x)
        y1 = min(ch, camera.height_px - y)
        if x1 <= x0 or y1 <= y0:
            raise raster.PlacementError(f"sprite at {spec.position_px} lies outside the frame")
        rotated = raster.crop(rotated, x0, y0, x1 - x0, y1 - y0)
        alpha = alpha[y0:y1, x0:x1]
        x, y = x + x0, y + y0

    placed = raster.Sprite(rotated, alpha, sprite.native_gsd_m, sprite.sprite_id)
    frame = raster.composite(background, placed, (x, y), spec.blend)

    mask = np.zeros((camera.height_px, camera.width_px), dtype=bool)
    mask[y:y + alpha.shape[0], x:x + alpha.shape[1]] = alpha
    if not mask.any():
        raise raster.PlacementError(
            f"scene {spec.scene_index}: sprite rendered to an empty mask")
    image_id = f"{spec.scene_index:06d}"
    frame.frame_index = spec.scene_index
    frame.meta.update({"scene_index": spec.scene_index, "image_id": image_id})
    return frame, Annotation.from_mask(mask, class_id=0, image_id=image_id)

# -----------------------------------------------------------------------------
# assets


def _asset_entries(config, kind):
    entries = config.get("assets", {}).get(kind, [])
    return [{"path": e} if isinstance(e, str) else dict(e) for e in entries]


def load_assets(config):
    '''
    Read the configured background rasters and sprites.

    Backgrounds take an optional gsd_m (default: the camera's). Sprites need
    native_gsd_m and may name a separate mask_path. RGB inputs are converted
    to luminance for LWIR cameras.
    '''
    band = config["camera"].get("band", "LWIR")
    bg_entries = _asset_entries(config, "backgrounds")
    sp_entries = _asset_entries(config, "sprites")
    if not bg_entries:
        raise ConfigError("assets.backgrounds lists no background rasters")
    if not sp_entries:
        raise ConfigError("assets.sprites lists no sprites")

    backgrounds = []
    for i, entry in enumerate(bg_entries):
        path = entry["path"]
        if not os.path.exists(path):
            raise AssetError(path, "background raster not found")
        try:
            frame = raster.read_frame(path, band=band)
        except raster.RasterError as err:
            raise AssetError(path, f"unreadable background raster ({err})")
        gsd = float(entry.get("gsd_m", config["camera"]["gsd_m"]))
        backgrounds.append(BackgroundSource(
            frame, gsd, entry.get("id", os.path.splitext(os.path.basename(path))[0])))

    sprites = []
    for i, entry in enumerate(sp_entries):
        path = entry["path"]
        if "native_gsd_m" not in entry:
            raise ConfigError(f"assets.sprites[{i}] needs native_gsd_m")
        for key in ("path", "mask_path"):
            if entry.get(key) and not os.path.exists(entry[key]):
                raise AssetError(entry[key], "sprite asset not found")
        try:
            sprite = raster.read_sprite(
                path, float(entry["native_gsd_m"]), mask_path=entry.get("mask_path"),
                band=band,
                sprite_id=entry.get("id", os.path.splitext(os.path.basename(path))[0]))
        except raster.RasterError as err:
            raise AssetError(path, f"unreadable sprite ({err})")
        sprites.append(sprite)

    logger.info("[scenegen] loaded %d background(s), %d sprite(s)",
                len(backgrounds), len(sprites))
    return backgrounds, sprites

# -----------------------------------------------------------------------------
# dataset generation

_WORKER_STATE = {}


def _init_worker(config):
    backgrounds, sprites = load_assets(config)
    _WORKER_STATE.clear()
    _WORKER_STATE.update(config=config, backgrounds=backgrounds,
                         sprites={s.sprite_id: s for s in sprites},
                         sprite_list=sprites, camera=camera_from_config(config),
                         bg_cache={})


def _background_for(spec):
    state = _WORKER_STATE
    key = (spec.background_id, spec.crop_origin)
    if key not in state["bg_cache"]:
        config = state["config"]
        source = next(b for b in state["backgrounds"]
                      if b.background_id == spec.background_id)
        # one background per scene; keep the cache from growing
        state["bg_cache"].clear()
        state["bg_cache"][key] = prepare_background(
            source, source.gsd_m, spec.crop_origin, config["crop_extent_m"],
            state["camera"], config["resample_kernel"])
    return state["bg_cache"][key]


def _render_one(job):
    scene_index, master_seed, out_dir = job
    state = _WORKER_STATE
    config = state["config"]
    spec = sample_scene(master_seed, scene_index, config, state["sprite_list"],
                        state["backgrounds"], state["camera"])
    background = _background_for(spec)
    frame, ann = render_scene(spec, background, state["sprites"][spec.sprite_id],
                              state["camera"], config["resample_kernel"],
                              bool(config.get("allow_partial", False)))
    rel_path = os.path.join("images", f"{ann.image_id}.png")
    raster.write_frame(frame, os.path.join(out_dir, rel_path), bit_depth=16)
    logger.debug("[scenegen] rendered scene %d (%s, %.1f m)",
                 scene_index, spec.blend, spec.distance_m)
    return ManifestEntry(ann.image_id, rel_path, frame.width, frame.height,
                         [ann], spec.to_dict())


def generate_dataset(config, n_scenes, master_seed=None, out_dir=".", workers=1):
    '''
    Render n_scenes composites and write the dataset under out_dir:
    images/NNNNNN.png (16-bit), annotations.json (COCO with RLE masks),
    labels/ (YOLO), classes.txt and manifest.jsonl with one SceneSpec per
    line. The output depends only on (config, n_scenes, master_seed), not
    on the number of workers.
    '''
    if int(n_scenes) < 1:
        raise ValueError(f"n_scenes must be >= 1, got {n_scenes}")
    if master_seed is None:
        master_seed = int(config.get("seed", DEFAULT_CONFIG["seed"]))
    workers = max(1, int(workers))
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)

    # fail on missing assets and impossible placements before starting workers
    _init_worker(config)
    if not config.get("allow_partial", False):
        for sprite in _WORKER_STATE["sprite_list"]:
            check_placement(sprite, _WORKER_STATE["camera"],
                            float(config["distance_range_m"][0]))

    jobs = [(i, int(master_seed), out_dir) for i in range(int(n_scenes))]
    if workers == 1:
        entries = [_render_one(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                                 initargs=(config,)) as pool:
            entries = list(pool.map(_render_one, jobs, chunksize=4))

    manifest = DatasetManifest(entries, list(config.get("class_names", ["spacecraft"])))
    write_coco(manifest, os.path.join(out_dir, "annotations.json"))
    write_yolo(manifest, out_dir)
    write_manifest_jsonl(manifest, os.path.join(out_dir, "manifest.jsonl"))
    logger.info("[scenegen] wrote %d scenes to %s with %d worker(s)",
                len(entries), out_dir, workers)
    return manifest
