'''
pyspacedet/datasetio.py

Annotation serialization (COCO-style JSON with RLE masks, YOLO txt),
dataset manifests, deterministic train/val/test splits and nested
training-set subsampling.
'''

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from pyspacedet.metrics import Detection

logger = logging.getLogger(__name__)

MANIFEST_VERSION = "1.0"

# -----------------------------------------------------------------------------


class DatasetFormatError(ValueError):
    """Raised when an annotation, manifest, split or detection file is malformed."""
    pass

# -----------------------------------------------------------------------------
# masks


def mask_to_rle(mask):
    '''
    Encode a binary HxW mask as a COCO compressed RLE dict
    {"size": [h, w], "counts": str}.
    '''
    from pycocotools import mask as mask_utils
    mask = np.asfortranarray(np.asarray(mask).astype(np.uint8))
    rle = mask_utils.encode(mask)
    counts = rle["counts"]
    if isinstance(counts, bytes):
        counts = counts.decode("ascii")
    return {"size": [int(rle["size"][0]), int(rle["size"][1])],
            "counts": counts}


def rle_to_mask(rle):
    '''
    Decode a COCO RLE dict (compressed string counts or uncompressed count
    list) to a boolean HxW mask.
    '''
    from pycocotools import mask as mask_utils
    h, w = int(rle["size"][0]), int(rle["size"][1])
    counts = rle["counts"]
    if isinstance(counts, list):
        rle = mask_utils.frPyObjects({"size": [h, w], "counts": counts}, h, w)
    else:
        if isinstance(counts, str):
            counts = counts.encode("ascii")
        rle = {"size": [h, w], "counts": counts}
    return mask_utils.decode(rle).astype(bool)


def bbox_from_mask(mask):
    '''
    Tight box (x_min, y_min, x_max, y_max) of the set pixels; max bounds are
    exclusive, so a single pixel at (x, y) gives (x, y, x+1, y+1).
    '''
    mask = np.asarray(mask).astype(bool)
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise ValueError("cannot take the bounding box of an empty mask")
    return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)

# -----------------------------------------------------------------------------


@dataclass
class Annotation:
    '''
    Ground-truth object: class index, box (x_min, y_min, x_max, y_max) in
    pixels, optional RLE mask, and the image it belongs to.
    '''
    class_id: int
    bbox: tuple
    image_id: str = ""
    mask: Optional[dict] = None

    def __post_init__(self):
        self.class_id = int(self.class_id)
        self.bbox = tuple(self.bbox)
        if len(self.bbox) != 4:
            raise ValueError(f"bbox must have 4 values, got {self.bbox}")
        x0, y0, x1, y1 = self.bbox
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"malformed bbox {self.bbox}")

    @classmethod
    def from_mask(cls, mask, class_id=0, image_id=""):
        return cls(class_id, bbox_from_mask(mask), image_id=image_id,
                   mask=mask_to_rle(mask))

    def decode_mask(self):
        if self.mask is None:
            return None
        return rle_to_mask(self.mask)


@dataclass
class ManifestEntry:
    image_id: str
    image_path: str
    width: Optional[int] = None
    height: Optional[int] = None
    annotations: List[Annotation] = field(default_factory=list)
    scene_spec: Optional[dict] = None


@dataclass
class DatasetManifest:
    '''
    Ordered list of images with their annotations, the class names the
    annotations index into, and a format version.
    '''
    entries: List[ManifestEntry] = field(default_factory=list)
    class_names: List[str] = field(default_factory=lambda: ["spacecraft"])
    version: str = MANIFEST_VERSION

    def __post_init__(self):
        seen = set()
        for entry in self.entries:
            if entry.image_id in seen:
                raise DatasetFormatError(f"duplicate image_id {entry.image_id}")
            seen.add(entry.image_id)
            for ann in entry.annotations:
                if not 0 <= ann.class_id < len(self.class_names):
                    raise DatasetFormatError(
                        f"class_id {ann.class_id} of image {entry.image_id} "
                        f"does not index class_names {self.class_names}")

    @property
    def image_ids(self):
        return [e.image_id for e in self.entries]

    def annotations(self):
        return [ann for e in self.entries for ann in e.annotations]

    def subset(self, ids):
        wanted = set(ids)
        return DatasetManifest([e for e in self.entries if e.image_id in wanted],
                               list(self.class_names), self.version)


@dataclass
class SplitAssignment:
    train: List[str]
    val: List[str]
    test: List[str]
    fraction_used: float = 1.0
    seed: Optional[int] = None

    def __post_init__(self):
        sets = [set(self.train), set(self.val), set(self.test)]
        total = sum(len(s) for s in sets)
        if total != len(self.train) + len(self.val) + len(self.test) or \
                len(sets[0] | sets[1] | sets[2]) != total:
            raise DatasetFormatError("split lists overlap or repeat ids")
        if not 0 < self.fraction_used <= 1:
            raise DatasetFormatError(
                f"fraction_used must lie in (0, 1], got {self.fraction_used}")

    def sizes(self):
        return (len(self.train), len(self.val), len(self.test))

    def to_dict(self):
        return {"train": list(self.train), "val": list(self.val),
                "test": list(self.test), "fraction_used": self.fraction_used,
                "seed": self.seed}

# -----------------------------------------------------------------------------
# COCO-style JSON


def _load_json(path):
    with open(path, "r") as fh:
        text = fh.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as err:
        raise DatasetFormatError(
            f"{path}:{err.lineno}:{err.colno}: {err.msg} (offset {err.pos})")


def manifest_to_coco(manifest):
    images, annotations = [], []
    ann_id = 1
    for num, entry in enumerate(manifest.entries, start=1):
        image = {"id": num, "file_name": entry.image_path,
                 "image_key": entry.image_id}
        if entry.width is not None:
            image["width"] = int(entry.width)
            image["height"] = int(entry.height)
        if entry.scene_spec is not None:
            image["scene_spec"] = entry.scene_spec
        images.append(image)
        for ann in entry.annotations:
            x0, y0, x1, y1 = ann.bbox
            record = {"id": ann_id, "image_id": num,
                      "category_id": ann.class_id + 1,
                      "bbox": [x0, y0, x1 - x0, y1 - y0],
                      "bbox_xyxy": [x0, y0, x1, y1],
                      "iscrowd": 0}
            if ann.mask is not None:
                record["segmentation"] = ann.mask
                record["area"] = int(ann.decode_mask().sum())
            else:
                record["area"] = (x1 - x0) * (y1 - y0)
            annotations.append(record)
            ann_id += 1
    categories = [{"id": i + 1, "name": name}
                  for i, name in enumerate(manifest.class_names)]
    return {"info": {"version": manifest.version},
            "images": images, "annotations": annotations,
            "categories": categories}


def write_coco(manifest, path):
    '''
    Write a manifest as COCO-style JSON (images, annotations, categories;
    RLE masks). Image keys, exact xyxy boxes and scene specs ride along as
    extra fields that standard readers ignore.
    '''
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(manifest_to_coco(manifest), fh, indent=1)
        fh.write("\n")
    logger.info("[datasetio] wrote %d images to %s", len(manifest.entries), path)
    return path


def coco_to_manifest(data, source="<coco>"):
    try:
        categories = sorted(data.get("categories", []), key=lambda c: c["id"])
        cat_index = {c["id"]: i for i, c in enumerate(categories)}
        class_names = [c.get("name", str(c["id"])) for c in categories]
        entries, by_num = [], {}
        for image in data["images"]:
            key = str(image.get("image_key", image["id"]))
            entry = ManifestEntry(key, image.get("file_name", key),
                                  image.get("width"), image.get("height"),
                                  scene_spec=image.get("scene_spec"))
            by_num[image["id"]] = entry
            entries.append(entry)
        for record in data.get("annotations", []):
            entry = by_num[record["image_id"]]
            if "bbox_xyxy" in record:
                bbox = tuple(record["bbox_xyxy"])
            else:
                x, y, w, h = record["bbox"]
                bbox = (x, y, x + w, y + h)
            mask = record.get("segmentation")
            if mask is not None and not isinstance(mask, dict):
                # polygon segmentations are not carried
                mask = None
            entry.annotations.append(Annotation(
                cat_index[record["category_id"]], bbox,
                image_id=entry.image_id, mask=mask))
    except (KeyError, TypeError, ValueError) as err:
        raise DatasetFormatError(f"{source}: malformed COCO data: {err!r}")
    version = str(data.get("info", {}).get("version", MANIFEST_VERSION))
    return DatasetManifest(entries, class_names or ["spacecraft"], version)


def read_coco(path):
    return coco_to_manifest(_load_json(path), source=str(path))

# -----------------------------------------------------------------------------
# YOLO txt


def _label_stem(entry):
    return os.path.splitext(os.path.basename(entry.image_path))[0] or entry.image_id


def yolo_line(ann, width, height):
    x0, y0, x1, y1 = ann.bbox
    cx = (x0 + x1) / (2.0 * width)
    cy = (y0 + y1) / (2.0 * height)
    w = (x1 - x0) / float(width)
    h = (y1 - y0) / float(height)
    return f"{ann.class_id} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f}"


def write_yolo(manifest, out_dir):
    '''
    Write one labels/<image stem>.txt per image with "class cx cy w h" lines
    normalized by the image size. Images without annotations get an empty
    file.
    '''
    label_dir = os.path.join(out_dir, "labels")
    os.makedirs(label_dir, exist_ok=True)
    paths = []
    for entry in manifest.entries:
        if not entry.width or not entry.height:
            raise DatasetFormatError(
                f"image {entry.image_id} has no dimensions; YOLO labels need them")
        lines = [yolo_line(ann, entry.width, entry.height)
                 for ann in entry.annotations]
        path = os.path.join(label_dir, _label_stem(entry) + ".txt")
        with open(path, "w") as fh:
            fh.write("".join(line + "\n" for line in lines))
        paths.append(path)
    with open(os.path.join(out_dir, "classes.txt"), "w") as fh:
        fh.write("".join(name + "\n" for name in manifest.class_names))
    return paths


def read_yolo(label_dir, manifest):
    '''
    Read YOLO labels for the images of a manifest (which supplies image
    dimensions). Boxes are rounded back to integer pixels, which is exact for
    integer boxes on images narrower than 10^5 px. Masks are not carried.
    '''
    entries = []
    for entry in manifest.entries:
        if not entry.width or not entry.height:
            raise DatasetFormatError(f"image {entry.image_id} has no dimensions")
        path = os.path.join(label_dir, _label_stem(entry) + ".txt")
        anns = []
        if os.path.exists(path):
            with open(path, "r") as fh:
                for lineno, line in enumerate(fh, start=1):
                    if not line.strip():
                        continue
                    parts = line.split()
                    try:
                        cls = int(parts[0])
                        cx, cy, w, h = map(float, parts[1:5])
                    except (ValueError, IndexError):
                        raise DatasetFormatError(f"{path}:{lineno}: bad YOLO line")
                    W, H = entry.width, entry.height
                    bbox = (int(round((cx - w / 2) * W)), int(round((cy - h / 2) * H)),
                            int(round((cx + w / 2) * W)), int(round((cy + h / 2) * H)))
                    anns.append(Annotation(cls, bbox, image_id=entry.image_id))
        entries.append(ManifestEntry(entry.image_id, entry.image_path,
                                     entry.width, entry.height, anns,
                                     entry.scene_spec))
    return DatasetManifest(entries, list(manifest.class_names), manifest.version)

# -----------------------------------------------------------------------------
# manifest.jsonl


def write_manifest_jsonl(manifest, path):
    with open(path, "w") as fh:
        for entry in manifest.entries:
            record = {"image_id": entry.image_id, "image_path": entry.image_path,
                      "width": entry.width, "height": entry.height,
                      "scene_spec": entry.scene_spec}
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return path


def read_manifest_jsonl(path, class_names=("spacecraft",)):
    entries = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                entries.append(ManifestEntry(
                    str(record["image_id"]), record["image_path"],
                    record.get("width"), record.get("height"),
                    scene_spec=record.get("scene_spec")))
            except json.JSONDecodeError as err:
                raise DatasetFormatError(f"{path}:{lineno}:{err.colno}: {err.msg}")
            except KeyError as err:
                raise DatasetFormatError(f"{path}:{lineno}: missing key {err}")
    return DatasetManifest(entries, list(class_names))

# -----------------------------------------------------------------------------
# splits


def _round_half_up(x):
    return int(math.floor(x + 0.5 + 1e-9))


def split_dataset(manifest, ratios=(0.75, 0.20, 0.05), seed=0):
    '''
    Seeded shuffle of the image ids into (train, val, test). test and val
    sizes are round-half-up of ratio * N (at least one each), train takes
    the remainder.
    '''
    ids = manifest.image_ids if isinstance(manifest, DatasetManifest) else list(manifest)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError(f"ratios must be three non-negative numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(ids)
    if n < 3:
        raise ValueError(f"need at least 3 images to populate all splits, got {n}")
    n_test = max(1, _round_half_up(ratios[2] * n))
    n_val = max(1, _round_half_up(ratios[1] * n))
    if n_test + n_val >= n:
        raise ValueError(f"ratios {ratios} leave no training images for N={n}")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    split = SplitAssignment(train=shuffled[n_test + n_val:],
                            val=shuffled[n_test:n_test + n_val],
                            test=shuffled[:n_test], seed=seed)
    logger.info("[datasetio] split N=%d into %s", n, split.sizes())
    return split


def subsample_train(split, fraction, seed=0):
    '''
    Keep ceil(fraction * |train|) training ids. The kept ids are a prefix of
    one seeded permutation, so smaller fractions are subsets of larger ones
    for the same seed. val and test are untouched.
    '''
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    n = len(split.train)
    keep = min(n, int(math.ceil(fraction * n - 1e-9)))
    order = np.random.default_rng(seed).permutation(n)
    kept = sorted(order[:keep])
    return SplitAssignment(train=[split.train[i] for i in kept],
                           val=list(split.val), test=list(split.test),
                           fraction_used=split.fraction_used * fraction,
                           seed=split.seed)


def write_split(split, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    for name in ("train", "val", "test"):
        with open(os.path.join(out_dir, f"{name}.json"), "w") as fh:
            json.dump(getattr(split, name), fh)
            fh.write("\n")
    path = os.path.join(out_dir, "split.json")
    with open(path, "w") as fh:
        json.dump(split.to_dict(), fh, indent=1)
        fh.write("\n")
    return path


def read_split(path):
    if os.path.isdir(path):
        path = os.path.join(path, "split.json")
    data = _load_json(path)
    try:
        return SplitAssignment(list(data["train"]), list(data["val"]),
                               list(data["test"]),
                               float(data.get("fraction_used", 1.0)),
                               data.get("seed"))
    except (KeyError, TypeError) as err:
        raise DatasetFormatError(f"{path}: malformed split file: {err!r}")

# -----------------------------------------------------------------------------
# detections and class maps


def read_detections_jsonl(path):
    '''
    Read detections, one JSON object per line:
    {image_id, class_id, bbox: [x0, y0, x1, y1], score, frame_index?}.
    '''
    dets = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                dets.append(Detection(
                    image_id=str(record["image_id"]),
                    class_id=int(record.get("class_id", 0)),
                    bbox=tuple(record["bbox"]),
                    score=float(record.get("score", 1.0)),
                    frame_index=int(record.get("frame_index", 0))))
            except json.JSONDecodeError as err:
                raise DatasetFormatError(f"{path}:{lineno}:{err.colno}: {err.msg}")
            except (KeyError, TypeError, ValueError) as err:
                raise DatasetFormatError(f"{path}:{lineno}: bad detection record: {err!r}")
    return dets


def write_detections_jsonl(dets, path):
    with open(path, "w") as fh:
        for d in dets:
            fh.write(json.dumps({"image_id": d.image_id, "class_id": d.class_id,
                                 "bbox": list(d.bbox), "score": d.score,
                                 "frame_index": d.frame_index}) + "\n")
    return path


def read_class_map(path):
    '''
    Per-pixel class-index raster from .npy or an 8/16-bit PNG.
    '''
    path = str(path)
    if path.endswith(".npy"):
        arr = np.load(path)
    else:
        import imageio.v2 as imageio
        arr = np.asarray(imageio.imread(path))
    if arr.ndim == 3:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise DatasetFormatError(f"{path}: class map must be 2-D, got {arr.shape}")
    return arr.astype(np.int64)
