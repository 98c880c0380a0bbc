"""
Deterministic synthetic datasets.

Every image is a pure function of (spec, index): its generator is seeded with
[spec.seed, index], so images can be produced in any order on any number of
threads and the dataset is still byte-reproducible.

Kinds:
    sprites   disc / square / diamond templates, composed additively
    glyphs    seven-segment digits 0-9, or MNIST digits read from IDX files
    strokes   glyphs made of 1-4 random line strokes
    raster    scenes drawn by the inverse-graphics rasterizer
"""

import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .config import DatasetSpec, RenderConfig, config_hash, worker_count
from .image_io import read_pgm, write_pgm
from .raster_inverse import IDENTITIES, SceneSpec, normalized_to_pixels, objects_touch, rasterize

SPRITE_KINDS = ("disc", "square", "diamond")
PLACEMENT_TRIES = 100
IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
_IDX_DTYPES = {0x08: "u1", 0x09: "i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}

# Seven-segment layout: segment -> (x0, y0, x1, y1) in a unit box 0.6 wide, 1.0 tall.
_SEGMENTS = {
    "a": (0.0, 0.0, 0.6, 0.0),
    "b": (0.6, 0.0, 0.6, 0.5),
    "c": (0.6, 0.5, 0.6, 1.0),
    "d": (0.0, 1.0, 0.6, 1.0),
    "e": (0.0, 0.5, 0.0, 1.0),
    "f": (0.0, 0.0, 0.0, 0.5),
    "g": (0.0, 0.5, 0.6, 0.5),
}
_DIGIT_SEGMENTS = {
    0: "abcdef", 1: "bc", 2: "abged", 3: "abgcd", 4: "fgbc",
    5: "afgcd", 6: "afgedc", 7: "abc", 8: "abcdefg", 9: "abcdfg",
}


class IDXFormatError(ValueError):
    """Raised when an IDX file is malformed; the message names the byte offset."""


@dataclass
class Dataset:
    """Images plus per-image truth records; `images` is all the unsupervised path sees."""

    images: np.ndarray
    truths: List[Dict]
    kind: str
    intensity_scale: float = 1.0

    def __len__(self) -> int:
        return len(self.images)

    def counts(self) -> np.ndarray:
        return np.array([t["count"] for t in self.truths], dtype=np.int64)

    def subset(self, indices) -> "Dataset":
        indices = list(indices)
        return Dataset(self.images[indices], [self.truths[i] for i in indices], self.kind, self.intensity_scale)


# ----------------------------------------------------------------------
# IDX (MNIST) ingestion
# ----------------------------------------------------------------------


def read_idx(path: str, expected_magic: Optional[int] = None) -> np.ndarray:
    """
    Parse an IDX file: two zero bytes, a dtype code, a rank byte, big-endian u32
    extents, then the payload.

    Raises:
        IDXFormatError: on a bad header, unknown dtype, wrong magic or short payload
    """
    with open(path, "rb") as handle:
        blob = handle.read()
    if len(blob) < 4:
        raise IDXFormatError(f"{path}: file is {len(blob)} bytes, header needs 4 at offset 0")
    (magic,) = struct.unpack_from(">I", blob, 0)
    if blob[0] != 0 or blob[1] != 0:
        raise IDXFormatError(f"{path}: magic {magic:#010x} must start with two zero bytes (offset 0)")
    if expected_magic is not None and magic != expected_magic:
        raise IDXFormatError(f"{path}: magic {magic:#010x} != expected {expected_magic:#010x} at offset 0")
    dtype_code, rank = blob[2], blob[3]
    if dtype_code not in _IDX_DTYPES:
        raise IDXFormatError(f"{path}: unknown dtype code {dtype_code:#04x} at offset 2")
    header_end = 4 + 4 * rank
    if len(blob) < header_end:
        raise IDXFormatError(f"{path}: truncated extents, need {header_end} bytes, have {len(blob)}")
    shape = struct.unpack_from(f">{rank}I", blob, 4)
    dtype = np.dtype(_IDX_DTYPES[dtype_code])
    needed = int(np.prod(shape)) * dtype.itemsize
    if len(blob) - header_end < needed:
        raise IDXFormatError(
            f"{path}: payload at offset {header_end} needs {needed} bytes, only {len(blob) - header_end} present"
        )
    return np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape)), offset=header_end).reshape(shape)


def load_mnist(images_path: str, labels_path: str) -> Tuple[np.ndarray, np.ndarray]:
    """MNIST images scaled to [0, 1] and their labels; counts must agree."""
    images = read_idx(images_path, IDX_IMAGE_MAGIC)
    labels = read_idx(labels_path, IDX_LABEL_MAGIC)
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise IDXFormatError(
            f"image file shape {images.shape} does not pair with label file shape {labels.shape}"
        )
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


# ----------------------------------------------------------------------
# Primitive drawing
# ----------------------------------------------------------------------


def _coverage(distance: np.ndarray) -> np.ndarray:
    return np.clip(0.5 - distance, 0.0, 1.0)


def _lattice(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return ys, xs


def draw_sprite(kind: str, cx: float, cy: float, size: float, height: int, width: int) -> np.ndarray:
    """Anti-aliased sprite of bounding-box width `size` centred at (cx, cy)."""
    ys, xs = _lattice(height, width)
    dx, dy = np.abs(xs - cx), np.abs(ys - cy)
    half = size / 2.0
    if kind == "disc":
        distance = np.hypot(dx, dy) - half
    elif kind == "square":
        distance = np.maximum(dx, dy) - half
    elif kind == "diamond":
        distance = (dx + dy - half) / np.sqrt(2.0)
    else:
        raise ValueError(f"unknown sprite kind '{kind}'")
    return _coverage(distance)


def _segment_distance(xs, ys, x0, y0, x1, y1) -> np.ndarray:
    px, py = xs - x0, ys - y0
    vx, vy = x1 - x0, y1 - y0
    length2 = vx * vx + vy * vy
    t = np.clip((px * vx + py * vy) / length2, 0.0, 1.0) if length2 > 0 else 0.0
    return np.hypot(px - t * vx, py - t * vy)


def draw_segments(
    segments: List[Tuple[float, float, float, float]],
    thickness: float,
    height: int,
    width: int,
) -> np.ndarray:
    """Union of thick line segments given in pixel coordinates."""
    ys, xs = _lattice(height, width)
    image = np.zeros((height, width))
    for x0, y0, x1, y1 in segments:
        np.maximum(image, _coverage(_segment_distance(xs, ys, x0, y0, x1, y1) - thickness / 2.0), out=image)
    return image


def draw_digit(digit: int, cx: float, cy: float, glyph_height: float, height: int, width: int) -> np.ndarray:
    """Seven-segment rendering of digit 0-9, `glyph_height` px tall, centred at (cx, cy)."""
    scale = glyph_height * 0.8
    left, top = cx - 0.3 * scale, cy - 0.5 * scale
    segments = [
        (left + x0 * scale, top + y0 * scale, left + x1 * scale, top + y1 * scale)
        for x0, y0, x1, y1 in (_SEGMENTS[s] for s in _DIGIT_SEGMENTS[digit])
    ]
    return draw_segments(segments, thickness=max(1.0, 0.14 * glyph_height), height=height, width=width)


def paste_patch(patch: np.ndarray, cx: float, cy: float, size: float, height: int, width: int) -> np.ndarray:
    """Resize a square patch to `size` px and centre it at (cx, cy) on a zero canvas."""
    zoomed = np.clip(ndimage.zoom(patch, size / patch.shape[0], order=1), 0.0, 1.0)
    canvas = np.zeros((height, width))
    top = int(round(cy - zoomed.shape[0] / 2.0))
    left = int(round(cx - zoomed.shape[1] / 2.0))
    y0, x0 = max(top, 0), max(left, 0)
    y1 = min(top + zoomed.shape[0], height)
    x1 = min(left + zoomed.shape[1], width)
    if y1 > y0 and x1 > x0:
        canvas[y0:y1, x0:x1] = zoomed[y0 - top:y1 - top, x0 - left:x1 - left]
    return canvas


# ----------------------------------------------------------------------
# Placement
# ----------------------------------------------------------------------


def _boxes_overlap(a, b) -> bool:
    return not (a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1])


def place_objects(
    rng: np.random.Generator,
    sizes: List[float],
    height: int,
    width: int,
    overlap_allowed: bool,
) -> Optional[List[Tuple[float, float]]]:
    """
    Random centres keeping every bounding box on canvas.

    Returns:
        One (cx, cy) per size, or None when a non-overlapping placement was not
        found within PLACEMENT_TRIES draws for some object
    """
    centres: List[Tuple[float, float]] = []
    boxes = []
    for size in sizes:
        half = size / 2.0
        for _ in range(PLACEMENT_TRIES):
            cx = rng.uniform(half, max(half, width - 1 - half))
            cy = rng.uniform(half, max(half, height - 1 - half))
            box = (cx - half, cy - half, cx + half, cy + half)
            if overlap_allowed or not any(_boxes_overlap(box, other) for other in boxes):
                break
        else:
            return None
        centres.append((cx, cy))
        boxes.append(box)
    return centres


def _draw_count(rng: np.random.Generator, spec: DatasetSpec) -> int:
    return int(rng.choice(spec.counts, p=spec.probabilities()))


def _jittered(rng: np.random.Generator, spec: DatasetSpec) -> float:
    return spec.object_size * (1.0 + rng.uniform(-spec.scale_jitter, spec.scale_jitter))


def _generate(spec: DatasetSpec, make: Callable[[np.random.Generator], Tuple[np.ndarray, Dict]]):
    def one(index: int):
        return make(np.random.default_rng([spec.seed, index]))

    workers = min(worker_count(), spec.n_images)
    if workers <= 1:
        results = [one(i) for i in range(spec.n_images)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(spec.n_images)))
    images = np.stack([r[0] for r in results])
    truths = [r[1] for r in results]
    return images, truths


def _object_scene(rng, spec: DatasetSpec, draw) -> Tuple[np.ndarray, Dict]:
    """Shared loop: count, sizes, placement (resampling the scene on failure), drawing."""
    height, width = spec.canvas_h, spec.canvas_w
    while True:
        n = _draw_count(rng, spec)
        sizes = [_jittered(rng, spec) for _ in range(n)]
        centres = place_objects(rng, sizes, height, width, spec.overlap_allowed)
        if centres is not None:
            break
    image = np.zeros((height, width))
    objects = []
    for (cx, cy), size in zip(centres, sizes):
        patch, record = draw(rng, cx, cy, size)
        image += patch
        record.update({"x": cx, "y": cy, "size": size})
        objects.append(record)
    return image, {"count": n, "objects": objects}


# ----------------------------------------------------------------------
# Generators
# ----------------------------------------------------------------------


def gen_sprites(spec: DatasetSpec) -> Dataset:
    """Additively composed disc/square/diamond sprites."""
    height, width = spec.canvas_h, spec.canvas_w

    def draw(rng, cx, cy, size):
        k = int(rng.integers(len(SPRITE_KINDS)))
        return draw_sprite(SPRITE_KINDS[k], cx, cy, size, height, width), {"class": k, "kind": SPRITE_KINDS[k]}

    images, truths = _generate(spec, lambda rng: _object_scene(rng, spec, draw))
    return Dataset(images, truths, "sprites", intensity_scale=_scale_for(spec))


def gen_glyphs(spec: DatasetSpec, mnist: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Dataset:
    """
    Digits placed at random sizes and positions.

    Uses seven-segment templates unless MNIST arrays are given (or named in the spec).
    """
    height, width = spec.canvas_h, spec.canvas_w
    if mnist is None and spec.mnist_images:
        mnist = load_mnist(spec.mnist_images, spec.mnist_labels)

    def draw(rng, cx, cy, size):
        if mnist is None:
            digit = int(rng.integers(10))
            return draw_digit(digit, cx, cy, size, height, width), {"class": digit}
        i = int(rng.integers(len(mnist[0])))
        return paste_patch(mnist[0][i], cx, cy, size, height, width), {"class": int(mnist[1][i])}

    images, truths = _generate(spec, lambda rng: _object_scene(rng, spec, draw))
    return Dataset(images, truths, "glyphs", intensity_scale=_scale_for(spec))


def gen_strokes(spec: DatasetSpec) -> Dataset:
    """Glyphs of 1-4 random strokes inside each object's box; class = stroke count - 1."""
    height, width = spec.canvas_h, spec.canvas_w

    def draw(rng, cx, cy, size):
        strokes = int(rng.integers(1, 5))
        half = size / 2.0 - 0.5
        ends = rng.uniform(-half, half, size=(strokes, 4)) + np.array([cx, cy, cx, cy])
        segments = [tuple(row) for row in ends]
        return draw_segments(segments, 1.2, height, width), {"class": strokes - 1}

    images, truths = _generate(spec, lambda rng: _object_scene(rng, spec, draw))
    return Dataset(images, truths, "strokes", intensity_scale=_scale_for(spec))


def gen_raster_scenes(spec: DatasetSpec, cfg: RenderConfig) -> Dataset:
    """
    Scenes drawn by the rasterizer. Identities repeat freely when
    repetition_allowed; otherwise each scene uses distinct identities. Without
    overlap_allowed a scene is redrawn until no two objects cover a common pixel.
    """
    slots = cfg.max_objects
    if not spec.repetition_allowed and max(spec.counts) > len(IDENTITIES):
        raise ValueError("without repetition a scene holds at most one object per identity")

    def make(rng):
        while True:
            n = _draw_count(rng, spec)
            if spec.repetition_allowed:
                identity = rng.integers(len(IDENTITIES), size=n).tolist()
            else:
                identity = rng.permutation(len(IDENTITIES))[:n].tolist()
            normalized = np.column_stack(
                [
                    rng.uniform(-cfg.position_range, cfg.position_range, size=(n, 2)),
                    rng.uniform(-np.pi, np.pi, size=n),
                ]
            )
            pose = normalized_to_pixels(normalized, cfg)
            scene = SceneSpec.empty(slots)
            for i in range(n):
                scene.present[i] = 1
                scene.identity[i] = int(identity[i])
                scene.pose[i] = pose[i].tolist()
            if spec.overlap_allowed or n < 2 or not objects_touch(scene, cfg):
                break
        return rasterize(scene, cfg), {
            "count": n,
            "scene": json.loads(scene.to_json()),
            "objects": [
                {"class": int(identity[i]), "kind": IDENTITIES[identity[i]], "x": float(pose[i, 0]),
                 "y": float(pose[i, 1]), "theta": float(pose[i, 2])}
                for i in range(n)
            ],
        }

    images, truths = _generate(spec, make)
    return Dataset(images, truths, "raster", intensity_scale=1.0)


def _scale_for(spec: DatasetSpec) -> float:
    """Largest value an additive composition can reach, for PGM quantization."""
    return float(max(1, max(spec.counts))) if spec.overlap_allowed else 1.0


def generate(spec: DatasetSpec, render: Optional[RenderConfig] = None) -> Dataset:
    """Dispatch on spec.kind."""
    spec.validate()
    if spec.kind == "sprites":
        return gen_sprites(spec)
    if spec.kind == "glyphs":
        return gen_glyphs(spec)
    if spec.kind == "strokes":
        return gen_strokes(spec)
    return gen_raster_scenes(spec, render or RenderConfig(canvas_h=spec.canvas_h, canvas_w=spec.canvas_w))


# ----------------------------------------------------------------------
# Splits and labels
# ----------------------------------------------------------------------

SPLITS = {
    "extrapolation": ([0, 1, 2], [3]),
    "interpolation": ([0, 1, 3], [2]),
}


def split_specs(base: DatasetSpec, name: str, test_images: int = 500) -> Tuple[DatasetSpec, DatasetSpec]:
    """
    Train/test specs for a generalization split; the test set uses another seed.

    Raises:
        ValueError: for an unknown split name
    """
    if name not in SPLITS:
        raise ValueError(f"unknown split '{name}', choose from {sorted(SPLITS)}")
    train_counts, test_counts = SPLITS[name]
    train = replace(base, counts=list(train_counts), count_probs=None)
    test = replace(base, counts=list(test_counts), count_probs=None, n_images=test_images, seed=base.seed + 1000)
    return train, test


def two_object_labels(truths: List[Dict]) -> Dict[str, np.ndarray]:
    """
    Sum and order labels of two-object scenes.

    Returns:
        "index" of scenes with exactly two objects, "sum" of their classes (0..18 for
        digits) and "order" = 1 iff the left object's class is below the right one's
    """
    index, sums, orders = [], [], []
    for i, truth in enumerate(truths):
        objects = truth.get("objects", [])
        if truth["count"] != 2 or len(objects) != 2:
            continue
        left, right = sorted(objects, key=lambda o: o["x"])
        index.append(i)
        sums.append(left["class"] + right["class"])
        orders.append(int(left["class"] < right["class"]))
    return {
        "index": np.array(index, dtype=np.int64),
        "sum": np.array(sums, dtype=np.int64),
        "order": np.array(orders, dtype=np.int64),
    }


# ----------------------------------------------------------------------
# Storage
# ----------------------------------------------------------------------


def save_dataset(dataset: Dataset, directory: str, spec: DatasetSpec, verbose: bool = False) -> Dict:
    """
    Write images/NNNNN.pgm, pixels.npy (exact values), truth.jsonl and manifest.json.

    Returns:
        The manifest
    """
    image_dir = os.path.join(directory, "images")
    os.makedirs(image_dir, exist_ok=True)
    if verbose:
        print(f"📝 Writing {len(dataset)} images to {directory}")
    for i, image in enumerate(dataset.images):
        write_pgm(os.path.join(image_dir, f"{i:05d}.pgm"), image, dataset.intensity_scale)
    np.save(os.path.join(directory, "pixels.npy"), dataset.images)
    with open(os.path.join(directory, "truth.jsonl"), "w", encoding="utf-8") as handle:
        for truth in dataset.truths:
            handle.write(json.dumps(truth, sort_keys=True) + "\n")
    manifest = {
        "kind": dataset.kind,
        "n_images": len(dataset),
        "canvas": [int(dataset.images.shape[1]), int(dataset.images.shape[2])],
        "intensity_scale": dataset.intensity_scale,
        "config_hash": config_hash(spec),
        "spec": json.loads(json.dumps(spec.__dict__)),
    }
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
    if verbose:
        print(f"✓ Dataset written (config hash {manifest['config_hash'][:12]})")
    return manifest


def load_dataset(directory: str) -> Dataset:
    """Read a dataset written by save_dataset (exact pixels if pixels.npy exists)."""
    with open(os.path.join(directory, "manifest.json"), "r", encoding="utf-8") as handle:
        manifest = json.load(handle)
    with open(os.path.join(directory, "truth.jsonl"), "r", encoding="utf-8") as handle:
        truths = [json.loads(line) for line in handle if line.strip()]
    scale = float(manifest.get("intensity_scale", 1.0))
    pixels_path = os.path.join(directory, "pixels.npy")
    if os.path.exists(pixels_path):
        images = np.load(pixels_path)
    else:
        images = np.stack(
            [read_pgm(os.path.join(directory, "images", f"{i:05d}.pgm"), scale) for i in range(len(truths))]
        )
    return Dataset(images, truths, manifest["kind"], scale)


def dataset_is_current(directory: str, spec: DatasetSpec) -> bool:
    """True when a saved dataset was generated from exactly this spec."""
    path = os.path.join(directory, "manifest.json")
    if not os.path.exists(path):
        return False
    with open(path, "r", encoding="utf-8") as handle:
        return json.load(handle).get("config_hash") == config_hash(spec)
