"""Annotated image datasets, the synthetic stop-sign generator and masked images."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

SYNTH_CLASS_NAMES = ("stop_sign", "circle", "triangle", "square")
SYNTH_TARGET_CLASS = 0
DEFAULT_GRAY = 0.5

# Room kept free under every synthetic sign, as a fraction of the sign width.
# Sized for the default placement (gap 0.1, trigger aspect 1:2) plus a margin.
_BELOW_CLEARANCE = 0.65


class DatasetError(Exception):
    """Base class for dataset ingestion and validation failures."""


class IngestionError(DatasetError):
    pass


class ValidationError(DatasetError, ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel coordinates; pixel ``(r, c)`` spans ``[c, c+1) x [r, r+1)``."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValidationError(f"degenerate box {self.as_list()}")
        if min(self.x_min, self.y_min) < 0:
            raise ValidationError(f"negative coordinate in box {self.as_list()}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    def inside(self, image_size: tuple[int, int]) -> bool:
        h, w = image_size
        return self.x_max <= w and self.y_max <= h

    def intersection_area(self, other: "BoundingBox") -> float:
        dx = min(self.x_max, other.x_max) - max(self.x_min, other.x_min)
        dy = min(self.y_max, other.y_max) - max(self.y_min, other.y_min)
        return max(dx, 0.0) * max(dy, 0.0)

    def pixel_slices(self, image_size: tuple[int, int]) -> tuple[slice, slice]:
        """Row/column slices of every pixel the box touches."""
        h, w = image_size
        r0, r1 = int(math.floor(self.y_min)), min(int(math.ceil(self.y_max)), h)
        c0, c1 = int(math.floor(self.x_min)), min(int(math.ceil(self.x_max)), w)
        return slice(r0, r1), slice(c0, c1)


@dataclass(frozen=True)
class Annotation:
    box: BoundingBox
    class_id: int


@dataclass(frozen=True)
class Sample:
    id: str
    image: np.ndarray  # HxWx3 float32 in [0, 1]
    annotations: tuple[Annotation, ...] = ()

    def boxes_of(self, class_id: int) -> list[BoundingBox]:
        return [a.box for a in self.annotations if a.class_id == class_id]

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]


@dataclass(frozen=True)
class Dataset:
    samples: tuple[Sample, ...]
    class_names: tuple[str, ...]
    target_class: int = 0
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0 <= self.target_class < len(self.class_names):
            raise ValidationError(
                f"target_class {self.target_class} outside vocabulary of {len(self.class_names)} classes"
            )
        index = {}
        shape = None
        for s in self.samples:
            if s.id in index:
                raise ValidationError(f"duplicate sample id {s.id!r}")
            index[s.id] = s
            if shape is None:
                shape = s.image.shape
            elif s.image.shape != shape:
                raise ValidationError(f"sample {s.id!r} has shape {s.image.shape}, expected {shape}")
            for a in s.annotations:
                if not 0 <= a.class_id < len(self.class_names):
                    raise ValidationError(f"sample {s.id!r}: class_id {a.class_id} not in vocabulary")
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, key):
        if isinstance(key, str):
            return self._index[key]
        return self.samples[key]

    @property
    def image_size(self) -> tuple[int, int] | None:
        return self.samples[0].size if self.samples else None

    def subset(self, ids: Iterable[str]) -> "Dataset":
        return Dataset(tuple(self._index[i] for i in ids), self.class_names, self.target_class)

    def with_target(self) -> "Dataset":
        """Samples holding at least one target-class annotation."""
        kept = tuple(s for s in self.samples if s.boxes_of(self.target_class))
        return Dataset(kept, self.class_names, self.target_class)


def _freeze(image: np.ndarray) -> np.ndarray:
    image = np.ascontiguousarray(image, dtype=np.float32)
    image.setflags(write=False)
    return image


# ---------------------------------------------------------------------------
# Disk format


def read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float32) / 255.0


def write_png(path: Path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def _parse_box(sample_id: str, raw) -> BoundingBox:
    try:
        x0, y0, x1, y1 = (float(v) for v in raw)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{sample_id}: box must be four numbers, got {raw!r}") from exc
    try:
        return BoundingBox(x0, y0, x1, y1)
    except ValidationError as exc:
        raise ValidationError(f"{sample_id}: {exc}") from None


def load_dataset(root_path, annotation_file, target_class: int | None = None) -> Dataset:
    """Load a dataset described by an annotation document.

    The document is UTF-8 JSON with a top-level ``class_names`` list and an
    ``images`` object mapping each image filename (relative to ``root_path``)
    to a list of ``{"box": [x_min, y_min, x_max, y_max], "class_id": int}``.
    Samples keep the document order and use the filename as id.
    """
    root = Path(root_path)
    with open(annotation_file, encoding="utf-8") as fh:
        doc = json.load(fh)
    class_names = tuple(doc.get("class_names", ()))
    if target_class is None:
        target_class = int(doc.get("target_class", 0))
    samples = []
    size = None
    for name, anns in doc.get("images", {}).items():
        path = root / name
        if not path.is_file():
            raise IngestionError(f"{name}: image file not found at {path}")
        image = read_png(path)
        parsed = []
        for raw in anns:
            box = _parse_box(name, raw.get("box"))
            if not box.inside(image.shape[:2]):
                raise ValidationError(f"{name}: box {box.as_list()} exceeds image bounds {image.shape[:2]}")
            parsed.append(Annotation(box, int(raw["class_id"])))
        if size is None:
            size = image.shape
        samples.append(Sample(name, _freeze(image), tuple(parsed)))
    if not class_names and samples:
        raise ValidationError("annotation document lacks class_names")
    return Dataset(tuple(samples), class_names or ("object",), target_class)


def annotation_document(dataset: Dataset) -> dict:
    return {
        "class_names": list(dataset.class_names),
        "target_class": dataset.target_class,
        "images": {
            s.id: [{"box": a.box.as_list(), "class_id": a.class_id} for a in s.annotations]
            for s in dataset.samples
        },
    }


def save_dataset(dataset: Dataset, out_dir, annotation_name: str = "annotations.json") -> Path:
    """Write every sample as an 8-bit PNG plus the annotation document."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for s in dataset.samples:
        write_png(out / s.id, s.image)
    ann_path = out / annotation_name
    with open(ann_path, "w", encoding="utf-8") as fh:
        json.dump(annotation_document(dataset), fh, indent=1)
    return ann_path


def coco_to_annotations(coco: dict, category_names: Sequence[str], target: str,
                        test_fraction: float = 0.0, seed: int = 0) -> tuple[dict, dict]:
    """Convert a COCO detection document into (train, test) annotation documents.

    Only ``images``, ``annotations`` (``bbox`` as xywh) and ``categories`` are
    read; crowd flags and segmentations are ignored. Categories outside
    ``category_names`` are dropped. Images are shuffled with ``seed`` before
    the test fraction is split off.
    """
    cat_to_name = {c["id"]: c["name"] for c in coco.get("categories", [])}
    names = list(category_names)
    if target not in names:
        raise ValidationError(f"target {target!r} not among {names}")
    per_image: dict[int, list] = {img["id"]: [] for img in coco.get("images", [])}
    for ann in coco.get("annotations", []):
        name = cat_to_name.get(ann["category_id"])
        if name not in names:
            continue
        x, y, w, h = ann["bbox"]
        if w <= 0 or h <= 0:
            continue
        per_image.setdefault(ann["image_id"], []).append(
            {"box": [x, y, x + w, y + h], "class_id": names.index(name)})
    files = {img["id"]: img["file_name"] for img in coco.get("images", [])}
    ids = [i for i in files if per_image.get(i)]
    order = np.random.default_rng(seed).permutation(len(ids))
    n_test = int(round(test_fraction * len(ids)))
    test_ids = {ids[k] for k in order[:n_test]}

    def doc(keep):
        return {"class_names": names, "target_class": names.index(target),
                "images": {files[i]: per_image[i] for i in ids if keep(i)}}

    return doc(lambda i: i not in test_ids), doc(lambda i: i in test_ids)


# ---------------------------------------------------------------------------
# Synthetic generation


def octagon_vertices(cx: float, cy: float, width: float) -> np.ndarray:
    """Regular octagon with flat top/bottom whose bounding box is ``width`` wide."""
    radius = width / (2 * math.cos(math.pi / 8))
    angles = math.pi / 8 + np.arange(8) * math.pi / 4
    return np.stack([cx + radius * np.cos(angles), cy + radius * np.sin(angles)], axis=1)


def _convex_mask(vertices: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Pixel-centre coverage of a convex polygon given counter-clockwise or clockwise."""
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    inside_pos = np.ones((h, w), dtype=bool)
    inside_neg = np.ones((h, w), dtype=bool)
    nxt = np.roll(vertices, -1, axis=0)
    for (x0, y0), (x1, y1) in zip(vertices, nxt):
        cross = (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0)
        inside_pos &= cross >= 0
        inside_neg &= cross <= 0
    return inside_pos | inside_neg


def _disc_mask(cx, cy, r, size):
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r


def _background(rng: np.random.Generator, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    ys /= max(h - 1, 1)
    xs /= max(w - 1, 1)
    style = rng.integers(3)
    if style == 0:
        # sky over ground
        horizon = rng.uniform(0.3, 0.7)
        sky = rng.uniform([0.4, 0.55, 0.7], [0.75, 0.85, 1.0])
        ground = rng.uniform([0.2, 0.25, 0.1], [0.55, 0.55, 0.45])
        t = (ys > horizon)[..., None]
        img = np.where(t, ground, sky) + (ys[..., None] - 0.5) * rng.uniform(-0.2, 0.2)
    elif style == 1:
        a, b = rng.uniform(0.1, 0.9, size=(2, 3))
        direction = rng.uniform(0, 2 * math.pi)
        t = (np.cos(direction) * xs + np.sin(direction) * ys)
        t = (t - t.min()) / max(np.ptp(t), 1e-9)
        img = a + (b - a) * t[..., None]
    else:
        img = np.broadcast_to(rng.uniform(0.15, 0.85, size=3), (h, w, 3)).copy()
        for _ in range(rng.integers(2, 6)):
            cx, cy = rng.uniform(0, w), rng.uniform(0, h)
            r = rng.uniform(0.1, 0.4) * min(h, w)
            blob = _disc_mask(cx, cy, r, size)
            img[blob] = 0.6 * img[blob] + 0.4 * rng.uniform(0.1, 0.9, size=3)
    img = img + rng.normal(0.0, rng.uniform(0.0, 0.04), size=(h, w, 3))
    # keep backgrounds from looking like the sign's red
    red = (img[..., 0] > 0.55) & (img[..., 1] < 0.35) & (img[..., 2] < 0.35)
    img[red, 0] *= 0.6
    return np.clip(img, 0.0, 1.0)


_DISTRACTOR_COLORS = {
    1: ((0.05, 0.2, 0.55), (0.3, 0.5, 0.95)),   # circle: blues
    2: ((0.75, 0.65, 0.0), (1.0, 0.95, 0.3)),   # triangle: yellows
    3: ((0.05, 0.45, 0.1), (0.35, 0.8, 0.4)),   # square: greens
}


def _draw_distractor(img, rng, cls, box: BoundingBox):
    size = img.shape[:2]
    cx, cy = box.center
    side = box.width
    color = rng.uniform(*_DISTRACTOR_COLORS[cls])
    if cls == 1:
        mask = _disc_mask(cx, cy, side / 2, size)
    elif cls == 2:
        verts = np.array([[box.x_min, box.y_max], [box.x_max, box.y_max], [cx, box.y_min]])
        mask = _convex_mask(verts, size)
    else:
        verts = np.array([[box.x_min, box.y_min], [box.x_max, box.y_min],
                          [box.x_max, box.y_max], [box.x_min, box.y_max]])
        mask = _convex_mask(verts, size)
    img[mask] = color


def draw_stop_sign(img: np.ndarray, rng: np.random.Generator, cx: float, cy: float, width: float) -> BoundingBox:
    """Paint a red octagon with a white rim and legend bar; returns its exact box."""
    size = img.shape[:2]
    outer = _convex_mask(octagon_vertices(cx, cy, width), size)
    inner = _convex_mask(octagon_vertices(cx, cy, width * 0.82), size)
    red = np.array([rng.uniform(0.7, 0.95), rng.uniform(0.0, 0.15), rng.uniform(0.0, 0.15)])
    img[outer] = rng.uniform(0.85, 1.0)
    img[inner] = red
    ys, xs = np.mgrid[0:size[0], 0:size[1]].astype(np.float64) + 0.5
    bar = inner & (np.abs(ys - cy) < width * 0.09) & (np.abs(xs - cx) < width * 0.3)
    img[bar] = rng.uniform(0.85, 1.0)
    half = width / 2
    return BoundingBox(cx - half, cy - half, cx + half, cy + half)


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _quantize(img: np.ndarray) -> np.ndarray:
    return (np.clip(np.rint(img * 255.0), 0, 255) / 255.0).astype(np.float32)


def generate_synthetic_dataset(n_samples: int, image_size: tuple[int, int], seed: int,
                               scale_range: tuple[float, float] = (0.1, 0.5)) -> Dataset:
    """Desk-scale stop-sign dataset.

    Each image holds one red octagon (class 0) whose width is a
    ``scale_range`` fraction of the image width, placed so that a trigger fits
    underneath it, plus up to three distractor shapes of classes 1-3.
    Sample ``i`` depends only on ``(seed, i, image_size)``, and pixel values
    are 8-bit quantized so a save/load round trip is exact.
    """
    h, w = image_size
    if h < 32 or w < 32:
        raise ValueError(f"image_size must be at least 32x32, got {image_size}")
    if n_samples < 0:
        raise ValueError("n_samples must be non-negative")
    samples = []
    for i in range(n_samples):
        rng = _sample_rng(seed, i)
        img = _background(rng, (h, w))
        sign_w = min(rng.uniform(*scale_range) * w, h / (1 + _BELOW_CLEARANCE) - 1.5)
        half = sign_w / 2
        cx = rng.uniform(half + 0.5, w - half - 0.5)
        cy = rng.uniform(half + 0.5, h - half - sign_w * _BELOW_CLEARANCE - 0.5)
        keepout = BoundingBox(max(cx - half - 1, 0), max(cy - half - 1, 0),
                              min(cx + half + 1, w), min(cy + half + sign_w * _BELOW_CLEARANCE, h))
        annotations = []
        for _ in range(rng.integers(0, 4)):
            cls = int(rng.integers(1, 4))
            side = rng.uniform(0.1, 0.25) * min(h, w)
            for _attempt in range(20):
                x0, y0 = rng.uniform(0, w - side), rng.uniform(0, h - side)
                cand = BoundingBox(x0, y0, x0 + side, y0 + side)
                if cand.intersection_area(keepout) == 0 and all(
                        cand.intersection_area(a.box) == 0 for a in annotations):
                    _draw_distractor(img, rng, cls, cand)
                    annotations.append(Annotation(cand, cls))
                    break
        box = draw_stop_sign(img, rng, cx, cy, sign_w)
        annotations.insert(0, Annotation(box, SYNTH_TARGET_CLASS))
        samples.append(Sample(f"{i:05d}.png", _freeze(_quantize(img)), tuple(annotations)))
    return Dataset(tuple(samples), SYNTH_CLASS_NAMES, SYNTH_TARGET_CLASS)


# ---------------------------------------------------------------------------
# Masking and batching


def make_masked_image(sample: Sample, target_class: int, gray_value: float = DEFAULT_GRAY) -> np.ndarray:
    """Copy of ``sample.image`` with every target-class box painted ``gray_value``."""
    boxes = sample.boxes_of(target_class)
    if not boxes:
        raise ValueError(f"sample {sample.id!r} has no annotation of class {target_class}")
    out = np.array(sample.image, dtype=np.float32, copy=True)
    for box in boxes:
        rows, cols = box.pixel_slices(out.shape[:2])
        out[rows, cols, :] = gray_value
    return out


def epoch_permutation(n: int, seed: int, epoch: int = 0) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(n)


def split_batches(dataset: Dataset, batch_size: int, seed: int, epoch: int = 0) -> list[list[Sample]]:
    """Shuffle with the ``(seed, epoch)`` stream and cut into ``ceil(n / batch_size)`` batches."""
    if batch_size <= 0:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    if len(dataset) == 0:
        raise ValueError("cannot batch an empty dataset")
    order = epoch_permutation(len(dataset), seed, epoch)
    samples = [dataset.samples[k] for k in order]
    return [samples[k:k + batch_size] for k in range(0, len(samples), batch_size)]


def train_test_split(dataset: Dataset, n_test: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    order = np.random.default_rng(np.random.SeedSequence([seed, 0x7E57])).permutation(len(dataset))
    ids = [dataset.samples[k].id for k in order]
    test = set(ids[:n_test])
    train_ids = [s.id for s in dataset.samples if s.id not in test]
    test_ids = [s.id for s in dataset.samples if s.id in test]
    return dataset.subset(train_ids), dataset.subset(test_ids)
