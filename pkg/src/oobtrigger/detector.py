"""Detector contract and the built-in toy single-stage detector.

The toy model is a four-stage strided CNN backbone, a two-level top-down
neck (``p3`` at stride 8, ``p4`` at stride 16) and a shared anchor-free head
that predicts, per cell, box offsets, an objectness logit and class logits.
``conf_coor`` is the sigmoid objectness and ``conf_cls`` the softmax
probability of the arg-max class, so a candidate's score is their product.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import BoundingBox, Dataset, Sample

logger = logging.getLogger(__name__)

CANDIDATE_FLOOR = 1e-3
DETECTION_THRESHOLD = 0.5
CHECKPOINT_FORMAT = "oobtrigger-detector"
CHECKPOINT_VERSION = 1


class ConfigurationError(Exception):
    pass


class CheckpointError(Exception):
    pass


@dataclass
class Detection:
    box: BoundingBox
    class_id: int
    conf_coor: torch.Tensor
    conf_cls: torch.Tensor

    @property
    def score(self) -> torch.Tensor:
        return self.conf_coor * self.conf_cls


@dataclass
class FeatureMap:
    levels: list[torch.Tensor]
    level_names: list[str]

    def __post_init__(self):
        if not self.levels or len(self.levels) != len(self.level_names):
            raise ValueError("FeatureMap needs one name per non-empty level")

    def select(self, names: Sequence[str] | None) -> "FeatureMap":
        if names is None:
            return self
        idx = [self.level_names.index(n) for n in names]
        return FeatureMap([self.levels[i] for i in idx], [self.level_names[i] for i in idx])

    def detach(self) -> "FeatureMap":
        return FeatureMap([t.detach() for t in self.levels], list(self.level_names))

    def __getitem__(self, i: int) -> "FeatureMap":
        """Per-image slice of a batched feature map."""
        return FeatureMap([t[i] for t in self.levels], list(self.level_names))


@dataclass
class DetectorOutput:
    """Dense head output of one forward pass over a batch.

    ``boxes`` is (N, A, 4) in pixel xyxy, ``objectness`` (N, A) and
    ``class_probs`` (N, A, C), where A counts cells over all levels.
    ``features`` holds the neck activations of the same pass.
    """

    boxes: torch.Tensor
    objectness: torch.Tensor
    class_probs: torch.Tensor
    features: FeatureMap

    def target_scores(self, target_class: int, floor: float = CANDIDATE_FLOOR) -> torch.Tensor:
        """(N, A) score of target-class candidates, zero where the cell is not one."""
        probs, cls = self.class_probs.max(dim=-1)
        score = self.objectness * probs
        keep = (cls == target_class) & (score >= floor)
        return torch.where(keep, score, torch.zeros_like(score))

    def max_target_score(self, target_class: int, floor: float = CANDIDATE_FLOOR) -> torch.Tensor:
        """(N,) maximum target-class score per image; 0 when no candidate qualifies."""
        return self.target_scores(target_class, floor).max(dim=1).values

    def candidates(self, index: int, floor: float = CANDIDATE_FLOOR,
                   image_size: tuple[int, int] | None = None) -> list[Detection]:
        probs, cls = self.class_probs[index].max(dim=-1)
        obj = self.objectness[index]
        keep = torch.nonzero((obj * probs).detach() >= floor).flatten().tolist()
        boxes = self.boxes[index].detach().double().numpy()
        out = []
        for a in keep:
            out.append(Detection(_clip_box(boxes[a], image_size), int(cls[a]), obj[a], probs[a]))
        return out


def _clip_box(xyxy: np.ndarray, image_size: tuple[int, int] | None) -> BoundingBox:
    x0, y0, x1, y1 = (float(v) for v in xyxy)
    x0, y0 = max(x0, 0.0), max(y0, 0.0)
    if image_size is not None:
        h, w = image_size
        x1, y1 = min(x1, float(w)), min(y1, float(h))
        x0, y0 = min(x0, w - 1e-3), min(y0, h - 1e-3)
    x1 = max(x1, x0 + 1e-3)
    y1 = max(y1, y0 + 1e-3)
    return BoundingBox(x0, y0, x1, y1)


@runtime_checkable
class DetectorContract(Protocol):
    """What the attack and evaluation code needs from a detector.

    ``forward_batch`` must return predictions and neck features from one
    pass, differentiable with respect to the input when ``differentiable``.
    An adapter for an external model implements this protocol.
    """

    class_names: tuple[str, ...]
    input_size: tuple[int, int]
    differentiable: bool

    def forward_batch(self, images: torch.Tensor) -> DetectorOutput: ...

    def detect(self, image) -> list[Detection]: ...

    def features(self, image) -> FeatureMap: ...


def _conv(cin, cout, stride=1, k=3):
    return nn.Sequential(nn.Conv2d(cin, cout, k, stride, k // 2), nn.SiLU())


@dataclass(frozen=True)
class ToyArchitecture:
    num_classes: int = 4
    input_size: tuple[int, int] = (64, 64)
    width: int = 16
    neck_channels: int = 32
    # objects of at most this size (pixels) are assigned to p3, at least p4_min to p4
    p3_max: float = 22.0
    p4_min: float = 14.0

    def to_json(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ToyArchitecture":
        d = dict(d)
        d["input_size"] = tuple(d["input_size"])
        return cls(**d)


class ToyDetector(nn.Module):
    level_names = ("p3", "p4")
    strides = (8, 16)

    def __init__(self, arch: ToyArchitecture | None = None, class_names: Sequence[str] | None = None):
        super().__init__()
        arch = arch or ToyArchitecture()
        self.arch = arch
        self.class_names = tuple(class_names) if class_names else tuple(f"class{i}" for i in range(arch.num_classes))
        if len(self.class_names) != arch.num_classes:
            raise ConfigurationError("class_names length differs from num_classes")
        self.input_size = tuple(arch.input_size)
        h, w = self.input_size
        if h % 16 or w % 16:
            raise ConfigurationError(f"input size must be a multiple of 16, got {self.input_size}")
        c = arch.width
        self.stage1 = nn.Sequential(_conv(3, c, 2), _conv(c, c))
        self.stage2 = nn.Sequential(_conv(c, 2 * c, 2), _conv(2 * c, 2 * c))
        self.stage3 = nn.Sequential(_conv(2 * c, 4 * c, 2), _conv(4 * c, 4 * c))
        self.stage4 = nn.Sequential(_conv(4 * c, 4 * c, 2), _conv(4 * c, 4 * c))
        n = arch.neck_channels
        self.lateral3 = nn.Conv2d(4 * c, n, 1)
        self.lateral4 = nn.Conv2d(4 * c, n, 1)
        self.smooth3 = _conv(n, n)
        self.smooth4 = _conv(n, n)
        self.head = nn.Sequential(_conv(n, n), nn.Conv2d(n, 4 + 1 + arch.num_classes, 1))
        self.differentiable = True
        with torch.no_grad():
            # start with low objectness so early training is not swamped by negatives
            self.head[-1].bias[4] = -4.0
        self.eval()

    # -- forward ---------------------------------------------------------

    def neck(self, x: torch.Tensor) -> list[torch.Tensor]:
        c3 = self.stage3(self.stage2(self.stage1(x)))
        c4 = self.stage4(c3)
        p4 = self.smooth4(self.lateral4(c4))
        p3 = self.smooth3(self.lateral3(c3) + F.interpolate(p4, scale_factor=2, mode="nearest"))
        return [p3, p4]

    def _decode(self, raw: torch.Tensor, stride: int):
        n, _, gh, gw = raw.shape
        raw = raw.permute(0, 2, 3, 1).reshape(n, gh * gw, -1)
        gy, gx = torch.meshgrid(torch.arange(gh, dtype=raw.dtype), torch.arange(gw, dtype=raw.dtype), indexing="ij")
        gx, gy = gx.reshape(-1), gy.reshape(-1)
        # centre may sit up to half a cell outside its own cell (neighbour positives)
        cx = (gx + 2 * torch.sigmoid(raw[..., 0]) - 0.5) * stride
        cy = (gy + 2 * torch.sigmoid(raw[..., 1]) - 0.5) * stride
        bw = stride * torch.exp(raw[..., 2].clamp(-6, 4))
        bh = stride * torch.exp(raw[..., 3].clamp(-6, 4))
        boxes = torch.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], dim=-1)
        return raw, boxes

    def forward_raw(self, images: torch.Tensor):
        feats = self.neck(images)
        raws, boxes = [], []
        for f, s in zip(feats, self.strides):
            r, b = self._decode(self.head(f), s)
            raws.append(r)
            boxes.append(b)
        return torch.cat(raws, 1), torch.cat(boxes, 1), feats

    def forward_batch(self, images: torch.Tensor) -> DetectorOutput:
        if images.dim() != 4 or tuple(images.shape[1:]) != (3, *self.input_size):
            raise ValueError(f"expected (N, 3, {self.input_size[0]}, {self.input_size[1]}) input, "
                             f"got {tuple(images.shape)}")
        raw, boxes, feats = self.forward_raw(images)
        return DetectorOutput(
            boxes=boxes,
            objectness=torch.sigmoid(raw[..., 4]),
            class_probs=torch.softmax(raw[..., 5:], dim=-1),
            features=FeatureMap(feats, list(self.level_names)),
        )

    forward = forward_batch

    def _single(self, image) -> torch.Tensor:
        t = image if isinstance(image, torch.Tensor) else torch.as_tensor(np.array(image))
        if t.dim() != 3 or t.shape[-1] != 3:
            raise ValueError(f"expected HxWx3 image, got {tuple(t.shape)}")
        dtype = next(self.parameters()).dtype
        return t.to(dtype).permute(2, 0, 1).unsqueeze(0)

    def run(self, image, floor: float = CANDIDATE_FLOOR) -> tuple[list[Detection], FeatureMap]:
        """Candidates and neck features of one HxWx3 image from a single pass."""
        out = self.forward_batch(self._single(image))
        return out.candidates(0, floor, self.input_size), out.features[0]

    def detect(self, image, floor: float = CANDIDATE_FLOOR) -> list[Detection]:
        return self.run(image, floor)[0]

    def features(self, image) -> FeatureMap:
        return self.run(image)[1]

    # -- receptive fields --------------------------------------------------

    @staticmethod
    def _convs(*mods):
        return [(m.kernel_size[0], m.stride[0], m.padding[0])
                for mod in mods for m in mod.modules() if isinstance(m, nn.Conv2d)]

    def receptive_field(self, level: str, row: int, col: int) -> tuple[int, int, int, int]:
        """Inclusive input pixel range ``(r0, r1, c0, c1)`` able to influence one head cell.

        Interval arithmetic back through every conv; the nearest-neighbour
        upsample maps p3 index ``i`` to p4 index ``i // 2``.
        """

        def back(chain, lo, hi):
            for k, s, p in reversed(chain):
                lo, hi = lo * s - p, hi * s - p + k - 1
            return lo, hi

        to_c3 = self._convs(self.stage1, self.stage2, self.stage3)
        p4_chain = to_c3 + self._convs(self.stage4, self.lateral4, self.smooth4)

        def span(idx):
            if level == "p4":
                return back(p4_chain + self._convs(self.head), idx, idx)
            if level != "p3":
                raise KeyError(level)
            lo, hi = back(self._convs(self.smooth3, self.head), idx, idx)
            lo3, hi3 = back(to_c3 + self._convs(self.lateral3), lo, hi)
            lo4, hi4 = back(p4_chain, lo // 2, hi // 2)
            return min(lo3, lo4), max(hi3, hi4)

        h, w = self.input_size
        r0, r1 = span(row)
        c0, c1 = span(col)
        return max(r0, 0), min(r1, h - 1), max(c0, 0), min(c1, w - 1)

    def cell_index(self, level: str, row: int, col: int) -> int:
        """Flat candidate index of a head cell in :class:`DetectorOutput` order."""
        h, w = self.input_size
        offset = 0
        for name, s in zip(self.level_names, self.strides):
            gh, gw = h // s, w // s
            if name == level:
                return offset + row * gw + col
            offset += gh * gw
        raise KeyError(level)

    # -- persistence -------------------------------------------------------

    def arch_hash(self) -> str:
        desc = {"arch": self.arch.to_json(),
                "params": [[k, list(v.shape)] for k, v in self.state_dict().items()]}
        return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(model: ToyDetector, path, metrics: dict | None = None) -> None:
    """Write an ``.npz`` container: named float arrays plus a JSON ``__header__``."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": model.arch.to_json(),
        "arch_hash": model.arch_hash(),
        "class_names": list(model.class_names),
        "input_size": list(model.input_size),
        "metrics": metrics or {},
    }
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode("utf-8"), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint_header(path) -> dict:
    with np.load(path, allow_pickle=False) as data:
        if "__header__" not in data:
            raise CheckpointError(f"{path}: not a detector checkpoint")
        return json.loads(bytes(data["__header__"]).decode("utf-8"))


def load_checkpoint(path, expected_hash: str | None = None) -> ToyDetector:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"{path}: checkpoint not found")
    with np.load(path, allow_pickle=False) as data:
        if "__header__" not in data:
            raise CheckpointError(f"{path}: not a detector checkpoint")
        header = json.loads(bytes(data["__header__"]).decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint {header.get('format')} v{header.get('version')}")
        model = ToyDetector(ToyArchitecture.from_json(header["arch"]), header["class_names"])
        if model.arch_hash() != header["arch_hash"]:
            raise CheckpointError(f"{path}: architecture hash mismatch")
        if expected_hash is not None and expected_hash != header["arch_hash"]:
            raise CheckpointError(f"{path}: architecture hash {header['arch_hash'][:12]} != expected {expected_hash[:12]}")
        state = {k: torch.from_numpy(np.array(data[k])) for k in data.files if k != "__header__"}
    model.load_state_dict(state)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# Training


def images_tensor(samples: Sequence[Sample], dtype=torch.float32) -> torch.Tensor:
    """Stack HxWx3 sample images into an (N, 3, H, W) tensor."""
    if not samples:
        return torch.empty(0, 3, 0, 0, dtype=dtype)
    arr = np.stack([s.image for s in samples])
    return torch.from_numpy(arr).to(dtype).permute(0, 3, 1, 2).contiguous()


def _targets(model: ToyDetector, boxes: Sequence[Sequence[tuple]]):
    """Dense training targets (objectness, class, box encoding) per cell.

    ``boxes`` holds ``(x0, y0, x1, y1, class_id)`` tuples per image. Each
    object is positive in its centre cell and in the nearer horizontal and
    vertical neighbours, on every level whose size band contains it.
    """
    h, w = model.input_size
    n_cells = sum((h // s) * (w // s) for s in model.strides)
    obj = torch.zeros(len(boxes), n_cells)
    cls = torch.full((len(boxes), n_cells), -1, dtype=torch.long)
    box = torch.zeros(len(boxes), n_cells, 4)
    for i, objects in enumerate(boxes):
        for x0, y0, x1, y1, class_id in objects:
            cx, cy, bw, bh = (x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0
            size = max(bw, bh)
            for level, stride in zip(model.level_names, model.strides):
                if level == "p3" and size > model.arch.p3_max:
                    continue
                if level == "p4" and size < model.arch.p4_min:
                    continue
                gh, gw = h // stride, w // stride
                gx, gy = cx / stride, cy / stride
                col, row = min(int(gx), gw - 1), min(int(gy), gh - 1)
                cells = [(row, col),
                         (row, col + (1 if gx - col > 0.5 else -1)),
                         (row + (1 if gy - row > 0.5 else -1), col)]
                for r, c in cells:
                    if not (0 <= r < gh and 0 <= c < gw):
                        continue
                    k = model.cell_index(level, r, c)
                    obj[i, k] = 1.0
                    cls[i, k] = class_id
                    box[i, k] = torch.tensor([gx - c, gy - r, math.log(bw / stride), math.log(bh / stride)])
    return obj, cls, box


def _augment(images: torch.Tensor, samples: Sequence[Sample], rng: np.random.Generator, max_shift: int = 8):
    """Random flip, integer shift (edge padded, objects kept inside) and photometric jitter."""
    n, _, h, w = images.shape
    out = torch.empty_like(images)
    boxes = []
    for i, s in enumerate(samples):
        objs = [(*a.box.as_list(), a.class_id) for a in s.annotations]
        img = images[i]
        if rng.random() < 0.5:
            img = img.flip(-1)
            objs = [(w - x1, y0, w - x0, y1, c) for x0, y0, x1, y1, c in objs]
        if objs:
            lo_x = -min(o[0] for o in objs)
            hi_x = w - max(o[2] for o in objs)
            lo_y = -min(o[1] for o in objs)
            hi_y = h - max(o[3] for o in objs)
        else:
            lo_x = lo_y = -max_shift
            hi_x = hi_y = max_shift
        dx = int(rng.integers(math.ceil(max(lo_x, -max_shift)), math.floor(min(hi_x, max_shift)) + 1))
        dy = int(rng.integers(math.ceil(max(lo_y, -max_shift)), math.floor(min(hi_y, max_shift)) + 1))
        if dx or dy:
            padded = F.pad(img.unsqueeze(0), (max_shift,) * 4, mode="replicate")[0]
            img = padded[:, max_shift - dy:max_shift - dy + h, max_shift - dx:max_shift - dx + w]
            objs = [(x0 + dx, y0 + dy, x1 + dx, y1 + dy, c) for x0, y0, x1, y1, c in objs]
        contrast = rng.uniform(0.8, 1.2)
        bright = rng.uniform(-0.08, 0.08)
        out[i] = ((img - 0.5) * contrast + 0.5 + bright).clamp(0, 1)
        boxes.append(objs)
    return out, boxes


def _training_loss(model: ToyDetector, images: torch.Tensor, obj_t, cls_t, box_t) -> torch.Tensor:
    raw, _, _ = model.forward_raw(images)
    pos = obj_t > 0
    n_pos = max(int(pos.sum()), 1)
    l_obj = F.binary_cross_entropy_with_logits(raw[..., 4], obj_t, reduction="sum") / n_pos
    if pos.any():
        r = raw[pos]
        l_cls = F.cross_entropy(r[:, 5:], cls_t[pos], reduction="sum") / n_pos
        pred = torch.cat([2 * torch.sigmoid(r[:, :2]) - 0.5, r[:, 2:4]], dim=1)
        l_box = F.smooth_l1_loss(pred, box_t[pos], reduction="sum", beta=0.1) / n_pos
    else:
        l_cls = l_box = raw.sum() * 0
    return l_obj + l_cls + l_box


@torch.no_grad()
def max_target_scores(model, samples: Sequence[Sample], target_class: int, batch_size: int = 128) -> np.ndarray:
    scores = []
    for k in range(0, len(samples), batch_size):
        out = model.forward_batch(images_tensor(samples[k:k + batch_size]))
        scores.append(out.max_target_score(target_class).numpy())
    return np.concatenate(scores) if scores else np.zeros(0)


def detection_rate(model, dataset: Dataset, threshold: float = DETECTION_THRESHOLD) -> float:
    """Fraction of target-bearing images with a target candidate scoring at least ``threshold``."""
    samples = [s for s in dataset.samples if s.boxes_of(dataset.target_class)]
    if not samples:
        return float("nan")
    return float((max_target_scores(model, samples, dataset.target_class) >= threshold).mean())


@dataclass
class TrainingMetrics:
    epochs: int
    final_loss: float | None
    train_detection_rate: float
    holdout_detection_rate: float | None = None
    loss_history: list[float] = field(default_factory=list)


def train_toy_detector(dataset: Dataset, epochs: int, seed: int, *, holdout: Dataset | None = None,
                       arch: ToyArchitecture | None = None, batch_size: int = 32, lr: float = 3e-3, weight_decay: float = 1e-3,
                       log_every: int = 0) -> tuple[ToyDetector, TrainingMetrics]:
    """Train the toy detector with AdamW and a one-cycle schedule; deterministic in ``seed``."""
    if len(dataset) < 50:
        raise ConfigurationError(f"need at least 50 samples to train, got {len(dataset)}")
    size = dataset.image_size
    arch = arch or ToyArchitecture(num_classes=len(dataset.class_names), input_size=size)
    if tuple(arch.input_size) != tuple(size):
        raise ConfigurationError(f"architecture input {arch.input_size} != dataset images {size}")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = ToyDetector(arch, dataset.class_names)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    history = []
    if epochs > 0:
        opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
        steps = epochs * math.ceil(len(dataset) / batch_size)
        sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps, pct_start=0.1)
        all_images = images_tensor(dataset.samples)
        model.train()
        for epoch in range(epochs):
            order = rng.permutation(len(dataset))
            total = 0.0
            for k in range(0, len(order), batch_size):
                idx = order[k:k + batch_size]
                batch = [dataset.samples[i] for i in idx]
                images, boxes = _augment(all_images[idx], batch, rng)
                obj_t, cls_t, box_t = _targets(model, boxes)
                loss = _training_loss(model, images, obj_t, cls_t, box_t)
                opt.zero_grad()
                loss.backward()
                nn.utils.clip_grad_norm_(model.parameters(), 10.0)
                opt.step()
                sched.step()
                total += loss.item() * len(idx)
            history.append(total / len(dataset))
            if log_every and (epoch + 1) % log_every == 0:
                logger.info("epoch %d loss %.4f", epoch + 1, history[-1])
        model.eval()
    metrics = TrainingMetrics(
        epochs=epochs,
        final_loss=history[-1] if history else None,
        train_detection_rate=detection_rate(model, dataset),
        holdout_detection_rate=detection_rate(model, holdout) if holdout is not None else None,
        loss_history=history,
    )
    return model, metrics
