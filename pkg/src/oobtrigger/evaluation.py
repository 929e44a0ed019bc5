"""Attack success metrics over image sets and frame sequences, and report emission."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .dataset import (Annotation, BoundingBox, Dataset, Sample, SYNTH_CLASS_NAMES, SYNTH_TARGET_CLASS,
                      _background, _quantize, _freeze, draw_stop_sign, load_dataset, save_dataset)
from .detector import CANDIDATE_FLOOR, DETECTION_THRESHOLD, images_tensor
from .renderer import PlacementError, PlacementRule, affine_params, placement, render_batch
from .uapgd import AttackReport

logger = logging.getLogger(__name__)

NMS_IOU = 0.5


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = NMS_IOU) -> list[int]:
    """Greedy non-maximum suppression over xyxy ``boxes``; returns kept indices by score."""
    if len(boxes) == 0:
        return []
    x0, y0, x1, y1 = boxes.T
    areas = (x1 - x0) * (y1 - y0)
    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        iw = np.clip(np.minimum(x1[i], x1[rest]) - np.maximum(x0[i], x0[rest]), 0, None)
        ih = np.clip(np.minimum(y1[i], y1[rest]) - np.maximum(y0[i], y0[rest]), 0, None)
        inter = iw * ih
        iou = inter / (areas[i] + areas[rest] - inter + 1e-12)
        order = rest[iou <= iou_threshold]
    return keep


@dataclass
class ImageResult:
    id: str
    detected: bool
    max_conf: float
    placement_failed: bool = False


@dataclass
class EvalResult:
    asr: float
    per_image: list[ImageResult]
    threshold: float

    def records(self) -> list[dict]:
        return [vars(r) for r in self.per_image]


@dataclass
class FrameSequence:
    frames: list[np.ndarray]
    boxes: list[list[BoundingBox]]
    frame_rate: float = 10.0
    class_names: tuple[str, ...] = SYNTH_CLASS_NAMES
    target_class: int = SYNTH_TARGET_CLASS

    def __post_init__(self):
        if not self.frames:
            raise ValueError("a frame sequence needs at least one frame")
        if len(self.boxes) != len(self.frames):
            raise ValueError("one box list per frame required")
        if len({f.shape for f in self.frames}) != 1:
            raise ValueError("frames must share one size")

    @property
    def duration(self) -> float:
        return len(self.frames) / self.frame_rate

    def as_dataset(self) -> Dataset:
        samples = tuple(
            Sample(f"{i:04d}.png", _freeze(f), tuple(Annotation(b, self.target_class) for b in bs))
            for i, (f, bs) in enumerate(zip(self.frames, self.boxes)))
        return Dataset(samples, self.class_names, self.target_class)


def _target_decision(out, index: int, target_class: int, threshold: float, floor: float) -> tuple[bool, float]:
    probs, cls = out.class_probs[index].max(dim=-1)
    score = (out.objectness[index] * probs).numpy()
    sel = np.nonzero((cls.numpy() == target_class) & (score >= floor))[0]
    if sel.size == 0:
        return False, 0.0
    kept = sel[nms(out.boxes[index].numpy()[sel].astype(np.float64), score[sel])]
    best = float(score[kept].max())
    return best >= threshold, best


def _evaluate_chunk(samples: Sequence[Sample], trigger, detector, rule, target_class, threshold, floor):
    dims = tuple(trigger.shape[1:]) if trigger is not None else None
    failed = []
    params = []
    for s in samples:
        if trigger is None:
            params.append([])
            failed.append(False)
            continue
        try:
            params.append([affine_params(placement(b, rule, s.size, dims), dims, s.size)
                           for b in s.boxes_of(target_class)])
            failed.append(False)
        except PlacementError:
            logger.warning("placement failed for %s; counted as detected", s.id)
            params.append([])
            failed.append(True)
    with torch.no_grad():
        images = images_tensor(samples)
        if trigger is not None:
            for k in range(max((len(p) for p in params), default=0)):
                idx = [i for i, p in enumerate(params) if len(p) > k]
                rendered = render_batch(images[idx], trigger.to(images.dtype), [params[i][k] for i in idx])
                images[idx] = rendered
        out = detector.forward_batch(images.to(next(iter(detector.parameters())).dtype)
                                     if hasattr(detector, "parameters") else images)
    results = []
    for i, s in enumerate(samples):
        detected, best = _target_decision(out, i, target_class, threshold, floor)
        results.append(ImageResult(s.id, detected or failed[i], best, failed[i]))
    return results


def evaluate_asr(dataset: Dataset, trigger: torch.Tensor | None, detector, placement_rule: PlacementRule | None,
                 target_class: int, threshold: float = DETECTION_THRESHOLD, *, workers: int = 1,
                 batch_size: int = 64, candidate_floor: float = CANDIDATE_FLOOR) -> EvalResult:
    """Share of images on which no target-class detection survives NMS at ``threshold``.

    ``trigger=None`` evaluates the clean images. Images whose trigger cannot
    be placed count as detected and are flagged.
    """
    rule = placement_rule or PlacementRule()
    trig = None if trigger is None else trigger.detach()
    chunks = [dataset.samples[k:k + batch_size] for k in range(0, len(dataset), batch_size)]
    args = (trig, detector, rule, target_class, threshold, candidate_floor)
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda c: _evaluate_chunk(c, *args), chunks))
    else:
        parts = [_evaluate_chunk(c, *args) for c in chunks]
    per_image = [r for part in parts for r in part]
    asr = sum(not r.detected for r in per_image) / len(per_image) if per_image else 0.0
    return EvalResult(asr, per_image, threshold)


def evaluate_sequence(seq: FrameSequence, trigger: torch.Tensor | None, detector,
                      placement_rule: PlacementRule | None, target_class: int,
                      threshold: float = DETECTION_THRESHOLD, **kwargs) -> tuple[list[float], float]:
    """Per-frame best target confidence and the share of frames left undetected."""
    result = evaluate_asr(seq.as_dataset(), trigger, detector, placement_rule, target_class, threshold, **kwargs)
    series = [r.max_conf for r in result.per_image]
    return series, result.asr


# ---------------------------------------------------------------------------
# Approach sequences


def generate_approach_sequence(n_frames: int, image_size: tuple[int, int], scale_range=(0.1, 0.5),
                               seed: int = 0, frame_rate: float = 10.0) -> FrameSequence:
    """Static scene with a stop sign whose width grows linearly across frames.

    The sign drifts right and up as it grows, leaving room underneath for a
    trigger at the default placement. Each frame gets light sensor noise.
    """
    if n_frames < 2:
        raise ValueError("an approach sequence needs at least two frames")
    h, w = image_size
    scene_rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    background = _background(scene_rng, (h, w))
    sign_seed = int(scene_rng.integers(2**32))
    frames, boxes = [], []
    lo, hi = scale_range
    for i in range(n_frames):
        t = i / (n_frames - 1)
        width = (lo + (hi - lo) * t) * w
        cx = w * (0.5 + 0.2 * t)
        cx = min(max(cx, width / 2 + 0.5), w - width / 2 - 0.5)
        cy = h * (0.45 - 0.15 * t)
        cy = min(max(cy, width / 2 + 0.5), h - 1.7 * width - 0.5 + width / 2)
        img = background.copy()
        box = draw_stop_sign(img, np.random.default_rng(sign_seed), cx, cy, width)
        noise_rng = np.random.default_rng(np.random.SeedSequence([seed, 1, i]))
        img = np.clip(img + noise_rng.normal(0, 0.01, img.shape), 0, 1)
        frames.append(_quantize(img))
        boxes.append([box])
    return FrameSequence(frames, boxes, frame_rate)


def save_sequence(seq: FrameSequence, out_dir) -> Path:
    out = Path(out_dir)
    save_dataset(seq.as_dataset(), out)
    (out / "sequence.json").write_text(json.dumps({"frame_rate": seq.frame_rate}), encoding="utf-8")
    return out


def load_sequence(directory, annotation_name: str = "annotations.json") -> FrameSequence:
    d = Path(directory)
    ds = load_dataset(d, d / annotation_name)
    sidecar = d / "sequence.json"
    rate = json.loads(sidecar.read_text(encoding="utf-8"))["frame_rate"] if sidecar.exists() else 10.0
    samples = sorted(ds.samples, key=lambda s: s.id)
    return FrameSequence([np.array(s.image) for s in samples], [s.boxes_of(ds.target_class) for s in samples],
                         rate, ds.class_names, ds.target_class)


# ---------------------------------------------------------------------------
# Reports


def plot_loss_trace(report: AttackReport, path, label: str | None = None) -> int:
    """Epoch loss curve with one marker per halving event; returns the marker count."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    epochs = np.arange(len(report.epoch_losses))
    ax.plot(epochs, report.epoch_losses, label=label or report.mode)
    ax.plot(epochs, report.best_losses, "--", lw=0.8, label="best")
    halvings = [e for e in report.halving_events if e < len(report.epoch_losses)]
    marker_line = ax.plot(halvings, [report.epoch_losses[e] for e in halvings], "rv", label="step halved")[0]
    ax.set_xlabel("epoch")
    ax.set_ylabel("epoch loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return len(marker_line.get_xdata())


def plot_confidence(series: Mapping[str, Sequence[float]], path, threshold: float = DETECTION_THRESHOLD,
                    frame_rate: float | None = None) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, values in series.items():
        x = np.arange(len(values))
        ax.plot(x / frame_rate if frame_rate else x, values, label=name)
    ax.axhline(threshold, color="gray", ls=":", lw=1)
    ax.set_ylim(-0.02, 1.02)
    ax.set_xlabel("time (s)" if frame_rate else "frame")
    ax.set_ylabel("target confidence")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_asr_comparison(asrs: Mapping[str, float], path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(max(3, 1.2 * len(asrs)), 3.5))
    names = list(asrs)
    ax.bar(names, [asrs[n] for n in names], color="tab:red")
    ax.set_ylim(0, 1)
    ax.set_ylabel("ASR")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def emit_report(reports: Mapping[str, AttackReport], output_dir,
                eval_results: Mapping[str, EvalResult] | None = None) -> dict:
    """Write ``summary.json``, ``per_image.jsonl`` and plots for a set of named runs.

    Returns what was written: paths plus the halving-marker count per loss plot.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    eval_results = eval_results or {}
    summary = {"runs": {name: rep.summary() for name, rep in reports.items()},
               "comparison": [{"run": name, "asr": rep.asr} for name, rep in reports.items()]}
    (out / "summary.json").write_text(json.dumps(summary, indent=1), encoding="utf-8")
    with open(out / "per_image.jsonl", "w", encoding="utf-8") as fh:
        for name, res in eval_results.items():
            for rec in res.records():
                fh.write(json.dumps({"run": name, **rec}) + "\n")
    written = {"summary": out / "summary.json", "plots": [], "markers": {}}
    if not reports:
        return written
    plots = out / "plots"
    plots.mkdir(exist_ok=True)
    for name, rep in reports.items():
        if rep.epoch_losses:
            p = plots / f"loss_{name}.png"
            written["markers"][name] = plot_loss_trace(rep, p, name)
            written["plots"].append(p)
    series = {name: rep.frame_series for name, rep in reports.items() if rep.frame_series}
    if series:
        p = plots / "confidence.png"
        plot_confidence(series, p)
        written["plots"].append(p)
    asrs = {name: rep.asr for name, rep in reports.items() if rep.asr is not None}
    if asrs:
        p = plots / "asr_comparison.png"
        plot_asr_comparison(asrs, p)
        written["plots"].append(p)
    return written
