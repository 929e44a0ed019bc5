"""Detection, feature-guidance and total-variation losses and their weighted sum."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .augment import IDENTITY_DRAW, EOTConfig, apply_eot, sample_eot
from .dataset import DEFAULT_GRAY, Sample, make_masked_image
from .detector import CANDIDATE_FLOOR, Detection, FeatureMap, images_tensor
from .renderer import PlacementError, PlacementRule, affine_params, placement, render_batch

EPS_TV = 1e-6


@dataclass(frozen=True)
class LossWeights:
    lambda_fg: float = 0.0
    lambda_tv: float = 0.0

    def __post_init__(self):
        if self.lambda_fg < 0 or self.lambda_tv < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    l_det: float
    l_fg: float
    l_tv: float
    l_all: float
    skipped: int = 0
    n_images: int = 0
    total: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def record(self) -> dict:
        return {"l_det": self.l_det, "l_fg": self.l_fg, "l_tv": self.l_tv, "l_all": self.l_all,
                "skipped": self.skipped}


def l_det(candidates: Sequence[Detection], target_class: int) -> torch.Tensor:
    """Largest ``conf_coor * conf_cls`` among target-class candidates, or 0."""
    scores = [d.score for d in candidates if d.class_id == target_class]
    if not scores:
        return torch.tensor(0.0)
    return torch.stack([torch.as_tensor(s) for s in scores]).max()


def l_det_batch(per_image: Sequence[Sequence[Detection]], target_class: int) -> torch.Tensor:
    """Batch mean of :func:`l_det`."""
    if not per_image:
        return torch.tensor(0.0)
    return torch.stack([l_det(c, target_class) for c in per_image]).mean()


def _level_pairs(adv: FeatureMap, mask: FeatureMap):
    if len(adv.levels) != len(mask.levels):
        raise ValueError(f"feature maps have {len(adv.levels)} and {len(mask.levels)} levels")
    for a, m in zip(adv.levels, mask.levels):
        if a.shape != m.shape:
            raise ValueError(f"feature level shape mismatch {tuple(a.shape)} vs {tuple(m.shape)}")
        yield a, m


def l_fg(adv_features: FeatureMap, mask_features: FeatureMap) -> torch.Tensor:
    """Sum over levels of ``||a - m||_2 / sqrt(D)``, D the per-image level size.

    Levels of shape (C, H, W) are treated as one image; (N, C, H, W) levels
    give the batch mean.
    """
    total = None
    batched = None
    for a, m in _level_pairs(adv_features, mask_features):
        if batched is None:
            batched = a.dim() == 4
        diff = (a - m).reshape(a.shape[0], -1) if batched else (a - m).reshape(1, -1)
        term = torch.linalg.vector_norm(diff, dim=1) / np.sqrt(diff.shape[1])
        total = term if total is None else total + term
    return total.mean()


def l_tv(trigger: torch.Tensor, eps_tv: float = EPS_TV) -> torch.Tensor:
    """Isotropic total variation of a (C, U, V) trigger, summed over channels.

    Differences past the last row/column are taken as zero.
    """
    down = torch.zeros_like(trigger)
    right = torch.zeros_like(trigger)
    down[:, :-1, :] = trigger[:, :-1, :] - trigger[:, 1:, :]
    right[:, :, :-1] = trigger[:, :, :-1] - trigger[:, :, 1:]
    return torch.sqrt(down ** 2 + right ** 2 + eps_tv).sum()


class MaskFeatureCache:
    """Neck features of masked images, computed once per sample id."""

    def __init__(self, detector, target_class: int, gray_value: float = DEFAULT_GRAY):
        self.detector = detector
        self.target_class = target_class
        self.gray_value = gray_value
        self._store: dict[str, FeatureMap] = {}
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._store)

    def get(self, samples: Sequence[Sample], dtype=torch.float32) -> FeatureMap:
        with self._lock:
            missing = [s for s in samples if s.id not in self._store]
        if missing:
            masked = np.stack([make_masked_image(s, self.target_class, self.gray_value) for s in missing])
            x = torch.from_numpy(masked).permute(0, 3, 1, 2).to(dtype)
            with torch.no_grad():
                feats = self.detector.forward_batch(x).features
            with self._lock:
                for i, s in enumerate(missing):
                    self._store.setdefault(s.id, feats[i].detach())
        with self._lock:
            maps = [self._store[s.id] for s in samples]
        levels = [torch.stack([m.levels[k] for m in maps]).to(dtype) for k in range(len(maps[0].levels))]
        return FeatureMap(levels, list(maps[0].level_names))


class AttackObjective:
    """Weighted attack loss of a trigger over a batch of samples.

    Per image: draw EOT, recolour the trigger, place it next to every
    target-class box, run the detector once for scores and neck features,
    and compare those features with the cached masked-image features.
    """

    def __init__(self, detector, weights: LossWeights, target_class: int, *,
                 eot: EOTConfig | None = None, rule: PlacementRule | None = None,
                 feature_levels: Sequence[str] | None = None, gray_value: float = DEFAULT_GRAY,
                 candidate_floor: float = CANDIDATE_FLOOR, eps_tv: float = EPS_TV):
        self.detector = detector
        self.weights = weights
        self.target_class = target_class
        self.eot = eot or EOTConfig.disabled()
        self.rule = rule or PlacementRule()
        self.feature_levels = list(feature_levels) if feature_levels else None
        self.candidate_floor = candidate_floor
        self.eps_tv = eps_tv
        self.mask_cache = MaskFeatureCache(detector, target_class, gray_value)

    def placements(self, sample: Sample, trigger_dims: tuple[int, int]):
        size = sample.size
        return [affine_params(placement(box, self.rule, size, trigger_dims), trigger_dims, size)
                for box in sample.boxes_of(self.target_class)]

    def composite(self, samples: Sequence[Sample], trigger: torch.Tensor, stream_base: int = 0):
        """Rendered batch plus the samples kept and the number skipped on placement failure."""
        dims = tuple(trigger.shape[1:])
        kept, params = [], []
        for s in samples:
            try:
                p = self.placements(s, dims)
            except PlacementError:
                continue
            if not p:
                raise ValueError(f"sample {s.id!r} has no target-class annotation")
            kept.append(s)
            params.append(p)
        skipped = len(samples) - len(kept)
        if not kept:
            return None, kept, skipped
        images = images_tensor(kept, trigger.dtype)
        if self.eot.is_identity:
            draws = [IDENTITY_DRAW] * len(kept)
            triggers = trigger.unsqueeze(0).expand(len(kept), -1, -1, -1)
        else:
            draws = [sample_eot(self.eot, stream_base + i) for i in range(len(kept))]
            triggers = torch.stack([apply_eot(trigger, d) for d in draws])
        for k in range(max(len(p) for p in params)):
            idx = [i for i, p in enumerate(params) if len(p) > k]
            ps = [params[i][k].rotated(draws[i].rotation) for i in idx]
            rendered = render_batch(images[idx], triggers[idx], ps)
            if len(idx) == len(kept):
                images = rendered
            else:
                rows = list(images.unbind(0))
                for j, i in enumerate(idx):
                    rows[i] = rendered[j]
                images = torch.stack(rows)
        return images, kept, skipped

    def __call__(self, trigger: torch.Tensor, samples: Sequence[Sample], stream_base: int = 0) -> LossBreakdown:
        w = self.weights
        images, kept, skipped = self.composite(samples, trigger, stream_base)
        tv = l_tv(trigger, self.eps_tv)
        if images is None:
            det = fg = trigger.new_zeros(())
        else:
            out = self.detector.forward_batch(images)
            det = out.max_target_score(self.target_class, self.candidate_floor).mean()
            if w.lambda_fg > 0:
                adv = out.features.select(self.feature_levels)
                ref = self.mask_cache.get(kept, trigger.dtype).select(self.feature_levels)
                fg = l_fg(adv, ref)
            else:
                fg = trigger.new_zeros(())
        total = det + w.lambda_fg * fg + w.lambda_tv * tv
        d, f, t = det.item(), fg.item(), tv.item()
        return LossBreakdown(d, f, t, d + w.lambda_fg * f + w.lambda_tv * t,
                             skipped=skipped, n_images=len(kept), total=total)


def l_all(batch: Sequence[Sample], trigger: torch.Tensor, detector, weights: LossWeights,
          eot_config: EOTConfig | None, placement_rule: PlacementRule | None, target_class: int,
          stream_base: int = 0) -> LossBreakdown:
    """One-shot :class:`AttackObjective` evaluation; reuse an objective to keep its mask cache."""
    objective = AttackObjective(detector, weights, target_class, eot=eot_config, rule=placement_rule)
    return objective(trigger, batch, stream_base)
