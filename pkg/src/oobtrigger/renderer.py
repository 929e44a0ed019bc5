"""Out-of-box placement, the trigger affine matrix and differentiable compositing.

Coordinates follow the ``align_corners=False`` convention of
:func:`torch.nn.functional.grid_sample`: an image of width ``W`` spans
normalized x in ``[-1, 1]`` with pixel ``c`` covering ``[c, c+1)`` in pixel
units, so ``x_norm = 2 * x_pix / W - 1``. The trigger is addressed the same
way, with its corners at ``(+-1, +-1)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .dataset import BoundingBox, ValidationError


class PlacementError(Exception):
    """No in-image region next to the object avoids overlapping it."""


class Mode(str, enum.Enum):
    BELOW = "below"
    ABOVE = "above"
    LEFT = "left"
    RIGHT = "right"


@dataclass(frozen=True)
class PlacementRule:
    mode: Mode = Mode.BELOW
    relative_scale: float = 1.0
    gap_fraction: float = 0.1
    # try the remaining sides when the preferred one does not fit
    fallback: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.relative_scale <= 0:
            raise ValueError("relative_scale must be positive")
        if self.gap_fraction < 0:
            raise ValueError("gap_fraction must be non-negative")


@dataclass(frozen=True)
class AffineParams:
    s_h: float
    s_v: float
    alpha: float = 0.0
    t_h: float = 0.0
    t_v: float = 0.0

    def __post_init__(self):
        if not (self.s_h > 0 and self.s_v > 0):
            raise ValueError(f"scales must be positive, got {self.s_h}, {self.s_v}")

    def rotated(self, delta: float) -> "AffineParams":
        return replace(self, alpha=self.alpha + delta)

    def matrix(self) -> np.ndarray:
        """3x3 homogeneous matrix taking trigger coordinates to image coordinates."""
        c, s = math.cos(self.alpha), math.sin(self.alpha)
        return np.array([
            [self.s_h * c, -self.s_h * s, self.t_h],
            [self.s_v * s, self.s_v * c, self.t_v],
            [0.0, 0.0, 1.0],
        ])


def _region_for(box: BoundingBox, mode: Mode, rule: PlacementRule, aspect: float,
                image_size: tuple[int, int]) -> BoundingBox | None:
    """Candidate region on one side of ``box``; ``aspect`` is trigger height/width."""
    h, w = image_size
    if mode in (Mode.BELOW, Mode.ABOVE):
        rw = box.width * rule.relative_scale
        rh = rw * aspect
        gap = rule.gap_fraction * box.height
        if mode is Mode.BELOW:
            y0 = box.y_max + gap
        else:
            y0 = box.y_min - gap - rh
        if y0 < 0 or y0 + rh > h or rw > w:
            return None
        x0 = min(max(box.center[0] - rw / 2, 0.0), w - rw)
    else:
        rh = box.height * rule.relative_scale
        rw = rh / aspect
        gap = rule.gap_fraction * box.width
        if mode is Mode.RIGHT:
            x0 = box.x_max + gap
        else:
            x0 = box.x_min - gap - rw
        if x0 < 0 or x0 + rw > w or rh > h:
            return None
        y0 = min(max(box.center[1] - rh / 2, 0.0), h - rh)
    region = BoundingBox(x0, y0, x0 + rw, y0 + rh)
    if region.intersection_area(box) > 0:
        return None
    return region


_FALLBACK_ORDER = (Mode.BELOW, Mode.ABOVE, Mode.RIGHT, Mode.LEFT)


def placement(box: BoundingBox, rule: PlacementRule, image_size: tuple[int, int],
              trigger_dims: tuple[int, int] = (1, 2)) -> BoundingBox:
    """Region next to ``box`` where the trigger goes.

    For ``below`` the region is ``relative_scale`` times the box width wide,
    keeps the trigger's ``U:V`` aspect, sits ``gap_fraction`` box heights
    under the box and is centred on it horizontally, shifted sideways to stay
    inside the image. Other modes are the rotated analogues.
    """
    if not box.inside(image_size):
        raise ValidationError(f"box {box.as_list()} outside image {image_size}")
    aspect = trigger_dims[0] / trigger_dims[1]
    modes = [rule.mode]
    if rule.fallback:
        modes += [m for m in _FALLBACK_ORDER if m is not rule.mode]
    for mode in modes:
        region = _region_for(box, mode, rule, aspect, image_size)
        if region is not None:
            return region
    raise PlacementError(f"no trigger region fits next to box {box.as_list()} in image {image_size}")


def affine_params(region: BoundingBox, trigger_dims: tuple[int, int],
                  image_size: tuple[int, int]) -> AffineParams:
    """Scale and translation that map the trigger's corners onto ``region``'s corners."""
    h, w = image_size
    if region.area <= 0:
        raise ValueError("degenerate region")
    if not region.inside(image_size):
        raise ValueError(f"region {region.as_list()} outside image {image_size}")
    cx, cy = region.center
    return AffineParams(
        s_h=region.width / w,
        s_v=region.height / h,
        alpha=0.0,
        t_h=2.0 * cx / w - 1.0,
        t_v=2.0 * cy / h - 1.0,
    )


def _inverse_thetas(params: list[AffineParams], dtype) -> torch.Tensor:
    mats = np.stack([np.linalg.inv(p.matrix())[:2] for p in params])
    return torch.as_tensor(mats, dtype=dtype)


def trigger_grid(params: list[AffineParams], image_size: tuple[int, int], dtype=torch.float32):
    """Trigger-space sampling grid and footprint mask for each output pixel.

    Returns ``grid`` of shape (N, H, W, 2) and boolean ``mask`` of shape
    (N, 1, H, W) marking pixels whose centre falls inside the warped trigger.
    """
    h, w = image_size
    theta = _inverse_thetas(params, torch.float64)
    grid = F.affine_grid(theta, [len(params), 1, h, w], align_corners=False)
    mask = (grid.abs() <= 1.0).all(dim=-1).unsqueeze(1)
    return grid.to(dtype), mask


def render_batch(images: torch.Tensor, triggers: torch.Tensor, params: list[AffineParams]) -> torch.Tensor:
    """Composite one trigger per image.

    ``images`` is (N, 3, H, W); ``triggers`` is (3, U, V) shared by all
    images or (N, 3, U, V). Pixels outside the footprint are copied from
    ``images`` untouched.
    """
    n, _, h, w = images.shape
    if triggers.dim() == 3:
        triggers = triggers.unsqueeze(0).expand(n, -1, -1, -1)
    grid, mask = trigger_grid(params, (h, w), dtype=triggers.dtype)
    warped = F.grid_sample(triggers, grid, mode="bilinear", padding_mode="border", align_corners=False)
    return torch.where(mask, warped.to(images.dtype), images)


def render(image, trigger: torch.Tensor, params: AffineParams) -> torch.Tensor:
    """Single-image :func:`render_batch` taking and returning HxWx3 arrays."""
    trigger = torch.as_tensor(trigger)
    img = torch.as_tensor(np.asarray(image) if not isinstance(image, torch.Tensor) else image)
    img = img.to(trigger.dtype).permute(2, 0, 1).unsqueeze(0)
    return render_batch(img, trigger, [params])[0].permute(1, 2, 0)


# ---------------------------------------------------------------------------
# TriggerImage helpers


def check_trigger(trigger: torch.Tensor) -> torch.Tensor:
    if trigger.dim() != 3 or trigger.shape[0] != 3:
        raise ValueError(f"trigger must be 3xUxV, got {tuple(trigger.shape)}")
    if trigger.numel() and (trigger.min() < 0 or trigger.max() > 1):
        raise ValueError("trigger pixels must lie in [0, 1]")
    return trigger


def init_trigger(dims: tuple[int, int], seed: int = 0, kind: str = "uniform") -> torch.Tensor:
    """Starting trigger: uniform noise from ``seed`` or flat mid-gray."""
    u, v = dims
    if kind == "gray":
        return torch.full((3, u, v), 0.5)
    if kind != "uniform":
        raise ValueError(f"unknown trigger init {kind!r}")
    gen = torch.Generator().manual_seed(seed)
    return torch.rand((3, u, v), generator=gen)


def save_trigger_png(trigger: torch.Tensor, path) -> None:
    arr = trigger.detach().cpu().double().clamp(0, 1).permute(1, 2, 0).numpy()
    Image.fromarray(np.rint(arr * 255).astype(np.uint8), mode="RGB").save(Path(path))


def load_trigger_png(path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return torch.from_numpy(arr.astype(np.float32) / 255.0).permute(2, 0, 1).contiguous()
