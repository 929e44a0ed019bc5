"""Expectation-over-transformation draws applied to the trigger before compositing."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class EOTConfig:
    noise_amplitude: float = 4 / 255
    brightness_delta: float = 0.1
    contrast_range: tuple[float, float] = (0.9, 1.1)
    rotation_max: float = math.radians(5.0)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.contrast_range
        if not 0 < lo <= 1 <= hi:
            raise ValueError(f"contrast_range must satisfy 0 < lo <= 1 <= hi, got {self.contrast_range}")
        if min(self.noise_amplitude, self.brightness_delta, self.rotation_max) < 0:
            raise ValueError("EOT amplitudes must be non-negative")
        object.__setattr__(self, "contrast_range", (float(lo), float(hi)))

    @classmethod
    def disabled(cls, seed: int = 0) -> "EOTConfig":
        return cls(0.0, 0.0, (1.0, 1.0), 0.0, seed)

    @property
    def is_identity(self) -> bool:
        return (self.noise_amplitude == 0 and self.brightness_delta == 0
                and self.contrast_range == (1.0, 1.0) and self.rotation_max == 0)


@dataclass(frozen=True)
class EOTDraw:
    brightness: float = 0.0
    contrast: float = 1.0
    rotation: float = 0.0
    noise_amplitude: float = 0.0
    noise_seed: int = 0

    def noise(self, shape, dtype=torch.float32) -> torch.Tensor:
        if self.noise_amplitude == 0:
            return torch.zeros(shape, dtype=dtype)
        rng = np.random.default_rng(self.noise_seed)
        field = rng.uniform(-self.noise_amplitude, self.noise_amplitude, size=tuple(shape))
        return torch.as_tensor(field, dtype=dtype)


IDENTITY_DRAW = EOTDraw()


def sample_eot(config: EOTConfig, stream_index: int) -> EOTDraw:
    """Draw brightness, contrast, rotation and a noise seed for one stream slot."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, stream_index]))
    b, c, a, noise_seed = rng.uniform(-1, 1), rng.uniform(0, 1), rng.uniform(-1, 1), rng.integers(2**63)
    lo, hi = config.contrast_range
    return EOTDraw(
        brightness=float(b * config.brightness_delta),
        contrast=float(lo + (hi - lo) * c),
        rotation=float(a * config.rotation_max),
        noise_amplitude=config.noise_amplitude,
        noise_seed=int(noise_seed),
    )


def apply_eot(trigger: torch.Tensor, draw: EOTDraw) -> torch.Tensor:
    """``clamp(c * trigger + b + noise, 0, 1)``; the rotation is left to the renderer."""
    if draw == IDENTITY_DRAW or (draw.contrast == 1 and draw.brightness == 0 and draw.noise_amplitude == 0):
        return trigger
    out = draw.contrast * trigger + draw.brightness
    if draw.noise_amplitude:
        out = out + draw.noise(trigger.shape, trigger.dtype)
    return out.clamp(0.0, 1.0)
