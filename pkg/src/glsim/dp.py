"""Gradient clipping and Gaussian noise calibration (none / local / distributed).

Noise scales: local DP adds N(0, (sigma*c)^2) per entry; distributed DP divides
the work among the round's M participants and each adds N(0, (sigma*c)^2/(M-1)).
Clipping rescales a gradient g to g / max(1, ||g||_2 / c), applied per layer
over the layer's weight and bias gradients jointly (a global-per-update mode
exists for comparison). Noise lands on bias gradients too, which is why the
extraction rescaling factor is itself noisy downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .nn import GradientUpdate, LayerGrad, per_layer_l2_norm
from .rng import RngStream

MODES = ("none", "ldp", "ddp")
GRANULARITIES = ("layer", "global")


@dataclass(frozen=True)
class DPConfig:
    """Privacy mechanism parameters: mode, clip bound c, scale sigma, round size M."""

    mode: str = "none"
    clip: float = 1.0
    sigma: float = 0.0
    participants: int = 2
    granularity: str = "layer"

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigurationError(f"dp mode must be one of {MODES}, got {self.mode!r}")
        if not self.clip > 0:
            raise ConfigurationError(f"clip bound must be > 0, got {self.clip}")
        if self.sigma < 0:
            raise ConfigurationError(f"noise scale must be >= 0, got {self.sigma}")
        if self.mode == "ddp" and self.participants < 2:
            raise ConfigurationError(
                f"ddp needs at least 2 round participants, got {self.participants}"
            )
        if self.granularity not in GRANULARITIES:
            raise ConfigurationError(f"granularity must be one of {GRANULARITIES}")


def noise_std(cfg: DPConfig) -> float:
    """Per-user Gaussian noise std for the configured mode."""
    if cfg.mode == "none":
        return 0.0
    if cfg.mode == "ldp":
        return cfg.sigma * cfg.clip
    return cfg.sigma * cfg.clip / np.sqrt(cfg.participants - 1)


def clip_update(update: GradientUpdate, clip: float, granularity: str = "layer") -> GradientUpdate:
    """Bound gradient norms to `clip`; norms already within the bound pass through."""
    if not clip > 0:
        raise ConfigurationError(f"clip bound must be > 0, got {clip}")
    norms = per_layer_l2_norm(update)
    if granularity == "global":
        total = float(np.sqrt(sum(n * n for n in norms)))
        scales = [1.0 / max(1.0, total / clip)] * len(norms)
    elif granularity == "layer":
        scales = [1.0 / max(1.0, n / clip) for n in norms]
    else:
        raise ConfigurationError(f"granularity must be one of {GRANULARITIES}")
    return GradientUpdate(
        [
            LayerGrad(g.weights * s, g.bias * s)
            for g, s in zip(update.layers, scales)
        ],
        update.batch_size,
    )


def apply_dp(update: GradientUpdate, cfg: DPConfig, rng: RngStream) -> GradientUpdate:
    """Clip, then add i.i.d. Gaussian noise to every weight and bias entry."""
    clipped = clip_update(update, cfg.clip, cfg.granularity)
    std = noise_std(cfg)
    if std == 0.0:
        return clipped
    gen = rng.generator()
    noised = []
    for g in clipped.layers:
        noised.append(
            LayerGrad(
                g.weights + gen.standard_normal(g.weights.shape) * std,
                g.bias + gen.standard_normal(g.bias.shape) * std,
            )
        )
    return GradientUpdate(noised, clipped.batch_size)
