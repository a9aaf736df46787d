"""Training objectives: categorical cross-entropy plus the weighted
continuous-dice attention loss for stage I, and binary cross-entropy for
stage II. All functions are torch-native and differentiable; plain arrays
are accepted and converted.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigError

ATTENTION_MODES = ("double_backprop", "detached_weights")

_BCE_CLAMP = 1e-7


@dataclass
class LossConfig:
    """Weights and smoothing for the stage-I combined objective."""

    lambda_attention: float = 1.0
    smoothing_epsilon: float = 1.0
    attention_mode: str = "double_backprop"

    def validate(self) -> None:
        if self.lambda_attention < 0:
            raise ConfigError("lambda_attention must be >= 0")
        if self.smoothing_epsilon < 0:
            raise ConfigError("smoothing_epsilon must be >= 0")
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigError(
                f"attention_mode must be one of {ATTENTION_MODES}")

    def to_dict(self) -> dict:
        return {
            "lambda_attention": self.lambda_attention,
            "smoothing_epsilon": self.smoothing_epsilon,
            "attention_mode": self.attention_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def continuous_dice(attention, mask, epsilon: float = 0.0) -> torch.Tensor:
    """Continuous dice coefficient between a soft map and a binary mask.

    cDC = (2*sum(M*A) + eps) / (c*sum(M) + sum(A) + eps) with the scaling
    correction c = sum(M*A) / sum(M*[A > 0]), and c = 1 when A has no
    support inside M. For binary A this reduces to classical Dice. With
    eps = 0 and both inputs empty the value is 1 by convention.

    Accepts (u, v) inputs or batches (..., u, v); batches return one value
    per leading index.
    """
    a = _as_tensor(attention)
    m = _as_tensor(mask).to(a.dtype)
    if a.shape != m.shape:
        raise ValueError(f"shape mismatch: attention {tuple(a.shape)} vs mask {tuple(m.shape)}")
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    dims = (-2, -1)
    overlap = (m * a).sum(dim=dims)
    support = (m * (a > 0).to(a.dtype)).sum(dim=dims)
    tiny = torch.finfo(a.dtype).tiny
    c = torch.where(support > 0, overlap / support.clamp_min(tiny), torch.ones_like(overlap))
    num = 2.0 * overlap + epsilon
    den = c * m.sum(dim=dims) + a.sum(dim=dims) + epsilon
    # both-empty with eps=0 hits 0/0; the convention is 1
    empty = den == 0
    num = torch.where(empty, torch.ones_like(num), num)
    den = torch.where(empty, torch.ones_like(den), den)
    return num / den


def attention_loss(attention, mask, epsilon: float = 0.0) -> torch.Tensor:
    """1 - continuous_dice, so perfect agreement gives 0."""
    return 1.0 - continuous_dice(attention, mask, epsilon)


def _validate_distribution(p: torch.Tensor) -> None:
    if p.shape[-1] != 2:
        raise ValueError("expected a two-class distribution")
    sums = p.sum(dim=-1)
    if not torch.all((sums - 1.0).abs() <= 1e-6):
        raise ValueError("probabilities must sum to 1 within 1e-6")
    if not torch.all(p > 0):
        raise ValueError("probabilities must be strictly positive")


def categorical_cross_entropy(predicted_distribution, label) -> torch.Tensor:
    """-log p[label] for a (2,) distribution; batches (N, 2) return the mean."""
    p = _as_tensor(predicted_distribution)
    _validate_distribution(p)
    y = torch.as_tensor(label, dtype=torch.long)
    if p.dim() == 1:
        return -torch.log(p[y])
    return -torch.log(p.gather(1, y.view(-1, 1)).squeeze(1)).mean()


def total_loss(prediction, label, attention, mask, config: LossConfig) -> torch.Tensor:
    """Combined objective: cross-entropy plus lambda-weighted attention loss.

    ``prediction`` is the two-class probability distribution, ``attention``
    the normalized positive-class attention map, ``mask`` the downsampled
    lesion mask (all zero for negative samples). Batched inputs return the
    batch mean. The result stays connected to whatever graph the inputs
    carry, so it is differentiable w.r.t. encoder parameters under the
    configured attention mode.
    """
    ce = categorical_cross_entropy(prediction, label)
    if config.lambda_attention == 0:
        return ce
    att = attention_loss(attention, mask, config.smoothing_epsilon)
    return ce + config.lambda_attention * att.mean()


def binary_cross_entropy(probability, label) -> torch.Tensor:
    """-[y log p + (1-y) log(1-p)]; scalar inputs or batches (mean).

    Probabilities at exactly 0 or 1 are clamped by 1e-7 so the loss stays
    finite at saturation.
    """
    p = _as_tensor(probability)
    if torch.any(p < 0) or torch.any(p > 1):
        raise ValueError("probability must lie in [0, 1]")
    y = _as_tensor(label).to(p.dtype)
    p = p.clamp(_BCE_CLAMP, 1.0 - _BCE_CLAMP)
    loss = -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p))
    return loss.mean() if loss.dim() > 0 else loss
