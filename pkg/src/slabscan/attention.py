"""Gradient-based attention maps, computable in a differentiable form.

Any encoder that exposes ``forward_features(x) -> (N, K, u, v)`` and
``head(features) -> (N, 2)`` pre-softmax scores can be used. The map for a
class is the ReLU of the gradient-weighted sum of the designated feature
maps, max-normalized per sample when the maximum is positive.

Two training modes exist: ``double_backprop`` keeps the feature gradients
connected to the graph so the attention loss produces true second-order
updates; ``detached_weights`` treats the pooled gradient weights as
constants during loss backpropagation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np
import torch

_NORM_FLOOR = 1e-12


@runtime_checkable
class ScoreEncoder(Protocol):
    """Encoder contract: designated feature layer plus a pre-softmax head."""

    def forward_features(self, x: torch.Tensor) -> torch.Tensor: ...

    def head(self, features: torch.Tensor) -> torch.Tensor: ...


@dataclass
class AttentionMap:
    """Normalized nonnegative map at encoder-feature resolution.

    ``values`` lie in [0, 1]; ``normalized`` is False exactly when the
    pre-normalization maximum was 0 (then the map is all zero). ``peak``
    is that pre-normalization maximum, so ``values * peak`` recovers the
    unnormalized map.
    """

    values: np.ndarray
    normalized: bool
    peak: float = 0.0


def class_score_gradients(encoder: ScoreEncoder, slab: torch.Tensor,
                          class_index: int, create_graph: bool = False,
                          ) -> torch.Tensor:
    """Gradient of the class score w.r.t. the designated feature maps.

    ``slab`` is (N, C, H, W) or (C, H, W); the result matches the feature
    shape (N, K, u, v) or (K, u, v). With ``create_graph`` the returned
    field stays connected to the computation graph.
    """
    squeeze = slab.dim() == 3
    x = slab.unsqueeze(0) if squeeze else slab
    with torch.enable_grad():
        features = encoder.forward_features(x)
        if not features.requires_grad:
            features = features.requires_grad_(True)
        scores = encoder.head(features)
        if not 0 <= class_index < scores.shape[-1]:
            raise IndexError(f"class index {class_index} out of range for "
                             f"{scores.shape[-1]} classes")
        target = scores[:, class_index].sum()
        grads = torch.autograd.grad(target, features, create_graph=create_graph,
                                    allow_unused=True)[0]
    if grads is None:
        grads = torch.zeros_like(features)
    return grads.squeeze(0) if squeeze else grads


def neuron_weights(gradients: torch.Tensor) -> torch.Tensor:
    """Global average pooling of the gradient field: (..., K, u, v) -> (..., K)."""
    g = gradients if isinstance(gradients, torch.Tensor) else torch.as_tensor(gradients)
    return g.mean(dim=(-2, -1))


def attention_map(features: torch.Tensor, weights: torch.Tensor,
                  ) -> tuple[torch.Tensor, torch.Tensor]:
    """Weighted feature combination, ReLU, per-sample max normalization.

    ``features`` (..., K, u, v) with ``weights`` (..., K) produce maps
    (..., u, v) plus a boolean ``normalized`` flag per map (False iff the
    pre-normalization max was 0, in which case the map stays all zero).
    """
    f = features if isinstance(features, torch.Tensor) else torch.as_tensor(features)
    w = weights if isinstance(weights, torch.Tensor) else torch.as_tensor(weights, dtype=f.dtype)
    if w.shape != f.shape[:-2]:
        raise ValueError(f"weights shape {tuple(w.shape)} does not match "
                         f"feature maps {tuple(f.shape)}")
    raw = torch.relu((w.unsqueeze(-1).unsqueeze(-1) * f).sum(dim=-3))
    peak = raw.amax(dim=(-2, -1), keepdim=True)
    maps = raw / peak.clamp_min(_NORM_FLOOR)
    return maps, (peak.squeeze(-1).squeeze(-1) > 0)


def compute_attention(encoder: ScoreEncoder, slab: torch.Tensor,
                      class_index: int) -> AttentionMap | list[AttentionMap]:
    """Single forward plus one gradient pass: the composition of the three steps.

    Returns one AttentionMap for a (C, H, W) slab, or a list for a batch.
    """
    squeeze = slab.dim() == 3
    x = slab.unsqueeze(0) if squeeze else slab
    with torch.enable_grad():
        features = encoder.forward_features(x)
        if not features.requires_grad:
            features = features.requires_grad_(True)
        scores = encoder.head(features)
        if not 0 <= class_index < scores.shape[-1]:
            raise IndexError(f"class index {class_index} out of range for "
                             f"{scores.shape[-1]} classes")
        grads = torch.autograd.grad(scores[:, class_index].sum(), features,
                                    allow_unused=True)[0]
        if grads is None:
            grads = torch.zeros_like(features)
        weights = neuron_weights(grads)
        maps, flags = attention_map(features, weights)
        peaks = torch.relu((weights.unsqueeze(-1).unsqueeze(-1) * features)
                           .sum(dim=-3)).amax(dim=(-2, -1))
    out = [AttentionMap(values=maps[i].detach().cpu().numpy().astype(np.float64),
                        normalized=bool(flags[i]),
                        peak=float(peaks[i].detach()))
           for i in range(maps.shape[0])]
    return out[0] if squeeze else out


def training_attention(encoder: ScoreEncoder, slab_batch: torch.Tensor,
                       class_index: int, mode: str = "double_backprop",
                       ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Scores, features, and normalized attention maps for a training step.

    One forward pass and one gradient pass shared between the classification
    and attention paths. ``mode`` selects whether the pooled gradient
    weights stay connected to the graph (``double_backprop``) or are
    detached (``detached_weights``).
    """
    features = encoder.forward_features(slab_batch)
    scores = encoder.head(features)
    create_graph = mode == "double_backprop"
    grads = torch.autograd.grad(scores[:, class_index].sum(), features,
                                create_graph=create_graph, retain_graph=True,
                                allow_unused=True)[0]
    if grads is None:
        grads = torch.zeros_like(features)
    weights = neuron_weights(grads)
    if not create_graph:
        weights = weights.detach()
    maps, _ = attention_map(features, weights)
    return scores, features, maps
