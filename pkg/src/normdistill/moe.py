"""Multi-layer fusion projection and the gated mixture-of-experts.

The three tapped feature maps are channel-concatenated and projected back to
width C by a linear layer with dropout. A router assigns softmax scores over
T expert MLPs to every patch; the top-K experts (ties broken toward the lower
index) are renormalized to a convex combination, and a squared
coefficient-of-variation importance loss keeps the router from collapsing
onto a few experts.
"""

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .encoders import PatchFeatureMap
from .errors import ConfigurationError


@dataclass
class MoEConfig:
    """Mixture-of-experts hyperparameters.

    Defaults: num_experts=5, top_k=2. hidden_dim=0 means 4x the feature
    width. `enabled=False` bypasses the whole module (fusion output goes
    straight to the decoder).
    """

    num_experts: int = 5
    top_k: int = 2
    hidden_dim: int = 0
    dropout: float = 0.1
    epsilon: float = 1e-10
    enabled: bool = True

    def __post_init__(self):
        if self.enabled and not (1 <= self.top_k <= self.num_experts):
            raise ConfigurationError(
                f"need 1 <= top_k <= num_experts, got K={self.top_k}, T={self.num_experts}")


@dataclass
class GateAssignment:
    """Routing decision for a single patch.

    Attributes:
        scores: (T,) softmax scores over all experts.
        topk_indices: (K,) selected expert indices (0-based), largest scores
            first, ties broken toward the lower index.
        topk_weights: (K,) selected scores renormalized to sum to 1.
    """

    scores: torch.Tensor
    topk_indices: torch.Tensor
    topk_weights: torch.Tensor


class FusionProjection(nn.Module):
    """Linear 3C -> C map with dropout over channel-concatenated layer features."""

    def __init__(self, embed_dim: int, dropout: float = 0.1):
        super().__init__()
        self.embed_dim = embed_dim
        self.linear = nn.Linear(3 * embed_dim, embed_dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, features: Sequence) -> torch.Tensor:
        tensors = [f.patches if isinstance(f, PatchFeatureMap) else f for f in features]
        if len(tensors) != 3:
            raise ConfigurationError(f"fusion expects 3 layer features, got {len(tensors)}")
        if not (tensors[0].shape == tensors[1].shape == tensors[2].shape):
            raise ConfigurationError(
                f"layer shapes differ: {[tuple(t.shape) for t in tensors]}")
        if tensors[0].shape[-1] != self.embed_dim:
            raise ConfigurationError(
                f"feature width {tensors[0].shape[-1]} does not match fusion width {self.embed_dim}")
        fused = self.linear(torch.cat(tensors, dim=-1))
        return self.dropout(fused)


def fuse(features: Sequence, projection: FusionProjection, training: bool) -> torch.Tensor:
    """Apply the fusion projection; dropout is active only when training."""
    projection.train(training)
    return projection(features)


class Router(nn.Module):
    """Linear map from patch features to per-expert logits."""

    def __init__(self, embed_dim: int, num_experts: int):
        super().__init__()
        self.linear = nn.Linear(embed_dim, num_experts)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        return self.linear(patches).softmax(dim=-1)


class ExpertMLP(nn.Module):
    """Two-layer GELU MLP, C -> hidden -> C."""

    def __init__(self, embed_dim: int, hidden_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(embed_dim, hidden_dim), nn.GELU(), nn.Linear(hidden_dim, embed_dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def make_experts(embed_dim: int, cfg: MoEConfig) -> nn.ModuleList:
    hidden = cfg.hidden_dim if cfg.hidden_dim > 0 else 4 * embed_dim
    return nn.ModuleList([ExpertMLP(embed_dim, hidden) for _ in range(cfg.num_experts)])


def top_k_weights(scores: torch.Tensor, k: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Select the K largest scores per row and renormalize them to sum to 1.

    Ties are broken toward the lower expert index (stable sort), so the
    selection is deterministic.

    Args:
        scores: (R, T) nonnegative rows.
        k: number of experts to keep, 1 <= k <= T.

    Returns:
        (indices, weights): (R, K) long tensor and (R, K) weights.
    """
    t = scores.shape[-1]
    if not 1 <= k <= t:
        raise ConfigurationError(f"top_k={k} out of range for {t} experts")
    order = torch.argsort(scores, dim=-1, descending=True, stable=True)
    indices = order[..., :k]
    selected = torch.gather(scores, -1, indices)
    weights = selected / selected.sum(dim=-1, keepdim=True)
    return indices, weights


def route(patch: torch.Tensor, router: Router, top_k: int) -> GateAssignment:
    """Route a single C-vector patch; see GateAssignment for the output layout."""
    scores = router(patch.unsqueeze(0)).squeeze(0)
    indices, weights = top_k_weights(scores.unsqueeze(0), top_k)
    return GateAssignment(scores=scores, topk_indices=indices.squeeze(0),
                          topk_weights=weights.squeeze(0))


def moe_apply(patch: torch.Tensor, assignment: GateAssignment,
              experts: Sequence[nn.Module]) -> torch.Tensor:
    """Weighted combination of the selected experts only."""
    out = None
    for idx, w in zip(assignment.topk_indices.tolist(), assignment.topk_weights):
        term = w * experts[idx](patch)
        out = term if out is None else out + term
    return out


def moe_forward(patches: torch.Tensor, router: Router, experts: Sequence[nn.Module],
                top_k: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched sparse MoE over (R, C) patches.

    Only the experts actually selected for at least one patch are evaluated,
    and each evaluates only its own rows.

    Returns:
        (output (R, C), scores (R, T)).
    """
    scores = router(patches)
    indices, weights = top_k_weights(scores, top_k)
    out = torch.zeros_like(patches)
    for t, expert in enumerate(experts):
        sel = indices == t  # (R, K)
        rows = sel.any(dim=-1).nonzero(as_tuple=True)[0]
        if rows.numel() == 0:
            continue
        w = (weights * sel).sum(dim=-1)[rows]
        out = out.index_add(0, rows, w.unsqueeze(-1) * expert(patches[rows]))
    return out, scores


def importance_loss(all_scores: torch.Tensor, epsilon: float = 1e-10) -> torch.Tensor:
    """Squared coefficient of variation of the per-expert importance.

    Importance I_t sums the softmax scores of expert t over all R patches;
    the loss is Var_pop(I) / (mean(I)^2 + epsilon), zero for perfectly
    uniform gating and scale-free in the score magnitudes.
    """
    if all_scores.dim() == 1:
        all_scores = all_scores.unsqueeze(0)
    importance = all_scores.sum(dim=0)  # (T,)
    mean = importance.mean()
    var = ((importance - mean) ** 2).mean()  # population variance over T
    return var / (mean * mean + epsilon)


__all__ = [
    "MoEConfig",
    "GateAssignment",
    "FusionProjection",
    "fuse",
    "Router",
    "ExpertMLP",
    "make_experts",
    "top_k_weights",
    "route",
    "moe_apply",
    "moe_forward",
    "importance_loss",
]
