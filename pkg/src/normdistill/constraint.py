"""Cross-modal normality losses on global features.

Each tapped layer contributes a two-way softmax cross-entropy between the
layer's global feature and its normal/abnormal text features; the decoded
variant of the loss is gated in after a configurable epoch threshold.
"""

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .errors import ConfigurationError
from .encoders import TextFeaturePair


@dataclass
class ConstraintConfig:
    """Temperature, decoded-loss weight and activation epoch.

    Defaults: tau=0.001, gamma=0.1, theta=5.
    """

    tau: float = 0.001
    gamma: float = 0.1
    theta: int = 5

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigurationError(f"tau must be > 0, got {self.tau}")
        if self.gamma < 0:
            raise ConfigurationError(f"gamma must be >= 0, got {self.gamma}")
        if self.theta < 0:
            raise ConfigurationError(f"theta must be >= 0, got {self.theta}")


def _two_way_alignment(globals_per_layer: Sequence[torch.Tensor],
                       text: Sequence[TextFeaturePair],
                       tau: float,
                       normalize: bool) -> torch.Tensor:
    if tau <= 0:
        raise ConfigurationError(f"tau must be > 0, got {tau}")
    if len(globals_per_layer) != len(text):
        raise ConfigurationError(
            f"{len(globals_per_layer)} global vectors vs {len(text)} text pairs")
    total = None
    for e, pair in zip(globals_per_layer, text):
        if normalize:
            e = F.normalize(e, dim=-1)
        gap = (e * pair.g_normal).sum(dim=-1) - (e * pair.g_abnormal).sum(dim=-1)
        # -log softmax of the normal logit == softplus(-(logit gap)); softplus
        # stays finite where exp would overflow at tau = 1e-3.
        term = F.softplus(-gap / tau)
        total = term if total is None else total + term
    return total.mean()


def alignment_loss(globals_per_layer: Sequence[torch.Tensor],
                   text: Sequence[TextFeaturePair],
                   tau: float,
                   normalize: bool = True) -> torch.Tensor:
    """Alignment of encoded global features to the normal prompts.

    Per layer: -log( exp(e.g_n/tau) / (exp(e.g_n/tau) + exp(e.g_a/tau)) ),
    summed over layers and averaged over the batch. Both operands are
    L2-normalized before the dot product unless `normalize` is False.

    Args:
        globals_per_layer: three (B, C) or (C,) global feature tensors.
        text: three TextFeaturePair with unit-norm features.
        tau: temperature, > 0.
    """
    return _two_way_alignment(globals_per_layer, text, tau, normalize)


def decoded_alignment_loss(decoded_globals: Sequence[torch.Tensor],
                           text: Sequence[TextFeaturePair],
                           tau: float,
                           normalize: bool = True) -> torch.Tensor:
    """Same contract as alignment_loss, applied to decoded global features."""
    return _two_way_alignment(decoded_globals, text, tau, normalize)


def constraint_loss(epoch: int, cfg: ConstraintConfig, l1: torch.Tensor,
                    l2: torch.Tensor | float) -> torch.Tensor:
    """Epoch-gated combination: l1 below the threshold, l1 + gamma*l2 from it on.

    The boundary epoch == theta already includes the decoded term.
    """
    if epoch < cfg.theta:
        return l1
    return l1 + cfg.gamma * l2


__all__ = ["ConstraintConfig", "alignment_loss", "decoded_alignment_loss", "constraint_loss"]
