"""Feature-level normality promotion and the flattened-cosine distillation loss.

A patch feature map is compared against the normal and abnormal text features
of its layer; the tanh-squashed activation difference becomes an (0,1) control
map that is added (scaled by the inverse feature norm) to every channel. The
distillation loss is a single cosine per layer over the fully flattened
promoted tensors.
"""

from dataclasses import dataclass
from typing import Sequence, Union

import torch

from .encoders import PatchFeatureMap, TextFeaturePair
from .errors import ConfigurationError, DegenerateInputError


@dataclass
class ControlMap:
    """Per-patch control coefficient in (0,1); 0.5 wherever the normal and
    abnormal activations coincide."""

    values: torch.Tensor  # (B, H, W) or (H, W)
    source_layer: int


@dataclass
class PromotedFeature:
    """Patch tensor after promotion, plus the scale that was applied.

    Subtracting lambda_scale * psi from every channel recovers the raw
    feature exactly.
    """

    patches: torch.Tensor        # (B, H, W, C) or (H, W, C)
    lambda_scale: torch.Tensor   # (B,) or scalar


def _as_patches(feature) -> tuple[torch.Tensor, int]:
    if isinstance(feature, PatchFeatureMap):
        return feature.patches, feature.layer_index
    if isinstance(feature, PromotedFeature):
        return feature.patches, 0
    return feature, 0


def control_map(feature, text: TextFeaturePair) -> ControlMap:
    """Cross-modal control coefficient psi = (1 + tanh(alpha - beta)) / 2.

    alpha/beta are per-patch dot products with the normal/abnormal text
    features; the tanh runs in float64 so large activation gaps do not lose
    precision before the squash.

    Args:
        feature: PatchFeatureMap or raw (..., H, W, C) tensor.
        text: text feature pair of the same layer (width C).
    """
    patches, layer = _as_patches(feature)
    if patches.shape[-1] != text.g_normal.shape[-1]:
        raise ConfigurationError(
            f"feature width {patches.shape[-1]} does not match text width {text.g_normal.shape[-1]}")
    alpha = patches @ text.g_normal
    beta = patches @ text.g_abnormal
    psi = 0.5 * (1.0 + torch.tanh((alpha - beta).double()))
    return ControlMap(values=psi.to(patches.dtype), source_layer=layer)


def promote(feature, psi: Union[ControlMap, torch.Tensor]) -> PromotedFeature:
    """Add the scaled control map to every channel: out = f + psi / ||f||.

    ||f|| is the L2 norm over all H*W*C entries of one sample's patch tensor
    (class tokens excluded), so lambda is a single scalar per sample.
    """
    patches, _ = _as_patches(feature)
    values = psi.values if isinstance(psi, ControlMap) else psi
    if patches.dim() == 3:  # (H, W, C)
        norm = patches.norm()
        if norm.item() == 0.0:
            raise DegenerateInputError("cannot promote a zero-norm feature tensor")
        lam = 1.0 / norm
        out = patches + lam * values.unsqueeze(-1)
    elif patches.dim() == 4:  # (B, H, W, C)
        norm = patches.flatten(1).norm(dim=1)
        if (norm == 0).any():
            raise DegenerateInputError("cannot promote a zero-norm feature tensor")
        lam = 1.0 / norm
        out = patches + lam.view(-1, 1, 1, 1) * values.unsqueeze(-1)
    else:
        raise ConfigurationError(f"expected 3 or 4 dims, got {patches.dim()}")
    return PromotedFeature(patches=out, lambda_scale=lam)


def distill_loss(encoded: Sequence, decoded: Sequence) -> torch.Tensor:
    """Sum over layers of (1 - cosine) between the fully flattened tensors.

    One global cosine per layer over all H*W*C entries of a sample (not a
    per-position cosine), averaged over the batch; range [0, 2*num_layers].
    """
    if len(encoded) != len(decoded):
        raise ConfigurationError(f"{len(encoded)} encoded vs {len(decoded)} decoded layers")
    total = None
    for enc, dec in zip(encoded, decoded):
        a, _ = _as_patches(enc)
        b, _ = _as_patches(dec)
        if a.shape != b.shape:
            raise ConfigurationError(f"layer shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
        if a.dim() == 3:
            a = a.unsqueeze(0)
            b = b.unsqueeze(0)
        av = a.flatten(1)
        bv = b.flatten(1)
        na = av.norm(dim=1)
        nb = bv.norm(dim=1)
        if (na == 0).any() or (nb == 0).any():
            raise DegenerateInputError("zero-norm flattened feature in distillation loss")
        cos = (av * bv).sum(dim=1) / (na * nb)
        term = (1.0 - cos).mean()
        total = term if total is None else total + term
    return total


__all__ = ["ControlMap", "PromotedFeature", "control_map", "promote", "distill_loss"]
