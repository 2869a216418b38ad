"""Pixel anomaly map and image score from promoted encoded/decoded features.

Per layer, each spatial position contributes 1 - cosine similarity between
the encoded and decoded channel vectors; the three layer maps are bilinearly
upsampled (corner-aligned) to the input resolution and summed, so pixel
scores live in [0, 6]. The image score is the maximum of the summed map.
"""

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError
from .fnp import PromotedFeature


@dataclass
class AnomalyResult:
    """Upsampled pixel score map and the derived image-level score.

    degenerate_positions counts (layer, position) pairs whose cosine was
    undefined because one of the vectors had zero norm; those positions
    contribute 1 - 0 to their layer map.
    """

    pixel_map: np.ndarray
    image_score: float
    degenerate_positions: int = 0


def _patches(feature) -> torch.Tensor:
    if isinstance(feature, PromotedFeature):
        return feature.patches
    if hasattr(feature, "patches"):
        return feature.patches
    return feature


def layer_score_map(encoded, decoded) -> tuple[torch.Tensor, int]:
    """Per-position 1 - cosine for one layer; returns (map (B, H, W), degenerate count)."""
    a = _patches(encoded)
    b = _patches(decoded)
    if a.shape != b.shape:
        raise ConfigurationError(f"layer shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 3:
        a = a.unsqueeze(0)
        b = b.unsqueeze(0)
    dots = (a * b).sum(dim=-1)
    denom = a.norm(dim=-1) * b.norm(dim=-1)
    degenerate = int((denom == 0).sum())
    cos = torch.where(denom > 0, dots / denom.clamp_min(torch.finfo(a.dtype).tiny),
                      torch.zeros_like(dots))
    return 1.0 - cos, degenerate


def anomaly_map(encoded: Sequence, decoded: Sequence, out_size: int) -> list[AnomalyResult]:
    """Score maps for a batch; one AnomalyResult per image.

    Args:
        encoded: three promoted encoded features (B, H, W, C).
        decoded: three promoted decoded features of matching shapes.
        out_size: output side length (the input resolution).
    """
    if len(encoded) != len(decoded):
        raise ConfigurationError(f"{len(encoded)} encoded vs {len(decoded)} decoded layers")
    total = None
    degenerate = 0
    for enc, dec in zip(encoded, decoded):
        layer_map, dgn = layer_score_map(enc, dec)
        degenerate += dgn
        up = F.interpolate(layer_map.unsqueeze(1), size=(out_size, out_size),
                           mode="bilinear", align_corners=True).squeeze(1)
        total = up if total is None else total + up
    total = total.detach().cpu()
    out = []
    for i in range(total.shape[0]):
        pm = total[i].numpy().astype(np.float32)
        out.append(AnomalyResult(pixel_map=pm, image_score=float(pm.max()),
                                 degenerate_positions=degenerate))
    return out


def score_dataset(state, samples: Sequence, batch_size: int = 8) -> list[AnomalyResult]:
    """Anomaly maps for a list of ImageSample, in input order, eval mode."""
    from .pipeline import forward  # local import to avoid a cycle

    results: list[AnomalyResult] = []
    res = state.config.train.resolution
    with torch.no_grad():
        for lo in range(0, len(samples), batch_size):
            batch = torch.stack([s.pixels for s in samples[lo:lo + batch_size]])
            outputs = forward(batch, state, training=False)
            results.extend(anomaly_map(outputs.encoded_promoted,
                                       outputs.decoded_promoted, out_size=res))
    return results


__all__ = ["AnomalyResult", "layer_score_map", "anomaly_map", "score_dataset"]
