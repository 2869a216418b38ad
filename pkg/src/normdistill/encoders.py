"""Frozen vision/text encoder backends and the learnable prompt container.

Two backend families share one interface:

* ``toy_frozen_random`` — a small ViT (patch embedding, class token,
  positional embedding, N residual attention blocks) with seeded random
  parameters, frozen. Deterministic per seed, no external weights, and the
  whole test suite runs against it.
* ``clip_pretrained`` — an optional adapter over ``open_clip``; only usable
  when that package and a local weight file are available. Its absence never
  breaks anything that does not explicitly request it.

Text prompts are three pairs of learnable token matrices with fixed suffix
token ids (a generic object token for the normal prompt, damaged+object for
the abnormal one); the text backend embeds the suffix, mean-pools the token
sequence and projects it to the visual width.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .blocks import ResidualAttentionBlock, init_block_weights
from .errors import BackendError, BackendUnavailableError, ConfigurationError, InputError

# Fixed suffix token ids used by both prompt variants.
OBJECT_TOKEN_ID = 1
DAMAGED_TOKEN_ID = 2

PROMPT_INIT_STD = 0.02


@dataclass
class PatchFeatureMap:
    """One tapped layer of encoder (or decoder) output.

    Attributes:
        patches: (B, H, W, C) patch embeddings.
        global_feature: (B, C) class-token embedding of the same layer.
        layer_index: 1, 2 or 3 (position among the tapped layers).
    """

    patches: torch.Tensor
    global_feature: torch.Tensor
    layer_index: int


@dataclass
class TextFeaturePair:
    """Unit-norm normal/abnormal text features for one tapped layer."""

    g_normal: torch.Tensor
    g_abnormal: torch.Tensor
    layer_index: int


@dataclass
class PromptPair:
    """Learnable token matrices for one layer plus the fixed suffixes."""

    normal_tokens: nn.Parameter
    abnormal_tokens: nn.Parameter
    suffix_normal: tuple = (OBJECT_TOKEN_ID,)
    suffix_abnormal: tuple = (DAMAGED_TOKEN_ID, OBJECT_TOKEN_ID)


class PromptSet(nn.Module):
    """Three pairs of learnable normal/abnormal prompt token matrices.

    The token matrices are the only trainable state here; the fixed suffix
    token ids are constants whose embeddings the text backend owns.
    """

    def __init__(self, prompt_length: int, text_dim: int, seed: int = 0,
                 suffix_normal: tuple = (OBJECT_TOKEN_ID,),
                 suffix_abnormal: tuple = (DAMAGED_TOKEN_ID, OBJECT_TOKEN_ID)):
        super().__init__()
        if prompt_length < 1:
            raise ConfigurationError(f"prompt_length must be >= 1, got {prompt_length}")
        self.prompt_length = prompt_length
        self.text_dim = text_dim
        self.suffix_normal = tuple(suffix_normal)
        self.suffix_abnormal = tuple(suffix_abnormal)
        gen = torch.Generator().manual_seed(seed)
        self.normal_tokens = nn.ParameterList()
        self.abnormal_tokens = nn.ParameterList()
        for _ in range(3):
            for lst in (self.normal_tokens, self.abnormal_tokens):
                tok = torch.empty(prompt_length, text_dim)
                tok.normal_(0.0, PROMPT_INIT_STD, generator=gen)
                lst.append(nn.Parameter(tok))

    def pairs(self) -> list[PromptPair]:
        return [PromptPair(self.normal_tokens[i], self.abnormal_tokens[i],
                           self.suffix_normal, self.suffix_abnormal) for i in range(3)]


def init_prompts(prompt_length: int, text_dim: int, seed: int = 0) -> PromptSet:
    """Create a PromptSet with zero-mean gaussian tokens (std 0.02), reproducible per seed."""
    return PromptSet(prompt_length, text_dim, seed)


class ToyTextEncoder(nn.Module):
    """Deterministic frozen text backend: suffix embedding table, mean pooling,
    fixed random projection from text_dim to the visual width.
    """

    def __init__(self, text_dim: int, embed_dim: int, vocab_size: int = 16, seed: int = 0):
        super().__init__()
        self.text_dim = text_dim
        self.embed_dim = embed_dim
        gen = torch.Generator().manual_seed(seed)
        self.token_table = nn.Parameter(
            torch.randn(vocab_size, text_dim, generator=gen), requires_grad=False)
        proj = torch.randn(embed_dim, text_dim, generator=gen) * text_dim**-0.5
        self.projection = nn.Parameter(proj, requires_grad=False)

    def encode(self, tokens: torch.Tensor, suffix_ids: tuple) -> torch.Tensor:
        """Embed one prompt: learnable tokens followed by the fixed suffix."""
        if tokens.shape[-1] != self.text_dim:
            raise ConfigurationError(
                f"prompt token width {tokens.shape[-1]} does not match text_dim {self.text_dim}")
        suffix = self.token_table[list(suffix_ids)]
        seq = torch.cat([tokens, suffix], dim=0)
        return seq.mean(dim=0) @ self.projection.T


def encode_prompts(prompts: PromptSet, text_backend) -> list[TextFeaturePair]:
    """Encode all three prompt pairs; outputs are L2-normalized.

    Gradients flow into the learnable tokens only — the backend parameters
    are frozen.
    """
    out = []
    for i, pair in enumerate(prompts.pairs()):
        if not torch.isfinite(pair.normal_tokens).all() or not torch.isfinite(pair.abnormal_tokens).all():
            raise InputError(f"prompt pair {i} contains non-finite tokens")
        g_n = F.normalize(text_backend.encode(pair.normal_tokens, pair.suffix_normal), dim=-1)
        g_a = F.normalize(text_backend.encode(pair.abnormal_tokens, pair.suffix_abnormal), dim=-1)
        out.append(TextFeaturePair(g_n, g_a, layer_index=i + 1))
    return out


def default_tap_layers(depth: int) -> tuple[int, int, int]:
    """Evenly spaced thirds of the depth, e.g. depth 6 -> (2, 4, 6)."""
    return (depth // 3, 2 * depth // 3, depth)


class ToyVisionEncoder(nn.Module):
    """Frozen random ViT-style vision backend.

    Patchify -> linear embed -> prepend class token -> add positional
    embedding -> N residual attention blocks, tapping three of them.
    All parameters are drawn from a seeded generator and frozen, so the same
    seed gives a bit-identical backend.

    Args:
        resolution: expected square input size H0 = W0.
        patch_size: side of the square patches; must divide resolution.
        embed_dim: feature width C.
        depth: number of residual attention blocks N.
        num_heads: attention heads per block.
        tap_layers: three 1-based block indices i1 < i2 < i3 <= depth.
        use_layernorm: propagate to the blocks (False only in numerical tests).
        seed: parameter seed.
    """

    def __init__(self, resolution: int, patch_size: int, embed_dim: int, depth: int,
                 num_heads: int, tap_layers: tuple[int, int, int] | None = None,
                 use_layernorm: bool = True, seed: int = 0):
        super().__init__()
        if resolution % patch_size != 0:
            raise ConfigurationError(
                f"resolution {resolution} not divisible by patch_size {patch_size}")
        taps = tuple(tap_layers) if tap_layers is not None else default_tap_layers(depth)
        if len(taps) != 3 or not (1 <= taps[0] < taps[1] < taps[2] <= depth):
            raise ConfigurationError(f"tap_layers must satisfy 1 <= i1 < i2 < i3 <= depth, got {taps}")
        self.resolution = resolution
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.depth = depth
        self.tap_layers = taps
        self.grid = resolution // patch_size

        gen = torch.Generator().manual_seed(seed)
        patch_dim = 3 * patch_size * patch_size
        self.patch_proj = nn.Parameter(
            torch.randn(embed_dim, patch_dim, generator=gen) * patch_dim**-0.5, requires_grad=False)
        self.class_token = nn.Parameter(torch.randn(embed_dim, generator=gen), requires_grad=False)
        n_tokens = self.grid * self.grid + 1
        self.pos_embed = nn.Parameter(
            torch.randn(n_tokens, embed_dim, generator=gen) * 0.5, requires_grad=False)
        self.blocks = nn.ModuleList(
            [ResidualAttentionBlock(embed_dim, num_heads, use_layernorm=use_layernorm)
             for _ in range(depth)])
        for block in self.blocks:
            init_block_weights(block, gen)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, images: torch.Tensor) -> list[PatchFeatureMap]:
        """Encode a (B, H0, W0, 3) batch into the three tapped feature maps."""
        if images.dim() == 3:
            images = images.unsqueeze(0)
        b, h0, w0, ch = images.shape
        if (h0, w0, ch) != (self.resolution, self.resolution, 3):
            raise InputError(
                f"expected {self.resolution}x{self.resolution}x3 input, got {h0}x{w0}x{ch}")
        g, p = self.grid, self.patch_size
        x = images * 2.0 - 1.0  # center [0,1] pixels
        patches = x.reshape(b, g, p, g, p, 3).permute(0, 1, 3, 2, 4, 5).reshape(b, g * g, p * p * 3)
        tokens = patches @ self.patch_proj.T
        cls = self.class_token.expand(b, 1, -1)
        tokens = torch.cat([cls, tokens], dim=1) + self.pos_embed

        taps = []
        with torch.no_grad():
            for i, block in enumerate(self.blocks, start=1):
                tokens = block(tokens)
                if i in self.tap_layers:
                    taps.append(tokens)
        out = []
        for rank, t in enumerate(taps, start=1):
            if not torch.isfinite(t).all():
                raise BackendError(f"non-finite features at tapped layer {rank}")
            out.append(PatchFeatureMap(
                patches=t[:, 1:, :].reshape(b, g, g, self.embed_dim),
                global_feature=t[:, 0, :],
                layer_index=rank))
        return out


def encode_image(images: torch.Tensor, backend) -> list[PatchFeatureMap]:
    """Encode an image batch into three frozen feature maps (f_1, f_2, f_3)."""
    return backend(images)


class ClipVisionBackend(nn.Module):
    """Adapter exposing a pretrained CLIP visual transformer through the same
    tapped-layer interface as the toy backend.

    Requires the optional ``open_clip_torch`` package and a local weight
    file; constructing it without either raises BackendUnavailableError.
    Tapped layers are collected via forward hooks so the adapter tolerates
    both sequence-first and batch-first transformer layouts. The class token
    of each tapped layer is the global feature; the patch grid is reshaped
    from the remaining tokens. TODO: pair this with a CLIP text-tower
    backend (prompts currently go through the deterministic toy projector).
    """

    def __init__(self, model_name: str, weights_path: str, resolution: int,
                 tap_layers: tuple[int, int, int] | None = None):
        super().__init__()
        try:
            import open_clip
        except ImportError as exc:
            raise BackendUnavailableError(
                "clip_pretrained backend requires the open_clip_torch package") from exc
        if not weights_path:
            raise ConfigurationError("clip_pretrained backend requires a local weights_path")
        model = open_clip.create_model(model_name, pretrained=weights_path)
        visual = model.visual
        self.visual = visual.eval()
        self.resolution = resolution
        depth = len(visual.transformer.resblocks)
        self.tap_layers = tuple(tap_layers) if tap_layers else default_tap_layers(depth)
        self.embed_dim = visual.transformer.width
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, images: torch.Tensor) -> list[PatchFeatureMap]:
        if images.shape[1] != self.resolution or images.shape[2] != self.resolution:
            raise InputError(f"expected {self.resolution}px input")
        x = images.permute(0, 3, 1, 2)  # BHWC -> BCHW, CLIP layout
        v = self.visual
        captured: dict[int, torch.Tensor] = {}
        handles = [
            block.register_forward_hook(
                lambda module, inputs, output, idx=i: captured.__setitem__(idx, output))
            for i, block in enumerate(v.transformer.resblocks, start=1)
            if i in self.tap_layers]
        try:
            with torch.no_grad():
                x = v.conv1(x)
                b, c, gh, gw = x.shape
                x = x.reshape(b, c, gh * gw).permute(0, 2, 1)
                cls = v.class_embedding.to(x.dtype).expand(b, 1, -1)
                x = torch.cat([cls, x], dim=1) + v.positional_embedding.to(x.dtype)
                x = v.ln_pre(x)
                if not getattr(v.transformer, "batch_first", False):
                    x = x.permute(1, 0, 2)  # older open_clip expects (L, N, D)
                v.transformer(x)
        finally:
            for handle in handles:
                handle.remove()
        out = []
        for rank, layer in enumerate(self.tap_layers, start=1):
            t = captured[layer]
            if t.shape[0] != b:  # sequence-first capture
                t = t.transpose(0, 1)
            if not torch.isfinite(t).all():
                raise BackendError(f"non-finite features at tapped layer {rank}")
            out.append(PatchFeatureMap(
                patches=t[:, 1:, :].reshape(b, gh, gw, c),
                global_feature=t[:, 0, :],
                layer_index=rank))
        return out


__all__ = [
    "OBJECT_TOKEN_ID",
    "DAMAGED_TOKEN_ID",
    "PatchFeatureMap",
    "TextFeaturePair",
    "PromptPair",
    "PromptSet",
    "init_prompts",
    "ToyTextEncoder",
    "encode_prompts",
    "default_tap_layers",
    "ToyVisionEncoder",
    "encode_image",
    "ClipVisionBackend",
]
