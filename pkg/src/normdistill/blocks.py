"""Residual attention block, the basic unit shared by the vision encoder and the decoder.

Written from scratch (pre-norm transformer block with explicit q/k/v/out
projections) so that unit tests can check it against a step-by-step matrix
oracle instead of trusting a fused framework implementation.
"""

import torch
from torch import nn

from .errors import ConfigurationError


class MultiheadSelfAttention(nn.Module):
    """Standard multi-head self-attention with separate q/k/v/out linear maps.

    Args:
        dim: token width C.
        num_heads: number of attention heads; must divide dim.
    """

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads != 0:
            raise ConfigurationError(f"dim={dim} not divisible by num_heads={num_heads}")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, N, C) or (N, C)
        unbatched = x.dim() == 2
        if unbatched:
            x = x.unsqueeze(0)
        b, n, c = x.shape
        if c != self.dim:
            raise ConfigurationError(f"token width {c} does not match block dim {self.dim}")
        q = self.q_proj(x).view(b, n, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(x).view(b, n, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(x).view(b, n, self.num_heads, self.head_dim).transpose(1, 2)
        attn = (q @ k.transpose(-2, -1)) * self.head_dim**-0.5
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        out = self.out_proj(out)
        return out.squeeze(0) if unbatched else out


class ResidualAttentionBlock(nn.Module):
    """Pre-norm transformer block: x += attn(ln(x)); x += mlp(ln(x)).

    Args:
        dim: token width C.
        num_heads: attention heads.
        mlp_ratio: hidden width of the MLP as a multiple of dim.
        use_layernorm: replace both norms with identity when False (used by
            numerical sanity checks that need a purely linear value path).
    """

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0, use_layernorm: bool = True):
        super().__init__()
        self.dim = dim
        self.ln_1 = nn.LayerNorm(dim) if use_layernorm else nn.Identity()
        self.attn = MultiheadSelfAttention(dim, num_heads)
        self.ln_2 = nn.LayerNorm(dim) if use_layernorm else nn.Identity()
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.dim:
            raise ConfigurationError(f"token width {x.shape[-1]} does not match block dim {self.dim}")
        x = x + self.attn(self.ln_1(x))
        x = x + self.mlp(self.ln_2(x))
        return x


def residual_attention_block(tokens: torch.Tensor, params: ResidualAttentionBlock) -> torch.Tensor:
    """Apply one residual attention block to a token sequence.

    Thin functional wrapper kept for symmetry with the rest of the API;
    `params` is the block module itself.
    """
    if tokens.shape[0] < 1:
        raise ConfigurationError("token sequence must contain at least one token")
    return params(tokens)


def init_block_weights(block: ResidualAttentionBlock, generator: torch.Generator) -> None:
    """Seeded gaussian init for a frozen random block (fan-in scaled)."""
    for lin in (block.attn.q_proj, block.attn.k_proj, block.attn.v_proj, block.attn.out_proj,
                block.mlp[0], block.mlp[2]):
        fan_in = lin.weight.shape[1]
        with torch.no_grad():
            lin.weight.normal_(0.0, fan_in**-0.5, generator=generator)
            lin.bias.zero_()


def zero_block_(block: ResidualAttentionBlock) -> None:
    """Zero the value/out/MLP paths so the block becomes the identity map."""
    with torch.no_grad():
        for lin in (block.attn.v_proj, block.attn.out_proj, block.mlp[0], block.mlp[2]):
            lin.weight.zero_()
            lin.bias.zero_()


__all__ = [
    "MultiheadSelfAttention",
    "ResidualAttentionBlock",
    "residual_attention_block",
    "init_block_weights",
    "zero_block_",
]
