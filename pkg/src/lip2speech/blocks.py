"""Shared trainable building blocks.

All modules take batch-first ``(B, T, D)`` tensors and an optional boolean
``pad_mask`` of shape ``(B, T)`` that is True at padded positions.  Padded
positions are zeroed on output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class BlockConfig:
    hidden_dim: int = 512
    heads: int = 8
    fft_blocks_per_generator: int = 3
    conformer_layers: int = 8
    conv_kernel: int = 9
    dropout: float = 0.1
    ff_expansion: int = 4

    def __post_init__(self):
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")


def positional_encoding(length: int, dim: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Sinusoidal table: PE[t, 2i] = sin(t / 10000^(2i/D)), PE[t, 2i+1] = cos(...)."""
    if length < 1 or dim < 1:
        raise ValueError("length and dim must be positive")
    if dim % 2:
        raise ValueError(f"positional encoding needs an even dimension, got {dim}")
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    rate = torch.pow(10000.0, torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    pe = torch.empty(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos / rate)
    pe[:, 1::2] = torch.cos(pos / rate)
    return pe.to(dtype=dtype, device=device)


def init_parameters(module: nn.Module) -> None:
    """Uniform(+-1/sqrt(fan_in)) weights and zero biases for linear and conv layers."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv1d)):
            fan_in = m.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            nn.init.uniform_(m.weight, -bound, bound)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def check_dim(x: torch.Tensor, dim: int, name: str) -> None:
    if x.dim() != 3 or x.shape[-1] != dim:
        raise ValueError(f"{name}: expected (B, T, {dim}) input, got {tuple(x.shape)}")


def mask_fill(x: torch.Tensor, pad_mask: torch.Tensor | None) -> torch.Tensor:
    if pad_mask is None:
        return x
    return x.masked_fill(pad_mask.unsqueeze(-1), 0.0)


def lengths_to_pad_mask(lengths: torch.Tensor, max_len: int | None = None) -> torch.Tensor:
    max_len = int(lengths.max()) if max_len is None else max_len
    return torch.arange(max_len, device=lengths.device)[None, :] >= lengths[:, None]


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention over ``heads`` subspaces with output projection."""

    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim, self.heads = dim, heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, query, key, value, key_pad_mask=None, return_weights=False):
        for name, t in (("query", query), ("key", key), ("value", value)):
            check_dim(t, self.dim, f"attention {name}")
        if key.shape[1] != value.shape[1]:
            raise ValueError("key and value lengths differ")
        if key.shape[1] < 1:
            raise ValueError("attention needs at least one key")
        b, tq, _ = query.shape
        tk = key.shape[1]
        hd = self.dim // self.heads
        q = self.q_proj(query).view(b, tq, self.heads, hd).transpose(1, 2)
        k = self.k_proj(key).view(b, tk, self.heads, hd).transpose(1, 2)
        v = self.v_proj(value).view(b, tk, self.heads, hd).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        if key_pad_mask is not None:
            scores = scores.masked_fill(key_pad_mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        out = (self.dropout(weights) @ v).transpose(1, 2).reshape(b, tq, self.dim)
        out = self.out_proj(out)
        return (out, weights) if return_weights else out


class ConvFeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int, kernel: int, dropout: float):
        super().__init__()
        self.conv1 = nn.Conv1d(dim, hidden, kernel, padding=kernel // 2)
        self.conv2 = nn.Conv1d(hidden, dim, kernel, padding=kernel // 2)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, pad_mask=None):
        x = mask_fill(x, pad_mask).transpose(1, 2)
        x = self.dropout(F.relu(self.conv1(x)))
        x = mask_fill(x.transpose(1, 2), pad_mask).transpose(1, 2)
        return self.conv2(x).transpose(1, 2)


class FFTBlock(nn.Module):
    """Feed-forward Transformer block: self-attention and a 1-D conv feed-forward,
    each wrapped in residual + post layer-norm.  ``kernel=1`` gives a standard
    Transformer encoder layer."""

    def __init__(self, dim: int, heads: int, kernel: int = 9, expansion: int = 4, dropout: float = 0.1):
        super().__init__()
        self.dim = dim
        self.attn = MultiHeadAttention(dim, heads, dropout)
        self.norm1 = nn.LayerNorm(dim)
        self.ff = ConvFeedForward(dim, dim * expansion, kernel, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, pad_mask=None):
        check_dim(x, self.dim, "FFTBlock")
        x = self.norm1(x + self.dropout(self.attn(x, x, x, pad_mask)))
        x = mask_fill(x, pad_mask)
        x = self.norm2(x + self.dropout(self.ff(x, pad_mask)))
        return mask_fill(x, pad_mask)


class FFTStack(nn.Module):
    def __init__(self, n_blocks: int, dim: int, heads: int, kernel: int = 9, expansion: int = 4, dropout: float = 0.1):
        super().__init__()
        self.blocks = nn.ModuleList(FFTBlock(dim, heads, kernel, expansion, dropout) for _ in range(n_blocks))

    def forward(self, x, pad_mask=None):
        for block in self.blocks:
            x = block(x, pad_mask)
        return x


class _ConformerFeedForward(nn.Module):
    def __init__(self, dim, expansion, dropout):
        super().__init__()
        self.net = nn.Sequential(
            nn.LayerNorm(dim),
            nn.Linear(dim, dim * expansion),
            nn.SiLU(),
            nn.Dropout(dropout),
            nn.Linear(dim * expansion, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x):
        return self.net(x)


class _ConformerConv(nn.Module):
    def __init__(self, dim, kernel, dropout):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.pointwise_in = nn.Conv1d(dim, 2 * dim, 1)
        self.depthwise = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        # layer norm instead of batch norm: padding-safe and batch-size independent
        self.mid_norm = nn.LayerNorm(dim)
        self.pointwise_out = nn.Conv1d(dim, dim, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, pad_mask=None):
        y = self.norm(x).transpose(1, 2)
        y = F.glu(self.pointwise_in(y), dim=1)
        y = mask_fill(y.transpose(1, 2), pad_mask).transpose(1, 2)
        y = self.depthwise(y).transpose(1, 2)
        y = F.silu(self.mid_norm(y)).transpose(1, 2)
        return self.dropout(self.pointwise_out(y).transpose(1, 2))


class ConformerBlock(nn.Module):
    """Macaron block: half FF, self-attention, convolution module, half FF, layer norm."""

    def __init__(self, dim: int, heads: int, kernel: int = 9, expansion: int = 4, dropout: float = 0.1):
        super().__init__()
        self.dim = dim
        self.ff1 = _ConformerFeedForward(dim, expansion, dropout)
        self.attn_norm = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, dropout)
        self.attn_dropout = nn.Dropout(dropout)
        self.conv = _ConformerConv(dim, kernel, dropout)
        self.ff2 = _ConformerFeedForward(dim, expansion, dropout)
        self.out_norm = nn.LayerNorm(dim)

    def forward(self, x, pad_mask=None):
        check_dim(x, self.dim, "ConformerBlock")
        x = x + 0.5 * self.ff1(x)
        h = self.attn_norm(x)
        x = x + self.attn_dropout(self.attn(h, h, h, pad_mask))
        x = x + self.conv(x, pad_mask)
        x = x + 0.5 * self.ff2(x)
        return mask_fill(self.out_norm(x), pad_mask)


class VariancePredictor(nn.Module):
    """Two conv/ReLU/LayerNorm/dropout layers and a per-frame scalar head.

    ``output_scale`` multiplies the head so targets in the hundreds (F0 in Hz)
    sit at unit scale for the linear layer.
    """

    def __init__(self, dim: int, filter_size: int | None = None, kernel: int = 3, dropout: float = 0.1,
                 output_scale: float = 1.0):
        super().__init__()
        self.dim = dim
        filter_size = filter_size or dim
        self.conv1 = nn.Conv1d(dim, filter_size, kernel, padding=kernel // 2)
        self.norm1 = nn.LayerNorm(filter_size)
        self.conv2 = nn.Conv1d(filter_size, filter_size, kernel, padding=kernel // 2)
        self.norm2 = nn.LayerNorm(filter_size)
        self.dropout = nn.Dropout(dropout)
        self.head = nn.Linear(filter_size, 1)
        self.output_scale = output_scale

    def forward(self, x, pad_mask=None):
        check_dim(x, self.dim, "VariancePredictor")
        y = mask_fill(x, pad_mask)
        y = self.dropout(self.norm1(F.relu(self.conv1(y.transpose(1, 2))).transpose(1, 2)))
        y = mask_fill(y, pad_mask)
        y = self.dropout(self.norm2(F.relu(self.conv2(y.transpose(1, 2))).transpose(1, 2)))
        out = self.head(y).squeeze(-1) * self.output_scale
        if pad_mask is not None:
            out = out.masked_fill(pad_mask, 0.0)
        return out
