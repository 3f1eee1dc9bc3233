"""Semantic branch: visual/phoneme mapping networks and semantic reference attention."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .blocks import (
    BlockConfig,
    ConformerBlock,
    FFTStack,
    MultiHeadAttention,
    check_dim,
    mask_fill,
    positional_encoding,
)


@dataclass(frozen=True)
class SRAConfig:
    n_reference_layers: int = 2
    visual_encoder_layers: int = 2
    phoneme_encoder_layers: int = 2

    def __post_init__(self):
        if self.n_reference_layers < 0:
            raise ValueError("n_reference_layers must be >= 0")


def add_positions(x: torch.Tensor) -> torch.Tensor:
    return x + positional_encoding(x.shape[1], x.shape[2], dtype=x.dtype, device=x.device)


class VisualMapping(nn.Module):
    """H_v = Encoder(MLP(E_v + PE)); the MLP projects D_v to the hidden width."""

    def __init__(self, visual_dim: int, block: BlockConfig, n_layers: int = 2):
        super().__init__()
        self.visual_dim = visual_dim
        h = block.hidden_dim
        self.mlp = nn.Sequential(nn.Linear(visual_dim, h), nn.ReLU(), nn.Linear(h, h))
        # kernel 1: plain position-wise feed-forward Transformer layers
        self.encoder = FFTStack(n_layers, h, block.heads, 1, block.ff_expansion, block.dropout)

    def forward(self, e_v, pad_mask=None):
        check_dim(e_v, self.visual_dim, "VisualMapping")
        x = mask_fill(self.mlp(add_positions(e_v)), pad_mask)
        return self.encoder(x, pad_mask)


class PhonemeMapping(nn.Module):
    """H_p = MLP(PhonemeEncoder(embed(ids) + PE))."""

    def __init__(self, n_phonemes: int, phoneme_dim: int, block: BlockConfig, n_layers: int = 2):
        super().__init__()
        self.n_phonemes = n_phonemes
        self.embed = nn.Embedding(n_phonemes, phoneme_dim, padding_idx=None)
        heads = block.heads if phoneme_dim % block.heads == 0 else 1
        self.encoder = FFTStack(n_layers, phoneme_dim, heads, block.conv_kernel, block.ff_expansion, block.dropout)
        h = block.hidden_dim
        self.mlp = nn.Sequential(nn.Linear(phoneme_dim, h), nn.ReLU(), nn.Linear(h, h))

    def forward(self, ids, pad_mask=None):
        if ids.dim() != 2:
            raise ValueError(f"phoneme ids must be (B, T_p), got {tuple(ids.shape)}")
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.n_phonemes):
            raise ValueError(f"phoneme id out of inventory (size {self.n_phonemes})")
        x = add_positions(self.embed(ids))
        x = self.encoder(mask_fill(x, pad_mask), pad_mask)
        return mask_fill(self.mlp(x), pad_mask)


class ReferenceLayer(nn.Module):
    def __init__(self, dim, heads, dropout):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads, dropout)
        self.norm = nn.LayerNorm(dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, r, h_p, query_pad_mask=None, key_pad_mask=None):
        r = self.norm(r + self.dropout(self.attn(r, h_p, h_p, key_pad_mask)))
        return mask_fill(r, query_pad_mask)


class ReferenceTransformer(nn.Module):
    """R[0] = H_v; R[i] = LayerNorm(R[i-1] + MHA(query=R[i-1], key=value=H_p))."""

    def __init__(self, n_layers: int, dim: int, heads: int, dropout: float = 0.1):
        super().__init__()
        if n_layers < 0:
            raise ValueError("number of reference layers must be >= 0")
        self.dim = dim
        self.layers = nn.ModuleList(ReferenceLayer(dim, heads, dropout) for _ in range(n_layers))

    def forward(self, h_v, h_p, v_pad_mask=None, p_pad_mask=None):
        check_dim(h_v, self.dim, "ReferenceTransformer query")
        check_dim(h_p, self.dim, "ReferenceTransformer key")
        r = h_v
        for layer in self.layers:
            r = layer(r, h_p, v_pad_mask, p_pad_mask)
        return r


class SemanticAttention(nn.Module):
    def __init__(self, block: BlockConfig):
        super().__init__()
        self.layers = nn.ModuleList(
            ConformerBlock(block.hidden_dim, block.heads, block.conv_kernel, block.ff_expansion, block.dropout)
            for _ in range(block.conformer_layers)
        )

    def forward(self, x, pad_mask=None):
        for layer in self.layers:
            x = layer(x, pad_mask)
        return x


class LinguisticEncoder(nn.Module):
    def __init__(self, visual_dim: int, n_phonemes: int, phoneme_dim: int, block: BlockConfig, sra: SRAConfig):
        super().__init__()
        self.map_visual = VisualMapping(visual_dim, block, sra.visual_encoder_layers)
        self.map_phoneme = PhonemeMapping(n_phonemes, phoneme_dim, block, sra.phoneme_encoder_layers)
        self.reference = ReferenceTransformer(sra.n_reference_layers, block.hidden_dim, block.heads, block.dropout)
        self.semantic = SemanticAttention(block)

    def forward(self, e_v, phonemes, v_pad_mask=None, p_pad_mask=None, no_l2t_sra: bool = False):
        h_v = self.map_visual(e_v, v_pad_mask)
        if no_l2t_sra:
            # the phoneme stream is never touched, so E_ling cannot depend on it
            return self.semantic(h_v, v_pad_mask)
        h_p = self.map_phoneme(phonemes, p_pad_mask)
        r = self.reference(h_v, h_p, v_pad_mask, p_pad_mask)
        return self.semantic(r, v_pad_mask)
