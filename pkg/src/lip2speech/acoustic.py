"""Acoustic branch: speaker-prompt encoder, prompt/linguistic alignment,
pitch and energy predictors, and the prosody embedding."""

from __future__ import annotations

import torch
from torch import nn

from .blocks import BlockConfig, FFTStack, MultiHeadAttention, VariancePredictor, check_dim, mask_fill

PROMPT_SECONDS = 0.5
PITCH_SCALE = 100.0  # Hz; predictor output scale and embedding input divisor


class PromptEncoder(nn.Module):
    """Mel frames -> linear projection -> 2 FFT blocks (E_spk)."""

    def __init__(self, n_mels: int, block: BlockConfig, n_blocks: int = 2):
        super().__init__()
        self.n_mels = n_mels
        self.proj = nn.Linear(n_mels, block.hidden_dim)
        self.blocks = FFTStack(n_blocks, block.hidden_dim, block.heads, block.conv_kernel,
                               block.ff_expansion, block.dropout)

    def forward(self, mel, pad_mask=None):
        check_dim(mel, self.n_mels, "PromptEncoder")
        if mel.shape[1] < 1:
            raise ValueError("empty speaker prompt")
        return self.blocks(mask_fill(self.proj(mel), pad_mask), pad_mask)


class PromptAligner(nn.Module):
    """E_spk_ling = E_ling + MHA(query=E_ling, key=value=E_spk)."""

    def __init__(self, dim: int, heads: int, dropout: float = 0.1):
        super().__init__()
        self.dim = dim
        self.attn = MultiHeadAttention(dim, heads, dropout)
        self.dropout = nn.Dropout(dropout)

    def forward(self, e_ling, e_spk, ling_pad_mask=None, spk_pad_mask=None):
        check_dim(e_ling, self.dim, "PromptAligner query")
        check_dim(e_spk, self.dim, "PromptAligner key")
        out = e_ling + self.dropout(self.attn(e_ling, e_spk, e_spk, spk_pad_mask))
        return mask_fill(out, ling_pad_mask)


class ProsodyEmbedding(nn.Module):
    """Each scalar track through its own kernel-3 conv to the hidden width; summed.

    F0 enters divided by ``PITCH_SCALE``; energy enters in the log1p domain it
    is predicted in.  Passing ``energy=None`` injects no energy term.
    """

    def __init__(self, dim: int, kernel: int = 3):
        super().__init__()
        self.dim = dim
        self.pitch_conv = nn.Conv1d(1, dim, kernel, padding=kernel // 2)
        self.energy_conv = nn.Conv1d(1, dim, kernel, padding=kernel // 2)

    def forward(self, f0, energy=None, pad_mask=None):
        if energy is not None and energy.shape != f0.shape:
            raise ValueError(f"pitch/energy length mismatch: {tuple(f0.shape)} vs {tuple(energy.shape)}")
        if pad_mask is not None:
            f0 = f0.masked_fill(pad_mask, 0.0)
        out = self.pitch_conv((f0 / PITCH_SCALE).unsqueeze(1))
        if energy is not None:
            if pad_mask is not None:
                energy = energy.masked_fill(pad_mask, 0.0)
            out = out + self.energy_conv(energy.unsqueeze(1))
        return mask_fill(out.transpose(1, 2), pad_mask)


class AcousticEncoder(nn.Module):
    def __init__(self, n_mels: int, timbre_dim: int, block: BlockConfig, prompt_blocks: int = 2):
        super().__init__()
        h = block.hidden_dim
        self.prompt_encoder = PromptEncoder(n_mels, block, prompt_blocks)
        self.aligner = PromptAligner(h, block.heads, block.dropout)
        self.pitch_predictor = VariancePredictor(h, dropout=block.dropout, output_scale=PITCH_SCALE)
        self.energy_predictor = VariancePredictor(h, dropout=block.dropout)
        self.prosody_embedding = ProsodyEmbedding(h)
        self.timbre_proj = nn.Linear(timbre_dim, h)

    def forward(self, e_ling, prompt, timbre, ling_pad_mask=None, prompt_pad_mask=None,
                f0_target=None, energy_target=None, teacher_forcing=False, use_energy=True):
        """Return (acoustic decoder input at linguistic rate, pitch_pred, energy_pred)."""
        e_spk = self.prompt_encoder(prompt, prompt_pad_mask)
        e_spk_ling = self.aligner(e_ling, e_spk, ling_pad_mask, prompt_pad_mask)
        pitch_pred = self.pitch_predictor(e_spk_ling, ling_pad_mask)
        energy_pred = self.energy_predictor(e_spk_ling, ling_pad_mask) if use_energy else torch.zeros_like(pitch_pred)
        if teacher_forcing:
            if f0_target is None or (use_energy and energy_target is None):
                raise ValueError("teacher forcing needs ground-truth pitch and energy")
            f0_in, energy_in = f0_target, energy_target
        else:
            f0_in, energy_in = pitch_pred.clamp_min(0.0), energy_pred
        prosody = self.prosody_embedding(f0_in, energy_in if use_energy else None, ling_pad_mask)
        timbre_term = self.timbre_proj(timbre).unsqueeze(1)
        acoustic_in = mask_fill(e_spk_ling + prosody + timbre_term, ling_pad_mask)
        return acoustic_in, pitch_pred, energy_pred
