"""Source-filter decoder: excitation and formant generators, additive fusion,
mel post-net, and the speech-unit (linguistic) predictor."""

from __future__ import annotations

import logging

import torch
from torch import nn

from .blocks import BlockConfig, FFTStack, check_dim, mask_fill
from .linguistic import add_positions

logger = logging.getLogger(__name__)

MEL_PER_VIDEO_FRAME = 4
MEL_PER_UNIT = 2


def length_regulate(x: torch.Tensor, factor: int) -> torch.Tensor:
    """Repeat every frame ``factor`` times along the time axis (dim 1)."""
    if factor < 1:
        raise ValueError(f"length-regulation factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    return torch.repeat_interleave(x, factor, dim=1)


def pool_pairs(x: torch.Tensor) -> torch.Tensor:
    """Mean over consecutive frame pairs; an odd trailing frame is dropped."""
    t = x.shape[1]
    if t % 2:
        logger.warning("odd mel length %d: dropping the final frame before unit pooling", t)
        x = x[:, : t - 1]
    return 0.5 * (x[:, 0::2] + x[:, 1::2])


class Generator(nn.Module):
    """PE + FFT blocks + linear projection to mel bins.  Returns (mel, hidden)."""

    def __init__(self, block: BlockConfig, n_mels: int):
        super().__init__()
        self.dim = block.hidden_dim
        self.blocks = FFTStack(block.fft_blocks_per_generator, block.hidden_dim, block.heads,
                               block.conv_kernel, block.ff_expansion, block.dropout)
        self.proj = nn.Linear(block.hidden_dim, n_mels)

    def forward(self, x, pad_mask=None):
        check_dim(x, self.dim, type(self).__name__)
        hidden = self.blocks(mask_fill(add_positions(x), pad_mask), pad_mask)
        return mask_fill(self.proj(hidden), pad_mask), hidden


class MelDecoder(nn.Module):
    """Five-layer 1-D CNN producing a residual correction to the coarse mel."""

    def __init__(self, n_mels: int, channels: int = 256, kernel: int = 5, n_layers: int = 5, dropout: float = 0.1):
        super().__init__()
        dims = [n_mels] + [channels] * (n_layers - 1) + [n_mels]
        self.convs = nn.ModuleList(
            nn.Conv1d(dims[i], dims[i + 1], kernel, padding=kernel // 2) for i in range(n_layers)
        )
        self.dropout = nn.Dropout(dropout)

    def forward(self, mel, pad_mask=None):
        x = mask_fill(mel, pad_mask).transpose(1, 2)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = self.dropout(torch.tanh(x))
            x = mask_fill(x.transpose(1, 2), pad_mask).transpose(1, 2)
        return x.transpose(1, 2)


def fuse_and_decode(excitation, formant, mel_decoder: MelDecoder, pad_mask=None):
    """mel_coarse = excitation + formant; mel_fine = mel_coarse + MelDecoder(mel_coarse)."""
    if excitation.shape != formant.shape:
        raise ValueError(f"excitation {tuple(excitation.shape)} and formant {tuple(formant.shape)} differ")
    coarse = excitation + formant
    fine = coarse + mel_decoder(coarse, pad_mask)
    return coarse, mask_fill(fine, pad_mask)


class UnitPredictor(nn.Module):
    """Pairwise mean-pool to the unit rate, 2 FFT blocks, logits over the codebook."""

    def __init__(self, block: BlockConfig, n_units: int, n_blocks: int = 2):
        super().__init__()
        self.dim = block.hidden_dim
        self.blocks = FFTStack(n_blocks, block.hidden_dim, block.heads, block.conv_kernel,
                               block.ff_expansion, block.dropout)
        self.head = nn.Linear(block.hidden_dim, n_units)

    def forward(self, hidden, unit_pad_mask=None):
        check_dim(hidden, self.dim, "UnitPredictor")
        x = pool_pairs(hidden)
        x = self.blocks(mask_fill(x, unit_pad_mask), unit_pad_mask)
        return self.head(x)


class SpecLingDecoder(nn.Module):
    def __init__(self, block: BlockConfig, n_mels: int = 80, n_units: int = 200,
                 mel_decoder_channels: int = 256, unit_blocks: int = 2):
        super().__init__()
        self.excitation = Generator(block, n_mels)
        self.formant = Generator(block, n_mels)
        self.mel_decoder = MelDecoder(n_mels, mel_decoder_channels, dropout=block.dropout)
        self.unit_predictor = UnitPredictor(block, n_units, unit_blocks)
        # stands in for the acoustic input when the acoustic branch is ablated
        self.constant_excitation = nn.Parameter(torch.zeros(block.hidden_dim))

    def forward(self, e_ling, acoustic_in, mel_pad_mask=None, unit_pad_mask=None):
        """``acoustic_in`` is at linguistic rate, or None for the acoustic ablation."""
        semantic_in = length_regulate(e_ling, MEL_PER_VIDEO_FRAME)
        if acoustic_in is None:
            exc_in = self.constant_excitation.expand_as(semantic_in)
        else:
            exc_in = length_regulate(acoustic_in, MEL_PER_VIDEO_FRAME)
        formant, formant_hidden = self.formant(semantic_in, mel_pad_mask)
        excitation, excitation_hidden = self.excitation(exc_in, mel_pad_mask)
        coarse, fine = fuse_and_decode(excitation, formant, self.mel_decoder, mel_pad_mask)
        logits = self.unit_predictor(excitation_hidden + formant_hidden, unit_pad_mask)
        return {
            "excitation": excitation,
            "formant": formant,
            "mel_coarse": coarse,
            "mel_fine": fine,
            "unit_logits": logits,
        }
