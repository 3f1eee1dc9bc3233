"""The full dual-path model: semantic branch, acoustic branch, decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

import torch
from torch import nn

from .acoustic import AcousticEncoder
from .blocks import BlockConfig, init_parameters, lengths_to_pad_mask
from .decoder import MEL_PER_UNIT, MEL_PER_VIDEO_FRAME, SpecLingDecoder
from .linguistic import LinguisticEncoder, SRAConfig
from .providers import PHONEME_INVENTORY


@dataclass(frozen=True)
class AblationFlags:
    no_l2t_sra: bool = False
    no_acoustic_branch: bool = False
    no_energy_predictor: bool = False


@dataclass(frozen=True)
class ModelConfig:
    block: BlockConfig = field(default_factory=BlockConfig)
    sra: SRAConfig = field(default_factory=SRAConfig)
    visual_dim: int = 768
    phoneme_dim: int = 256
    timbre_dim: int = 256
    n_phonemes: int = len(PHONEME_INVENTORY)
    n_mels: int = 80
    n_units: int = 200
    prompt_blocks: int = 2
    unit_blocks: int = 2
    mel_decoder_channels: int = 256

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        block = BlockConfig(**d.pop("block", {}))
        sra = SRAConfig(**d.pop("sra", {}))
        return cls(block=block, sra=sra, **d)


def toy_config(dim: int = 8, heads: int = 2, **overrides) -> ModelConfig:
    """Reduced-width configuration for gradient checks and fast tests."""
    block = BlockConfig(hidden_dim=dim, heads=heads, fft_blocks_per_generator=1, conformer_layers=1,
                        conv_kernel=3, dropout=0.0, ff_expansion=2)
    base = dict(block=block, sra=SRAConfig(1, 1, 1), visual_dim=dim, phoneme_dim=dim, timbre_dim=dim,
                n_mels=dim, n_units=dim, prompt_blocks=1, unit_blocks=1, mel_decoder_channels=dim)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class Batch:
    """Padded batch.  Lengths are per-utterance frame counts at each rate."""

    visual: torch.Tensor          # B x T_v x D_v
    visual_lengths: torch.Tensor  # B
    phonemes: torch.Tensor        # B x T_p (int64)
    phoneme_lengths: torch.Tensor
    prompt: torch.Tensor          # B x T_r x n_mels
    prompt_lengths: torch.Tensor
    timbre: torch.Tensor          # B x D_s
    f0: torch.Tensor | None = None       # B x T_v, Hz
    energy: torch.Tensor | None = None   # B x T_v, log1p(frame energy)
    mel: torch.Tensor | None = None      # B x T_mel x n_mels
    units: torch.Tensor | None = None    # B x T_u (int64)
    ids: list = field(default_factory=list)

    def to(self, dtype=None, device=None) -> "Batch":
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, torch.Tensor):
                v = v.to(device=device, dtype=dtype if v.is_floating_point() and dtype else None)
            out[f.name] = v
        return Batch(**out)


@dataclass
class DecoderOutput:
    mel_coarse: torch.Tensor
    mel_fine: torch.Tensor
    unit_logits: torch.Tensor
    pitch_pred: torch.Tensor
    energy_pred: torch.Tensor
    excitation: torch.Tensor
    formant: torch.Tensor
    e_ling: torch.Tensor
    visual_pad_mask: torch.Tensor
    mel_pad_mask: torch.Tensor
    unit_pad_mask: torch.Tensor


class Lip2Speech(nn.Module):
    def __init__(self, config: ModelConfig | None = None, flags: AblationFlags | None = None, seed: int | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        self.flags = flags or AblationFlags()
        c = self.config
        with torch.random.fork_rng(enabled=seed is not None):
            if seed is not None:
                torch.manual_seed(seed)
            self.linguistic = LinguisticEncoder(c.visual_dim, c.n_phonemes, c.phoneme_dim, c.block, c.sra)
            self.acoustic = AcousticEncoder(c.n_mels, c.timbre_dim, c.block, c.prompt_blocks)
            self.decoder = SpecLingDecoder(c.block, c.n_mels, c.n_units, c.mel_decoder_channels, c.unit_blocks)
            init_parameters(self)

    def forward(self, batch: Batch, teacher_forcing: bool | None = None, flags: AblationFlags | None = None) -> DecoderOutput:
        flags = flags or self.flags
        if teacher_forcing is None:
            teacher_forcing = self.training
        t_v = batch.visual.shape[1]
        v_mask = lengths_to_pad_mask(batch.visual_lengths, t_v)
        mel_mask = v_mask.repeat_interleave(MEL_PER_VIDEO_FRAME, dim=1)
        unit_mask = mel_mask[:, ::MEL_PER_UNIT]
        p_mask = lengths_to_pad_mask(batch.phoneme_lengths, batch.phonemes.shape[1])

        e_ling = self.linguistic(batch.visual, batch.phonemes, v_mask, p_mask, no_l2t_sra=flags.no_l2t_sra)

        if flags.no_acoustic_branch:
            acoustic_in = None
            pitch_pred = torch.zeros(e_ling.shape[:2], dtype=e_ling.dtype, device=e_ling.device)
            energy_pred = torch.zeros_like(pitch_pred)
        else:
            r_mask = lengths_to_pad_mask(batch.prompt_lengths, batch.prompt.shape[1])
            acoustic_in, pitch_pred, energy_pred = self.acoustic(
                e_ling, batch.prompt, batch.timbre, v_mask, r_mask,
                f0_target=batch.f0, energy_target=batch.energy,
                teacher_forcing=teacher_forcing, use_energy=not flags.no_energy_predictor,
            )
            if not self.training:
                pitch_pred = pitch_pred.clamp_min(0.0)

        out = self.decoder(e_ling, acoustic_in, mel_mask, unit_mask)
        return DecoderOutput(
            mel_coarse=out["mel_coarse"],
            mel_fine=out["mel_fine"],
            unit_logits=out["unit_logits"],
            pitch_pred=pitch_pred,
            energy_pred=energy_pred,
            excitation=out["excitation"],
            formant=out["formant"],
            e_ling=e_ling,
            visual_pad_mask=v_mask,
            mel_pad_mask=mel_mask,
            unit_pad_mask=unit_mask,
        )

    def with_flags(self, flags: AblationFlags) -> "Lip2Speech":
        self.flags = replace(flags)
        return self
