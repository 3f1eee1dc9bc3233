"""
The dual-path model at toy width
================================

Frame rates through the network, and what each ablation flag cuts.
"""

import dataclasses

import torch

from lip2speech.model import AblationFlags, Batch, Lip2Speech, toy_config

config = toy_config(dim=16, heads=2)
model = Lip2Speech(config, seed=0).eval()
print(f"{sum(p.numel() for p in model.parameters()):,} parameters")

# 2 s of video at 25 fps, 12 phonemes and a 0.5 s speaker prompt
t_v = 50
g = torch.Generator().manual_seed(0)
batch = Batch(
    visual=torch.randn(1, t_v, config.visual_dim, generator=g),
    visual_lengths=torch.tensor([t_v]),
    phonemes=torch.randint(0, config.n_phonemes, (1, 12), generator=g),
    phoneme_lengths=torch.tensor([12]),
    prompt=torch.randn(1, 50, config.n_mels, generator=g),
    prompt_lengths=torch.tensor([50]),
    timbre=torch.randn(1, config.timbre_dim, generator=g),
)

with torch.no_grad():
    out = model(batch)
# mels run at 100 Hz (4 per video frame), units at 50 Hz
print("mel:", tuple(out.mel_fine.shape), "unit logits:", tuple(out.unit_logits.shape))

# coarse mel is exactly excitation + formant
print("coarse == excitation + formant:", torch.equal(out.mel_coarse, out.excitation + out.formant))

# swap the speaker prompt: only the excitation path should notice
other = dataclasses.replace(batch, prompt=torch.randn(1, 50, config.n_mels, generator=g))
with torch.no_grad():
    swapped = model(other)
    ablated = [model(b, flags=AblationFlags(no_acoustic_branch=True)).mel_fine for b in (batch, other)]
print("formant unchanged by prompt:", torch.equal(out.formant, swapped.formant))
print("mel changed by prompt:", not torch.equal(out.mel_fine, swapped.mel_fine))
print("mel unchanged without acoustic branch:", torch.equal(*ablated))
