"""
Audio features and Griffin-Lim
==============================

Log-mel frames, pitch and energy for a synthetic vowel, then a
mel-to-waveform round trip.
"""

import numpy as np

from lip2speech.audio import AudioWaveform, SpectrogramConfig, analyze

cfg = SpectrogramConfig()

# a 1 s "vowel": 180 Hz pulse train through two resonances
rate = cfg.rate
t = np.arange(rate) / rate
source = np.sign(np.sin(2 * np.pi * 180 * t))
spectrum = np.fft.rfft(source)
freqs = np.fft.rfftfreq(len(source), 1 / rate)
envelope = 1 / (1 + ((freqs - 700) / 120) ** 2) + 0.5 / (1 + ((freqs - 1200) / 150) ** 2)
wav = AudioWaveform(0.5 * np.fft.irfft(spectrum * envelope, len(source)), rate)

# one call gives mel frames plus the prosody track on the same 10 ms grid
feats = analyze(wav, cfg)
print("mel frames:", feats.mel.frames.shape)  # (101, 80)
voiced = feats.prosody.voiced
print(f"voiced frames: {voiced.sum()} / {len(voiced)}")
print(f"median F0: {np.median(feats.prosody.f0_hz[voiced]):.1f} Hz")

# back to a waveform; the units argument is accepted but unused by this vocoder
from lip2speech.vocoder import griffin_lim_vocode

out = griffin_lim_vocode(feats.mel, cfg, iterations=60)
print(f"vocoded {out.duration:.2f} s, peak {np.abs(out.samples).max():.2f}")
