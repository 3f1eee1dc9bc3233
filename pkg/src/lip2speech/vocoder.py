"""Waveform generation from predicted mels.

The neural multi-input vocoder consumes (mel, speech units); any callable
with that signature can be plugged in.  The bundled fallback inverts the mel
filterbank with a pseudo-inverse and reconstructs phase by (fast)
Griffin-Lim, ignoring the units.
"""

from __future__ import annotations

from typing import Protocol

import numpy as np

from .audio import AudioError, AudioWaveform, MelSpectrogram, SpectrogramConfig, istft, mel_filterbank, stft
from .units import SpeechUnits


class Vocoder(Protocol):
    def __call__(self, mel: MelSpectrogram, units: SpeechUnits | None = None) -> AudioWaveform: ...


def mel_to_linear(mel: MelSpectrogram, cfg: SpectrogramConfig) -> np.ndarray:
    fb = mel_filterbank(cfg)
    return np.maximum(np.exp(mel.frames) @ np.linalg.pinv(fb).T, 0.0)


def griffin_lim_vocode(
    mel: MelSpectrogram,
    cfg: SpectrogramConfig = SpectrogramConfig(),
    iterations: int = 60,
    seed: int = 0,
    momentum: float = 0.99,
    units: SpeechUnits | None = None,
) -> AudioWaveform:
    """Fast Griffin-Lim (with momentum) on the pseudo-inverted magnitude.

    The output has ``(T_mel - 1) * hop`` samples, the inverse of centred
    framing.
    """
    if mel.frames.shape[1] != cfg.n_mels:
        raise AudioError(f"mel has {mel.frames.shape[1]} bands, vocoder config expects {cfg.n_mels}")
    if abs(mel.hop_seconds - cfg.hop_seconds) > 1e-9:
        raise AudioError(f"mel hop {mel.hop_seconds}s does not match vocoder hop {cfg.hop_seconds}s")
    if iterations < 0:
        raise AudioError("iterations must be >= 0")
    mag = mel_to_linear(mel, cfg)
    rng = np.random.default_rng(seed)
    angles = np.exp(2j * np.pi * rng.random(mag.shape))
    n_frames = mag.shape[0]
    prev = np.zeros_like(angles)
    for _ in range(iterations):
        rebuilt = stft(istft(mag * angles, cfg), cfg)[:n_frames]
        accel = rebuilt - (momentum / (1 + momentum)) * prev
        prev = rebuilt
        angles = accel / np.maximum(np.abs(accel), 1e-16)
    samples = istft(mag * angles, cfg)
    return AudioWaveform(np.clip(samples, -1.0, 1.0), cfg.rate)


class GriffinLimVocoder:
    def __init__(self, cfg: SpectrogramConfig = SpectrogramConfig(), iterations: int = 60, seed: int = 0):
        self.cfg, self.iterations, self.seed = cfg, iterations, seed

    def __call__(self, mel: MelSpectrogram, units: SpeechUnits | None = None) -> AudioWaveform:
        return griffin_lim_vocode(mel, self.cfg, self.iterations, self.seed, units=units)
