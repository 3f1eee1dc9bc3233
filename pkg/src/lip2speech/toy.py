"""Deterministic synthetic corpus for smoke tests and demos.

Speech-like audio is produced by a crude source-filter synthesizer: a
glottal pulse train (voiced phonemes) or white noise (fricatives) shaped by
per-phoneme formant resonators.  Visual features come from the synthetic
provider at run time, so only audio, a manifest and the transcripts are
written.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import scipy.signal

from .audio import AudioWaveform, peak_normalize, save_wav
from .io import UtteranceRecord, write_manifest
from .providers import PHONEME_INVENTORY, TableG2P

RATE = 16000

TOY_UTTERANCES = (
    ("toy001", "she can see the green place now", (150.0, 115.0)),
    ("toy002", "we know what you say about this voice", (210.0, 250.0)),
)

_VOWEL_FORMANTS = {
    "AA": (730, 1090, 2440), "AE": (660, 1720, 2410), "AH": (520, 1190, 2390),
    "AO": (570, 840, 2410), "AW": (640, 1200, 2450), "AY": (660, 1500, 2500),
    "EH": (530, 1840, 2480), "ER": (490, 1350, 1690), "EY": (480, 2000, 2600),
    "IH": (390, 1990, 2550), "IY": (270, 2290, 3010), "OW": (450, 900, 2400),
    "OY": (500, 1000, 2400), "UH": (440, 1020, 2240), "UW": (300, 870, 2240),
}
_FRICATIVES = {"S": 5500, "SH": 3000, "F": 4500, "TH": 4000, "HH": 1500, "Z": 5000,
               "ZH": 2800, "V": 3500, "CH": 3200, "JH": 3000}
_STOPS = {"P", "T", "K", "B", "D", "G"}


def _resonator(x: np.ndarray, freq: float, bandwidth: float) -> np.ndarray:
    r = np.exp(-np.pi * bandwidth / RATE)
    theta = 2 * np.pi * freq / RATE
    a = [1.0, -2 * r * np.cos(theta), r * r]
    return scipy.signal.lfilter([1.0 - r], a, x)


def _formants(ph: str, rng: np.random.Generator) -> tuple[float, float, float]:
    if ph in _VOWEL_FORMANTS:
        return _VOWEL_FORMANTS[ph]
    # sonorant consonants (L, M, N, R, W, Y, NG, ...) get fixed low formants
    idx = PHONEME_INVENTORY.index(ph)
    return (250 + 10 * idx, 1100 + 25 * idx, 2500)


def synthesize(phonemes: list[str], duration: float, f0_range: tuple[float, float], seed: int) -> AudioWaveform:
    """Concatenate equal-length phoneme segments with a linear F0 glide."""
    rng = np.random.default_rng(seed)
    n = int(round(duration * RATE))
    bounds = np.linspace(0, n, len(phonemes) + 1).astype(int)
    f0 = np.linspace(f0_range[0], f0_range[1], n)
    phase = np.cumsum(f0 / RATE)
    pulses = np.diff(np.floor(phase), prepend=0.0)  # one impulse per glottal cycle
    source = scipy.signal.lfilter([1.0], [1.0, -0.97], pulses)
    noise = rng.standard_normal(n)
    out = np.zeros(n)
    for ph, s, e in zip(phonemes, bounds[:-1], bounds[1:]):
        seg = np.zeros(e - s)
        if ph == "sil":
            seg = 1e-3 * noise[s:e]
        elif ph in _FRICATIVES:
            seg = 0.3 * _resonator(noise[s:e], _FRICATIVES[ph], 800.0)
            if ph in ("Z", "ZH", "V", "JH"):
                seg = seg + 0.5 * _resonator(source[s:e], 250.0, 100.0)
        elif ph in _STOPS:
            burst = np.zeros(e - s)
            k = min(len(burst), int(0.02 * RATE))
            burst[:k] = noise[s:s + k]
            seg = 0.4 * _resonator(burst, 2500.0, 1500.0)
        else:
            x = source[s:e]
            for freq, bw in zip(_formants(ph, rng), (80.0, 100.0, 150.0)):
                seg = seg + _resonator(x, freq, bw)
        # 5 ms raised-cosine fades avoid clicks at segment joins
        ramp = min(80, len(seg) // 2)
        if ramp:
            fade = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, ramp))
            seg[:ramp] *= fade
            seg[-ramp:] *= fade[::-1]
        out[s:e] = seg
    out += 1e-4 * rng.standard_normal(n)  # dither: no two frames are bit-identical
    return peak_normalize(AudioWaveform(out, RATE))


def make_toy_corpus(out_dir: str | os.PathLike, duration: float = 3.0, seed: int = 0,
                    utterances=TOY_UTTERANCES) -> Path:
    """Write ``audio/*.wav`` and ``manifest.tsv`` under ``out_dir``; return the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    g2p = TableG2P.bundled()
    records = []
    for n, (uid, text, f0_range) in enumerate(utterances):
        ids = g2p.ids_for(text)
        phones = ["sil"] + [PHONEME_INVENTORY[i] for i in ids] + ["sil"]
        wav = synthesize(phones, duration, f0_range, seed * 1000 + n)
        path = out_dir / "audio" / f"{uid}.wav"
        save_wav(path, wav)
        records.append(UtteranceRecord(uid, str(path.resolve()), None, text, "train"))
    manifest = out_dir / "manifest.tsv"
    write_manifest(manifest, records)
    return manifest


if __name__ == "__main__":
    import argparse

    ap = argparse.ArgumentParser(description="Write the synthetic two-utterance toy corpus.")
    ap.add_argument("out_dir")
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    print(make_toy_corpus(a.out_dir, seed=a.seed))
