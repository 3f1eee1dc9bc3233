"""Per-utterance training examples and batch collation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .acoustic import PROMPT_SECONDS
from .decoder import MEL_PER_UNIT, MEL_PER_VIDEO_FRAME
from .model import Batch
from .providers import StubTimbreEncoder


@dataclass
class Example:
    id: str
    visual: np.ndarray      # T_v x D_v
    phonemes: np.ndarray    # T_p
    mel: np.ndarray         # 4*T_v x n_mels (log-mel target)
    f0: np.ndarray          # T_v, Hz
    energy: np.ndarray      # T_v, log1p(frame energy)
    units: np.ndarray | None = None  # 2*T_v

    @property
    def n_video_frames(self) -> int:
        return self.visual.shape[0]


def pool_f0(f0: np.ndarray, voiced: np.ndarray, factor: int = MEL_PER_VIDEO_FRAME) -> np.ndarray:
    """Mean of voiced frames in each group of ``factor``; all-unvoiced groups give 0."""
    n = len(f0) // factor
    f = f0[: n * factor].reshape(n, factor)
    v = voiced[: n * factor].reshape(n, factor)
    counts = v.sum(1)
    sums = np.where(v, f, 0.0).sum(1)
    return np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)


def pool_energy(energy: np.ndarray, factor: int = MEL_PER_VIDEO_FRAME) -> np.ndarray:
    """log1p of the group-mean frame energy."""
    n = len(energy) // factor
    return np.log1p(energy[: n * factor].reshape(n, factor).mean(1))


def align_lengths(visual: np.ndarray, mel: np.ndarray, f0: np.ndarray, voiced: np.ndarray,
                  energy: np.ndarray, units: np.ndarray | None = None):
    """Truncate every stream to ``T_v = min(visual frames, mel frames // 4)``."""
    t_v = min(visual.shape[0], mel.shape[0] // MEL_PER_VIDEO_FRAME)
    if units is not None:
        t_v = min(t_v, len(units) * MEL_PER_UNIT // MEL_PER_VIDEO_FRAME)
    if t_v < 1:
        raise ValueError("utterance too short: fewer than one video frame of audio")
    t_mel = t_v * MEL_PER_VIDEO_FRAME
    return (
        visual[:t_v],
        mel[:t_mel],
        pool_f0(f0[:t_mel], voiced[:t_mel]),
        pool_energy(energy[:t_mel]),
        None if units is None else units[: t_mel // MEL_PER_UNIT],
    )


def prompt_window(n_frames: int, hop_seconds: float, start: int | None = None,
                  rng: np.random.Generator | None = None, seconds: float = PROMPT_SECONDS) -> slice:
    """Frame slice for a ``seconds``-long prompt: random start if ``rng`` is given,
    else ``start``, else 25% into the utterance."""
    length = min(n_frames, int(round(seconds / hop_seconds)))
    last = n_frames - length
    if rng is not None:
        s = int(rng.integers(0, last + 1))
    elif start is not None:
        s = min(max(start, 0), last)
    else:
        s = min(int(0.25 * n_frames), last)
    return slice(s, s + length)


def _pad(arrays, dtype) -> torch.Tensor:
    longest = max(a.shape[0] for a in arrays)
    out = np.zeros((len(arrays), longest) + arrays[0].shape[1:], dtype=dtype)
    for i, a in enumerate(arrays):
        out[i, : a.shape[0]] = a
    return torch.from_numpy(out)


def collate(
    examples: list[Example],
    timbre_encoder: StubTimbreEncoder,
    hop_seconds: float = 0.01,
    rng: np.random.Generator | None = None,
    prompts: list[np.ndarray] | None = None,
) -> Batch:
    """Pad a list of examples into a :class:`Batch`.

    Each utterance's speaker prompt is a 0.5 s window of its own mel (random
    position when ``rng`` is given) unless ``prompts`` supplies mel matrices.
    The timbre vector is computed from the prompt.
    """
    if prompts is None:
        prompts = [ex.mel[prompt_window(len(ex.mel), hop_seconds, rng=rng)] for ex in examples]
    timbre = np.stack([timbre_encoder.embed(p) for p in prompts])
    has_units = all(ex.units is not None for ex in examples)
    return Batch(
        visual=_pad([ex.visual for ex in examples], np.float32),
        visual_lengths=torch.tensor([ex.visual.shape[0] for ex in examples]),
        phonemes=_pad([ex.phonemes for ex in examples], np.int64),
        phoneme_lengths=torch.tensor([len(ex.phonemes) for ex in examples]),
        prompt=_pad(prompts, np.float32),
        prompt_lengths=torch.tensor([len(p) for p in prompts]),
        timbre=torch.from_numpy(timbre.astype(np.float32)),
        f0=_pad([ex.f0 for ex in examples], np.float32),
        energy=_pad([ex.energy for ex in examples], np.float32),
        mel=_pad([ex.mel for ex in examples], np.float32),
        units=_pad([ex.units for ex in examples], np.int64) if has_units else None,
        ids=[ex.id for ex in examples],
    )
