"""Audio analysis front-end.

Everything here is a pure function of its inputs: resampling, STFT framing,
linear and log-mel spectrograms, autocorrelation pitch tracking and frame
energy.  All training targets and most metric inputs are produced here.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from math import gcd

import numpy as np
import scipy.fft
import scipy.signal
from scipy.io import wavfile

logger = logging.getLogger(__name__)

TARGET_RATE = 16000
PEAK_LEVEL = 0.95


class AudioError(ValueError):
    pass


@dataclass
class AudioWaveform:
    samples: np.ndarray
    rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise AudioError("waveform must be mono (1-D)")
        if int(self.rate) <= 0:
            raise AudioError(f"sample rate must be positive, got {self.rate}")
        self.rate = int(self.rate)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.rate

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True)
class SpectrogramConfig:
    fft_size: int = 1024
    hop: int = 160
    win: int = 640
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5
    center: bool = True
    rate: int = TARGET_RATE

    def __post_init__(self):
        if not 0 < self.hop <= self.win <= self.fft_size:
            raise AudioError("need 0 < hop <= win <= fft_size")
        if self.n_mels < 1:
            raise AudioError("n_mels must be positive")
        if not 0 <= self.fmin < self.fmax <= self.rate / 2:
            raise AudioError("need 0 <= fmin < fmax <= rate/2")
        if self.log_floor <= 0:
            raise AudioError("log_floor must be positive")

    @property
    def hop_seconds(self) -> float:
        return self.hop / self.rate

    def n_frames(self, n_samples: int) -> int:
        if self.center:
            return 1 + n_samples // self.hop
        return 1 + (n_samples - self.fft_size) // self.hop


@dataclass
class LinearSpectrogram:
    frames: np.ndarray  # T x (fft_size // 2 + 1), magnitude

    def __len__(self):
        return self.frames.shape[0]


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # T x n_mels, natural-log magnitude
    hop_seconds: float = 0.01

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise AudioError("mel spectrogram must be a non-empty T x n_mels matrix")

    def __len__(self):
        return self.frames.shape[0]


@dataclass
class ProsodyTrack:
    f0_hz: np.ndarray
    voiced: np.ndarray
    energy: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self):
        return len(self.f0_hz)


# ---------------------------------------------------------------------------
# waveform I/O and conditioning


def load_wav(path: str | os.PathLike) -> AudioWaveform:
    """Read a mono linear-PCM file (16-bit int or 32-bit float)."""
    try:
        rate, data = wavfile.read(path)
    except (ValueError, OSError) as exc:
        raise AudioError(f"cannot read audio file {path}: {exc}") from exc
    if data.ndim != 1:
        raise AudioError(f"{path}: expected a single-channel file, got shape {data.shape}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise AudioError(f"{path}: unsupported sample type {data.dtype}")
    return AudioWaveform(samples, rate)


def save_wav(path: str | os.PathLike, wav: AudioWaveform) -> None:
    """Write 32-bit float PCM via a temp file so readers never see partial files."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        wavfile.write(fh, wav.rate, wav.samples.astype(np.float32))
    os.replace(tmp, path)


def peak_normalize(wav: AudioWaveform, level: float = PEAK_LEVEL) -> AudioWaveform:
    peak = np.max(np.abs(wav.samples)) if len(wav) else 0.0
    if peak == 0.0:
        return AudioWaveform(wav.samples.copy(), wav.rate)
    return AudioWaveform(wav.samples * (level / peak), wav.rate)


def resample(wav: AudioWaveform, target_rate: int) -> AudioWaveform:
    """Band-limited polyphase resampling to ``target_rate``."""
    if len(wav) == 0:
        raise AudioError("empty waveform")
    if target_rate <= 0:
        raise AudioError(f"target rate must be positive, got {target_rate}")
    if wav.rate == target_rate:
        return AudioWaveform(wav.samples.copy(), target_rate)
    g = gcd(wav.rate, target_rate)
    up, down = target_rate // g, wav.rate // g
    out = scipy.signal.resample_poly(wav.samples, up, down)
    # resample_poly yields ceil(n * up / down) samples; keep the exact duration
    n_out = int(round(len(wav) * target_rate / wav.rate))
    return AudioWaveform(out[:n_out], target_rate)


def prepare_waveform(wav: AudioWaveform, rate: int = TARGET_RATE) -> AudioWaveform:
    """Ingestion recipe: resample to ``rate`` then peak-normalize to 0.95."""
    return peak_normalize(resample(wav, rate))


# ---------------------------------------------------------------------------
# STFT


def _analysis_window(cfg: SpectrogramConfig) -> np.ndarray:
    win = scipy.signal.get_window("hann", cfg.win, fftbins=True)
    left = (cfg.fft_size - cfg.win) // 2
    out = np.zeros(cfg.fft_size)
    out[left:left + cfg.win] = win
    return out


def _pad_center(x: np.ndarray, pad: int) -> np.ndarray:
    mode = "reflect" if len(x) > pad else "constant"
    return np.pad(x, pad, mode=mode)


def stft(samples: np.ndarray, cfg: SpectrogramConfig) -> np.ndarray:
    """Complex STFT, shape T x (fft_size // 2 + 1)."""
    x = np.asarray(samples, dtype=np.float64)
    if cfg.center:
        x = _pad_center(x, cfg.fft_size // 2)
    elif len(x) < cfg.fft_size:
        raise AudioError(
            f"waveform of {len(x)} samples is shorter than one analysis window ({cfg.fft_size})"
        )
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.fft_size)[:: cfg.hop]
    return np.fft.rfft(frames * _analysis_window(cfg), axis=1)


def istft(spec: np.ndarray, cfg: SpectrogramConfig) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`.

    With ``center`` the output has ``(T - 1) * hop`` samples.
    """
    window = _analysis_window(cfg)
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=1) * window
    n_frames = frames.shape[0]
    total = (n_frames - 1) * cfg.hop + cfg.fft_size
    out = np.zeros(total)
    norm = np.zeros(total)
    sq = window ** 2
    for t in range(n_frames):
        s = t * cfg.hop
        out[s:s + cfg.fft_size] += frames[t]
        norm[s:s + cfg.fft_size] += sq
    nz = norm > 1e-8
    out[nz] /= norm[nz]
    if cfg.center:
        pad = cfg.fft_size // 2
        out = out[pad:total - pad]
    return out


def linear_spectrogram(wav: AudioWaveform, cfg: SpectrogramConfig) -> LinearSpectrogram:
    _check_rate(wav, cfg)
    return LinearSpectrogram(np.abs(stft(wav.samples, cfg)))


def _check_rate(wav: AudioWaveform, cfg: SpectrogramConfig) -> None:
    if wav.rate != cfg.rate:
        raise AudioError(f"waveform rate {wav.rate} does not match config rate {cfg.rate}")


# ---------------------------------------------------------------------------
# mel


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(cfg: SpectrogramConfig) -> np.ndarray:
    """n_mels + 2 edge frequencies; band k spans edges[k]..edges[k+2] and peaks at edges[k+1]."""
    return mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))


def mel_filterbank(cfg: SpectrogramConfig) -> np.ndarray:
    """Unnormalized triangular filters, shape n_mels x (fft_size // 2 + 1)."""
    freqs = np.fft.rfftfreq(cfg.fft_size, 1.0 / cfg.rate)
    edges = mel_band_edges(cfg)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_spectrogram(wav: AudioWaveform, cfg: SpectrogramConfig) -> MelSpectrogram:
    lin = linear_spectrogram(wav, cfg)
    return mel_from_linear(lin, cfg)


def mel_from_linear(lin: LinearSpectrogram, cfg: SpectrogramConfig) -> MelSpectrogram:
    mel = lin.frames @ mel_filterbank(cfg).T
    return MelSpectrogram(np.log(np.maximum(mel, cfg.log_floor)), cfg.hop_seconds)


def mel_cepstrum(mel: MelSpectrogram, n_coeffs: int, skip_c0: bool = False) -> np.ndarray:
    """Orthonormal DCT-II of each log-mel frame."""
    cep = scipy.fft.dct(mel.frames, type=2, norm="ortho", axis=1)
    start = 1 if skip_c0 else 0
    if start + n_coeffs > cep.shape[1]:
        raise AudioError(f"cannot take {n_coeffs} coefficients from {cep.shape[1]} mel bands")
    return cep[:, start:start + n_coeffs]


# ---------------------------------------------------------------------------
# pitch and energy


@dataclass(frozen=True)
class F0Config:
    f0_min: float = 65.0
    f0_max: float = 600.0
    hop_seconds: float = 0.010
    voicing_threshold: float = 0.45
    silence_threshold: float = 0.03
    octave_cost: float = 0.01
    periods_per_window: float = 3.0

    def __post_init__(self):
        if not 0 < self.f0_min < self.f0_max:
            raise AudioError(f"f0_min ({self.f0_min}) must be below f0_max ({self.f0_max})")
        if self.hop_seconds <= 0:
            raise AudioError("hop_seconds must be positive")


def extract_f0(
    wav: AudioWaveform,
    f0_min: float = 65.0,
    f0_max: float = 600.0,
    hop_seconds: float = 0.010,
    config: F0Config | None = None,
) -> ProsodyTrack:
    """Normalized cross-correlation pitch tracker.

    One estimate per hop with frames centered at ``t * hop``, so the frame
    count matches a centered spectrogram with the same hop.  A frame is voiced
    when its best correlation peak reaches the voicing threshold and its local
    amplitude is not below ``silence_threshold`` of the global peak.  Among
    candidate peaks a small per-octave bonus favours shorter lags, which
    suppresses sub-octave picks on strongly periodic input.
    """
    cfg = config or F0Config(f0_min=f0_min, f0_max=f0_max, hop_seconds=hop_seconds)
    rate = wav.rate
    x = wav.samples
    hop = int(round(cfg.hop_seconds * rate))
    n_frames = 1 + len(x) // hop
    lag_min = max(2, int(np.floor(rate / cfg.f0_max)))
    lag_max = int(np.ceil(rate / cfg.f0_min))
    width = int(round(cfg.periods_per_window * rate / cfg.f0_min))
    half = width // 2

    f0 = np.zeros(n_frames)
    voiced = np.zeros(n_frames, dtype=bool)
    global_peak = np.max(np.abs(x)) if len(x) else 0.0
    if global_peak == 0.0:
        return ProsodyTrack(f0, voiced)

    seg_len = width + lag_max + 2
    padded = np.pad(x, (half, seg_len + n_frames * hop), mode="constant")
    segs = np.lib.stride_tricks.sliding_window_view(padded, seg_len)[::hop][:n_frames]
    head = segs[:, :width]

    n_fft = scipy.fft.next_fast_len(seg_len + width)
    cross = scipy.fft.irfft(
        np.conj(scipy.fft.rfft(head, n_fft, axis=1)) * scipy.fft.rfft(segs, n_fft, axis=1),
        n_fft,
        axis=1,
    )[:, : lag_max + 2]
    csum = np.concatenate([np.zeros((n_frames, 1)), np.cumsum(segs ** 2, axis=1)], axis=1)
    lags = np.arange(lag_max + 2)
    e_lag = csum[:, lags + width] - csum[:, lags]
    e_0 = e_lag[:, :1]
    denom = np.sqrt(np.maximum(e_0 * e_lag, 0.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        nccf = np.where(denom > 0, cross / np.where(denom > 0, denom, 1.0), 0.0)

    # parabolic refinement around every lag in the search range
    tau = np.arange(lag_min, lag_max + 1)
    left, mid, right = nccf[:, tau - 1], nccf[:, tau], nccf[:, tau + 1]
    is_peak = (mid > left) & (mid >= right)
    curvature = left - 2 * mid + right
    with np.errstate(invalid="ignore", divide="ignore"):
        offset = np.where(curvature < 0, 0.5 * (left - right) / curvature, 0.0)
    offset = np.clip(offset, -0.5, 0.5)
    value = mid - 0.25 * (left - right) * offset
    period = (tau + offset) / rate
    strength = value - cfg.octave_cost * np.log2(cfg.f0_min * period)
    strength = np.where(is_peak, strength, -np.inf)

    best = np.argmax(strength, axis=1)
    rows = np.arange(n_frames)
    has_peak = np.isfinite(strength[rows, best])
    best_value = value[rows, best]
    best_f0 = 1.0 / period[rows, best]

    local_peak = np.max(np.abs(head), axis=1)
    loud = local_peak >= cfg.silence_threshold * global_peak
    ok = (
        has_peak
        & loud
        & (best_value >= cfg.voicing_threshold)
        & (best_f0 >= cfg.f0_min)
        & (best_f0 <= cfg.f0_max)
    )
    f0[ok] = best_f0[ok]
    voiced[ok] = True
    return ProsodyTrack(f0, voiced)


def frame_energy(spec: LinearSpectrogram) -> np.ndarray:
    """L2 norm of each frame's magnitude bins."""
    return np.linalg.norm(spec.frames, axis=1)


def frame_rms(samples: np.ndarray, rate: int, win_seconds: float = 0.025, hop_seconds: float = 0.010) -> np.ndarray:
    """Per-frame waveform RMS over non-centered frames."""
    win = int(round(win_seconds * rate))
    hop = int(round(hop_seconds * rate))
    x = np.asarray(samples, dtype=np.float64)
    if len(x) == 0:
        raise AudioError("empty waveform")
    if len(x) < win:
        x = np.pad(x, (0, win - len(x)))
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop]
    return np.sqrt(np.mean(frames ** 2, axis=1))


@dataclass
class UtteranceFeatures:
    mel: MelSpectrogram
    linear: LinearSpectrogram
    prosody: ProsodyTrack

    @property
    def n_frames(self) -> int:
        return len(self.mel)


def analyze(wav: AudioWaveform, cfg: SpectrogramConfig, f0_cfg: F0Config | None = None) -> UtteranceFeatures:
    """Mel, linear magnitude, F0 and energy tracks truncated to a common frame count."""
    f0_cfg = f0_cfg or F0Config(hop_seconds=cfg.hop_seconds)
    lin = linear_spectrogram(wav, cfg)
    mel = mel_from_linear(lin, cfg)
    track = extract_f0(wav, config=f0_cfg)
    n = min(len(lin), len(mel), len(track))
    if max(len(lin), len(mel), len(track)) - n > 1:
        logger.warning("frame counts disagree by more than one: %d/%d/%d", len(lin), len(mel), len(track))
    lin = LinearSpectrogram(lin.frames[:n])
    energy = frame_energy(lin)
    track = ProsodyTrack(track.f0_hz[:n], track.voiced[:n], energy)
    return UtteranceFeatures(MelSpectrogram(mel.frames[:n], mel.hop_seconds), lin, track)
