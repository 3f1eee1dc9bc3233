"""Objective evaluation metrics and the corpus evaluator."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .audio import (
    AudioError,
    AudioWaveform,
    SpectrogramConfig,
    extract_f0,
    frame_rms,
    load_wav,
    mel_cepstrum,
    mel_spectrogram,
    prepare_waveform,
    resample,
)
from .io import UtteranceRecord
from .providers import StubTimbreEncoder

logger = logging.getLogger(__name__)

ALL_METRICS = ("mae_f0", "mae_rmse", "estoi", "mcd_dtw_sl", "secs", "wer", "rtf")
MCD_SCALE = 10.0 / math.log(10.0) * math.sqrt(2.0)


class MetricError(ValueError):
    pass


def _same_rate(ref: AudioWaveform, hyp: AudioWaveform) -> None:
    if ref.rate != hyp.rate:
        raise MetricError(f"sample rates differ: {ref.rate} vs {hyp.rate}")


# ---------------------------------------------------------------------------
# prosodic discrepancy


def mae_f0(ref: AudioWaveform, hyp: AudioWaveform) -> float:
    """Mean |F0_ref - F0_hyp| in Hz over reference-voiced frames (hyp unvoiced counts as 0 Hz)."""
    _same_rate(ref, hyp)
    a, b = extract_f0(ref), extract_f0(hyp)
    n = min(len(a), len(b))
    voiced = a.voiced[:n]
    if not voiced.any():
        raise MetricError("no voiced frames in reference")
    return float(np.mean(np.abs(a.f0_hz[:n][voiced] - b.f0_hz[:n][voiced])))


def mae_rmse(ref: AudioWaveform, hyp: AudioWaveform) -> float:
    """Mean absolute difference of 25 ms / 10 ms frame RMS.

    Inputs are compared as given; callers peak-normalize first.
    """
    _same_rate(ref, hyp)
    if len(ref) == 0 or len(hyp) == 0:
        raise MetricError("empty waveform")
    a, b = frame_rms(ref.samples, ref.rate), frame_rms(hyp.samples, hyp.rate)
    n = min(len(a), len(b))
    return float(np.mean(np.abs(a[:n] - b[:n])))


# ---------------------------------------------------------------------------
# ESTOI

_ESTOI_RATE = 10000
_ESTOI_FRAME = 256
_ESTOI_NFFT = 512
_ESTOI_BANDS = 15
_ESTOI_MIN_FREQ = 150.0
_ESTOI_SEGMENT = 30
_ESTOI_DYN_RANGE = 40.0


def third_octave_bands(rate=_ESTOI_RATE, nfft=_ESTOI_NFFT, n_bands=_ESTOI_BANDS, min_freq=_ESTOI_MIN_FREQ) -> np.ndarray:
    """Binary band-membership matrix, n_bands x (nfft // 2 + 1)."""
    freqs = np.linspace(0, rate, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(n_bands)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6)
    bands = np.zeros((n_bands, len(freqs)))
    for i in range(n_bands):
        a = np.argmin((freqs - lo[i]) ** 2)
        b = np.argmin((freqs - hi[i]) ** 2)
        bands[i, a:b] = 1.0
    return bands


def _hann(n: int) -> np.ndarray:
    return np.hanning(n + 2)[1:-1]


def _frames(x: np.ndarray, size: int, hop: int) -> np.ndarray:
    starts = range(0, len(x) - size, hop)
    return np.array([x[s:s + size] for s in starts]).reshape(-1, size)


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    n, size = frames.shape
    out = np.zeros((n - 1) * hop + size) if n else np.zeros(0)
    for i, f in enumerate(frames):
        out[i * hop:i * hop + size] += f
    return out


def _remove_silent_frames(x: np.ndarray, y: np.ndarray):
    """Drop frames more than 40 dB below the loudest reference frame, in both signals."""
    w = _hann(_ESTOI_FRAME)
    hop = _ESTOI_FRAME // 2
    xf = _frames(x, _ESTOI_FRAME, hop) * w
    yf = _frames(y, _ESTOI_FRAME, hop) * w
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + np.finfo(float).eps)
    keep = energy > energy.max() - _ESTOI_DYN_RANGE
    return _overlap_add(xf[keep], hop), _overlap_add(yf[keep], hop)


def _band_envelopes(x: np.ndarray, bands: np.ndarray) -> np.ndarray:
    spec = np.fft.rfft(_frames(x, _ESTOI_FRAME, _ESTOI_FRAME // 2) * _hann(_ESTOI_FRAME), n=_ESTOI_NFFT, axis=1)
    return np.sqrt(bands @ (np.abs(spec) ** 2).T)  # bands x frames


def _normalize(x: np.ndarray, axis: int) -> np.ndarray:
    x = x - x.mean(axis=axis, keepdims=True)
    norm = np.linalg.norm(x, axis=axis, keepdims=True)
    return np.divide(x, norm, out=np.zeros_like(x), where=norm > 1e-12)


def estoi(ref: AudioWaveform, hyp: AudioWaveform, length_tolerance: float = 0.10) -> float:
    """Extended short-time objective intelligibility.

    Both signals go to 10 kHz, silent frames (judged on the reference) are
    removed, and one-third-octave band envelopes are cut into 30-frame
    segments.  Each segment is normalized along time per band, then across
    bands per frame; the score is the mean inner product of matching frames.
    """
    _same_rate(ref, hyp)
    if len(ref) == 0 or len(hyp) == 0:
        raise MetricError("empty waveform")
    if abs(len(ref) - len(hyp)) > length_tolerance * max(len(ref), len(hyp)):
        raise MetricError(f"durations differ by more than {length_tolerance:.0%}: {len(ref)} vs {len(hyp)} samples")
    if not np.any(ref.samples) or not np.any(hyp.samples):
        raise MetricError("silent input")
    n = min(len(ref), len(hyp))
    x = resample(AudioWaveform(ref.samples[:n], ref.rate), _ESTOI_RATE).samples
    y = resample(AudioWaveform(hyp.samples[:n], hyp.rate), _ESTOI_RATE).samples
    x, y = _remove_silent_frames(x, y)
    bands = third_octave_bands()
    xe, ye = _band_envelopes(x, bands), _band_envelopes(y, bands)
    n_frames = xe.shape[1]
    if n_frames < _ESTOI_SEGMENT:
        raise MetricError(f"too little non-silent audio for ESTOI ({n_frames} frames, need {_ESTOI_SEGMENT})")
    scores = []
    for m in range(_ESTOI_SEGMENT, n_frames + 1):
        xs = _normalize(_normalize(xe[:, m - _ESTOI_SEGMENT:m], axis=1), axis=0)
        ys = _normalize(_normalize(ye[:, m - _ESTOI_SEGMENT:m], axis=1), axis=0)
        scores.append(np.sum(xs * ys) / _ESTOI_SEGMENT)
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# MCD with DTW


def dtw(cost: np.ndarray) -> tuple[float, list[tuple[int, int]]]:
    """Minimum-sum monotone alignment over steps (1,0), (0,1), (1,1).

    Returns the total cost and the path from (0, 0) to (n-1, m-1).  The
    recursion is evaluated one anti-diagonal at a time.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for d in range(2, n + m + 1):  # d = i + j in 1-based accumulator coordinates
        i = np.arange(max(1, d - m), min(n, d - 1) + 1)
        j = d - i
        best = np.minimum(np.minimum(acc[i - 1, j - 1], acc[i - 1, j]), acc[i, j - 1])
        acc[i, j] = cost[i - 1, j - 1] + best
    i, j = n, m
    path = [(n - 1, m - 1)]
    while (i, j) != (1, 1):
        # prefer the diagonal on ties
        options = ((acc[i - 1, j - 1], i - 1, j - 1), (acc[i - 1, j], i - 1, j), (acc[i, j - 1], i, j - 1))
        _, i, j = min(options, key=lambda o: o[0])
        path.append((i - 1, j - 1))
    return float(acc[n, m]), path[::-1]


def mcd_dtw_sl(ref: AudioWaveform, hyp: AudioWaveform, cfg: SpectrogramConfig = SpectrogramConfig(),
               n_coeffs: int = 13, length_penalty: bool = True) -> float:
    """Mel-cepstral distortion (dB) along the DTW path, times the speech-length ratio.

    The ratio uses waveform durations, so padding a 1 s hypothesis to 1.2 s
    gives exactly 1.2 (frame counts would give 121/101).
    """
    _same_rate(ref, hyp)
    a = mel_cepstrum(mel_spectrogram(ref, cfg), n_coeffs, skip_c0=True)
    b = mel_cepstrum(mel_spectrogram(hyp, cfg), n_coeffs, skip_c0=True)
    if len(a) < 2 or len(b) < 2:
        raise MetricError("need at least 2 frames for MCD-DTW")
    cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    _, path = dtw(cost)
    idx = np.array(path)
    mcd = MCD_SCALE * float(np.mean(cost[idx[:, 0], idx[:, 1]]))
    if length_penalty:
        mcd *= speech_length_factor(ref, hyp)
    return mcd


def speech_length_factor(ref: AudioWaveform, hyp: AudioWaveform) -> float:
    return max(len(ref), len(hyp)) / min(len(ref), len(hyp))


# ---------------------------------------------------------------------------
# speaker similarity, WER, RTF


def secs(ref: AudioWaveform, hyp: AudioWaveform, embedder: Callable[[AudioWaveform], np.ndarray] | None = None) -> float:
    """Cosine similarity of speaker embeddings.

    ``embedder`` maps a waveform to a vector; the default peak-normalizes and
    applies the stub timbre encoder to the log-mel.
    """
    embedder = embedder or default_speaker_embedder()
    u, v = np.asarray(embedder(ref), float), np.asarray(embedder(hyp), float)
    denom = np.linalg.norm(u) * np.linalg.norm(v)
    if denom == 0:
        raise MetricError("zero speaker embedding")
    return float(np.clip(u @ v / denom, -1.0, 1.0))


def default_speaker_embedder(cfg: SpectrogramConfig = SpectrogramConfig(), dim: int = 256, seed: int = 0):
    encoder = StubTimbreEncoder(cfg.n_mels, dim, seed)

    def embed(wav: AudioWaveform) -> np.ndarray:
        return encoder.embed(mel_spectrogram(prepare_waveform(wav, cfg.rate), cfg).frames)

    return embed


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(ref_words: Sequence[str] | str, hyp_words: Sequence[str] | str) -> float:
    if isinstance(ref_words, str):
        ref_words = ref_words.split()
    if isinstance(hyp_words, str):
        hyp_words = hyp_words.split()
    if len(ref_words) == 0:
        raise MetricError("empty reference transcript")
    return edit_distance(list(ref_words), list(hyp_words)) / len(ref_words)


def rtf(audio_seconds: float, wall_seconds: float) -> float:
    if audio_seconds <= 0:
        raise MetricError(f"audio duration must be positive, got {audio_seconds}")
    return wall_seconds / audio_seconds


# ---------------------------------------------------------------------------
# corpus evaluation


@dataclass
class MetricReport:
    metrics: tuple[str, ...]
    rows: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    @property
    def means(self) -> dict[str, float | None]:
        """Per-metric mean over utterances; None when no utterance has a value."""
        out = {}
        for name in self.metrics:
            vals = [r[name] for r in self.rows if r.get(name) is not None]
            out[name] = float(np.mean(vals)) if vals else None
        return out

    def table(self) -> str:
        cols = ["id", *self.metrics]
        body = [[r["id"]] + [_fmt(r.get(m)) for m in self.metrics] for r in self.rows]
        body.append(["MEAN"] + [_fmt(self.means[m]) for m in self.metrics])
        widths = [max(len(c), *(len(row[i]) for row in body)) for i, c in enumerate(cols)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
        lines.append("  ".join("-" * w for w in widths))
        lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in body]
        for f in self.failures:
            lines.append(f"FAILED {f['id']}: {f['reason']}")
        return "\n".join(lines)

    def write(self, out_dir: str | os.PathLike) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        txt, jsonl = out_dir / "report.txt", out_dir / "report.jsonl"
        txt.write_text(self.table() + "\n", encoding="utf-8")
        with jsonl.open("w", encoding="utf-8") as fh:
            for r in self.rows:
                fh.write(json.dumps({"type": "utterance", **r}, sort_keys=True) + "\n")
            for f in self.failures:
                fh.write(json.dumps({"type": "failure", **f}, sort_keys=True) + "\n")
            fh.write(json.dumps({"type": "mean", **self.means}, sort_keys=True) + "\n")
        return txt, jsonl


def _fmt(v) -> str:
    if v is None:
        return "-"
    return f"{v:.4f}"


def _read_rtf_log(synth_dir: Path) -> dict[str, float]:
    path = synth_dir / "rtf.jsonl"
    if not path.exists():
        return {}
    out = {}
    for line in path.read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            out[rec["id"]] = rtf(rec["audio_seconds"], rec["wall_seconds"])
    return out


def evaluate_utterance(record: UtteranceRecord, synth_dir: Path, metrics: Sequence[str],
                       embedder=None, rtf_log: dict | None = None) -> tuple[dict, list[str]]:
    """Metrics for one utterance; returns (row, list of per-metric failure reasons)."""
    hyp_path = synth_dir / f"{record.id}.wav"
    if not hyp_path.exists():
        raise MetricError(f"missing synthesized file {hyp_path}")
    ref = prepare_waveform(load_wav(record.audio_path))
    hyp = prepare_waveform(load_wav(hyp_path))
    row: dict = {"id": record.id}
    problems = []
    funcs = {
        "mae_f0": lambda: mae_f0(ref, hyp),
        "mae_rmse": lambda: mae_rmse(ref, hyp),
        "estoi": lambda: estoi(ref, hyp),
        "mcd_dtw_sl": lambda: mcd_dtw_sl(ref, hyp),
        "secs": lambda: secs(ref, hyp, embedder),
    }
    for name in metrics:
        if name in funcs:
            try:
                row[name] = funcs[name]()
            except (MetricError, AudioError) as exc:
                row[name] = None
                problems.append(f"{name}: {exc}")
        elif name == "wer":
            txt = synth_dir / f"{record.id}.txt"
            row[name] = None
            if txt.exists() and record.transcript.strip():
                row[name] = wer(record.transcript, txt.read_text(encoding="utf-8"))
        elif name == "rtf":
            row[name] = (rtf_log or {}).get(record.id)
    return row, problems


def evaluate_corpus(records: list[UtteranceRecord], synth_dir: str | os.PathLike,
                    metrics: Sequence[str] = ALL_METRICS, embedder=None, workers: int = 1) -> MetricReport:
    """Per-utterance metrics and corpus means.

    A missing or unreadable hypothesis becomes a failure entry; the other
    utterances are still scored.  Rows are sorted by id so aggregates do not
    depend on manifest order or worker scheduling.
    """
    unknown = set(metrics) - set(ALL_METRICS)
    if unknown:
        raise MetricError(f"unknown metrics: {sorted(unknown)}")
    synth_dir = Path(synth_dir)
    metrics = tuple(m for m in ALL_METRICS if m in metrics)
    embedder = embedder or default_speaker_embedder()
    rtf_log = _read_rtf_log(synth_dir)
    if not any((synth_dir / f"{r.id}.wav").exists() for r in records):
        raise MetricError(f"no synthesized files in {synth_dir} match the manifest")

    def job(rec):
        try:
            return rec, *evaluate_utterance(rec, synth_dir, metrics, embedder, rtf_log), None
        except (MetricError, AudioError, OSError) as exc:
            return rec, None, [], str(exc)

    report = MetricReport(metrics)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(job, records))
    for rec, row, problems, error in sorted(results, key=lambda r: r[0].id):
        if error is not None:
            report.failures.append({"id": rec.id, "reason": error})
            continue
        report.rows.append(row)
        for p in problems:
            report.failures.append({"id": rec.id, "reason": p})
    return report
