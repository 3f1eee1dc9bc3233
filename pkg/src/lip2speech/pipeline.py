"""End-user commands: prepare, train-units, train, synth, eval.

Features live in a cache directory keyed by a hash of the feature-relevant
settings, one array-container file per utterance plus a small stamp file
recording the inputs it was computed from.  Every file write goes through a
temporary file and a rename.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .audio import AudioError, MelSpectrogram, analyze, load_wav, mel_cepstrum, prepare_waveform, save_wav
from .config import RunConfig, save_config
from .dataset import Example, align_lengths, prompt_window
from .decoder import MEL_PER_UNIT, MEL_PER_VIDEO_FRAME
from .io import FormatError, UtteranceRecord, read_arrays, write_arrays
from .metrics import ALL_METRICS, MetricReport, evaluate_corpus
from .model import AblationFlags, Batch
from .providers import ProviderError, StubTimbreEncoder, TableG2P, provide_phonemes, provide_visual
from .training import load_checkpoint, restore_model, run_training
from .units import SpeechUnits, UnitCodebook, UnitError, quantize_units, train_unit_quantizer
from .vocoder import griffin_lim_vocode

logger = logging.getLogger(__name__)

CACHE_ENV = "LIP2SPEECH_CACHE"
CODEBOOK_FILE = "codebook.arr"


class PipelineError(RuntimeError):
    pass


@dataclass
class CommandResult:
    """Outcome of a command: per-record failures make the exit code 2."""

    failures: list[tuple[str, str]] = field(default_factory=list)
    written: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    report: MetricReport | None = None

    @property
    def exit_code(self) -> int:
        return 2 if self.failures else 0


# ---------------------------------------------------------------------------
# cache


def default_cache_root() -> Path:
    return Path(os.environ.get(CACHE_ENV) or Path.home() / ".cache" / "lip2speech")


def cache_dir(root: str | os.PathLike | None, cfg: RunConfig) -> Path:
    return Path(root or default_cache_root()) / cfg.feature_key()


def _file_stamp(path: str | None):
    if not path:
        return None
    st = os.stat(path)
    return [os.path.abspath(path), st.st_size, st.st_mtime_ns]


def _record_stamp(rec: UtteranceRecord, cfg: RunConfig) -> str:
    blob = {
        "audio": _file_stamp(rec.audio_path),
        "visual": _file_stamp(rec.visual_feature_path) if cfg.providers.visual == "file" else None,
        "transcript": rec.transcript,
        "g2p": _file_stamp(cfg.providers.g2p_table),
    }
    return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()


def unit_features(mel_frames: np.ndarray, n_cepstra: int) -> np.ndarray:
    """Mel-cepstra averaged over frame pairs: 100 Hz analysis frames to 50 Hz unit frames."""
    c = mel_cepstrum(MelSpectrogram(mel_frames), n_cepstra)
    n = len(c) // MEL_PER_UNIT
    return c[: n * MEL_PER_UNIT].reshape(n, MEL_PER_UNIT, -1).mean(1)


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def load_codebook(path: str | os.PathLike) -> UnitCodebook:
    return UnitCodebook(read_arrays(path)["centroids"].astype(np.float64))


def _g2p(cfg: RunConfig) -> TableG2P:
    return TableG2P.from_file(cfg.providers.g2p_table) if cfg.providers.g2p_table else TableG2P.bundled()


def prepare_record(rec: UtteranceRecord, cfg: RunConfig, g2p: TableG2P, codebook: UnitCodebook | None) -> dict:
    """Every cached array for one utterance."""
    wav = prepare_waveform(load_wav(rec.audio_path), cfg.spectrogram.rate)
    feats = analyze(wav, cfg.spectrogram, dataclasses.replace(cfg.f0, hop_seconds=cfg.spectrogram.hop_seconds))
    mel = feats.mel.frames
    t_v = len(mel) // MEL_PER_VIDEO_FRAME
    if t_v < 1:
        raise AudioError("utterance shorter than one video frame")
    visual = provide_visual(rec, cfg.providers.visual, n_frames=t_v, dim=cfg.model.visual_dim, seed=cfg.seed)
    phonemes = provide_phonemes(rec, cfg.providers.phonemes, g2p=g2p,
                                path=rec.visual_feature_path if cfg.providers.phonemes == "file" else None)
    window = prompt_window(len(mel), cfg.spectrogram.hop_seconds)
    arrays = {
        "mel": mel.astype(np.float32),
        "energy": feats.prosody.energy.astype(np.float32),
        "f0": feats.prosody.f0_hz.astype(np.float32),
        "voiced": feats.prosody.voiced.astype(np.int32),
        "phonemes": phonemes.ids.astype(np.int32),
        "visual": visual.matrix.astype(np.float32),
        "prompt_window": np.array([window.start, window.stop], dtype=np.int32),
        "unit_features": unit_features(mel, cfg.units.n_cepstra).astype(np.float32),
    }
    if codebook is not None:
        arrays["units"] = quantize_units(arrays["unit_features"], codebook).ids.astype(np.int32)
    return arrays


def cmd_prepare(records: list[UtteranceRecord], cfg: RunConfig, cache_root=None, workers: int = 1) -> CommandResult:
    """Fill the feature cache; entries whose inputs are unchanged are skipped."""
    out = cache_dir(cache_root, cfg)
    out.mkdir(parents=True, exist_ok=True)
    g2p = _g2p(cfg) if cfg.providers.phonemes == "transcript" else None
    codebook = load_codebook(out / CODEBOOK_FILE) if (out / CODEBOOK_FILE).exists() else None
    result = CommandResult()

    def job(rec: UtteranceRecord):
        entry, stamp_file = out / f"{rec.id}.arr", out / f"{rec.id}.stamp"
        try:
            stamp = _record_stamp(rec, cfg)
            if entry.exists() and stamp_file.exists() and stamp_file.read_text() == stamp:
                return rec.id, "skipped", None
            write_arrays(entry, prepare_record(rec, cfg, g2p, codebook))
            _write_text(stamp_file, stamp)
            return rec.id, "written", None
        except (OSError, AudioError, ProviderError, FormatError, UnitError, ValueError) as exc:
            return rec.id, "failed", f"{type(exc).__name__}: {exc}"

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        outcomes = list(pool.map(job, records))
    for uid, status, reason in outcomes:
        if status == "failed":
            logger.error("prepare %s failed: %s", uid, reason)
            result.failures.append((uid, reason))
        else:
            getattr(result, status).append(uid)
    logger.info("prepare: %d written, %d up to date, %d failed", len(result.written), len(result.skipped),
                len(result.failures))
    return result


def load_entry(records_dir: Path, uid: str) -> dict:
    path = records_dir / f"{uid}.arr"
    if not path.exists():
        raise PipelineError(f"{uid}: not in feature cache {records_dir}; run prepare first")
    return read_arrays(path)


def _training_records(records: list[UtteranceRecord]) -> list[UtteranceRecord]:
    train = [r for r in records if r.split == "train"]
    return train or records


def cmd_train_units(records: list[UtteranceRecord], cfg: RunConfig, out_dir, cache_root=None) -> CommandResult:
    """Fit the k-means codebook on training utterances and write unit ids into every cache entry."""
    cdir = cache_dir(cache_root, cfg)
    feats = [load_entry(cdir, r.id)["unit_features"] for r in _training_records(records)]
    codebook = train_unit_quantizer(feats, cfg.units.k, seed=cfg.seed, max_iter=cfg.units.max_iter)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"centroids": codebook.centroids}
    write_arrays(out_dir / CODEBOOK_FILE, payload)
    write_arrays(cdir / CODEBOOK_FILE, payload)
    result = CommandResult()
    for r in records:
        try:
            arrays = load_entry(cdir, r.id)
            arrays["units"] = quantize_units(arrays["unit_features"], codebook).ids.astype(np.int32)
            write_arrays(cdir / f"{r.id}.arr", arrays)
            result.written.append(r.id)
        except (PipelineError, FormatError, UnitError) as exc:
            result.failures.append((r.id, str(exc)))
    return result


def example_from_entry(uid: str, arrays: dict, require_units: bool = True) -> Example:
    units = arrays.get("units")
    if require_units and units is None:
        raise PipelineError(f"{uid}: no unit ids in cache; run train-units first")
    visual, mel, f0, energy, units = align_lengths(
        arrays["visual"], arrays["mel"], arrays["f0"], arrays["voiced"].astype(bool), arrays["energy"],
        None if units is None else units.astype(np.int64),
    )
    return Example(uid, visual, arrays["phonemes"].astype(np.int64), mel, f0, energy, units)


def cmd_train(records: list[UtteranceRecord], cfg: RunConfig, out_dir, cache_root=None, resume=None) -> CommandResult:
    cdir = cache_dir(cache_root, cfg)
    train = [example_from_entry(r.id, load_entry(cdir, r.id)) for r in _training_records(records)]
    val_recs = [r for r in records if r.split == "val"]
    val = [example_from_entry(r.id, load_entry(cdir, r.id)) for r in val_recs] or None
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(out_dir / "config.json", cfg)
    run_training(train, cfg.train_config(), cfg.model, out_dir, val=val, weights=cfg.loss,
                 hop_seconds=cfg.spectrogram.hop_seconds, timbre_seed=cfg.seed, resume=resume)
    return CommandResult(written=[str(out_dir / "checkpoint.pt")])


def synth_batch(arrays: dict, prompt_mel: np.ndarray, timbre: StubTimbreEncoder) -> Batch:
    visual = arrays["visual"]
    phonemes = arrays["phonemes"].astype(np.int64)
    return Batch(
        visual=torch.from_numpy(visual[None].astype(np.float32)),
        visual_lengths=torch.tensor([visual.shape[0]]),
        phonemes=torch.from_numpy(phonemes[None]),
        phoneme_lengths=torch.tensor([len(phonemes)]),
        prompt=torch.from_numpy(prompt_mel[None].astype(np.float32)),
        prompt_lengths=torch.tensor([len(prompt_mel)]),
        timbre=torch.from_numpy(timbre.embed(prompt_mel)[None].astype(np.float32)),
    )


def cmd_synth(records: list[UtteranceRecord], cfg: RunConfig, checkpoint, out_dir, cache_root=None,
              prompt_source: str | None = None, flags: AblationFlags | None = None) -> CommandResult:
    """Generate one waveform per record and log wall-clock time for RTF.

    The speaker prompt is a 0.5 s window starting 25% into ``prompt_source``
    (an utterance id in the cache), or into the utterance itself.
    """
    cdir = cache_dir(cache_root, cfg)
    model = restore_model(load_checkpoint(checkpoint), cfg.model)
    model.flags = flags or cfg.flags
    model.eval()
    timbre = StubTimbreEncoder(cfg.model.n_mels, cfg.model.timbre_dim, cfg.seed)
    source = load_entry(cdir, prompt_source) if prompt_source else None
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = CommandResult()
    rtf_lines = []
    for rec in records:
        try:
            arrays = load_entry(cdir, rec.id)
        except (PipelineError, FormatError) as exc:
            result.failures.append((rec.id, str(exc)))
            continue
        ref = source if source is not None else arrays
        lo, hi = ref["prompt_window"]
        prompt = ref["mel"][lo:hi]
        start = time.perf_counter()
        torch.manual_seed(cfg.seed)
        with torch.no_grad():
            out = model(synth_batch(arrays, prompt, timbre))
        mel = out.mel_fine[0].double().numpy()
        units = SpeechUnits(out.unit_logits[0].argmax(-1).numpy())
        wav = griffin_lim_vocode(MelSpectrogram(mel, cfg.spectrogram.hop_seconds), cfg.spectrogram,
                                 cfg.vocoder.iterations, seed=cfg.seed, units=units)
        wall = time.perf_counter() - start
        save_wav(out_dir / f"{rec.id}.wav", wav)
        rtf_lines.append({"id": rec.id, "audio_seconds": wav.duration, "wall_seconds": wall,
                          "rtf": wall / wav.duration})
        result.written.append(rec.id)
    _write_text(out_dir / "rtf.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in rtf_lines))
    return result


def cmd_eval(records: list[UtteranceRecord], synth_dir, out_dir, metrics=ALL_METRICS, workers: int = 1) -> CommandResult:
    report = evaluate_corpus(records, synth_dir, metrics, workers=workers)
    report.write(out_dir)
    result = CommandResult(report=report)
    result.failures = [(f["id"], f["reason"]) for f in report.failures]
    return result
