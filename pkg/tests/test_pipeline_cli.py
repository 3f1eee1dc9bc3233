import dataclasses
import json
import shutil

import numpy as np
import pytest

from lip2speech.audio import AudioWaveform, load_wav, save_wav
from lip2speech.cli import main
from lip2speech.config import config_from_dict, load_config
from lip2speech.decoder import MEL_PER_VIDEO_FRAME
from lip2speech.io import parse_manifest, read_arrays, write_manifest
from lip2speech.metrics import rtf
from lip2speech.pipeline import CACHE_ENV, cache_dir

TINY = {
    "seed": 3,
    "model": {
        "block": {"hidden_dim": 16, "heads": 2, "fft_blocks_per_generator": 1, "conformer_layers": 1,
                  "conv_kernel": 3, "ff_expansion": 2, "dropout": 0.0},
        "sra": {"n_reference_layers": 1, "visual_encoder_layers": 1, "phoneme_encoder_layers": 1},
        "visual_dim": 16, "phoneme_dim": 16, "timbre_dim": 16, "n_units": 8,
        "prompt_blocks": 1, "unit_blocks": 1, "mel_decoder_channels": 16,
    },
    "units": {"k": 8, "max_iter": 20},
    "train": {"epochs": 1, "steps_per_epoch": 2, "batch_size": 2, "warmup_steps": 1},
    "vocoder": {"iterations": 4},
}


@pytest.fixture
def tiny(tmp_path, toy_corpus):
    """Toy corpus copy, tiny config file and cache root."""
    audio = tmp_path / "audio"
    audio.mkdir()
    records = []
    for r in parse_manifest(toy_corpus):
        shutil.copy(r.audio_path, audio / f"{r.id}.wav")
        records.append(dataclasses.replace(r, audio_path=str(audio / f"{r.id}.wav")))
    manifest = tmp_path / "manifest.tsv"
    write_manifest(manifest, records)
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    return {"dir": tmp_path, "manifest": str(manifest), "config": str(cfg), "cache": str(tmp_path / "cache"),
            "records": records}


def run(t, command, *extra, out="out"):
    out_arg = t["cache"] if command == "prepare" else str(t["dir"] / out)
    argv = [command, "--config", t["config"], "--manifest", t["manifest"], "--out", out_arg]
    if command != "prepare":
        argv += ["--cache", t["cache"]]
    return main([*argv, *extra])


def test_tiny_config_is_valid():
    assert config_from_dict(TINY).model.n_units == 8


def test_prepare_is_idempotent(tiny, capsys):
    assert run(tiny, "prepare") == 0
    cdir = cache_dir(tiny["cache"], load_config(tiny["config"]))
    mtimes = {p.name: p.stat().st_mtime_ns for p in cdir.iterdir()}
    assert run(tiny, "prepare") == 0
    assert {p.name: p.stat().st_mtime_ns for p in cdir.iterdir()} == mtimes


def test_prepare_rewrites_changed_inputs(tiny):
    assert run(tiny, "prepare") == 0
    cdir = cache_dir(tiny["cache"], load_config(tiny["config"]))
    rec = tiny["records"][0]
    before = (cdir / f"{rec.id}.arr").stat().st_mtime_ns
    wav = load_wav(rec.audio_path)
    save_wav(rec.audio_path, AudioWaveform(wav.samples * 0.5, wav.rate))
    assert run(tiny, "prepare") == 0
    assert (cdir / f"{rec.id}.arr").stat().st_mtime_ns != before


def test_cache_entries_are_consistent(tiny):
    assert run(tiny, "prepare") == 0
    cfg = load_config(tiny["config"])
    cdir = cache_dir(tiny["cache"], cfg)
    for r in tiny["records"]:
        a = read_arrays(cdir / f"{r.id}.arr")
        n = len(a["mel"])
        wav = load_wav(r.audio_path)
        assert n == len(wav.samples) // cfg.spectrogram.hop + 1
        assert len(a["f0"]) == len(a["energy"]) == len(a["voiced"]) == n
        assert a["visual"].shape == (n // MEL_PER_VIDEO_FRAME, 16)
        assert len(a["unit_features"]) == n // 2
        lo, hi = a["prompt_window"]
        assert hi - lo == 50 and lo == int(0.25 * n)


def test_cache_root_from_environment(tiny, monkeypatch, tmp_path):
    monkeypatch.setenv(CACHE_ENV, str(tmp_path / "envcache"))
    cfg = load_config(tiny["config"])
    assert cache_dir(None, cfg).parent == tmp_path / "envcache"


def test_corrupt_audio_is_partial_failure(tiny, capsys):
    bad = tiny["records"][0]
    with open(bad.audio_path, "wb") as fh:
        fh.write(b"RIFF garbage")
    assert run(tiny, "prepare") == 2
    assert f"FAILED {bad.id}" in capsys.readouterr().err
    cdir = cache_dir(tiny["cache"], load_config(tiny["config"]))
    assert (cdir / f"{tiny['records'][1].id}.arr").exists()
    assert not (cdir / f"{bad.id}.arr").exists()


def test_config_validated_before_data(tiny, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"widht": 3}}))
    code = main(["prepare", "--config", str(bad), "--manifest", str(tmp_path / "missing.tsv"),
                 "--out", str(tmp_path / "c")])
    assert code == 1
    assert "widht" in capsys.readouterr().err
    assert not (tmp_path / "c").exists()


def test_usage_errors_exit_1(tiny, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1
    assert run(tiny, "eval", "--synth-dir", tiny["cache"], "--metrics", "utmos") == 1
    assert run(tiny, "train") == 1  # nothing prepared yet
    assert "prepare first" in capsys.readouterr().err


def test_tiny_end_to_end_and_metric_selection(tiny, capsys):
    assert run(tiny, "prepare") == 0
    assert run(tiny, "train-units", out="units") == 0
    assert (tiny["dir"] / "units" / "codebook.arr").exists()
    assert run(tiny, "train", "--no-energy-predictor", out="run") == 0
    log = [json.loads(l) for l in (tiny["dir"] / "run" / "train_log.jsonl").read_text().splitlines()]
    assert log and all(r["l_e"] == 0.0 for r in log)
    ckpt = str(tiny["dir"] / "run" / "checkpoint.pt")
    assert run(tiny, "synth", "--checkpoint", ckpt, "--no-energy-predictor", out="synth") == 0
    capsys.readouterr()
    assert run(tiny, "eval", "--synth-dir", str(tiny["dir"] / "synth"), "--metrics", "estoi", out="rep") == 0
    header = (tiny["dir"] / "rep" / "report.txt").read_text().splitlines()[0].split()
    assert header == ["id", "estoi"]
    rows = [json.loads(l) for l in (tiny["dir"] / "rep" / "report.jsonl").read_text().splitlines()]
    assert all(set(r) <= {"id", "type", "estoi"} for r in rows)


def test_eval_partial_failure_exit_2(tiny, tmp_path):
    synth = tmp_path / "synth"
    synth.mkdir()
    first = tiny["records"][0]
    shutil.copy(first.audio_path, synth / f"{first.id}.wav")
    assert run(tiny, "eval", "--synth-dir", str(synth), "--metrics", "mcd_dtw_sl", out="rep") == 2


def test_incompatible_checkpoint(tiny, smoke_pipeline, capsys):
    assert run(tiny, "prepare") == 0
    ckpt = str(smoke_pipeline["dir"] / "run" / "checkpoint.pt")
    assert run(tiny, "synth", "--checkpoint", ckpt, out="synth") == 1
    assert "mismatched keys" in capsys.readouterr().err


def _synth(smoke, out, *extra):
    argv = ["synth", "--config", "smoke", "--manifest", str(smoke["manifest"]), "--out", str(out),
            "--cache", str(smoke["cache"]), "--checkpoint", str(smoke["dir"] / "run" / "checkpoint.pt"), *extra]
    return main(argv)


def test_synth_is_deterministic(smoke_pipeline, tmp_path):
    assert _synth(smoke_pipeline, tmp_path / "again") == 0
    for r in parse_manifest(smoke_pipeline["manifest"]):
        a = (smoke_pipeline["dir"] / "synth" / f"{r.id}.wav").read_bytes()
        assert a == (tmp_path / "again" / f"{r.id}.wav").read_bytes()


def test_synth_duration_and_rtf_log(smoke_pipeline):
    cfg = load_config("smoke")
    cdir = cache_dir(smoke_pipeline["cache"], cfg)
    synth = smoke_pipeline["dir"] / "synth"
    log = {}
    for line in (synth / "rtf.jsonl").read_text().splitlines():
        rec = json.loads(line)
        log[rec["id"]] = rec
    hop = cfg.spectrogram.hop / cfg.spectrogram.rate
    for r in parse_manifest(smoke_pipeline["manifest"]):
        t_v = read_arrays(cdir / f"{r.id}.arr")["visual"].shape[0]
        wav = load_wav(synth / f"{r.id}.wav")
        assert abs(wav.duration - t_v / 25) <= hop + 1e-9
        rec = log[r.id]
        assert rec["audio_seconds"] == pytest.approx(wav.duration)
        assert rec["rtf"] == pytest.approx(rtf(rec["audio_seconds"], rec["wall_seconds"]))


def test_prompt_source_changes_output(smoke_pipeline, tmp_path):
    records = parse_manifest(smoke_pipeline["manifest"])
    assert _synth(smoke_pipeline, tmp_path / "p", "--prompt-source", records[1].id) == 0
    r = records[0]
    own = load_wav(smoke_pipeline["dir"] / "synth" / f"{r.id}.wav").samples
    other = load_wav(tmp_path / "p" / f"{r.id}.wav").samples
    assert own.shape == other.shape and not np.array_equal(own, other)
