"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v``; the lines are
collected into an "acceptance criteria" section of the terminal summary.
"""

import contextlib
import dataclasses
import json
import shutil
import time

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES
from helpers import RATE, fd_input_check, fd_param_check, make_batch, sine
from lip2speech.audio import AudioWaveform, MelSpectrogram, SpectrogramConfig, extract_f0, load_wav, mel_spectrogram, prepare_waveform
from lip2speech.blocks import ConformerBlock, FFTBlock, VariancePredictor
from lip2speech.cli import main
from lip2speech.config import load_config
from lip2speech.dataset import collate
from lip2speech.decoder import Generator
from lip2speech.io import parse_manifest
from lip2speech.linguistic import ReferenceTransformer
from lip2speech.metrics import dtw, estoi, mae_f0, mcd_dtw_sl, rtf, wer
from lip2speech.model import AblationFlags, Lip2Speech, toy_config
from lip2speech.pipeline import cache_dir, example_from_entry, load_entry
from lip2speech.providers import StubTimbreEncoder
from lip2speech.training import LossWeights, compute_loss, evaluate_loss, load_checkpoint, restore_model, weighted_total
from lip2speech.vocoder import griffin_lim_vocode

TOY = toy_config()


@contextlib.contextmanager
def criterion(number, title, budget_seconds):
    """Time the body, record a PASS/FAIL line, and fail if the body raised or ran over budget."""
    start = time.perf_counter()
    notes = []
    try:
        yield notes
    except BaseException as exc:
        line = f"CRITERION {number} FAIL  {title}: {type(exc).__name__}: {exc}".splitlines()[0]
        ACCEPTANCE_LINES.append(line)
        print(line)
        raise
    elapsed = time.perf_counter() - start
    ok = elapsed < budget_seconds
    detail = "; ".join(notes + [f"{elapsed:.1f}s of {budget_seconds:g}s"])
    line = f"CRITERION {number} {'PASS' if ok else 'FAIL'}  {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def _double(factory):
    torch.manual_seed(0)
    return factory().double().eval()


def _swap_prompt(b, seed=99):
    g = torch.Generator().manual_seed(seed)
    return dataclasses.replace(b, prompt=torch.randn(b.prompt.shape, generator=g, dtype=b.prompt.dtype),
                               timbre=torch.randn(b.timbre.shape, generator=g, dtype=b.timbre.dtype))


def test_criterion_01_loss_identity():
    with criterion(1, "loss identity", 1.0) as notes:
        w = LossWeights()
        one = torch.ones((), dtype=torch.float64)
        assert weighted_total(one, one, one, one, w).item() == 100.21
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(200):
            parts = rng.uniform(0, 10, 4)
            got = weighted_total(*[torch.tensor(p, dtype=torch.float64) for p in parts], w).item()
            expected = 100 * parts[0] + 0.1 * parts[1] + 0.1 * parts[2] + 0.01 * parts[3]
            worst = max(worst, abs(got - expected) / expected)
        m = Lip2Speech(TOY, seed=0).double()
        b = make_batch(TOY, dtype=torch.float64)
        losses = compute_loss(m(b, teacher_forcing=True), b, w)
        l_m, l_p, l_e, l_u = (getattr(losses, k).item() for k in ("l_m", "l_p", "l_e", "l_u"))
        expected = 100 * l_m + 0.1 * l_p + 0.1 * l_e + 0.01 * l_u
        worst = max(worst, abs(losses.l_total.item() - expected) / expected)
        assert worst < 1e-6
        notes.append(f"max relative error {worst:.1e}")


def test_criterion_02_sra_base_case():
    with criterion(2, "SRA base case", 1.0):
        h_v = torch.randn(1, 6, 8)
        assert ReferenceTransformer(0, 8, 2)(h_v, torch.randn(1, 4, 8)) is h_v
        for n in (1, 2, 3):
            ref = _double(lambda: ReferenceTransformer(n, 8, 2, dropout=0.0))
            hv = torch.randn(1, 6, 8, dtype=torch.float64)
            hp = torch.randn(1, 7, 8, dtype=torch.float64)
            perm = torch.randperm(7)
            assert torch.allclose(ref(hv, hp[:, perm]), ref(hv, hp), atol=1e-12)


def test_criterion_03_source_filter_isolation():
    with criterion(3, "source-filter isolation", 10.0) as notes:
        b = make_batch(TOY, dtype=torch.float64)
        full = Lip2Speech(TOY, seed=0).double().eval()
        ablated = Lip2Speech(TOY, AblationFlags(no_acoustic_branch=True), seed=0).double().eval()
        with torch.no_grad():
            a, c = full(b), full(_swap_prompt(b))
            assert torch.equal(a.formant, c.formant)
            diff = (a.mel_fine - c.mel_fine).abs().max().item()
            assert diff > 0
            assert torch.equal(ablated(b).mel_fine, ablated(_swap_prompt(b)).mel_fine)
        notes.append(f"full-model prompt effect {diff:.2e}")


def test_criterion_04_gradients():
    with criterion(4, "gradient correctness", 120.0) as notes:
        block = TOY.block
        x = torch.randn(1, 4, 8, dtype=torch.float64)
        hp = torch.randn(1, 3, 8, dtype=torch.float64)
        cases = {
            "fft_block": (_double(lambda: FFTBlock(8, 2, kernel=3, expansion=2, dropout=0.0)), lambda m, t: m(t)),
            "conformer": (_double(lambda: ConformerBlock(8, 2, kernel=3, expansion=2, dropout=0.0)), lambda m, t: m(t)),
            "variance_predictor": (_double(lambda: VariancePredictor(8, dropout=0.0, output_scale=100.0)),
                                   lambda m, t: m(t)),
            "reference_transformer": (_double(lambda: ReferenceTransformer(2, 8, 2, dropout=0.0)),
                                      lambda m, t: m(t, hp)),
            "generator": (_double(lambda: Generator(block, 8)), lambda m, t: torch.cat(m(t), -1)),
        }
        worst = 0.0
        for name, (module, fn) in cases.items():
            err = max(fd_input_check(lambda t: fn(module, t), [x]), fd_param_check(module, lambda: fn(module, x)))
            assert err < 1e-3, f"{name}: relative error {err:.2e}"
            worst = max(worst, err)
        notes.append(f"worst relative error {worst:.1e}")


def _training_batch(cfg, cdir, records):
    examples = [example_from_entry(r.id, load_entry(cdir, r.id)) for r in records]
    return collate(examples, StubTimbreEncoder(cfg.model.n_mels, cfg.model.timbre_dim, cfg.seed),
                   cfg.spectrogram.hop_seconds)


def test_criterion_05_overfit(smoke_pipeline):
    with criterion(5, "overfit smoke test", 900.0) as notes:
        assert smoke_pipeline["codes"].get("train") == 0
        train_seconds = smoke_pipeline["seconds"]["train"]
        assert train_seconds < 900, f"training took {train_seconds:.0f}s"
        cfg = load_config("smoke")
        assert cfg.train.epochs * cfg.train.steps_per_epoch == 2000 and cfg.train.lr == 1e-3
        records = parse_manifest(smoke_pipeline["manifest"])
        batch = _training_batch(cfg, cache_dir(smoke_pipeline["cache"], cfg), records)
        initial = evaluate_loss(batch, Lip2Speech(cfg.model, cfg.flags, seed=cfg.seed), cfg.loss)
        ckpt = load_checkpoint(smoke_pipeline["dir"] / "run" / "checkpoint.pt")
        assert ckpt["step"] == 2000
        final = evaluate_loss(batch, restore_model(ckpt, cfg.model), cfg.loss)
        ratio = final["l_m"] / initial["l_m"]
        notes.append(f"mel L1 {initial['l_m']:.3f} -> {final['l_m']:.3f} ({ratio:.1%}), "
                     f"unit accuracy {final['unit_acc']:.1%}, training {train_seconds:.0f}s")
        assert ratio < 0.10
        assert final["unit_acc"] >= 0.90


def test_criterion_06_ablation_wiring():
    with criterion(6, "ablation wiring", 10.0):
        b = make_batch(TOY, dtype=torch.float64)
        w = LossWeights()
        g = torch.Generator().manual_seed(5)
        other_phonemes = dataclasses.replace(b, phonemes=torch.randint(0, TOY.n_phonemes, (2, 8), generator=g),
                                             phoneme_lengths=torch.tensor([8, 3]))
        other_energy = dataclasses.replace(b, energy=b.energy + 3.0)
        with torch.no_grad():
            flags = AblationFlags(no_l2t_sra=True)
            m = Lip2Speech(TOY, flags, seed=0).double().eval()
            assert torch.equal(m(b).mel_fine, m(other_phonemes).mel_fine)

            flags = AblationFlags(no_acoustic_branch=True)
            m = Lip2Speech(TOY, flags, seed=0).double().eval()
            out = m(b)
            assert torch.equal(out.mel_fine, m(_swap_prompt(b)).mel_fine)
            losses = compute_loss(out, b, w, flags)
            assert losses.l_p.item() == 0 and losses.l_e.item() == 0

            flags = AblationFlags(no_energy_predictor=True)
            m = Lip2Speech(TOY, flags, seed=0).double().eval()
            out = m(b, teacher_forcing=True)
            assert torch.all(out.energy_pred == 0)
            assert torch.equal(out.mel_fine, m(other_energy, teacher_forcing=True).mel_fine)
            assert compute_loss(out, b, w, flags).l_e.item() == 0

            full = Lip2Speech(TOY, seed=0).double().eval()
            base = full(b, teacher_forcing=True).mel_fine
            for changed in (other_phonemes, _swap_prompt(b), other_energy):
                assert not torch.equal(base, full(changed, teacher_forcing=True).mel_fine)


def brute_force_dtw(cost):
    n, m = cost.shape

    def best(i, j):
        if (i, j) == (n - 1, m - 1):
            return cost[i, j]
        options = [best(i + di, j + dj) for di, dj in ((1, 0), (0, 1), (1, 1)) if i + di < n and j + dj < m]
        return cost[i, j] + min(options)

    return best(0, 0)


def test_criterion_07_metric_oracles(toy_corpus):
    with criterion(7, "metric oracles", 60.0) as notes:
        x = prepare_waveform(load_wav(parse_manifest(toy_corpus)[0].audio_path))
        assert abs(estoi(x, x) - 1.0) <= 1e-6
        noise_scores = [estoi(x, AudioWaveform(np.random.default_rng(s).standard_normal(len(x)) * 0.1, RATE))
                        for s in range(10)]
        assert max(noise_scores) < 0.1
        assert mcd_dtw_sl(x, x) == 0.0
        rng = np.random.default_rng(0)
        for n in range(1, 5):
            for m in range(1, 5):
                cost = rng.uniform(0, 1, (n, m))
                assert abs(dtw(cost)[0] - brute_force_dtw(cost)) < 1e-12
        f0_err = mae_f0(sine(220), sine(230))
        assert abs(f0_err - 10) <= 2
        assert abs(wer(["a", "b", "c"], ["a", "x", "c"]) - 1 / 3) < 1e-12
        assert abs(rtf(2.0, 0.126) - 0.063) < 1e-12
        notes.append(f"max ESTOI vs noise {max(noise_scores):.3f}; MAE_F0 220/230 Hz {f0_err:.2f}")


def test_criterion_08_dsp_oracles():
    with criterion(8, "DSP oracles", 60.0) as notes:
        for freq in (110, 220, 440):
            track = extract_f0(sine(freq, 1.0))
            f = track.f0_hz[track.voiced]
            assert len(f) > 0.8 * len(track)
            assert np.all(np.abs(f - freq) <= 0.05 * freq), f"{freq} Hz"
        cfg = SpectrogramConfig()
        mel = mel_spectrogram(sine(440, 1.0), cfg)
        assert mel.frames.shape[0] == 101
        out = griffin_lim_vocode(mel, cfg, iterations=60)
        spec = np.abs(np.fft.rfft(out.samples * np.hanning(len(out.samples))))
        peak = np.fft.rfftfreq(len(out.samples), 1 / RATE)[np.argmax(spec)]
        assert abs(peak - 440) <= 44
        notes.append(f"Griffin-Lim peak {peak:.1f} Hz")


def test_criterion_09_rate_arithmetic():
    with criterion(9, "rate arithmetic", 10.0):
        m = Lip2Speech(TOY, seed=0).eval()
        cfg = SpectrogramConfig(n_mels=TOY.n_mels)
        for t_v in (10, 50, 77):
            with torch.no_grad():
                out = m(make_batch(TOY, lengths=(t_v,), t_p=(5,), t_r=(8,), units=False))
            t_mel = out.mel_fine.shape[1]
            assert t_mel == 4 * t_v and out.unit_logits.shape[1] == t_mel // 2
            wav = griffin_lim_vocode(MelSpectrogram(out.mel_fine[0].double().numpy()), cfg, iterations=2)
            assert abs(wav.duration - t_v / 25) <= cfg.hop / cfg.rate + 1e-12


def test_criterion_10_end_to_end(smoke_pipeline, tmp_path):
    budget = 1200.0
    with criterion(10, "end-to-end pipeline", budget) as notes:
        codes = smoke_pipeline["codes"]
        assert codes == {"prepare": 0, "train-units": 0, "train": 0, "synth": 0, "eval": 0}, codes
        assert (smoke_pipeline["dir"] / "report" / "report.jsonl").exists()
        records = parse_manifest(smoke_pipeline["manifest"])
        copies = tmp_path / "copies"
        copies.mkdir()
        for r in records:
            shutil.copy(r.audio_path, copies / f"{r.id}.wav")
            (copies / f"{r.id}.txt").write_text(r.transcript)
        code = main(["eval", "--manifest", str(smoke_pipeline["manifest"]), "--out", str(tmp_path / "report"),
                     "--synth-dir", str(copies)])
        assert code == 0
        lines = [json.loads(s) for s in (tmp_path / "report" / "report.jsonl").read_text().splitlines()]
        rows = [l for l in lines if l["type"] == "utterance"]
        assert len(rows) == len(records)
        for row in rows:
            assert row["mae_f0"] == 0 and row["mae_rmse"] == 0 and row["mcd_dtw_sl"] == 0 and row["wer"] == 0
            assert abs(row["estoi"] - 1) <= 1e-6 and abs(row["secs"] - 1) <= 1e-9
        total = sum(smoke_pipeline["seconds"].values())
        assert total < budget, f"pipeline took {total:.0f}s"
        notes.append(f"pipeline {total:.0f}s")
