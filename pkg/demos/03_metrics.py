"""
Objective metrics on the toy corpus
===================================

Scores one toy utterance against a noisy copy and against the other speaker.
"""

import tempfile

import numpy as np

from lip2speech.audio import AudioWaveform, load_wav, prepare_waveform
from lip2speech.io import parse_manifest
from lip2speech.metrics import estoi, mae_f0, mae_rmse, mcd_dtw_sl, secs, wer
from lip2speech.toy import make_toy_corpus

records = parse_manifest(make_toy_corpus(tempfile.mkdtemp()))
a, b = (prepare_waveform(load_wav(r.audio_path)) for r in records)
n = min(len(a), len(b))
a, b = AudioWaveform(a.samples[:n], a.rate), AudioWaveform(b.samples[:n], b.rate)
# quiet noise (about -60 dB): the toy audio has silent gaps at the log-mel floor,
# and louder noise fills them, which swamps MCD and the stub speaker embedding
noisy = AudioWaveform(a.samples + 0.001 * np.random.default_rng(0).standard_normal(n), a.rate)

print(f"{'':12}{'noisy copy':>12}{'other voice':>12}")
for name, fn in [("MAE_F0", mae_f0), ("MAE_RMSE", mae_rmse), ("ESTOI", estoi), ("MCD-DTW-SL", mcd_dtw_sl),
                 ("SECS", secs)]:
    print(f"{name:12}{fn(a, noisy):12.3f}{fn(a, b):12.3f}")

# WER scores transcripts; the recognizer is outside this package
print("WER:", wer(records[0].transcript, "she can see a green place now"))
