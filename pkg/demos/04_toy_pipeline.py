"""
Command-line pipeline on the toy corpus
=======================================

prepare, train-units, train, synth and eval, with a shortened smoke
schedule so the whole run takes about a minute.  The full smoke preset
(2000 steps) is what the acceptance suite uses.
"""

import dataclasses
import sys
import tempfile
from pathlib import Path

from lip2speech.cli import main
from lip2speech.config import load_config, save_config
from lip2speech.toy import make_toy_corpus

work = Path(tempfile.mkdtemp())
manifest = str(make_toy_corpus(work / "toy"))

# the smoke preset with 10 epochs instead of 80
cfg = load_config("smoke")
cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, epochs=10))
save_config(work / "config.json", cfg)

common = ["--config", str(work / "config.json"), "--manifest", manifest, "--cache", str(work / "cache")]
steps = [
    ["prepare", "--config", str(work / "config.json"), "--manifest", manifest, "--out", str(work / "cache")],
    ["train-units", *common, "--out", str(work / "units")],
    ["train", *common, "--out", str(work / "run")],
    ["synth", *common, "--out", str(work / "synth"), "--checkpoint", str(work / "run" / "checkpoint.pt")],
    ["eval", *common, "--out", str(work / "report"), "--synth-dir", str(work / "synth")],
]
for argv in steps:
    print("$ lip2speech", " ".join(argv[:1]))
    code = main(argv)
    if code != 0:
        sys.exit(code)

print("outputs in", work)
