import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    from lip2speech.toy import make_toy_corpus

    return make_toy_corpus(tmp_path_factory.mktemp("toy"))


@pytest.fixture(scope="session")
def smoke_pipeline(tmp_path_factory, toy_corpus):
    """One full CLI run (prepare, train-units, train, synth, eval) on the toy corpus with the smoke preset.

    Returns the working directory plus per-stage exit codes and wall-clock seconds.
    """
    import time

    from lip2speech.cli import main

    work = tmp_path_factory.mktemp("smoke")
    cache = work / "cache"
    common = ["--config", "smoke", "--manifest", str(toy_corpus)]
    stages = {
        "prepare": ["prepare", *common, "--out", str(cache)],
        "train-units": ["train-units", *common, "--out", str(work / "units"), "--cache", str(cache)],
        "train": ["train", *common, "--out", str(work / "run"), "--cache", str(cache)],
        "synth": ["synth", *common, "--out", str(work / "synth"), "--cache", str(cache),
                  "--checkpoint", str(work / "run" / "checkpoint.pt")],
        "eval": ["eval", *common, "--out", str(work / "report"), "--synth-dir", str(work / "synth")],
    }
    codes, seconds = {}, {}
    for name, argv in stages.items():
        start = time.perf_counter()
        codes[name] = main(argv)
        seconds[name] = time.perf_counter() - start
        if codes[name] != 0:
            break
    return {"dir": work, "cache": cache, "manifest": toy_corpus, "codes": codes, "seconds": seconds}


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
