"""Stand-ins for the pretrained upstream models.

The visual front-end, lip-to-text + G2P, and speaker encoder are external
pretrained networks.  Each is replaced here by a provider with a file-loading
mode (for features computed elsewhere) and a self-contained mode (synthetic
features, table-lookup G2P, random-projection timbre stub).
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .audio import MelSpectrogram
from .io import UtteranceRecord, read_arrays

SILENCE_ID = 0
# ARPAbet without stress marks; id 0 is the silence/blank symbol
PHONEME_INVENTORY = (
    "sil",
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH",
    "EH", "ER", "EY", "F", "G", "HH", "IH", "IY", "JH", "K",
    "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH",
    "T", "TH", "UH", "UW", "V", "W", "Y", "Z", "ZH",
)
VISUAL_FPS = 25


class ProviderError(ValueError):
    pass


@dataclass
class VisualFeatures:
    matrix: np.ndarray  # T_v x D_v
    fps: int = VISUAL_FPS

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[0] < 1:
            raise ProviderError("visual features must be a non-empty T_v x D_v matrix")

    @property
    def n_frames(self) -> int:
        return self.matrix.shape[0]


@dataclass
class PhonemeSequence:
    ids: np.ndarray
    inventory_size: int = len(PHONEME_INVENTORY)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.ndim != 1 or len(self.ids) < 1:
            raise ProviderError("phoneme sequence must be non-empty")
        if self.ids.min() < 0 or self.ids.max() >= self.inventory_size:
            raise ProviderError(f"phoneme id out of inventory (size {self.inventory_size})")

    def __len__(self):
        return len(self.ids)


@dataclass
class TimbreEmbedding:
    vector: np.ndarray


def _utterance_key(seed: int, uid: str) -> list[int]:
    digest = hashlib.sha256(uid.encode("utf-8")).digest()
    return [int(seed), int.from_bytes(digest[:8], "little")]


def provide_visual(
    record: UtteranceRecord,
    mode: str = "synthetic",
    *,
    n_frames: int | None = None,
    dim: int = 768,
    seed: int = 0,
) -> VisualFeatures:
    """Visual front-end features for one utterance.

    ``file`` loads the ``features`` array from ``record.visual_feature_path``
    verbatim.  ``synthetic`` draws a standard-normal ``n_frames x dim`` matrix
    from a generator keyed by ``(seed, record.id)``.
    """
    if mode == "file":
        if not record.visual_feature_path or not os.path.exists(record.visual_feature_path):
            raise ProviderError(f"{record.id}: visual feature file missing: {record.visual_feature_path}")
        arrays = read_arrays(record.visual_feature_path)
        mat = arrays["features"] if "features" in arrays else next(iter(arrays.values()))
        if mat.ndim != 2 or mat.shape[1] != dim:
            raise ProviderError(
                f"{record.id}: visual feature dimension mismatch: file has {mat.shape[-1]}, run expects {dim}"
            )
        return VisualFeatures(np.asarray(mat, dtype=np.float32))
    if mode == "synthetic":
        if n_frames is None or n_frames < 1:
            raise ProviderError("synthetic visual features need a positive frame count")
        rng = np.random.default_rng(_utterance_key(seed, record.id))
        return VisualFeatures(rng.standard_normal((n_frames, dim)).astype(np.float32))
    raise ProviderError(f"unknown visual provider mode {mode!r}")


class TableG2P:
    """Closed-vocabulary grapheme-to-phoneme lookup.

    Maps each word to a list of phoneme ids; words in a transcript are joined
    by the silence id.
    """

    def __init__(self, table: Mapping[str, Sequence[int]], inventory: Sequence[str] = PHONEME_INVENTORY):
        self.inventory = tuple(inventory)
        self.table = {w.lower(): [int(i) for i in ids] for w, ids in table.items()}
        for w, ids in self.table.items():
            bad = [i for i in ids if not 0 < i < len(self.inventory)]
            if bad:
                raise ProviderError(f"word {w!r} uses phoneme ids outside the inventory: {bad}")

    @classmethod
    def from_file(cls, path: str | os.PathLike, inventory: Sequence[str] = PHONEME_INVENTORY) -> "TableG2P":
        index = {p: i for i, p in enumerate(inventory)}
        table = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            try:
                word, phones = line.split("\t")
                table[word.strip()] = [index[p] for p in phones.split()]
            except (ValueError, KeyError) as exc:
                raise ProviderError(f"{path}:{lineno}: bad G2P entry ({exc})") from exc
        return cls(table, inventory)

    @classmethod
    def bundled(cls) -> "TableG2P":
        with resources.as_file(resources.files(__package__) / "data" / "g2p_toy.tsv") as p:
            return cls.from_file(p)

    @property
    def vocabulary(self) -> list[str]:
        return sorted(self.table)

    def ids_for(self, transcript: str) -> list[int]:
        words = transcript.lower().split()
        if not words:
            return [SILENCE_ID]
        out: list[int] = []
        for n, word in enumerate(words):
            if word not in self.table:
                raise ProviderError(f"OOV: {word}")
            if n:
                out.append(SILENCE_ID)
            out.extend(self.table[word])
        return out

    def decode(self, ids: Sequence[int]) -> list[list[str]]:
        """Split ids at silence and map back to phoneme symbols, one list per word."""
        words: list[list[str]] = [[]]
        for i in ids:
            if i == SILENCE_ID:
                words.append([])
            else:
                words[-1].append(self.inventory[i])
        return [w for w in words if w]

    def phonemes(self, transcript: str) -> list[list[str]]:
        return [[self.inventory[i] for i in self.table[w]] for w in transcript.lower().split()]


def provide_phonemes(
    record: UtteranceRecord,
    mode: str = "transcript",
    *,
    g2p: TableG2P | None = None,
    path: str | os.PathLike | None = None,
) -> PhonemeSequence:
    if mode == "transcript":
        g2p = g2p or TableG2P.bundled()
        return PhonemeSequence(np.array(g2p.ids_for(record.transcript)), len(g2p.inventory))
    if mode == "file":
        if path is None or not os.path.exists(path):
            raise ProviderError(f"{record.id}: phoneme file missing: {path}")
        return PhonemeSequence(read_arrays(path)["phonemes"])
    raise ProviderError(f"unknown phoneme provider mode {mode!r}")


class StubTimbreEncoder:
    """Utterance-level speaker vector from a fixed random projection.

    The log-mel time-mean is centred across bands (removing overall level,
    which only shifts every log-mel entry by a constant), projected with a
    seeded Gaussian matrix and L2-normalized.
    """

    def __init__(self, n_mels: int = 80, dim: int = 256, seed: int = 0):
        rng = np.random.default_rng([int(seed), 0x7173])
        self.projection = rng.standard_normal((dim, n_mels)) / np.sqrt(n_mels)

    def __call__(self, mel: MelSpectrogram) -> TimbreEmbedding:
        return TimbreEmbedding(self.embed(mel.frames))

    def embed(self, frames: np.ndarray) -> np.ndarray:
        if frames.shape[0] < 1:
            raise ProviderError("cannot embed an empty mel spectrogram")
        profile = frames.mean(axis=0)
        profile = profile - profile.mean()
        v = self.projection @ profile
        norm = np.linalg.norm(v)
        if norm < 1e-12:
            # flat spectrum (e.g. digital silence): fall back to a fixed unit vector
            v = np.zeros_like(v)
            v[0] = 1.0
            return v
        return v / norm


def timbre_embed(
    mel: MelSpectrogram,
    mode: str = "stub",
    *,
    dim: int = 256,
    seed: int = 0,
    path: str | os.PathLike | None = None,
) -> TimbreEmbedding:
    if mel.frames.shape[0] < 1:
        raise ProviderError("empty mel spectrogram")
    if mode == "stub":
        return StubTimbreEncoder(mel.frames.shape[1], dim, seed)(mel)
    if mode == "file":
        if path is None or not os.path.exists(path):
            raise ProviderError(f"timbre embedding file missing: {path}")
        v = np.asarray(read_arrays(path)["timbre"], dtype=np.float64).reshape(-1)
        if v.shape[0] != dim:
            raise ProviderError(f"timbre dimension mismatch: file has {v.shape[0]}, run expects {dim}")
        return TimbreEmbedding(v / np.linalg.norm(v))
    raise ProviderError(f"unknown timbre provider mode {mode!r}")
