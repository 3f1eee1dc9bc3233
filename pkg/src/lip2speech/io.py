"""On-disk formats: the named-array container and the utterance manifest.

Array container layout (all integers little-endian)::

    magic      8 bytes  b"L2SARR01"
    count      u32
    per array:
      name_len u16, name utf-8
      dtype    u8   (0 = float32, 1 = float64, 2 = int32)
      ndim     u8
      shape    ndim x u64
      payload  row-major, little-endian

Manifest: one utterance per line, tab-separated
``id  audio_path  visual_path|-  split  transcript``.  Blank lines and lines
starting with ``#`` are skipped.  Relative paths resolve against the
manifest's directory.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"L2SARR01"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i4")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int32"): 2}
SPLITS = ("train", "val", "test")


class FormatError(ValueError):
    pass


def write_arrays(path: str | os.PathLike, arrays: Mapping[str, np.ndarray]) -> None:
    """Write named arrays atomically (temp file, then rename).

    Integer arrays are stored as int32 and must fit in that range; float
    arrays keep their 32- or 64-bit width.
    """
    chunks = [MAGIC, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype.kind in "iub":
            if arr.size and (arr.min() < -(2 ** 31) or arr.max() >= 2 ** 31):
                raise FormatError(f"array {name!r} does not fit in int32")
            arr = arr.astype("<i4")
        elif arr.dtype not in _CODES:
            raise FormatError(f"array {name!r}: unsupported dtype {arr.dtype}")
        code = _CODES[np.dtype(arr.dtype.name)]
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def read_arrays(path: str | os.PathLike) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise FormatError(f"{path}: not an array container (bad magic)")
    pos = 8
    out: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated array container")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code} for {name!r}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dtype = _DTYPES[code]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(take(n_bytes), dtype=dtype).reshape(shape)
        out[name] = arr.astype(dtype.newbyteorder("="))
    if pos != len(data):
        raise FormatError(f"{path}: trailing bytes after {count} arrays")
    return out


@dataclass(frozen=True)
class UtteranceRecord:
    id: str
    audio_path: str
    visual_feature_path: str | None = None
    transcript: str = ""
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise FormatError(f"utterance {self.id}: invalid split {self.split!r}")
        if not self.id or any(c in self.id for c in "\t\n/"):
            raise FormatError(f"invalid utterance id {self.id!r}")


def parse_manifest(path: str | os.PathLike) -> list[UtteranceRecord]:
    path = Path(path)
    base = path.parent
    records: list[UtteranceRecord] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip() or raw.startswith("#"):
            continue
        fields = raw.split("\t")
        if len(fields) < 5:
            raise FormatError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(fields)}")
        uid, audio, visual, split = fields[:4]
        transcript = "\t".join(fields[4:]).strip()
        try:
            rec = UtteranceRecord(
                id=uid,
                audio_path=_resolve(base, audio),
                visual_feature_path=None if visual == "-" else _resolve(base, visual),
                transcript=transcript,
                split=split,
            )
        except FormatError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
        if uid in seen:
            raise FormatError(f"{path}:{lineno}: duplicate utterance id {uid!r}")
        seen.add(uid)
        records.append(rec)
    return records


def write_manifest(path: str | os.PathLike, records: list[UtteranceRecord]) -> None:
    lines = []
    for r in records:
        visual = r.visual_feature_path if r.visual_feature_path else "-"
        lines.append("\t".join([r.id, r.audio_path, visual, r.split, r.transcript]))
    path = os.fspath(path)
    tmp = path + ".tmp"
    Path(tmp).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    os.replace(tmp, path)


def _resolve(base: Path, p: str) -> str:
    return p if os.path.isabs(p) else os.path.normpath(os.fspath(base / p))
