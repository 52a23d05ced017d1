"""Binary checkpoint format.

Layout (little-endian)::

    b"GANC" | u32 version | u64 grammar hash | u32 meta length | meta (UTF-8 JSON)
    then per entry until EOF:
    u16 name length | name (UTF-8) | u8 rank | u32 dim * rank | float32 data

The JSON block carries the config echo and vocabularies, enough to rebuild
both models without the original config file.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"GANC"
VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class GrammarHashMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    grammar_hash: int
    meta: dict
    arrays: dict  # name -> float32 ndarray, in file order

    def to_bytes(self) -> bytes:
        meta = json.dumps(self.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        out = [MAGIC, struct.pack("<IQI", VERSION, self.grammar_hash, len(meta)), meta]
        for name, arr in self.arrays.items():
            arr = np.asarray(arr, dtype="<f4")
            raw = name.encode("utf-8")
            out.append(struct.pack("<H", len(raw)) + raw)
            out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(arr.tobytes(order="C"))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes, grammar_hash: int | None = None) -> "Checkpoint":
        pos = 0

        def take(n, what):
            nonlocal pos
            if pos + n > len(buf):
                raise TruncatedCheckpointError(f"checkpoint truncated while reading {what} at byte {pos}")
            chunk = buf[pos : pos + n]
            pos += n
            return chunk

        if len(buf) < 4 or buf[:4] != MAGIC:
            raise BadMagicError(f"not a checkpoint: magic {buf[:4]!r} != {MAGIC!r}")
        pos = 4
        (version,) = struct.unpack("<I", take(4, "version"))
        if version != VERSION:
            raise VersionMismatchError(f"checkpoint format version {version}, expected {VERSION}")
        (ghash,) = struct.unpack("<Q", take(8, "grammar hash"))
        if grammar_hash is not None and ghash != grammar_hash:
            raise GrammarHashMismatchError(f"checkpoint grammar hash {ghash:016x} != active grammar {grammar_hash:016x}")
        (mlen,) = struct.unpack("<I", take(4, "meta length"))
        meta = json.loads(take(mlen, "meta").decode("utf-8"))
        arrays = {}
        while pos < len(buf):
            (nlen,) = struct.unpack("<H", take(2, "name length"))
            name = take(nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", take(1, f"rank of {name}"))
            dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
            count = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(take(4 * count, f"data of {name}"), dtype="<f4").reshape(dims)
            arrays[name] = data.astype(np.float32)
        return cls(ghash, meta, arrays)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path, grammar_hash: int | None = None) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes(), grammar_hash)
