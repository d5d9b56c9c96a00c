"""Binary checkpoint format.

Layout (all integers little-endian):

    8 bytes   magic b"DEMONDNC"
    u32       format version
    32 bytes  config digest (SHA-256)
    u32       record count
    records:  u32 name length, name (utf-8), u8 dtype code, u32 rank,
              rank x u32 extents, values

Parameter stores are written as float32 (code 0). Counters and generator
states use uint32 words (code 1); auxiliary float64 statistics use code 2.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"DEMONDNC"
VERSION = 1
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<u4"), 2: np.dtype("<f8")}
_DTYPE_TO_CODE = {np.dtype("float32"): 0, np.dtype("uint32"): 1, np.dtype("float64"): 2}


class CheckpointError(RuntimeError):
    pass


def encode(records: "OrderedDict[str, np.ndarray]", digest: bytes) -> bytes:
    if len(digest) != 32:
        raise CheckpointError("config digest must be 32 bytes")
    out = [MAGIC, struct.pack("<I", VERSION), digest, struct.pack("<I", len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr)
        code = _DTYPE_TO_CODE.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"record {name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BI", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes())
    return b"".join(out)


def decode(blob: bytes) -> tuple[bytes, "OrderedDict[str, np.ndarray]"]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = blob[12:44]
    (count,) = struct.unpack_from("<I", blob, 44)
    pos = 48
    records: "OrderedDict[str, np.ndarray]" = OrderedDict()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            code, rank = struct.unpack_from("<BI", blob, pos)
            pos += 5
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            dt = _CODES[code]
            size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + size > len(blob):
                raise CheckpointError(f"record {name} truncated")
            records[name] = np.frombuffer(blob, dtype=dt, count=size // dt.itemsize, offset=pos).reshape(shape).copy()
            pos += size
    except (struct.error, KeyError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last record")
    return digest, records


def save(path, records, digest: bytes) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(records, digest))
    tmp.replace(path)


def load(path, expected_digest: bytes | None = None) -> "OrderedDict[str, np.ndarray]":
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    digest, records = decode(blob)
    if expected_digest is not None and digest != expected_digest:
        raise CheckpointError(f"{path}: config digest mismatch; refusing to load")
    return records


def rng_to_words(rng: np.random.Generator) -> np.ndarray:
    """PCG64 state as 10 uint32 words."""
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise CheckpointError("only PCG64 generators are supported")
    words = []
    for v in (st["state"]["state"], st["state"]["inc"]):
        words += [(v >> (32 * i)) & 0xFFFFFFFF for i in range(4)]
    words += [st["has_uint32"], st["uinteger"]]
    return np.array(words, dtype=np.uint32)


def words_to_rng(words: np.ndarray) -> np.random.Generator:
    w = [int(x) for x in words]
    state = sum(w[i] << (32 * i) for i in range(4))
    inc = sum(w[4 + i] << (32 * i) for i in range(4))
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": state, "inc": inc},
        "has_uint32": w[8],
        "uinteger": w[9],
    }
    return rng


def u64_words(value: int) -> np.ndarray:
    return np.array([value & 0xFFFFFFFF, (value >> 32) & 0xFFFFFFFF], dtype=np.uint32)


def words_u64(words: np.ndarray) -> int:
    return int(words[0]) | (int(words[1]) << 32)
