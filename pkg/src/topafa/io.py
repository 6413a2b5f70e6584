"""On-disk formats: embedding files, checkpoints, synthetic ground truth, CSVs.

Embedding file (``.afae``), little-endian::

    b"AFAE" | u32 version=1 | u32 d | u64 n | n*d float32, row-major

Checkpoint directory: ``params.json`` plus ``weights.bin`` holding float32
[W_enc (d*h), b_enc (d), W_dec (h*d), b_dec (d)].
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .activations import ActivationSpec
from .model import EmbeddingBatch, SaeParams

MAGIC = b"AFAE"
EMBEDDING_VERSION = 1
CHECKPOINT_VERSION = 1
HEADER = struct.Struct("<4sIIQ")
F32 = np.dtype("<f4")
# whole-file loads above this many payload bytes are refused; stream instead
DEFAULT_MEMORY_CAP = 256 * 1024 * 1024


class FormatError(ValueError):
    """Malformed or inconsistent file contents."""


@contextmanager
def atomic_write(path, mode: str = "wb"):
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if "b" in mode else {"newline": "", "encoding": "utf-8"})) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    with atomic_write(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- embeddings -------------------------------------------------------------

def write_embeddings(path, batches) -> int:
    """Write an array or an iterable of (B, d) batches; returns the row count."""
    if isinstance(batches, (np.ndarray, EmbeddingBatch)):
        batches = [batches]
    n = 0
    d = None
    with atomic_write(path) as fh:
        fh.write(HEADER.pack(MAGIC, EMBEDDING_VERSION, 0, 0))
        for batch in batches:
            rows = np.asarray(getattr(batch, "rows", batch))
            if rows.ndim != 2:
                raise ValueError(f"batches must be 2-D, got shape {rows.shape}")
            if d is None:
                d = rows.shape[1]
            elif rows.shape[1] != d:
                raise ValueError(f"batch width {rows.shape[1]} differs from first batch width {d}")
            out = rows.astype(F32)
            if not np.all(np.isfinite(out)):
                raise ValueError("refusing to write non-finite embeddings")
            fh.write(out.tobytes(order="C"))
            n += rows.shape[0]
        fh.seek(0)
        fh.write(HEADER.pack(MAGIC, EMBEDDING_VERSION, d or 0, n))
    return n


def read_header(fh) -> tuple[int, int]:
    raw = fh.read(HEADER.size)
    if len(raw) < HEADER.size:
        raise FormatError(f"truncated header: expected {HEADER.size} bytes at offset 0, got {len(raw)}")
    magic, version, d, n = HEADER.unpack(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte offset 0, expected {MAGIC!r}")
    if version != EMBEDDING_VERSION:
        raise FormatError(f"unsupported version {version} at byte offset 4")
    return d, n


def embedding_info(path) -> tuple[int, int]:
    """(d, n) of an embedding file, validating the payload length."""
    path = Path(path)
    with open(path, "rb") as fh:
        d, n = read_header(fh)
    expected = n * d * 4
    actual = path.stat().st_size - HEADER.size
    if actual != expected:
        raise FormatError(
            f"{path}: payload starting at byte offset {HEADER.size} has {actual} bytes, "
            f"expected {expected} (n={n}, d={d})"
        )
    return d, n


def read_embeddings(path, batch_size: int = 4096, source_tag: str | None = None) -> Iterator[EmbeddingBatch]:
    """Stream fixed-size batches (the last may be short); memory use is O(batch)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    path = Path(path)
    d, n = embedding_info(path)
    tag = path.stem if source_tag is None else source_tag
    with open(path, "rb") as fh:
        fh.seek(HEADER.size)
        done = 0
        while done < n:
            m = min(batch_size, n - done)
            offset = HEADER.size + done * d * 4
            buf = fh.read(m * d * 4)
            if len(buf) != m * d * 4:
                raise FormatError(f"short read at byte offset {offset}: expected {m * d * 4} bytes, got {len(buf)}")
            rows = np.frombuffer(buf, dtype=F32).reshape(m, d).astype(np.float64)
            if not np.all(np.isfinite(rows)):
                bad = int(np.flatnonzero(~np.isfinite(rows).all(axis=1))[0])
                raise FormatError(f"non-finite value in row {done + bad} (byte offset {offset + bad * d * 4})")
            yield EmbeddingBatch(rows, tag)
            done += m


def load_embeddings(path, memory_cap: int = DEFAULT_MEMORY_CAP) -> np.ndarray:
    d, n = embedding_info(path)
    if n * d * 4 > memory_cap:
        raise FormatError(f"{path}: {n * d * 4} payload bytes exceed the in-memory cap of {memory_cap}; "
                          "use read_embeddings to stream")
    if n == 0:
        return np.zeros((0, d))
    return np.concatenate([b.rows for b in read_embeddings(path, batch_size=max(1, n))])


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(directory, params: SaeParams, spec: ActivationSpec, meta: dict | None = None,
                    tie_pre_bias: bool = False, seed: int | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = np.concatenate([params.W_enc.ravel(), params.b_enc, params.W_dec.ravel(), params.b_dec])
    with atomic_write(directory / "weights.bin") as fh:
        fh.write(payload.astype(F32).tobytes())
    write_json(directory / "params.json", {
        "format_version": CHECKPOINT_VERSION,
        "d": params.d,
        "h": params.h,
        "activation_spec": spec.to_dict(),
        "tie_pre_bias": bool(tie_pre_bias),
        "seed": seed,
        "training": meta or {},
    })
    return directory


def load_checkpoint(directory) -> tuple[SaeParams, ActivationSpec, dict]:
    directory = Path(directory)
    try:
        info = json.loads((directory / "params.json").read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{directory / 'params.json'}: invalid JSON ({exc})") from None
    if info.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint format_version {info.get('format_version')!r}")
    d, h = info.get("d"), info.get("h")
    if not (isinstance(d, int) and isinstance(h, int) and d >= 1 and h >= 1):
        raise FormatError(f"params.json dims must be positive integers, got d={d!r}, h={h!r}")
    raw = (directory / "weights.bin").read_bytes()
    expected = (2 * d * h + 2 * d) * 4
    if len(raw) != expected:
        raise FormatError(f"weights.bin has {len(raw)} bytes but d={d}, h={h} needs {expected}")
    w = np.frombuffer(raw, dtype=F32).astype(np.float64)
    parts = np.split(w, np.cumsum([d * h, d, h * d]))
    params = SaeParams(parts[0].reshape(d, h), parts[1], parts[2].reshape(h, d), parts[3])
    spec = ActivationSpec.from_dict(info.get("activation_spec", {"kind": "relu"}))
    return params, spec, info


# -- synthetic ground truth -------------------------------------------------

CODE_COUNT = struct.Struct("<I")
CODE_PAIR = np.dtype([("index", "<u4"), ("value", "<f4")])


def write_codes(path, codes) -> None:
    with atomic_write(path) as fh:
        for idx, val in zip(codes.indices, codes.values):
            nz = val != 0
            fh.write(CODE_COUNT.pack(int(nz.sum())))
            pairs = np.empty(int(nz.sum()), dtype=CODE_PAIR)
            pairs["index"] = idx[nz]
            pairs["value"] = val[nz]
            fh.write(pairs.tobytes())


def read_codes(path) -> list[tuple[np.ndarray, np.ndarray]]:
    raw = Path(path).read_bytes()
    out = []
    pos = 0
    while pos < len(raw):
        if pos + 4 > len(raw):
            raise FormatError(f"truncated code count at byte offset {pos}")
        (count,) = CODE_COUNT.unpack_from(raw, pos)
        pos += 4
        end = pos + count * CODE_PAIR.itemsize
        if end > len(raw):
            raise FormatError(f"truncated code pairs at byte offset {pos}: need {count * 8} bytes")
        pairs = np.frombuffer(raw[pos:end], dtype=CODE_PAIR)
        out.append((pairs["index"].astype(np.int64), pairs["value"].astype(np.float64)))
        pos = end
    return out


def write_synth(directory, truth) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_embeddings(directory / "embeddings.afae", truth.embeddings)
    write_codes(directory / "codes.bin", truth.codes)
    write_json(directory / "ground_truth.json", truth.metadata())
    with atomic_write(directory / "dictionary.bin") as fh:
        fh.write(truth.D.astype(F32).tobytes())
    return directory


# -- CSV --------------------------------------------------------------------

def write_csv(path, header: Iterable[str], rows: Iterable) -> None:
    header = list(header)
    with atomic_write(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            if isinstance(row, dict):
                row = [row[k] for k in header]
            w.writerow([repr(x) if isinstance(x, float) else x for x in row])


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()
