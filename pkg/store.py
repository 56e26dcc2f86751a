"""Binary artifact containers.

SVKF1  feature cache:   magic, <III (num_frames, dim, 0), float32 rows
SVKM1  model container: magic, version byte, type tag, JSON meta, named float64 arrays
SVKE1  embeddings:      magic, <II (count, dim), then per record: u16 id length,
                        utf-8 id, float32 vector
"""

from __future__ import annotations

import json
import logging
import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np

from audio import FeatureMatrix
from utils import DataError, atomic_write

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"SVKF1"
MODEL_MAGIC = b"SVKM1"
EMBEDDING_MAGIC = b"SVKE1"
MODEL_VERSION = 1


# ---------------------------------------------------------------------------
# Feature cache
# ---------------------------------------------------------------------------

def save_features(f: FeatureMatrix, path: Path | str) -> Path:
    rows = np.ascontiguousarray(f.rows, dtype="<f4")
    with atomic_write(path) as tmp, open(tmp, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", rows.shape[0], rows.shape[1], 0))
        fh.write(rows.tobytes())
    return Path(path)


def load_features(path: Path | str, frame_shift_ms: float = 10.0, descriptor: str = "") -> FeatureMatrix:
    raw = Path(path).read_bytes()
    if raw[:5] != FEATURE_MAGIC or len(raw) < 17:
        raise DataError(f"{path}: not an SVKF1 feature file")
    frames, dim, _ = struct.unpack_from("<III", raw, 5)
    body = raw[17:]
    if len(body) != frames * dim * 4:
        raise DataError(f"{path}: expected {frames}x{dim} floats, file holds {len(body) // 4}")
    rows = np.frombuffer(body, dtype="<f4").reshape(frames, dim).astype(np.float64)
    return FeatureMatrix(rows, frame_shift_ms, descriptor)


# ---------------------------------------------------------------------------
# Model container
# ---------------------------------------------------------------------------

def save_container(path: Path | str, tag: str, meta: Mapping, arrays: Mapping[str, np.ndarray]) -> Path:
    """Write a typed model container; array order is the mapping's insertion order."""
    tag_b = tag.encode("ascii")
    meta_b = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with atomic_write(path) as tmp, open(tmp, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<BB", MODEL_VERSION, len(tag_b)))
        fh.write(tag_b)
        fh.write(struct.pack("<I", len(meta_b)))
        fh.write(meta_b)
        fh.write(struct.pack("<I", len(arrays)))
        for name, value in arrays.items():
            arr = np.ascontiguousarray(value, dtype="<f8")
            name_b = name.encode("ascii")
            fh.write(struct.pack("<BB", len(name_b), arr.ndim))
            fh.write(name_b)
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    log.debug("Wrote %s container %s (%d arrays)", tag, path, len(arrays))
    return Path(path)


def load_container(path: Path | str, expect_tag: str | None = None) -> tuple[str, dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"model file not found: {path}")
    raw = path.read_bytes()
    if raw[:5] != MODEL_MAGIC:
        raise DataError(f"{path}: not an SVKM1 model file")
    try:
        version, tag_len = struct.unpack_from("<BB", raw, 5)
        if version != MODEL_VERSION:
            raise DataError(f"{path}: unsupported container version {version}")
        pos = 7
        tag = raw[pos : pos + tag_len].decode("ascii")
        pos += tag_len
        (meta_len,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        meta = json.loads(raw[pos : pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            name_len, ndim = struct.unpack_from("<BB", raw, pos)
            pos += 2
            name = raw[pos : pos + name_len].decode("ascii")
            pos += name_len
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64)) * 8
            arrays[name] = np.frombuffer(raw[pos : pos + size], dtype="<f8").reshape(shape).copy()
            pos += size
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise DataError(f"{path}: truncated or corrupt model container: {e}") from e
    if expect_tag is not None and tag != expect_tag:
        raise DataError(f"{path}: expected a {expect_tag} model, found {tag}")
    return tag, meta, arrays


# ---------------------------------------------------------------------------
# Embedding archive
# ---------------------------------------------------------------------------

def save_embeddings(path: Path | str, embeddings: Mapping[str, np.ndarray]) -> Path:
    """Write an embedding archive; records are sorted by utterance id."""
    ids = sorted(embeddings)
    dim = len(embeddings[ids[0]]) if ids else 0
    with atomic_write(path) as tmp, open(tmp, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<II", len(ids), dim))
        for utt_id in ids:
            vec = np.asarray(embeddings[utt_id], dtype="<f4").reshape(-1)
            if vec.size != dim:
                raise DataError(f"embedding {utt_id!r} has dim {vec.size}, archive dim is {dim}")
            id_b = utt_id.encode("utf-8")
            fh.write(struct.pack("<H", len(id_b)))
            fh.write(id_b)
            fh.write(vec.tobytes())
    return Path(path)


def load_embeddings(path: Path | str) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"embedding archive not found: {path}")
    raw = path.read_bytes()
    if raw[:5] != EMBEDDING_MAGIC:
        raise DataError(f"{path}: not an SVKE1 embedding archive")
    count, dim = struct.unpack_from("<II", raw, 5)
    pos = 13
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (id_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            utt_id = raw[pos : pos + id_len].decode("utf-8")
            pos += id_len
            out[utt_id] = np.frombuffer(raw[pos : pos + 4 * dim], dtype="<f4").astype(np.float64)
            pos += 4 * dim
    except (struct.error, UnicodeDecodeError) as e:
        raise DataError(f"{path}: truncated embedding archive: {e}") from e
    return out
