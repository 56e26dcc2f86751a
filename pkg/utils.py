from __future__ import annotations

import logging
import os
import tempfile
import zlib
from collections.abc import Callable, Iterable, Iterator
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path
from typing import TypeVar

import numpy as np

log = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

U64_MASK = (1 << 64) - 1


# ---------------------------------------------------------------------------
# Error taxonomy (run.py maps these onto exit codes)
# ---------------------------------------------------------------------------

class SvkError(Exception):
    """Base class for toolkit errors."""


class UsageError(SvkError):
    """Invalid flags or configuration."""


class DataError(SvkError, ValueError):
    """Bad input data: missing ids, malformed files, violated preconditions."""


class UnsupportedFormatError(DataError):
    """Audio file is readable but not PCM16 mono WAV."""


class NumericError(SvkError, ArithmeticError):
    """Singular accumulator, zero-norm projection or other numeric failure."""


# ---------------------------------------------------------------------------
# Atomic file writes
# ---------------------------------------------------------------------------

@contextmanager
def atomic_write(path: Path | str) -> Iterator[Path]:
    """Yield a temp path next to ``path``; move it into place only on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    tmp = Path(tmp_name)
    try:
        yield tmp
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def write_text_atomic(path: Path | str, text: str) -> Path:
    """Write a text file atomically (tmp + os.replace)."""
    with atomic_write(path) as tmp:
        tmp.write_text(text, encoding="utf-8")
    return Path(path)


# ---------------------------------------------------------------------------
# Seeds
# ---------------------------------------------------------------------------

def derive_seed(seed: int, *labels: str | int) -> int:
    """Derive a stable 64-bit child seed from a parent seed and labels.

    Labels are hashed with crc32 so the result does not depend on Python's
    per-process string hash randomization.
    """
    words = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    for label in labels:
        if isinstance(label, str):
            words.append(zlib.crc32(label.encode("utf-8")))
        else:
            words.append(int(label) & 0xFFFFFFFF)
    state = np.random.SeedSequence(words).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 32 | int(state[1])) & U64_MASK


def rng_for(seed: int, *labels: str | int) -> np.random.Generator:
    """Numpy generator seeded from ``derive_seed(seed, *labels)``."""
    return np.random.default_rng(derive_seed(seed, *labels))


# ---------------------------------------------------------------------------
# Worker pool
# ---------------------------------------------------------------------------

def parallel_map(fn: Callable[[T], R], items: Iterable[T], workers: int = 1) -> list[R]:
    """Map ``fn`` over ``items``; results come back in input order for any pool size."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
