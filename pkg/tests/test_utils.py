"""Tests for utils.py: error taxonomy, atomic writes, seed derivation, worker pool."""

from __future__ import annotations

import threading

import numpy as np
import pytest

from utils import (
    U64_MASK, DataError, NumericError, SvkError, UnsupportedFormatError, UsageError, atomic_write,
    derive_seed, parallel_map, rng_for, write_text_atomic,
)


class TestErrorTaxonomy:
    def test_all_errors_share_a_base(self):
        for cls in (UsageError, DataError, UnsupportedFormatError, NumericError):
            assert issubclass(cls, SvkError)

    def test_data_error_is_a_value_error(self):
        with pytest.raises(ValueError):
            raise DataError("bad")

    def test_unsupported_format_is_a_data_error(self):
        assert issubclass(UnsupportedFormatError, DataError)

    def test_numeric_error_is_arithmetic(self):
        assert issubclass(NumericError, ArithmeticError)


class TestAtomicWrite:
    def test_writes_and_creates_parents(self, tmp_path):
        target = tmp_path / "a" / "b" / "out.txt"
        write_text_atomic(target, "hello\n")
        assert target.read_text() == "hello\n"

    def test_no_temp_files_left(self, tmp_path):
        write_text_atomic(tmp_path / "out.txt", "x")
        assert [p.name for p in tmp_path.iterdir()] == ["out.txt"]

    def test_failure_keeps_old_contents(self, tmp_path):
        target = tmp_path / "out.txt"
        target.write_text("old")
        with pytest.raises(RuntimeError):
            with atomic_write(target) as tmp:
                tmp.write_text("new")
                raise RuntimeError("boom")
        assert target.read_text() == "old"
        assert [p.name for p in tmp_path.iterdir()] == ["out.txt"]


class TestDeriveSeed:
    def test_deterministic(self):
        assert derive_seed(7, "ubm") == derive_seed(7, "ubm")

    def test_labels_change_the_seed(self):
        assert derive_seed(7, "ubm") != derive_seed(7, "tv")
        assert derive_seed(7, "ubm") != derive_seed(8, "ubm")

    def test_label_order_matters(self):
        assert derive_seed(1, "a", "b") != derive_seed(1, "b", "a")

    def test_integer_labels(self):
        assert derive_seed(1, 0) != derive_seed(1, 1)

    def test_fits_u64(self):
        for seed in (0, 1, U64_MASK):
            assert 0 <= derive_seed(seed, "x") <= U64_MASK

    def test_rng_for_reproducible(self):
        a = rng_for(3, "noise").standard_normal(5)
        b = rng_for(3, "noise").standard_normal(5)
        np.testing.assert_array_equal(a, b)


class TestParallelMap:
    def test_sequential(self):
        assert parallel_map(lambda x: x * 2, [1, 2, 3]) == [2, 4, 6]

    def test_preserves_order_with_workers(self):
        items = list(range(50))
        assert parallel_map(lambda x: x * x, items, workers=4) == [x * x for x in items]

    def test_single_worker_runs_inline(self):
        seen = set()

        def fn(x):
            seen.add(threading.get_ident())
            return x

        parallel_map(fn, range(20), workers=1)
        assert len(seen) == 1

    def test_empty(self):
        assert parallel_map(lambda x: x, [], workers=3) == []

    def test_exception_propagates(self):
        def fn(x):
            if x == 3:
                raise DataError("bad item")
            return x

        with pytest.raises(DataError, match="bad item"):
            parallel_map(fn, range(6), workers=2)
