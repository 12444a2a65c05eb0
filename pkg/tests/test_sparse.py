"""Kernel tests: every expected value is either forced analytically or
computed by the dense brute-force oracle below."""

import numpy as np
import pytest

from faasim.errors import ContractViolation
from faasim.sparse import (
    ActivationSpec,
    ModelDef,
    SparseMatrix,
    accumulate,
    apply_activation,
    extract_rows,
    extract_row_range,
    merge_row_blocks,
    serial_inference,
    spmm,
)


def dense_oracle_mm(w: SparseMatrix, x: SparseMatrix, n: int) -> np.ndarray:
    """Brute-force float64 multiply on densified operands."""
    return w.to_dense(n) @ x.to_dense(w.n_cols)


def random_sparse(n_rows, n_cols, density, seed, dtype=np.float32):
    rng = np.random.default_rng(seed)
    dense = np.where(rng.random((n_rows, n_cols)) < density, rng.integers(1, 5, (n_rows, n_cols)), 0)
    return SparseMatrix.from_dense(dense.astype(dtype), dtype=dtype)


def identity(n):
    return SparseMatrix.from_rows(n, [(i, [i], [1.0]) for i in range(n)])


class TestSpmm:
    def test_identity(self):
        x = random_sparse(4, 3, 0.5, seed=1)
        z = spmm(identity(4), x)
        assert np.array_equal(z.row_ids, x.row_ids)
        assert np.array_equal(z.col_idx, x.col_idx)
        assert np.array_equal(z.values, x.values.astype(np.float64))

    def test_single_entry(self):
        w = SparseMatrix.from_rows(4, [(0, [2], [2.0])])
        x = SparseMatrix.from_rows(1, [(2, [0], [3.0])])
        z = spmm(w, x)
        assert list(z.row_ids) == [0]
        assert z.values[0] == 6.0

    def test_against_dense_oracle(self):
        w = random_sparse(8, 8, 0.3, seed=7)
        x = random_sparse(8, 2, 0.3, seed=70)
        z = spmm(w, x)
        expected = dense_oracle_mm(w, x, 8)
        assert np.array_equal(z.to_dense(8), expected)

    def test_structurally_zero_rows_dropped(self):
        w = SparseMatrix.from_rows(4, [(0, [0], [1.0]), (3, [1], [1.0])])
        x = SparseMatrix.from_rows(2, [(0, [0], [5.0])])  # row 1 absent
        z = spmm(w, x)
        assert list(z.row_ids) == [0]

    def test_runtime_zero_entries_kept(self):
        w = SparseMatrix.from_rows(2, [(0, [0, 1], [1.0, -1.0])])
        x = SparseMatrix.from_rows(1, [(0, [0], [2.0]), (1, [0], [2.0])])
        z = spmm(w, x)
        assert z.nnz == 1 and z.values[0] == 0.0

    def test_dimension_mismatch(self):
        w = SparseMatrix.from_rows(2, [(0, [0], [1.0])])
        x = SparseMatrix.from_rows(1, [(5, [0], [1.0])])
        with pytest.raises(ContractViolation):
            spmm(w, x)


class TestExtractRows:
    def test_all_rows_is_identity(self):
        x = random_sparse(6, 3, 0.6, seed=2)
        assert extract_rows(x, [int(g) for g in x.row_ids]) == x

    def test_disjoint_rows_empty(self):
        x = random_sparse(6, 3, 0.6, seed=3)
        sub = extract_rows(x, [100, 101])
        assert sub.n_rows == 0

    def test_partial_intersection(self):
        x = SparseMatrix.from_rows(2, [(1, [0], [1.0]), (4, [1], [2.0]), (9, [0], [3.0])])
        sub = extract_rows(x, [4, 9, 12])
        assert list(sub.row_ids) == [4, 9]
        assert list(sub.values) == [2.0, 3.0]

    def test_row_range(self):
        x = SparseMatrix.from_rows(2, [(1, [0], [1.0]), (4, [1], [2.0]), (9, [0], [3.0])])
        sub = extract_row_range(x, 2, 5)  # rows [2, 7)
        assert list(sub.row_ids) == [4]


class TestAccumulate:
    def test_empty_operand_is_noop(self):
        w = random_sparse(4, 4, 0.5, seed=4)
        z = spmm(w, random_sparse(4, 2, 0.5, seed=5))
        out = accumulate(z, w, SparseMatrix.empty(2))
        assert out == z

    def test_zero_accumulator_identity_weights(self):
        x = random_sparse(4, 2, 0.7, seed=6)
        out = accumulate(SparseMatrix.empty(2, dtype=np.float64), identity(4), x)
        assert np.array_equal(out.to_dense(4), x.to_dense(4).astype(np.float64))

    def test_split_equals_whole(self):
        # two partial accumulations over a row-split of X == one spmm over X
        w = random_sparse(8, 8, 0.4, seed=8)
        x = random_sparse(8, 3, 0.5, seed=9)
        lo = extract_row_range(x, 0, 4)
        hi = extract_row_range(x, 4, 4)
        z = accumulate(spmm(w, lo), w, hi)
        assert z.to_dense(8).tolist() == spmm(w, x).to_dense(8).tolist()

    def test_rows_not_subset_rejected(self):
        w = SparseMatrix.from_rows(2, [(0, [0], [1.0])])
        z = SparseMatrix.from_rows(2, [(5, [0], [1.0])], dtype=np.float64)
        with pytest.raises(ContractViolation):
            accumulate(z, w, SparseMatrix.from_rows(1, [(0, [0], [1.0])]))


class TestApplyActivation:
    def test_bias_shift(self):
        z = SparseMatrix.from_rows(1, [(0, [0], [5.0])], dtype=np.float64)
        out = apply_activation(z, ActivationSpec(bias=-0.30, y_max=32.0))
        assert out.values[0] == np.float32(5.0 + np.float32(-0.30))

    def test_ceiling(self):
        z = SparseMatrix.from_rows(1, [(0, [0], [40.0])], dtype=np.float64)
        out = apply_activation(z, ActivationSpec(bias=0.0, y_max=32.0))
        assert out.values[0] == np.float32(32.0)

    def test_relu_removes_entry_and_row(self):
        z = SparseMatrix.from_rows(1, [(0, [0], [0.1])], dtype=np.float64)
        out = apply_activation(z, ActivationSpec(bias=-0.30, y_max=32.0))
        assert out.n_rows == 0 and out.nnz == 0

    def test_idempotent_with_zero_bias(self):
        spec = ActivationSpec(bias=0.0, y_max=32.0)
        z = random_sparse(6, 4, 0.5, seed=11, dtype=np.float64)
        once = apply_activation(z, spec)
        twice = apply_activation(once, spec)
        assert once == twice

    def test_y_max_positive_required(self):
        with pytest.raises(ContractViolation):
            ActivationSpec(bias=0.0, y_max=0.0)


class TestSerialInference:
    def test_identity_layer_zero_bias_is_clamp(self):
        x0 = SparseMatrix.from_rows(3, [(0, [0], [40.0]), (2, [1, 2], [1.0, -2.0])])
        model = ModelDef(1, 3, [identity(3)], ActivationSpec(bias=0.0, y_max=32.0))
        out = serial_inference(model, x0)
        assert out.to_dense(3).tolist() == np.clip(x0.to_dense(3), 0, 32).tolist()

    def test_two_layer_hand_model(self):
        # W1 = [[1, 2], [0, 1]], W2 = [[0.5, 0], [1, 1]], bias -0.25, x0 = [1, 1]
        w1 = SparseMatrix.from_rows(2, [(0, [0, 1], [1.0, 2.0]), (1, [1], [1.0])])
        w2 = SparseMatrix.from_rows(2, [(0, [0], [0.5]), (1, [0, 1], [1.0, 1.0])])
        x0 = SparseMatrix.from_rows(1, [(0, [0], [1.0]), (1, [0], [1.0])])
        model = ModelDef(2, 2, [w1, w2], ActivationSpec(bias=-0.25, y_max=32.0))
        # layer 1: [3, 1] -> bias -> [2.75, 0.75]
        # layer 2: [1.375, 3.5] -> bias -> [1.125, 3.25]
        out = serial_inference(model, x0)
        assert out.to_dense(2)[:, 0].tolist() == [1.125, 3.25]

    def test_input_dimension_checked(self):
        model = ModelDef(1, 2, [identity(2)], ActivationSpec(0.0, 32.0))
        x0 = SparseMatrix.from_rows(1, [(7, [0], [1.0])])
        with pytest.raises(ContractViolation):
            serial_inference(model, x0)


class TestInvariantsAndProperties:
    def test_validate_catches_bad_row_ptr(self):
        m = SparseMatrix(
            n_cols=2,
            row_ids=np.array([0], dtype=np.int64),
            row_ptr=np.array([0, 2], dtype=np.int64),
            col_idx=np.array([0], dtype=np.int64),
            values=np.array([1.0], dtype=np.float32),
        )
        with pytest.raises(ContractViolation):
            m.validate()

    def test_validate_catches_unsorted_columns(self):
        m = SparseMatrix(
            n_cols=3,
            row_ids=np.array([0], dtype=np.int64),
            row_ptr=np.array([0, 2], dtype=np.int64),
            col_idx=np.array([2, 1], dtype=np.int64),
            values=np.array([1.0, 1.0], dtype=np.float32),
        )
        with pytest.raises(ContractViolation):
            m.validate()

    def test_split_accumulation_any_order_close_ascending_exact(self):
        rng = np.random.default_rng(12)
        w = random_sparse(16, 16, 0.3, seed=13)
        x = random_sparse(16, 4, 0.4, seed=14)
        whole = spmm(w, x)
        splits = [extract_row_range(x, 4 * i, 4) for i in range(4)]

        z = spmm(w, splits[0])
        for part in splits[1:]:
            z = accumulate(z, w, part)
        assert z.to_dense(16).tolist() == whole.to_dense(16).tolist()

        for _ in range(5):
            order = rng.permutation(4)
            z = SparseMatrix.empty(4, dtype=np.float64)
            for i in order:
                z = accumulate(z, w, splits[i])
            np.testing.assert_allclose(z.to_dense(16), whole.to_dense(16), rtol=1e-6)

    def test_merge_row_blocks_rejects_overlap(self):
        a = SparseMatrix.from_rows(1, [(0, [0], [1.0])])
        with pytest.raises(ContractViolation):
            merge_row_blocks([a, a], 1)
