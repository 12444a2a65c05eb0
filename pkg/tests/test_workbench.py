import numpy as np
import pytest

from faasim.errors import ContractViolation, TsvParseError
from faasim.sparse import ActivationSpec
from faasim.workbench import (
    GenSpec,
    generate_inputs,
    generate_model,
    load_matrix_tsv,
    load_model_tsv,
    nonzero_row_indices,
    save_matrix_tsv,
)


class TestGenerateModel:
    def test_full_density_forced(self):
        model = generate_model(GenSpec(neurons=4, layers=1, nnz_per_row=4))
        assert model.layers[0].nnz == 16
        assert np.array_equal(model.layers[0].row_ids, np.arange(4))

    def test_deterministic(self):
        spec = GenSpec(neurons=64, layers=4, nnz_per_row=8, seed=11)
        a, b = generate_model(spec), generate_model(spec)
        for wa, wb in zip(a.layers, b.layers):
            assert wa == wb

    def test_nnz_count_per_layer(self):
        spec = GenSpec(neurons=32, layers=3, nnz_per_row=5, seed=2)
        model = generate_model(spec)
        for w in model.layers:
            assert w.nnz == 32 * 5

    def test_layers_differ(self):
        model = generate_model(GenSpec(neurons=32, layers=2, nnz_per_row=5, seed=2))
        assert model.layers[0] != model.layers[1]

    def test_weight_values_come_from_fixed_set(self):
        model = generate_model(GenSpec(neurons=16, layers=1, nnz_per_row=4, seed=5))
        allowed = {-0.5, -0.25, -0.125, 0.125, 0.25, 0.5, 1.0}
        assert set(float(v) for v in model.layers[0].values) <= allowed

    def test_invalid_spec(self):
        with pytest.raises(ContractViolation):
            GenSpec(neurons=4, layers=1, nnz_per_row=5)


class TestGenerateInputs:
    def test_density_one_is_dense(self):
        x = generate_inputs(GenSpec(neurons=8, layers=1, nnz_per_row=2, batch=3, input_density=1.0))
        assert x.nnz == 24 and np.all(x.values == 1.0)

    def test_density_zero_is_empty(self):
        x = generate_inputs(GenSpec(neurons=8, layers=1, nnz_per_row=2, batch=3, input_density=0.0))
        assert x.n_rows == 0

    def test_density_in_expected_band(self):
        spec = GenSpec(neurons=64, layers=1, nnz_per_row=2, batch=16, input_density=0.3, seed=3)
        x = generate_inputs(spec)
        assert 0.2 <= x.nnz / (64 * 16) <= 0.4

    def test_deterministic(self):
        spec = GenSpec(neurons=64, layers=1, nnz_per_row=2, batch=16, input_density=0.3, seed=3)
        assert generate_inputs(spec) == generate_inputs(spec)


class TestTsv:
    def test_one_by_one_identity(self, tmp_path):
        p = tmp_path / "layer0.tsv"
        p.write_text("1 1 1.0\n")
        model = load_model_tsv([p], 1, ActivationSpec(0.0, 32.0))
        assert model.layers[0].values[0] == 1.0

    def test_duplicates_summed(self, tmp_path):
        p = tmp_path / "layer0.tsv"
        p.write_text("1 2 1.5\n1 2 0.5\n2 1 1.0\n")
        model = load_model_tsv([p], 2, ActivationSpec(0.0, 32.0))
        w = model.layers[0]
        assert w.to_dense(2).tolist() == [[0.0, 2.0], [1.0, 0.0]]

    def test_empty_file_is_legal(self, tmp_path):
        p = tmp_path / "layer0.tsv"
        p.write_text("")
        model = load_model_tsv([p], 4, ActivationSpec(0.0, 32.0))
        assert model.layers[0].nnz == 0

    def test_malformed_line_names_file_and_line(self, tmp_path):
        p = tmp_path / "bad.tsv"
        p.write_text("1 1 1.0\n1 nope\n")
        with pytest.raises(TsvParseError, match=r"bad\.tsv:2"):
            load_model_tsv([p], 2, ActivationSpec(0.0, 32.0))

    def test_out_of_range_index(self, tmp_path):
        p = tmp_path / "bad.tsv"
        p.write_text("5 1 1.0\n")
        with pytest.raises(ContractViolation, match=r"bad\.tsv:1"):
            load_model_tsv([p], 2, ActivationSpec(0.0, 32.0))

    def test_matrix_round_trip(self, tmp_path):
        spec = GenSpec(neurons=32, layers=1, nnz_per_row=4, batch=5, input_density=0.4, seed=9)
        x = generate_inputs(spec)
        p = tmp_path / "x.tsv"
        save_matrix_tsv(x, p)
        assert load_matrix_tsv(p, 32, 5) == x

    def test_float_values_round_trip_exactly(self, tmp_path):
        import faasim.sparse as sp

        x = sp.SparseMatrix.from_rows(1, [(0, [0], [np.float32(4.7)])])
        p = tmp_path / "x.tsv"
        save_matrix_tsv(x, p)
        assert load_matrix_tsv(p, 1, 1) == x


def test_nonzero_row_indices():
    import faasim.sparse as sp

    assert nonzero_row_indices(sp.SparseMatrix.empty(3)) == []
    x = sp.SparseMatrix.from_rows(1, [(3, [0], [1.0]), (7, [0], [2.0])])
    assert nonzero_row_indices(x) == [3, 7]
