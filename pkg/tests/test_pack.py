import io

import numpy as np
import pytest

from faasim.errors import ContractViolation, PackFormatError
from faasim.pack import (
    build_packs,
    model_to_pack,
    pack_filename,
    pack_to_model,
    read_pack,
    write_pack,
)
from faasim.partition import partition_model
from faasim.workbench import GenSpec, generate_model


def sample_packs(n_parts=3, seed=4):
    model = generate_model(GenSpec(neurons=32, layers=3, nnz_per_row=4, seed=seed))
    plan = partition_model(model, n_parts, 0.2, "hgp", seed=seed)
    return model, build_packs(plan, model)


def pack_equal(a, b):
    if (a.worker, a.n_parts, a.n_layers, a.n_neurons) != (b.worker, b.n_parts, b.n_layers, b.n_neurons):
        return False
    if a.activation != b.activation:
        return False
    if (a.input_start, a.input_len) != (b.input_start, b.input_len):
        return False
    if any(x != y for x, y in zip(a.layers, b.layers)):
        return False
    for ma, mb in ((a.send, b.send), (a.recv, b.recv)):
        for ea, eb in zip(ma, mb):
            if [(t, list(r)) for t, r in ea] != [(t, list(r)) for t, r in eb]:
                return False
    return True


class TestRoundTrip:
    def test_identity(self):
        _, packs = sample_packs()
        for pack in packs:
            buf = io.BytesIO()
            write_pack(pack, buf)
            assert pack_equal(read_pack(buf.getvalue()), pack)

    def test_byte_exact(self, tmp_path):
        _, packs = sample_packs()
        p1 = tmp_path / pack_filename(packs[0].worker, packs[0].n_parts)
        p2 = tmp_path / "again.fsdp"
        write_pack(packs[0], p1)
        write_pack(read_pack(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_pack_sizes_near_model_size(self, tmp_path):
        model, packs = sample_packs()
        whole = io.BytesIO()
        write_pack(model_to_pack(model), whole)
        total = 0
        for pack in packs:
            buf = io.BytesIO()
            write_pack(pack, buf)
            total += len(buf.getvalue())
        # split packs carry the same payload plus per-pack headers/maps
        assert len(whole.getvalue()) <= total <= 2 * len(whole.getvalue())


class TestFormatErrors:
    def test_bad_magic(self):
        _, packs = sample_packs()
        buf = io.BytesIO()
        write_pack(packs[0], buf)
        data = bytearray(buf.getvalue())
        data[0] ^= 0xFF
        with pytest.raises(PackFormatError, match="magic"):
            read_pack(bytes(data))

    def test_bad_version(self):
        _, packs = sample_packs()
        buf = io.BytesIO()
        write_pack(packs[0], buf)
        data = bytearray(buf.getvalue())
        data[4] = 0xEE
        with pytest.raises(PackFormatError, match="version"):
            read_pack(bytes(data))

    def test_truncation_names_offset(self):
        _, packs = sample_packs()
        buf = io.BytesIO()
        write_pack(packs[0], buf)
        data = buf.getvalue()[:-7]
        with pytest.raises(PackFormatError, match="offset"):
            read_pack(data)

    def test_trailing_garbage(self):
        _, packs = sample_packs()
        buf = io.BytesIO()
        write_pack(packs[0], buf)
        with pytest.raises(PackFormatError, match="trailing"):
            read_pack(buf.getvalue() + b"xx")


class TestModelCache:
    def test_whole_model_round_trip(self):
        model = generate_model(GenSpec(neurons=16, layers=2, nnz_per_row=4, seed=9))
        buf = io.BytesIO()
        write_pack(model_to_pack(model), buf)
        again = pack_to_model(read_pack(buf.getvalue()))
        for wa, wb in zip(model.layers, again.layers):
            assert wa == wb
        assert again.activation == model.activation

    def test_partitioned_pack_is_not_a_model(self):
        _, packs = sample_packs()
        with pytest.raises(ContractViolation):
            pack_to_model(packs[0])


def test_row_coverage_is_disjoint_union():
    model, packs = sample_packs(n_parts=4, seed=6)
    for k, w in enumerate(model.layers):
        seen = np.concatenate([p.layers[k].row_ids for p in packs])
        assert sorted(seen.tolist()) == w.row_ids.tolist()
