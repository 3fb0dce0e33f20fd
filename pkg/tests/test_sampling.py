import numpy as np
import pytest

from coast.errors import ContractError, DimensionError, FormatError, OrthonormalizationError
from coast.sampling import (
    MATRIX_HEADER,
    MatrixKind,
    Measurement,
    SamplingMatrix,
    decode_matrix,
    encode_matrix,
    gen_frgm,
    load_matrix,
    load_matrix_dir,
    load_measurement,
    matrix_filename,
    measure,
    rows_for_ratio,
    rpa_augment,
    save_matrix,
    save_measurement,
)


# ─── Ratios ───────────────────────────────────────────────────────────────────

@pytest.mark.parametrize(
    "ratio, expected",
    [(0.1, 109), (0.2, 218), (0.3, 327), (0.4, 436), (0.5, 545), (0.24, 261), (0.27, 294), (0.33, 359), (0.36, 392)],
)
def test_rows_for_ratio_at_33x33(ratio, expected):
    assert rows_for_ratio(ratio, 1089) == expected


def test_rows_for_ratio_rounds_halves_up():
    assert rows_for_ratio(0.5, 9) == 5
    assert rows_for_ratio(0.01, 16) == 0


# ─── FRGM ─────────────────────────────────────────────────────────────────────

class TestFrgm:
    @pytest.mark.parametrize("m, n", [(109, 1089), (545, 1089), (4, 16)])
    def test_rows_are_orthonormal(self, m, n):
        for seed in range(1, 35):
            phi = gen_frgm(m, n, seed)
            assert phi.data.shape == (m, n)
            assert phi.orthonormality_error() < 1e-10

    def test_same_seed_same_matrix(self):
        np.testing.assert_array_equal(gen_frgm(8, 16, 3).data, gen_frgm(8, 16, 3).data)

    def test_different_seeds_differ(self):
        assert not np.array_equal(gen_frgm(8, 16, 3).data, gen_frgm(8, 16, 4).data)

    def test_square_matrix_is_orthogonal(self):
        phi = gen_frgm(4, 4, 11)
        np.testing.assert_allclose(phi.data @ phi.data.T, np.eye(4), atol=1e-12)
        np.testing.assert_allclose(phi.data.T @ phi.data, np.eye(4), atol=1e-12)

    def test_first_nonzero_entry_of_each_row_is_positive(self):
        phi = gen_frgm(10, 25, 5)
        for row in phi.data:
            assert row[np.flatnonzero(row)[0]] > 0

    def test_more_rows_than_columns_rejected(self):
        with pytest.raises(OrthonormalizationError):
            gen_frgm(17, 16, 1)

    @pytest.mark.parametrize("m, n", [(109, 1089), (4, 16), (16, 16)])
    def test_back_projection_never_adds_energy(self, rng, m, n):
        phi = gen_frgm(m, n, 11)
        x = rng.normal(size=(20, n))
        projected = x @ phi.data.T @ phi.data
        assert np.all(np.linalg.norm(projected, axis=1) <= np.linalg.norm(x, axis=1) * (1 + 1e-12))

    def test_matrix_is_read_only(self):
        phi = gen_frgm(4, 16, 1)
        with pytest.raises(ValueError):
            phi.data[0, 0] = 1.0

    def test_metadata(self):
        phi = gen_frgm(109, 1089, 42)
        assert phi.kind is MatrixKind.FRGM
        assert phi.side == 33
        assert phi.ratio == pytest.approx(0.1, abs=1e-3)
        assert phi.matrix_id == "phi_109x1089_42"
        assert matrix_filename(phi) == "phi_109x1089_42.bin"

    def test_non_square_patch_dimension_rejected(self):
        with pytest.raises(DimensionError):
            SamplingMatrix(np.eye(3, 12), MatrixKind.EXTERNAL)


# ─── RPA ──────────────────────────────────────────────────────────────────────

class TestRpa:
    def test_set_size_and_grouping(self):
        bases = [(4, 16, 1), (8, 16, 2), (2, 4, 3)]
        aug = rpa_augment(bases, per_base=4, master_seed=9)
        assert len(aug) == 12
        for (m, n, seed), group in zip(bases, aug.groups()):
            assert group[0].seed == seed
            assert all(phi.data.shape == (m, n) for phi in group)

    def test_companions_are_distinct(self):
        aug = rpa_augment([(4, 16, 1)], per_base=6, master_seed=9)
        assert len(aug.seeds) == 6
        datas = [phi.data for phi in aug]
        for i in range(len(datas)):
            for j in range(i + 1, len(datas)):
                assert not np.array_equal(datas[i], datas[j])

    def test_single_matrix_per_base_returns_bases(self):
        aug = rpa_augment([(4, 16, 1), (8, 16, 2)], per_base=1, master_seed=0)
        assert [phi.seed for phi in aug] == [1, 2]

    def test_deterministic_under_master_seed(self):
        a = rpa_augment([(4, 16, 1)], per_base=3, master_seed=5)
        b = rpa_augment([(4, 16, 1)], per_base=3, master_seed=5)
        assert [phi.seed for phi in a] == [phi.seed for phi in b]

    def test_accepts_matrix_bases(self):
        base = SamplingMatrix(np.eye(4, 16), MatrixKind.EXTERNAL, label="dalm")
        aug = rpa_augment([base], per_base=3, master_seed=1)
        assert aug[0] is base
        assert all(phi.kind is MatrixKind.FRGM for phi in aug.matrices[1:])

    def test_zero_per_base_rejected(self):
        with pytest.raises(ContractError):
            rpa_augment([(4, 16, 1)], per_base=0, master_seed=0)


# ─── Measurement ──────────────────────────────────────────────────────────────

class TestMeasure:
    def test_noiseless(self, rng):
        phi = gen_frgm(4, 16, 1)
        x = rng.random((5, 16))
        np.testing.assert_allclose(measure(x, phi, 0.0).y, x @ phi.data.T)

    def test_noise_is_seeded(self, rng):
        phi = gen_frgm(4, 16, 1)
        x = rng.random((5, 16))
        a, b = measure(x, phi, 0.1, seed=3), measure(x, phi, 0.1, seed=3)
        np.testing.assert_array_equal(a.y, b.y)
        assert not np.array_equal(a.y, measure(x, phi, 0.1, seed=4).y)
        assert a.sigma == 0.1
        assert a.matrix_id == phi.matrix_id

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DimensionError):
            measure(rng.random((2, 9)), gen_frgm(4, 16, 1), 0.0)

    def test_negative_sigma(self, rng):
        with pytest.raises(ContractError):
            measure(rng.random((2, 16)), gen_frgm(4, 16, 1), -0.1)


# ─── Files ────────────────────────────────────────────────────────────────────

class TestMatrixFiles:
    def test_header_layout(self):
        phi = gen_frgm(4, 16, 7)
        data = encode_matrix(phi)
        assert MATRIX_HEADER.size == 25
        assert data[:8] == b"COASTPHI"
        assert len(data) == 25 + 4 * 16 * 8

    def test_save_and_load(self, tmp_path):
        phi = gen_frgm(109, 1089, 42)
        save_matrix(phi, tmp_path / matrix_filename(phi))
        loaded = load_matrix(tmp_path / "phi_109x1089_42.bin")
        np.testing.assert_array_equal(loaded.data, phi.data)
        assert loaded.seed == 42 and loaded.kind is MatrixKind.FRGM

    def test_zero_seed_reads_back_as_absent(self):
        external = SamplingMatrix(np.eye(4, 16), MatrixKind.EXTERNAL)
        assert decode_matrix(encode_matrix(external)).seed is None

    def test_bad_magic(self):
        data = bytearray(encode_matrix(gen_frgm(4, 16, 1)))
        data[0:8] = b"NOTAPHI!"
        with pytest.raises(FormatError) as err:
            decode_matrix(bytes(data))
        assert err.value.offset == 0

    def test_truncated_payload(self):
        data = encode_matrix(gen_frgm(4, 16, 1))
        with pytest.raises(FormatError) as err:
            decode_matrix(data[:-8])
        assert err.value.offset == len(data) - 8

    def test_trailing_bytes(self):
        with pytest.raises(FormatError):
            decode_matrix(encode_matrix(gen_frgm(4, 16, 1)) + b"\0")

    def test_nan_entry_reports_offset(self):
        data = bytearray(encode_matrix(gen_frgm(4, 16, 1)))
        data[25 + 8 * 3 : 25 + 8 * 4] = np.array([np.nan], dtype="<f8").tobytes()
        with pytest.raises(FormatError) as err:
            decode_matrix(bytes(data))
        assert err.value.offset == 25 + 8 * 3

    def test_non_orthonormal_frgm_rejected(self):
        bogus = SamplingMatrix(2.0 * np.eye(4, 16), MatrixKind.FRGM, seed=1)
        with pytest.raises(FormatError):
            decode_matrix(encode_matrix(bogus))

    def test_external_matrices_need_not_be_orthonormal(self, rng):
        dalm = SamplingMatrix(rng.normal(size=(4, 16)), MatrixKind.EXTERNAL)
        np.testing.assert_array_equal(decode_matrix(encode_matrix(dalm)).data, dalm.data)

    def test_directory_labels_external_by_stem(self, tmp_path, rng):
        save_matrix(SamplingMatrix(rng.normal(size=(4, 16)), MatrixKind.EXTERNAL), tmp_path / "dalm_a.bin")
        save_matrix(gen_frgm(4, 16, 5), tmp_path / "phi_4x16_5.bin")
        matrices = load_matrix_dir(tmp_path)
        assert [m.matrix_id for m in matrices] == ["dalm_a", "phi_4x16_5"]

    def test_empty_directory(self, tmp_path):
        with pytest.raises(FormatError):
            load_matrix_dir(tmp_path)


class TestMeasurementFiles:
    def test_save_and_load(self, tmp_path, rng):
        meas = Measurement(rng.normal(size=(6, 4)), 0.02, "phi_4x16_1")
        save_measurement(meas, tmp_path / "y.bin")
        loaded = load_measurement(tmp_path / "y.bin")
        np.testing.assert_array_equal(loaded.y, meas.y)
        assert loaded.sigma == 0.02 and loaded.matrix_id == "phi_4x16_1"

    def test_bad_magic(self, tmp_path):
        (tmp_path / "y.bin").write_bytes(b"COASTPHI" + b"\0" * 40)
        with pytest.raises(FormatError):
            load_measurement(tmp_path / "y.bin")

    def test_truncated(self, tmp_path, rng):
        save_measurement(Measurement(rng.normal(size=(2, 4)), 0.0, "x"), tmp_path / "y.bin")
        data = (tmp_path / "y.bin").read_bytes()
        (tmp_path / "y.bin").write_bytes(data[:-1])
        with pytest.raises(FormatError):
            load_measurement(tmp_path / "y.bin")
