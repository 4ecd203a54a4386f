"""Unit tests for affine and dense-and-sparse quantizers."""
import pytest
import numpy as np

from src.engine.quantizers import (
    AffineParams,
    AffineQuantizer,
    DenseSparseQuantizer,
    DenseSparseWeight,
    FloatWeight,
    PassThroughQuantizer,
    PassThroughTensor,
    PassThroughWeightQuantizer,
    QuantizationError,
    SparseOutliers,
    build_quantizers,
    compute_affine_params,
    compute_outlier_thresholds,
    decompose_dense_sparse,
    dequantize,
    l2_distance,
    outlier_tail_count,
    quantize,
    reconstruct,
    round_half_away,
    stochastic_round,
)
from src.engine.profiler import heavy_tailed_tensor
from src.schemas import QuantConfig, ThresholdMode, WeightRounding


def row(*values, dtype=np.float32):
    return np.array([values], dtype=dtype)


class TestRounding:
    """Tests for round-half-away-from-zero."""

    def test_ties_away_from_zero(self):
        """Test that .5 ties round away from zero in both directions."""
        np.testing.assert_array_equal(round_half_away(np.array([0.5, 1.5, -0.5, -2.5, 0.4])), [1, 2, -1, -3, 0])


class TestStochasticRounding:
    """Tests for unbiased stochastic rounding."""

    def test_unbiased_on_average(self):
        """Test 3.25 rounds to 3 or 4 with mean 3.25."""
        rounded = stochastic_round(np.full(100_000, 3.25), np.random.default_rng(0))
        assert set(np.unique(rounded)) == {3.0, 4.0}
        assert rounded.mean() == pytest.approx(3.25, abs=0.01)

    def test_integers_unchanged(self):
        """Test values already on the grid are kept."""
        x = np.array([-2.0, 0.0, 1.0, 254.0])
        np.testing.assert_array_equal(stochastic_round(x, np.random.default_rng(1)), x)

    def test_quantize_error_below_one_step(self):
        """Test stochastic quantization stays within one scale step and keeps 0 exact."""
        rng = np.random.default_rng(2)
        x = rng.standard_normal((64, 32)).astype(np.float32)
        x[:, 0] = 0.0
        params = compute_affine_params(x)
        q = quantize(x, params, rng=np.random.default_rng(3))
        err = np.abs(dequantize(q).astype(np.float64) - x)
        assert np.all(err <= params.scale.astype(np.float64)[:, None] * 1.001)
        np.testing.assert_array_equal(dequantize(q)[:, 0], 0.0)

    def test_requantize_seeded(self):
        """Test stochastic requantization is reproducible from the quantizer seed."""
        w = np.random.default_rng(5).standard_normal((8, 64)).astype(np.float32)
        first = DenseSparseQuantizer(outlier_fraction=0.01, rounding=WeightRounding.STOCHASTIC, seed=7)
        second = DenseSparseQuantizer(outlier_fraction=0.01, rounding=WeightRounding.STOCHASTIC, seed=7)
        t = first.thresholds(w)
        np.testing.assert_array_equal(first.requantize(w, t).dense.values, second.requantize(w, t).dense.values)

    def test_nearest_requantize_matches_decompose(self):
        """Test requantize under nearest rounding is the plain decomposition."""
        w = np.random.default_rng(6).standard_normal((8, 64)).astype(np.float32)
        quantizer = DenseSparseQuantizer(outlier_fraction=0.01)
        t = quantizer.thresholds(w)
        np.testing.assert_array_equal(quantizer.requantize(w, t).dense.values, quantizer.decompose(w, t).dense.values)


class TestAffineParams:
    """Tests for scale and zero-point derivation."""

    def test_mixed_sign_example(self):
        """Test [-1, 0, 2] gives s = 3/255 and z = 85."""
        params = compute_affine_params(np.array([-1.0, 0.0, 2.0], dtype=np.float32))
        assert params.scale[0] == pytest.approx(3 / 255, rel=1e-6)
        assert params.zero_point[0] == 85

    def test_unit_scale_example(self):
        """Test [0, 255] gives s = 1 and z = 0, and quantizes to itself."""
        x = np.array([0.0, 255.0], dtype=np.float32)
        params = compute_affine_params(x)
        assert params.scale[0] == 1.0
        assert params.zero_point[0] == 0
        np.testing.assert_array_equal(quantize(x, params).values, [0, 255])

    def test_all_zero_channel(self):
        """Test the degenerate channel gets a tiny positive scale and z = 0."""
        params = compute_affine_params(np.zeros((2, 4), dtype=np.float32))
        np.testing.assert_array_equal(params.scale, np.float32(2.0 ** -20))
        np.testing.assert_array_equal(params.zero_point, [0, 0])
        q = quantize(np.zeros((2, 4), dtype=np.float32), params)
        np.testing.assert_array_equal(dequantize(q), 0.0)

    def test_all_positive_channel_does_not_saturate(self):
        """Test that a channel of positive values keeps its minimum representable."""
        x = row(2.0, 3.0, 4.0)
        q = quantize(x, compute_affine_params(x))
        np.testing.assert_allclose(dequantize(q), x, atol=4.0 / 255)

    def test_channel_wise_pairs(self):
        """Test one (scale, zero-point) pair per row in channel-wise mode."""
        x = np.array([[1.0, -1.0], [10.0, -10.0], [0.5, 0.0]], dtype=np.float32)
        assert compute_affine_params(x).num_channels == 3
        assert compute_affine_params(x, channel_wise=False).num_channels == 1

    def test_empty_tensor(self):
        """Test that an empty tensor cannot be quantized."""
        with pytest.raises(QuantizationError):
            compute_affine_params(np.zeros((0,), dtype=np.float32))

    def test_invalid_bit_width(self):
        """Test that bit widths outside [2, 8] are rejected."""
        with pytest.raises(QuantizationError) as exc_info:
            compute_affine_params(row(1.0, 2.0), bit_width=9)
        assert "bit_width" in str(exc_info.value)

    def test_params_validate_positive_scale(self):
        """Test that AffineParams rejects non-positive scales."""
        with pytest.raises(QuantizationError):
            AffineParams(scale=np.array([0.0], np.float32), zero_point=np.array([0], np.int32))

    def test_zero_dequantizes_exactly(self):
        """Test that 0 survives a roundtrip exactly."""
        x = row(-0.7, 0.0, 0.3, 1.9)
        assert dequantize(quantize(x, compute_affine_params(x)))[0, 1] == 0.0


class TestRoundtrip:
    """Tests for quantization error bounds."""

    @pytest.mark.parametrize("bit_width", [2, 4, 8])
    def test_error_within_half_scale(self, bit_width):
        """Test |x - dequant(quant(x))| <= s/2 over 10^5 random vectors, one channel each."""
        rng = np.random.default_rng(bit_width)
        x = (rng.standard_normal((100_000, 32)) * rng.uniform(0.01, 100.0, size=(100_000, 1))).astype(np.float32)
        q = AffineQuantizer(bit_width).quantize(x)
        assert q.values.max() <= 2 ** bit_width - 1
        err = np.abs(dequantize(q).astype(np.float64) - x)
        scale = q.params.scale.astype(np.float64)[:, None]
        eps = np.finfo(np.float32).eps
        assert np.all(err <= scale / 2 + 4 * eps * np.abs(x) + 1e-6 * scale)

    @pytest.mark.parametrize("bit_width", [2, 4, 8])
    def test_payload_range(self, bit_width):
        """Test that payloads lie in [0, 2^b - 1]."""
        x = np.random.default_rng(0).standard_normal((8, 64)).astype(np.float32) * 5
        q = AffineQuantizer(bit_width).quantize(x)
        assert q.values.dtype == np.uint8
        assert q.values.max() <= 2 ** bit_width - 1

    def test_float64_roundtrip_keeps_dtype(self):
        """Test that dequantization restores the source dtype."""
        x = row(1.0, -2.0, dtype=np.float64)
        assert AffineQuantizer().quantize(x).dequantize().dtype == np.float64

    def test_pass_through_is_identity(self):
        """Test that the pass-through quantizer stores an exact copy."""
        x = row(0.123456, -7.0)
        stored = PassThroughQuantizer().quantize(x)
        assert isinstance(stored, PassThroughTensor)
        np.testing.assert_array_equal(stored.dequantize(), x)
        assert stored.dequantize() is not stored.data


class TestThresholds:
    """Tests for per-channel outlier thresholds."""

    def test_zero_fraction_is_min_max(self):
        """Test that p = 0 gives the channel minimum and maximum."""
        w = np.array([[3.0, -1.0, 2.0], [0.5, 0.25, -4.0]], dtype=np.float32)
        t = compute_outlier_thresholds(w, 0.0)
        np.testing.assert_array_equal(t.t_min, [-1.0, -4.0])
        np.testing.assert_array_equal(t.t_max, [3.0, 0.5])

    def test_outlier_above_t_max(self):
        """Test [0.1, 0.2, 0.3, 100] at p = 0.25 puts 100 above T_max."""
        t = compute_outlier_thresholds(row(0.1, 0.2, 0.3, 100.0), 0.25)
        assert t.t_max[0] < 100.0
        assert t.t_min[0] == np.float32(0.2)
        assert t.t_max[0] == np.float32(0.3)

    def test_symmetric_data(self):
        """Test that symmetric data gives T_min = -T_max."""
        t = compute_outlier_thresholds(row(-3.0, -2.0, -1.0, 1.0, 2.0, 3.0), 0.34)
        assert t.t_min[0] == -t.t_max[0]
        assert t.t_max[0] == 2.0

    def test_range_mode(self):
        """Test that range mode moves each bound inwards by p/2 of the range."""
        t = compute_outlier_thresholds(row(0.0, 5.0, 10.0), 0.2, ThresholdMode.RANGE)
        assert t.t_min[0] == pytest.approx(1.0)
        assert t.t_max[0] == pytest.approx(9.0)

    def test_small_rows_keep_a_central_value(self):
        """Test that T_min <= T_max even for very large fractions on short rows."""
        t = compute_outlier_thresholds(row(1.0, 2.0), 0.99)
        assert t.t_min[0] <= t.t_max[0]

    @pytest.mark.parametrize("columns,fraction,expected", [
        (64, 0.0, 0), (32, 0.01, 1), (64, 0.01, 1), (256, 0.01, 1), (1024, 0.01, 5), (64, 0.1, 3), (2, 0.3, 0),
    ])
    def test_tail_count(self, columns, fraction, expected):
        """Test outliers per tail: round(p/2 * n), at least 1 for p > 0, leaving a central value."""
        assert outlier_tail_count(columns, fraction) == expected

    def test_short_rows_isolate_extremes(self):
        """Test p=0.01 on a 64-wide row puts exactly its minimum and maximum in the sparse part."""
        w = np.random.default_rng(4).standard_normal((3, 64)).astype(np.float32)
        dsw = DenseSparseQuantizer(outlier_fraction=0.01).decompose(w)
        assert dsw.sparse.nnz == 2 * 3
        expected = np.sort(np.concatenate([w.argmin(axis=1)[:, None], w.argmax(axis=1)[:, None]], axis=1), axis=1)
        np.testing.assert_array_equal(dsw.sparse.col_idx.reshape(3, 2), expected)

    def test_invalid_fraction(self):
        """Test that p outside [0, 1) is rejected."""
        with pytest.raises(QuantizationError):
            compute_outlier_thresholds(row(1.0, 2.0), 1.0)

    def test_outlier_sets_are_nested(self):
        """Test that raising p only adds outliers."""
        w = heavy_tailed_tensor(8, 512, seed=3)
        previous = np.zeros_like(w, dtype=bool)
        for p in [0.0, 0.0045, 0.01, 0.03, 0.05]:
            t = compute_outlier_thresholds(w, p)
            mask = (w < t.t_min[:, None]) | (w > t.t_max[:, None])
            assert np.all(mask[previous])
            previous = mask


class TestDenseSparse:
    """Tests for the dense-and-sparse decomposition."""

    def test_outliers_are_exact(self):
        """Test that entries beyond the thresholds are reconstructed exactly."""
        w = row(0.1, 0.2, 0.3, 100.0)
        t = compute_outlier_thresholds(w, 0.25)
        dsw = decompose_dense_sparse(w, t)
        assert dsw.sparse.nnz == 2
        np.testing.assert_array_equal(dsw.sparse.col_idx, [0, 3])
        np.testing.assert_array_equal(dsw.sparse.values, np.array([0.1, 100.0], dtype=np.float32))
        w_hat = reconstruct(dsw)
        assert w_hat[0, 0] == w[0, 0]
        assert w_hat[0, 3] == w[0, 3]

    def test_outlier_slots_hold_zero_point(self):
        """Test that the dense payload stores the zero-point at outlier positions."""
        w = row(0.1, 0.2, 0.3, 100.0)
        dsw = decompose_dense_sparse(w, compute_outlier_thresholds(w, 0.25))
        z = dsw.dense.params.zero_point[0]
        assert dsw.dense.values[0, 0] == z
        assert dsw.dense.values[0, 3] == z

    def test_dense_scale_follows_thresholds(self):
        """Test the dense scale is derived from [T_min, T_max], not the outliers."""
        w = row(0.1, 0.2, 0.3, 100.0)
        dsw = decompose_dense_sparse(w, compute_outlier_thresholds(w, 0.25))
        assert dsw.dense.params.scale[0] == pytest.approx(0.3 / 255, rel=1e-5)

    def test_central_error_bound(self):
        """Test that central entries are within s/2 after reconstruction."""
        w = heavy_tailed_tensor(16, 256, seed=1)
        dsw = DenseSparseQuantizer(outlier_fraction=0.01).decompose(w)
        w_hat = dsw.reconstruct()
        scale = dsw.dense.params.scale.astype(np.float64)[:, None]
        err = np.abs(w_hat.astype(np.float64) - w)
        assert np.all(err <= scale / 2 + 1e-4 * scale + 1e-6 * np.abs(w))

    def test_heavy_tail_error_drops_with_outliers(self):
        """Test that keeping outliers sparse shrinks the reconstruction error."""
        w = heavy_tailed_tensor(16, 4096, outlier_fraction=0.004, seed=2)
        plain = DenseSparseQuantizer(outlier_fraction=0.0).decompose(w)
        split = DenseSparseQuantizer(outlier_fraction=0.01).decompose(w)
        assert l2_distance(split.reconstruct(), w) * 50 <= l2_distance(plain.reconstruct(), w)

    def test_channel_mismatch(self):
        """Test that thresholds must match the rows of the weight."""
        w = np.zeros((3, 4), dtype=np.float32)
        t = compute_outlier_thresholds(np.zeros((2, 4), dtype=np.float32), 0.0)
        with pytest.raises(QuantizationError):
            decompose_dense_sparse(w, t)

    def test_sparse_nbytes(self):
        """Test the byte count of the CSR arrays."""
        w = row(0.1, 0.2, 0.3, 100.0)
        dsw = decompose_dense_sparse(w, compute_outlier_thresholds(w, 0.25))
        assert dsw.sparse.nbytes == 2 * 4 + 2 * 4 + 2 * 4


class TestSparseOutliers:
    """Tests for CSR well-formedness checks."""

    def test_valid_arrays(self):
        """Test that well-formed arrays are accepted."""
        s = SparseOutliers.from_arrays(
            np.array([0, 1, 1], np.int32), np.array([2], np.int32), np.array([5.0], np.float32), (2, 3)
        )
        assert s.nnz == 1
        np.testing.assert_array_equal(s.row_indices(), [0])

    def test_unsorted_columns(self):
        """Test that column indices must increase within a row."""
        with pytest.raises(QuantizationError) as exc_info:
            SparseOutliers.from_arrays(
                np.array([0, 2], np.int32), np.array([3, 1], np.int32), np.array([1.0, 2.0], np.float32), (1, 4)
            )
        assert "strictly increasing" in str(exc_info.value)

    def test_column_out_of_range(self):
        """Test that column indices must fit the shape."""
        with pytest.raises(QuantizationError):
            SparseOutliers.from_arrays(
                np.array([0, 1], np.int32), np.array([7], np.int32), np.array([1.0], np.float32), (1, 4)
            )


class TestBuildQuantizers:
    """Tests for quantizer selection."""

    def test_default_quantizers(self):
        """Test the default pair is dense-and-sparse weights with affine states."""
        weight_q, state_q = build_quantizers(QuantConfig(bit_width=4, outlier_fraction=0.02))
        assert isinstance(weight_q, DenseSparseQuantizer)
        assert isinstance(state_q, AffineQuantizer)
        assert weight_q.bit_width == 4
        assert weight_q.outlier_fraction == 0.02
        assert isinstance(weight_q.decompose(row(1.0, 2.0)), DenseSparseWeight)

    def test_pass_through(self):
        """Test pass-through mode keeps floating-point storage."""
        weight_q, state_q = build_quantizers(QuantConfig(pass_through=True))
        assert isinstance(weight_q, PassThroughWeightQuantizer)
        assert isinstance(state_q, PassThroughQuantizer)
        stored = weight_q.decompose(row(1.5, -2.5))
        assert isinstance(stored, FloatWeight)
        np.testing.assert_array_equal(stored.reconstruct(), row(1.5, -2.5))


class TestL2Distance:
    """Tests for the Euclidean distance helper."""

    def test_distance(self):
        """Test a 3-4-5 triangle."""
        assert l2_distance(row(0.0, 0.0), row(3.0, 4.0)) == pytest.approx(5.0)

    def test_shape_mismatch(self):
        """Test shapes must agree."""
        with pytest.raises(ValueError):
            l2_distance(row(0.0), row(0.0, 1.0))
