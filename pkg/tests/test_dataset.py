"""Unit tests for dataset ingestion and the batch loader."""
import pytest
import numpy as np

from src.training.dataset import BatchLoader, Dataset, DatasetError, ingest_dataset


@pytest.fixture
def csv_file(tmp_path):
    path = tmp_path / "data.csv"
    path.write_text("# x1,x2,y\n1.0,2.0,3.0\n\n4.0,5.0,6.0\n7.0,8.0,9.0\n")
    return path


class TestSynthetic:
    """Tests for built-in synthetic datasets."""

    def test_regression_shapes_and_normalization(self):
        """Test regression targets are standardized per column."""
        data = ingest_dataset("synthetic:reg-8-2-n256", seed=1)
        assert data.inputs.shape == (256, 8)
        assert data.targets.shape == (256, 2)
        assert data.inputs.dtype == np.float32
        np.testing.assert_allclose(data.targets.mean(axis=0), 0.0, atol=1e-5)
        np.testing.assert_allclose(data.targets.std(axis=0), 1.0, atol=1e-4)

    def test_classification_one_hot(self):
        """Test classification targets are one-hot rows."""
        data = ingest_dataset("synthetic:cls-4-3-n50", dtype="float64")
        assert data.targets.dtype == np.float64
        np.testing.assert_array_equal(data.targets.sum(axis=1), np.ones(50))
        assert set(np.unique(data.targets)) == {0.0, 1.0}

    def test_seed_determinism(self):
        """Test equal seeds give equal data and different seeds differ."""
        a = ingest_dataset("synthetic:reg-3-1-n20", seed=5)
        b = ingest_dataset("synthetic:reg-3-1-n20", seed=5)
        c = ingest_dataset("synthetic:reg-3-1-n20", seed=6)
        np.testing.assert_array_equal(a.inputs, b.inputs)
        assert not np.array_equal(a.inputs, c.inputs)

    def test_single_class_rejected(self):
        """Test classification needs at least two classes."""
        with pytest.raises(DatasetError):
            ingest_dataset("synthetic:cls-4-1-n10")

    def test_malformed_source(self):
        """Test an unparseable synthetic source is rejected."""
        with pytest.raises(DatasetError) as exc_info:
            ingest_dataset("synthetic:regression")
        assert "Invalid synthetic dataset" in str(exc_info.value)

    def test_dimension_check(self):
        """Test the input width must match the model."""
        with pytest.raises(DatasetError) as exc_info:
            ingest_dataset("synthetic:reg-8-1-n10", input_dim=4)
        assert "model expects 4" in str(exc_info.value)


class TestCsv:
    """Tests for CSV ingestion."""

    def test_reads_rows(self, csv_file):
        """Test comments and blank lines are skipped and the last column is the target."""
        data = ingest_dataset(str(csv_file), input_dim=2, target_dim=1)
        assert len(data) == 3
        assert data.input_dim == 2
        assert sorted(data.targets[:, 0].tolist()) == [3.0, 6.0, 9.0]
        row = int(np.argmin(data.targets[:, 0]))
        np.testing.assert_array_equal(data.inputs[row], [1.0, 2.0])

    def test_non_numeric_line_number(self, tmp_path):
        """Test parse errors name the offending line."""
        path = tmp_path / "bad.csv"
        path.write_text("1,2,3\n4,five,6\n")
        with pytest.raises(DatasetError) as exc_info:
            ingest_dataset(str(path))
        assert exc_info.value.line == 2
        assert str(exc_info.value).startswith("line 2:")

    def test_ragged_rows(self, tmp_path):
        """Test rows with a different column count are rejected."""
        path = tmp_path / "ragged.csv"
        path.write_text("1,2,3\n4,5\n")
        with pytest.raises(DatasetError) as exc_info:
            ingest_dataset(str(path))
        assert "expected 3 columns" in str(exc_info.value)

    def test_non_finite(self, tmp_path):
        """Test inf and nan values are rejected."""
        path = tmp_path / "inf.csv"
        path.write_text("1,inf\n")
        with pytest.raises(DatasetError):
            ingest_dataset(str(path))

    def test_missing_file(self, tmp_path):
        """Test a missing file raises DatasetError."""
        with pytest.raises(DatasetError) as exc_info:
            ingest_dataset(str(tmp_path / "nope.csv"))
        assert "not found" in str(exc_info.value)

    def test_empty_file(self, tmp_path):
        """Test a file without data rows raises."""
        path = tmp_path / "empty.csv"
        path.write_text("# nothing\n")
        with pytest.raises(DatasetError):
            ingest_dataset(str(path))


class TestBatchLoader:
    """Tests for deterministic batching and prefetch."""

    @pytest.fixture
    def dataset(self):
        inputs = np.arange(20, dtype=np.float32).reshape(10, 2)
        return Dataset(inputs=inputs, targets=inputs[:, :1].copy())

    def test_batch_shapes(self, dataset):
        """Test every batch has batch_size rows."""
        batches = list(BatchLoader(dataset, 4, prefetch=0).batches(7))
        assert len(batches) == 7
        assert all(x.shape == (4, 2) and y.shape == (4, 1) for x, y in batches)

    def test_epoch_covers_rows_once(self, dataset):
        """Test consecutive batches within a permutation do not repeat rows."""
        x1, _ = next(iter(BatchLoader(dataset, 5, seed=2, prefetch=0).batches(1)))
        batches = list(BatchLoader(dataset, 5, seed=2, prefetch=0).batches(2))
        np.testing.assert_array_equal(batches[0][0], x1)
        rows = np.concatenate([x for x, _ in batches])[:, 0]
        assert sorted(rows.tolist()) == list(range(0, 20, 2))

    def test_prefetch_same_order(self, dataset):
        """Test the prefetch worker yields the same batches in the same order."""
        plain = list(BatchLoader(dataset, 3, seed=7, prefetch=0).batches(12))
        prefetched = list(BatchLoader(dataset, 3, seed=7, prefetch=2).batches(12))
        assert len(prefetched) == 12
        for (xa, ya), (xb, yb) in zip(plain, prefetched):
            np.testing.assert_array_equal(xa, xb)
            np.testing.assert_array_equal(ya, yb)

    def test_prefetch_early_stop(self, dataset):
        """Test abandoning a prefetched stream does not hang."""
        stream = BatchLoader(dataset, 2, prefetch=1).batches(100)
        next(stream)
        stream.close()

    def test_batch_larger_than_dataset(self, dataset):
        """Test batch_size may not exceed the dataset size."""
        with pytest.raises(DatasetError):
            BatchLoader(dataset, 11)
