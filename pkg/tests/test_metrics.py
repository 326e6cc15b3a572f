import numpy as np
import pytest

from grcl.metrics import (AccuracyMatrix, compute_acc, compute_bwt,
                          evaluate_accuracy)
from grcl.model import Batch, ModelSpec, ParamVector, unpack


def matrix_from(rows):
    return AccuracyMatrix.from_rows(rows)


class TestAccuracyMatrix:
    def test_lower_triangle_enforced(self):
        R = AccuracyMatrix(2)
        R.set(1, 0, 0.5)
        with pytest.raises(ValueError):
            R.set(0, 1, 0.5)
        with pytest.raises(ValueError):
            R.set(1, 1, 1.5)

    def test_row_occupancy(self):
        R = matrix_from([[1.0], [0.9, 0.8], [0.7, 0.6, 0.5]])
        for i in range(3):
            assert len(R.row(i)) == i + 1

    def test_csv_round_trip(self, tmp_path):
        R = matrix_from([[0.25], [1 / 3, 0.5], [0.1, 0.2, 0.7]])
        path = tmp_path / "matrix.csv"
        R.save_csv(path)
        loaded = AccuracyMatrix.load_csv(path)
        assert loaded.rows_list() == R.rows_list()


class TestEvaluateAccuracy:
    def _identity_params(self):
        spec = ModelSpec(input_dim=2, hidden_dims=(), feature_dim=2,
                         num_classes=2, head_hidden_dim=2, key_dim=2)
        params = ParamVector(np.zeros(spec.param_count), spec)
        p = unpack(params)
        p["enc0_W"][:] = np.eye(2)
        p["cls_W"][:] = np.eye(2)
        return params

    def test_all_correct(self):
        params = self._identity_params()
        X = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 0.5]])
        y = np.array([0, 1, 0])
        assert evaluate_accuracy(params, Batch(X, y)) == 1.0

    def test_tie_break_lowest_class(self):
        spec = ModelSpec(input_dim=2, hidden_dims=(), feature_dim=2,
                         num_classes=2, head_hidden_dim=2, key_dim=2)
        params = ParamVector(np.zeros(spec.param_count), spec)
        X = np.zeros((4, 2))  # all logits zero -> predicted class 0
        y = np.array([0, 1, 0, 1])
        assert evaluate_accuracy(params, Batch(X, y)) == 0.5

    def test_hand_counted_fixture(self):
        params = self._identity_params()
        X = np.array([[1, 0], [1, 0], [0, 1], [0, 1], [1, 0],
                      [0, 1], [1, 0], [0, 1], [1, 0], [0, 1]], dtype=float)
        y = np.array([0, 1, 1, 1, 0, 0, 0, 1, 1, 1])  # 7 of 10 correct
        assert evaluate_accuracy(params, Batch(X, y)) == pytest.approx(0.7)

    def test_unlabeled_rejected(self):
        params = self._identity_params()
        with pytest.raises(ValueError):
            evaluate_accuracy(params, Batch(np.zeros((1, 2)), None))


class TestComputeAcc:
    def test_perfect_model(self):
        R = matrix_from([[1.0], [1.0, 1.0], [1.0, 1.0, 1.0]])
        assert compute_acc(R) == 1.0

    def test_final_row_mean(self):
        R = matrix_from([[0.9], [0.9, 0.85], [0.9, 0.8, 0.7]])
        assert compute_acc(R) == pytest.approx(0.8, abs=1e-12)

    def test_constant_matrix(self):
        R = matrix_from([[0.4], [0.4, 0.4], [0.4, 0.4, 0.4]])
        assert compute_acc(R) == pytest.approx(0.4, abs=1e-15)

    def test_legacy_normalization_flag(self):
        R = matrix_from([[1.0], [1.0, 1.0], [1.0, 1.0, 1.0]])
        assert compute_acc(R, denominator_n=True) == pytest.approx(1.5)

    def test_incomplete_final_row_rejected(self):
        R = AccuracyMatrix(2)
        R.set(2, 0, 0.5)
        with pytest.raises(ValueError):
            compute_acc(R)

    def test_affine_in_entries(self):
        rows = [[0.9], [0.9, 0.85], [0.9, 0.8, 0.7]]
        base = compute_acc(matrix_from(rows))
        rows[2][1] += 0.06
        assert compute_acc(matrix_from(rows)) == pytest.approx(base + 0.06 / 3,
                                                               abs=1e-12)


class TestComputeBwt:
    def test_perfect_retention(self):
        R = matrix_from([[1.0], [0.9, 0.8], [0.9, 0.8, 0.7]])
        assert compute_bwt(R) == 0.0

    def test_single_term(self):
        R = matrix_from([[1.0], [0.9, 0.85], [0.9, 0.80, 0.75]])
        assert compute_bwt(R) == pytest.approx(-0.05, abs=1e-12)

    def test_positive_transfer(self):
        rows = [[1.0], [0.9, 0.6], [0.9, 0.6, 0.5], [0.9, 0.62, 0.52, 0.4]]
        assert compute_bwt(matrix_from(rows)) == pytest.approx(0.02, abs=1e-12)

    def test_requires_two_targets(self):
        R = matrix_from([[1.0], [0.9, 0.8]])
        with pytest.raises(ValueError):
            compute_bwt(R)

    def test_affine_perturbation(self):
        rows = [[1.0], [0.9, 0.8], [0.9, 0.7, 0.6], [0.9, 0.7, 0.6, 0.5]]
        base = compute_bwt(matrix_from(rows))
        rows[3][2] += 0.09  # R[N, 2] has coefficient 1/(N-1) = 1/2
        assert compute_bwt(matrix_from(rows)) == pytest.approx(base + 0.045,
                                                               abs=1e-12)
        rows[2][2] -= 0.09  # R[2, 2] has coefficient -1/2
        assert compute_bwt(matrix_from(rows)) == pytest.approx(base + 0.09,
                                                               abs=1e-12)
