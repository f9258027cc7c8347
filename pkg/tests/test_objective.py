import numpy as np
import pytest

from sanet.objective import (
    LossConfig,
    accuracy_loss,
    fairness_loss,
    normalize_attribute,
    total_loss,
)
from sanet.tensor import Tensor

from helpers import TOL, gradcheck


class TestNormalizeAttribute:
    def test_two_cells(self):
        assert normalize_attribute([0.0, 1.0]).z_tilde.tolist() == [-1.0, 1.0]

    def test_moments(self):
        z = np.random.default_rng(0).uniform(0, 1, (5, 5))
        zt = normalize_attribute(z).z_tilde
        assert abs(zt.mean()) < 1e-12 and abs(zt.std() - 1) < 1e-12

    def test_constant(self):
        with pytest.raises(ValueError):
            normalize_attribute([0.3, 0.3, 0.3])

    def test_single_cell(self):
        with pytest.raises(ValueError):
            normalize_attribute([0.3])


class TestAccuracyLoss:
    def test_perfect(self):
        y = np.array([1.0, 2.0, 0.0])
        assert accuracy_loss(y, Tensor(y)).item() == 0.0

    def test_worked_example(self):
        assert accuracy_loss(np.array([2.0]), Tensor([1.0]), LossConfig(lam=10)).item() == 3.5

    def test_filtered_cell_contributes_only_squared_error(self):
        assert accuracy_loss(np.array([0.05]), Tensor([3.05]), LossConfig(lam=10)).item() == pytest.approx(9.0)

    def test_zero_observation_has_finite_gradient(self):
        yhat = Tensor([0.7, 1.2], requires_grad=True)
        loss = accuracy_loss(np.array([0.0, 2.0]), yhat)
        from sanet.tensor import backward
        backward(loss)
        assert np.all(np.isfinite(yhat.grad))
        assert yhat.grad[0] == pytest.approx(2 * 0.7)

    def test_batch_permutation_invariance(self):
        rng = np.random.default_rng(1)
        y, yhat = rng.poisson(2, (6, 3, 3)).astype(float), rng.uniform(0, 4, (6, 3, 3))
        perm = rng.permutation(6)
        a = accuracy_loss(y, Tensor(yhat)).item()
        b = accuracy_loss(y[perm], Tensor(yhat[perm])).item()
        assert a == pytest.approx(b, rel=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            accuracy_loss(np.zeros(3), Tensor(np.zeros(2)))


class TestFairnessLoss:
    def test_perfect(self):
        y = np.array([3.0, 5.0])
        assert fairness_loss(y, Tensor(y), np.array([-1.0, 1.0])).item() == 0.0

    def test_symmetric_errors_cancel(self):
        # percentage errors 0.5 and 0.5
        assert fairness_loss(np.array([2.0, 4.0]), Tensor([1.0, 2.0]), np.array([-1.0, 1.0])).item() == 0.0

    def test_worked_example(self):
        # percentage errors 0.5 and 0.1
        value = fairness_loss(np.array([2.0, 10.0]), Tensor([1.0, 9.0]), np.array([-1.0, 1.0])).item()
        assert value == pytest.approx(0.4, abs=1e-15)

    def test_uniform_errors_give_zero(self):
        rng = np.random.default_rng(2)
        y = rng.uniform(1, 5, (4, 3, 3))
        zt = normalize_attribute(rng.uniform(0, 1, (3, 3))).z_tilde
        assert abs(fairness_loss(y, Tensor(0.8 * y), zt).item()) < 1e-12

    def test_nonnegative(self):
        rng = np.random.default_rng(3)
        y = rng.poisson(2, (4, 3, 3)).astype(float)
        zt = normalize_attribute(rng.uniform(0, 1, (3, 3))).z_tilde
        assert fairness_loss(y, Tensor(rng.uniform(0, 4, y.shape)), zt).item() >= 0


class TestTotalLoss:
    def test_gamma_zero_is_accuracy(self):
        rng = np.random.default_rng(4)
        y, yhat = rng.poisson(2, (3, 2, 2)).astype(float), Tensor(rng.uniform(0, 3, (3, 2, 2)))
        zt = np.array([[-1.0, 1.0], [1.0, -1.0]])
        assert total_loss(y, yhat, zt, LossConfig(gamma=0)).item() == accuracy_loss(y, yhat).item()

    def test_worked_example(self):
        # accuracy 3.5 on the first cell alone needs the second cell to be exact
        y, yhat, zt = np.array([2.0, 10.0]), Tensor([1.0, 9.0]), np.array([-1.0, 1.0])
        acc = accuracy_loss(y, yhat).item()
        fair = fairness_loss(y, yhat, zt).item()
        assert acc == pytest.approx(1 + 10 * 0.25 + 1 + 10 * 0.01)
        assert total_loss(y, yhat, zt, LossConfig(gamma=10)).item() == pytest.approx(acc + 10 * fair)
        assert 3.5 + 10 * 0.4 == 7.5

    def test_gradient(self):
        rng = np.random.default_rng(5)
        y = rng.poisson(3, (2, 3, 3)).astype(float) + 0.5
        zt = normalize_attribute(rng.uniform(0, 1, (3, 3))).z_tilde
        cfg = LossConfig(gamma=10)
        yhat = rng.uniform(0, 2, y.shape)
        inner = (((y - yhat) / y) * zt).sum()
        assert abs(inner) > 1e-3
        assert gradcheck(lambda t: total_loss(y, t["yhat"], zt, cfg), {"yhat": yhat}) < TOL

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            LossConfig(gamma=-1)
