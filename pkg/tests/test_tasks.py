import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metaloss.autodiff import Graph, ShapeError
from metaloss.tasks import (
    AMPLITUDE_RANGE,
    AMPLITUDE_RANGE_NARROW,
    linspace_eval_grid,
    mse_loss,
    prototype_oracle_accuracy,
    sample_class_episode,
    sample_class_task,
    sample_episode,
    sample_sine_task,
)


class TestSineTasks:
    def test_fixed_rng_reproduces_task(self):
        a = sample_sine_task(np.random.default_rng(7))
        b = sample_sine_task(np.random.default_rng(7))
        assert a == b

    def test_amplitude_monte_carlo_mean(self):
        r = np.random.default_rng(0)
        amps = np.array([sample_sine_task(r).amplitude for _ in range(100_000)])
        assert abs(amps.mean() - 2.55) < 0.02

    def test_phase_range(self):
        r = np.random.default_rng(3)
        for _ in range(500):
            t = sample_sine_task(r)
            assert 0.0 <= t.phase <= np.pi
            assert AMPLITUDE_RANGE[0] <= t.amplitude <= AMPLITUDE_RANGE[1]

    def test_narrow_range_switch(self):
        r = np.random.default_rng(3)
        for _ in range(200):
            t = sample_sine_task(r, amplitude_range=AMPLITUDE_RANGE_NARROW)
            assert 0.1 <= t.amplitude <= 0.5

    def test_zero_at_phase(self):
        t = sample_sine_task(np.random.default_rng(11))
        assert t.targets(np.array([[t.phase]]))[0, 0] == pytest.approx(0.0, abs=1e-12)


class TestEpisodes:
    def test_empty_train_split(self):
        task = sample_sine_task(np.random.default_rng(0))
        ep = sample_episode(task, k_train=0, k_test=5, rng=np.random.default_rng(1))
        assert ep.k_train == 0 and ep.k_test == 5
        assert ep.x_train.shape == (0, 1)

    def test_x_within_domain(self):
        task = sample_sine_task(np.random.default_rng(0))
        ep = sample_episode(task, 50, 50, np.random.default_rng(2))
        for arr in (ep.x_train, ep.x_test):
            assert np.all(arr >= -5.0) and np.all(arr <= 5.0)

    def test_k_test_positive_required(self):
        task = sample_sine_task(np.random.default_rng(0))
        with pytest.raises(ValueError):
            sample_episode(task, 3, 0, np.random.default_rng(0))

    @given(seed=st.integers(0, 2**16), k=st.integers(0, 12))
    @settings(max_examples=25, deadline=None)
    def test_reproducible_and_noiseless(self, seed, k):
        task = sample_sine_task(np.random.default_rng(seed))
        a = sample_episode(task, k, 7, np.random.default_rng(seed + 1))
        b = sample_episode(task, k, 7, np.random.default_rng(seed + 1))
        assert a.x_train.tobytes() == b.x_train.tobytes()
        assert a.y_test.tobytes() == b.y_test.tobytes()
        np.testing.assert_array_equal(a.y_train, task.targets(a.x_train))
        np.testing.assert_array_equal(a.y_test, task.targets(a.x_test))

    def test_train_test_independent_draws(self):
        task = sample_sine_task(np.random.default_rng(0))
        ep = sample_episode(task, 10, 10, np.random.default_rng(5))
        assert not np.array_equal(ep.x_train, ep.x_test)


class TestMseLoss:
    def test_zero_when_equal(self):
        g = Graph()
        y = g.constant(np.array([[1.0], [2.0]]))
        per, mean = mse_loss(g, y, y)
        assert g.scalar(mean) == 0.0

    def test_hand_example(self):
        g = Graph()
        yhat = g.constant(np.array([[0.0], [0.0]]))
        y = g.constant(np.array([[1.0], [3.0]]))
        per, mean = mse_loss(g, yhat, y)
        np.testing.assert_array_equal(g.value(per).ravel(), [1.0, 9.0])
        assert g.scalar(mean) == 5.0

    def test_mismatch(self):
        g = Graph()
        with pytest.raises(ShapeError):
            mse_loss(g, g.constant(np.ones((2, 1))), g.constant(np.ones((3, 1))))

    def test_gradient_matches_closed_form(self, rng):
        yhat0 = rng.normal(size=(6, 1))
        y0 = rng.normal(size=(6, 1))
        g = Graph()
        yhat = g.variable(yhat0)
        _, mean = mse_loss(g, yhat, g.constant(y0))
        analytic = g.value(g.grad(mean, [yhat])[yhat])
        np.testing.assert_allclose(analytic, 2.0 * (yhat0 - y0) / 6.0, rtol=1e-12)

    def test_multicolumn_rows_sum(self):
        g = Graph()
        yhat = g.constant(np.array([[0.0, 0.0]]))
        y = g.constant(np.array([[1.0, 2.0]]))
        per, mean = mse_loss(g, yhat, y)
        assert g.value(per)[0, 0] == 5.0


class TestEvalGrid:
    def test_hundred_points(self):
        grid = linspace_eval_grid(100)
        assert grid.shape == (100, 1)
        assert grid[0, 0] == -5.0 and grid[-1, 0] == 5.0
        assert np.allclose(np.diff(grid.ravel()), 10.0 / 99.0)

    def test_two_and_three_points(self):
        np.testing.assert_array_equal(linspace_eval_grid(2).ravel(), [-5.0, 5.0])
        np.testing.assert_array_equal(linspace_eval_grid(3).ravel(), [-5.0, 0.0, 5.0])

    def test_minimum(self):
        with pytest.raises(ValueError):
            linspace_eval_grid(1)


class TestSyntheticClassification:
    def test_zero_noise_identical_samples(self):
        task, ep = sample_class_task(
            np.random.default_rng(0), n_way=3, k_train=4, k_test=2, dim=5, noise=0.0
        )
        first_class = ep.x_train[:4]
        assert np.all(first_class == first_class[0])

    def test_episode_sizes_and_onehot(self):
        _, ep = sample_class_task(
            np.random.default_rng(1), n_way=5, k_train=3, k_test=7, dim=8
        )
        assert ep.x_train.shape == (15, 8) and ep.x_test.shape == (35, 8)
        assert np.all(ep.y_train.sum(axis=1) == 1.0)
        assert set(np.unique(ep.y_train)) == {0.0, 1.0}

    def test_oracle_accuracy_small_noise(self):
        r = np.random.default_rng(2)
        accs = []
        for _ in range(50):
            _, ep = sample_class_task(r, n_way=5, k_train=5, k_test=10, noise=0.05)
            accs.append(prototype_oracle_accuracy(ep))
        assert np.mean(accs) > 0.99

    def test_fresh_episodes_from_same_task(self):
        task, _ = sample_class_task(np.random.default_rng(3), 4, 2, 2, dim=6)
        a = sample_class_episode(task, 2, 9, np.random.default_rng(10))
        assert a.k_train == 8 and a.k_test == 36

    def test_validation(self):
        with pytest.raises(ValueError):
            sample_class_task(np.random.default_rng(0), n_way=1, k_train=1, k_test=1)
        with pytest.raises(ValueError):
            sample_class_task(np.random.default_rng(0), n_way=2, k_train=0, k_test=1)
