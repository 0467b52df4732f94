import numpy as np
import pytest

from metaloss.evaluation import (
    EvalProtocol,
    ResultRow,
    aggregate,
    emit_loss_trajectory,
    evaluate,
    evaluate_per_task,
)
from metaloss.rng import rng_stream
from metaloss.training import MethodSpec, TrainConfig, init_params, train


def zero_weight_spec():
    return MethodSpec(method="cavia", context_dim=0, hidden=(4,), inner_lr=1.0)


def zero_weight_theta(spec):
    theta, _ = init_params(spec, np.random.default_rng(0))
    for k in theta:
        theta[k][:] = 0.0
    return theta


@pytest.fixture(scope="module")
def short_trained():
    """A briefly trained context-adaptation model shared across tests."""
    spec = MethodSpec(method="cavia", context_dim=4, hidden=(24, 24), inner_lr=1.0)
    cfg = TrainConfig(iters=1500, seed=0, val_every=500, meta_batch=10,
                      val_tasks=20)
    state = train(spec, cfg)
    return spec, state


class TestAggregate:
    def test_perfect_scores(self):
        mean, ci = aggregate(np.zeros(50))
        assert mean == 0.0 and ci == 0.0

    def test_single_task_ci_is_zero(self):
        mean, ci = aggregate(np.array([3.4]))
        assert mean == 3.4 and ci == 0.0

    def test_ci_formula(self):
        values = np.array([1.0, 2.0, 3.0, 4.0])
        mean, ci = aggregate(values)
        assert mean == 2.5
        assert ci == pytest.approx(1.96 * values.std(ddof=1) / 2.0)


class TestEvaluate:
    def test_constant_zero_predictor_closed_form(self):
        # For amplitudes uniform on [0.1, 5] the expected grid MSE of the
        # zero predictor is E[A^2]/2 = (0.01 + 0.5 + 25)/6 = 4.2517 exactly
        # (the phase average kills the oscillatory term).
        spec = zero_weight_spec()
        theta = zero_weight_theta(spec)
        protocol = EvalProtocol(n_tasks=3000, adapt_points=10)
        values = evaluate_per_task(
            spec, theta, None, protocol, rng_stream(0, "evaluation")
        )
        expected = (0.1**2 + 0.1 * 5.0 + 5.0**2) / 3.0 / 2.0
        mean, ci = aggregate(values)
        assert expected == pytest.approx(4.2517, abs=1e-4)
        assert abs(mean - expected) < 3 * ci

    def test_rows_are_deterministic_and_pure(self):
        spec = zero_weight_spec()
        theta = zero_weight_theta(spec)
        before = {k: v.tobytes() for k, v in theta.items()}
        protocol = EvalProtocol(n_tasks=40)
        row_a = evaluate(spec, theta, None, protocol, rng_stream(5, "evaluation"))
        row_b = evaluate(spec, theta, None, protocol, rng_stream(5, "evaluation"))
        assert row_a == row_b
        assert all(theta[k].tobytes() == before[k] for k in theta)

    def test_ci_shrinks_like_sqrt_n(self):
        spec = zero_weight_spec()
        theta = zero_weight_theta(spec)
        cis = {}
        for n in (100, 400, 1600):
            values = evaluate_per_task(
                spec, theta, None, EvalProtocol(n_tasks=n),
                rng_stream(1, "evaluation"),
            )
            cis[n] = aggregate(values)[1]
        assert cis[100] / cis[400] == pytest.approx(2.0, rel=0.2)
        assert cis[400] / cis[1600] == pytest.approx(2.0, rel=0.2)

    def test_more_adaptation_data_helps(self, short_trained):
        spec, state = short_trained
        means = {}
        for p in (0, 4, 10):
            values = evaluate_per_task(
                spec, state.best_theta, state.best_psi,
                EvalProtocol(n_tasks=300, adapt_points=p),
                rng_stream(2, "evaluation"),
            )
            means[p] = aggregate(values)
        assert means[10][0] < means[0][0] - 2 * means[10][1]
        assert means[4][0] < means[0][0]

    def test_result_row_requires_finite(self):
        with pytest.raises(ValueError):
            ResultRow("cavia", 2, 10, 0, "test", 0, "mse", float("nan"), 0.0)


class TestLossTrajectory:
    def test_pre_equals_post_with_no_adaptation_data(self):
        spec = zero_weight_spec()
        theta = zero_weight_theta(spec)
        protocol = EvalProtocol(n_tasks=25, adapt_points=0)
        pre, post = emit_loss_trajectory(
            spec, theta, None, protocol, rng_stream(3, "evaluation")
        )
        np.testing.assert_array_equal(pre, post)

    def test_trained_model_improves_after_adaptation(self, short_trained):
        spec, state = short_trained
        protocol = EvalProtocol(n_tasks=100, adapt_points=10)
        pre, post = emit_loss_trajectory(
            spec, state.best_theta, state.best_psi, protocol,
            rng_stream(4, "evaluation"),
        )
        assert post.mean() < pre.mean()


class TestGridRunners:
    def test_context_sweep_covers_all_methods(self):
        from metaloss.evaluation import run_vary_context_params
        from metaloss.training import MethodSpec, TrainConfig

        specs = [
            MethodSpec(method="maml", context_dim=1, hidden=(6,), inner_lr=0.2),
            MethodSpec(method="sim_viable", context_dim=1, hidden=(6,),
                       loss_net_hidden=(5,), inner_lr=1.0),
        ]
        cfg = TrainConfig(iters=6, seed=0, val_every=3, meta_batch=2, val_tasks=3)
        rows = run_vary_context_params(
            specs, [1, 2], cfg, EvalProtocol(n_tasks=8), seeds=(0,), eval_seed=0
        )
        assert {(r.method, r.phi_dim) for r in rows} == {
            ("maml", 1), ("maml", 2), ("sim_viable", 1), ("sim_viable", 2),
        }
        assert all(r.metric == "mse" and np.isfinite(r.value) for r in rows)

    def test_untrained_classifier_is_at_chance(self):
        from metaloss.training import MethodSpec, init_params

        spec = MethodSpec(method="cavia", task_kind="classification",
                          x_dim=6, y_dim=4, context_dim=0, hidden=(5,),
                          inner_lr=1.0, inner_steps=1)
        theta, _ = init_params(spec, np.random.default_rng(0))
        for k in theta:
            theta[k][:] = 0.0
        # zero weights: uniform logits, argmax always class 0, balanced
        # test split, so accuracy is exactly 1/n_way
        protocol = EvalProtocol(n_tasks=10, adapt_points=2, metric="accuracy",
                                n_way=4, k_query=5, class_dim=6)
        values = evaluate_per_task(
            spec, theta, None, protocol, rng_stream(3, "evaluation")
        )
        np.testing.assert_allclose(values, 0.25)
