import numpy as np
import pytest

from metaloss.autodiff import Graph
from metaloss.nn import LrSchedule, ParamSet, mount_params
from metaloss.tasks import Episode, sample_episode, sample_sine_task
from metaloss.training import (
    MethodSpec,
    TrainConfig,
    adapt_at_test,
    batch_objective_value,
    build_validation_set,
    init_params,
    init_train_state,
    inner_update_cavia,
    inner_update_maml,
    inner_update_relviable,
    inner_update_simviable,
    meta_batch_objective,
    meta_train_step,
    predict_after_adaptation,
    task_metric,
    train,
)

from conftest import central_diff, max_rel_err


def toy_spec(method, **kw):
    """Tiny smooth networks so finite differences stay clean."""
    base = dict(
        method=method,
        context_dim=2,
        hidden=(3,),
        activation="tanh",
        inner_lr=0.5,
        inner_steps=1,
    )
    if method == "sim_viable":
        base["loss_net_hidden"] = (2,)
    elif method == "rel_viable":
        base["loss_net_hidden"] = (1,)
    base.update(kw)
    return MethodSpec(**base)


def make_episodes(rng, n_tasks=3, k_train=4, k_test=5):
    episodes = []
    for _ in range(n_tasks):
        task = sample_sine_task(rng)
        episodes.append(sample_episode(task, k_train, k_test, rng))
    return episodes


def mounted(spec, theta, psi):
    g = Graph()
    theta_refs = mount_params(g, theta)
    psi_refs = mount_params(g, psi) if psi is not None else None
    return g, theta_refs, psi_refs


class TestInnerUpdates:
    def test_cavia_zero_inner_lr_keeps_context_zero(self, rng):
        spec = toy_spec("cavia", inner_lr=0.0)
        theta, _ = init_params(spec, rng)
        ep = make_episodes(rng, 1)[0]
        g, refs, _ = mounted(spec, theta, None)
        ctx = inner_update_cavia(g, spec, refs, ep)
        np.testing.assert_array_equal(g.value(ctx), np.zeros((1, 2)))

    def test_cavia_empty_train_split_is_noop(self, rng):
        spec = toy_spec("cavia")
        theta, _ = init_params(spec, rng)
        task = sample_sine_task(rng)
        ep = sample_episode(task, 0, 5, rng)
        g, refs, _ = mounted(spec, theta, None)
        ctx = inner_update_cavia(g, spec, refs, ep)
        np.testing.assert_array_equal(g.value(ctx), np.zeros((1, 2)))

    def test_cavia_linear_model_closed_form(self, rng):
        # Single linear layer on [x, c]: f = wx*x + wc*c + b. The adapted
        # context after one step is -lr * mean(2*(f0 - y)) * wc.
        spec = MethodSpec(method="cavia", context_dim=1, hidden=(), inner_lr=0.7)
        theta = ParamSet("task_agnostic")
        wx, wc, b = 0.8, -1.3, 0.2
        theta.set("w1", np.array([[wx], [wc]]))
        theta.set("b1", np.array([[b]]))
        x = rng.uniform(-2, 2, size=(6, 1))
        y = rng.normal(size=(6, 1))
        ep = Episode(x, y, x[:1], y[:1])
        g, refs, _ = mounted(spec, theta, None)
        ctx = inner_update_cavia(g, spec, refs, ep)
        f0 = wx * x + b
        expected = -0.7 * np.mean(2.0 * (f0 - y)) * wc
        assert g.value(ctx)[0, 0] == pytest.approx(expected, rel=1e-12)

    def test_maml_zero_inner_lr_keeps_params(self, rng):
        spec = toy_spec("maml", inner_lr=0.0)
        theta, _ = init_params(spec, rng)
        ep = make_episodes(rng, 1)[0]
        g, refs, _ = mounted(spec, theta, None)
        adapted = inner_update_maml(g, spec, refs, ep)
        for name in theta:
            np.testing.assert_array_equal(g.value(adapted[name]), theta[name])

    def test_maml_scalar_quadratic_closed_form(self):
        # With x = 0 the model output is just the bias, so the update is
        # b' = b*(1 - 2*lr) + 2*lr*y and the weight never moves.
        spec = MethodSpec(method="maml", context_dim=0, hidden=(), inner_lr=0.3)
        theta = ParamSet("task_agnostic")
        theta.set("w1", np.array([[1.7]]))
        theta.set("b1", np.array([[0.5]]))
        y0 = 2.0
        ep = Episode(np.zeros((1, 1)), np.array([[y0]]), np.zeros((1, 1)),
                     np.array([[y0]]))
        g, refs, _ = mounted(spec, theta, None)
        adapted = inner_update_maml(g, spec, refs, ep)
        assert g.value(adapted["w1"])[0, 0] == 1.7
        expected = 0.5 * (1 - 2 * 0.3) + 2 * 0.3 * y0
        assert g.value(adapted["b1"])[0, 0] == pytest.approx(expected, rel=1e-12)

    def test_maml_step_is_plain_gradient_descent(self, rng):
        # Full-parameter inner step against an independently computed
        # finite-difference descent step on a 3-block model.
        spec = MethodSpec(method="maml", context_dim=1, hidden=(),
                          inner_lr=0.2, activation="tanh")
        theta, _ = init_params(spec, rng)
        ep = make_episodes(rng, 1, k_train=5)[0]
        g, refs, _ = mounted(spec, theta, None)
        adapted = inner_update_maml(g, spec, refs, ep)

        def inner_loss(blocks):
            p = ParamSet("task_agnostic", blocks)
            value = task_metric(
                MethodSpec(method="maml", context_dim=1, hidden=(), inner_lr=0.0),
                p, None,
                Episode(ep.x_train, ep.y_train, ep.x_train, ep.y_train),
            )
            return value

        for name in theta:
            def f(block, name=name):
                blocks = {k: v.copy() for k, v in theta.items()}
                blocks[name] = block
                return inner_loss(blocks)

            fd_step = theta[name] - 0.2 * central_diff(f, theta[name])
            assert max_rel_err(g.value(adapted[name]), fd_step) < 1e-6, name

    def test_simviable_zero_loss_net_is_noop(self, rng):
        spec = toy_spec("sim_viable")
        theta, psi = init_params(spec, rng)
        for k in psi:
            psi[k][:] = 0.0
        ep = make_episodes(rng, 1)[0]
        g, trefs, prefs = mounted(spec, theta, psi)
        ctx = inner_update_simviable(g, spec, trefs, prefs, ep)
        np.testing.assert_array_equal(g.value(ctx), np.zeros((1, 2)))

    def test_relviable_zero_loss_net_is_noop(self, rng):
        spec = toy_spec("rel_viable")
        theta, psi = init_params(spec, rng)
        for k in psi:
            psi[k][:] = 0.0
        ep = make_episodes(rng, 1)[0]
        g, trefs, prefs = mounted(spec, theta, psi)
        ctx = inner_update_relviable(g, spec, trefs, prefs, ep)
        np.testing.assert_array_equal(g.value(ctx), np.zeros((1, 2)))

    def test_context_sensitivity_to_loss_net_matches_fd(self, rng):
        spec = toy_spec("sim_viable")
        theta, psi = init_params(spec, rng)
        ep = make_episodes(rng, 1)[0]

        def adapted_sum(psi_blocks):
            p = ParamSet("loss_net", psi_blocks)
            g, trefs, prefs = mounted(spec, theta, p)
            ctx = inner_update_simviable(g, spec, trefs, prefs, ep)
            return float(g.value(ctx).sum())

        g, trefs, prefs = mounted(spec, theta, psi)
        ctx = inner_update_simviable(g, spec, trefs, prefs, ep, create_graph=True)
        total = g.sum(ctx)
        grads = g.grad(total, list(prefs.values()))
        any_nonzero = False
        for name in psi:
            def f(block, name=name):
                blocks = {k: v.copy() for k, v in psi.items()}
                blocks[name] = block
                return adapted_sum(blocks)

            numeric = central_diff(f, psi[name])
            analytic = g.value(grads[prefs[name]])
            any_nonzero |= bool(np.any(analytic != 0.0))
            assert max_rel_err(analytic, numeric) < 1e-5, name
        assert any_nonzero

    def test_relviable_single_sample_uses_self_pair(self, rng):
        spec = toy_spec("rel_viable")
        theta, psi = init_params(spec, rng)
        task = sample_sine_task(rng)
        ep = sample_episode(task, 1, 3, rng)
        g, trefs, prefs = mounted(spec, theta, psi)
        ctx = inner_update_relviable(g, spec, trefs, prefs, ep)
        assert np.all(np.isfinite(g.value(ctx)))
        assert np.any(g.value(ctx) != 0.0)

    def test_relviable_duplicating_rows_preserves_objective(self, rng):
        # Duplicating every sample squares the pair count but leaves the
        # pairwise mean unchanged, so the adapted context is identical.
        spec = toy_spec("rel_viable")
        theta, psi = init_params(spec, rng)
        task = sample_sine_task(rng)
        ep = sample_episode(task, 3, 4, rng)
        doubled = Episode(
            np.concatenate([ep.x_train, ep.x_train]),
            np.concatenate([ep.y_train, ep.y_train]),
            ep.x_test, ep.y_test,
        )
        g1, t1, p1 = mounted(spec, theta, psi)
        c1 = inner_update_relviable(g1, spec, t1, p1, ep)
        g2, t2, p2 = mounted(spec, theta, psi)
        c2 = inner_update_relviable(g2, spec, t2, p2, doubled)
        np.testing.assert_allclose(g1.value(c1), g2.value(c2), rtol=1e-12)


class TestMetaGradients:
    """The central oracle: outer gradients through the inner update match
    central finite differences on toy models."""

    def _check(self, spec, rng, tol=1e-4):
        theta, psi = init_params(spec, rng)
        if spec.task_kind == "sine":
            episodes = make_episodes(rng, n_tasks=2, k_train=3, k_test=4)
        else:
            from metaloss.tasks import sample_class_task

            episodes = [
                sample_class_task(rng, 2, 2, 3, dim=spec.x_dim, noise=0.3)[1]
                for _ in range(2)
            ]

        g, trefs, prefs = mounted(spec, theta, psi)
        outer = meta_batch_objective(g, spec, trefs, prefs, episodes)
        wrt = list(trefs.values()) + (list(prefs.values()) if prefs else [])
        grads = g.grad(outer, wrt)

        def check_set(params, refs, label):
            for name in params:
                def f(block, name=name, params=params):
                    blocks = {k: v.copy() for k, v in params.items()}
                    blocks[name] = block
                    p = ParamSet(params.role, blocks)
                    if label == "theta":
                        return batch_objective_value(spec, p, psi, episodes)
                    return batch_objective_value(spec, theta, p, episodes)

                numeric = central_diff(f, params[name])
                analytic = g.value(grads[refs[name]])
                err = max_rel_err(analytic, numeric)
                assert err < tol, f"{label}/{name}: {err}"

        check_set(theta, trefs, "theta")
        if psi is not None:
            check_set(psi, prefs, "psi")

    def test_cavia_meta_gradient(self, rng):
        self._check(toy_spec("cavia"), rng)

    def test_maml_meta_gradient(self, rng):
        self._check(toy_spec("maml", inner_lr=0.1), rng)

    def test_simviable_meta_gradient(self, rng):
        self._check(toy_spec("sim_viable"), rng)

    def test_relviable_meta_gradient(self, rng):
        self._check(toy_spec("rel_viable"), rng)

    def test_two_step_inner_meta_gradient(self, rng):
        self._check(toy_spec("sim_viable", inner_steps=2, inner_lr=0.3), rng)

    def test_classification_meta_gradient(self, rng):
        spec = MethodSpec(
            method="sim_viable", task_kind="classification",
            x_dim=2, y_dim=2, context_dim=2, hidden=(2,),
            loss_net_hidden=(2,), activation="tanh",
            inner_lr=0.3, inner_steps=2,
        )
        self._check(spec, rng)

    def test_zero_inner_lr_reduces_to_supervised(self, rng):
        spec = toy_spec("cavia", inner_lr=0.0)
        theta, _ = init_params(spec, rng)
        episodes = make_episodes(rng, 2)
        g, trefs, _ = mounted(spec, theta, None)
        outer = meta_batch_objective(g, spec, trefs, None, episodes)
        grads = g.grad(outer, list(trefs.values()))

        # plain supervised loss of the unadapted model on the test rows
        from metaloss.training import _outer_loss_batch

        g2 = Graph()
        trefs2 = mount_params(g2, theta)
        ctx = g2.constant(np.zeros((2, spec.context_dim)))
        plain = _outer_loss_batch(g2, spec, trefs2, ctx, episodes)
        plain_grads = g2.grad(plain, list(trefs2.values()))

        assert g.scalar(outer) == pytest.approx(g2.scalar(plain), rel=1e-12)
        for name in theta:
            np.testing.assert_allclose(
                g.value(grads[trefs[name]]),
                g2.value(plain_grads[trefs2[name]]),
                rtol=1e-10, atol=1e-14,
            )

    def test_batch_gradient_is_mean_of_task_gradients(self, rng):
        spec = toy_spec("sim_viable")
        theta, psi = init_params(spec, rng)
        episodes = make_episodes(rng, 3)

        def grads_for(eps):
            g, trefs, prefs = mounted(spec, theta, psi)
            outer = meta_batch_objective(g, spec, trefs, prefs, eps)
            wrt = {**trefs, **{f"psi.{k}": v for k, v in prefs.items()}}
            gm = g.grad(outer, list(wrt.values()))
            return {k: np.array(g.value(gm[v])) for k, v in wrt.items()}

        full = grads_for(episodes)
        singles = [grads_for([ep]) for ep in episodes]
        for key in full:
            mean = np.mean([s[key] for s in singles], axis=0)
            np.testing.assert_allclose(full[key], mean, rtol=1e-9, atol=1e-12)

    def test_batched_objective_equals_mean_of_episode_objectives(self, rng):
        for method in ("cavia", "sim_viable", "rel_viable", "maml"):
            spec = toy_spec(method) if method != "maml" else toy_spec(
                method, inner_lr=0.1
            )
            theta, psi = init_params(spec, rng)
            episodes = make_episodes(rng, 3)
            whole = batch_objective_value(spec, theta, psi, episodes)
            singles = [
                batch_objective_value(spec, theta, psi, [ep]) for ep in episodes
            ]
            assert whole == pytest.approx(np.mean(singles), rel=1e-12), method


class TestMetaTrainStep:
    def test_descent_on_frozen_batch(self, rng):
        spec = toy_spec("cavia", activation="relu")
        cfg = TrainConfig(iters=1, seed=0, schedule=LrSchedule(base=1e-4))
        state = init_train_state(spec, cfg)
        episodes = make_episodes(rng, 5)
        before = batch_objective_value(spec, state.theta, state.psi, episodes)
        meta_train_step(state, spec, episodes, cfg.schedule)
        after = batch_objective_value(spec, state.theta, state.psi, episodes)
        assert after < before
        assert state.iteration == 1

    def test_both_sets_updated_together(self, rng):
        spec = toy_spec("rel_viable")
        cfg = TrainConfig(iters=1, seed=0)
        state = init_train_state(spec, cfg)
        theta_before = state.theta.copy()
        psi_before = state.psi.copy()
        meta_train_step(state, spec, make_episodes(rng, 2), cfg.schedule)
        assert not state.theta.bytes_equal(theta_before)
        assert not state.psi.bytes_equal(psi_before)


class TestNoDataDegeneracy:
    def test_all_methods_identical_at_k_zero(self):
        # Same init seed gives every method the same prediction weights;
        # with no adaptation data the post-update loss must match the
        # unadapted loss exactly, for all four methods.
        rng = np.random.default_rng(42)
        task = sample_sine_task(rng)
        episode = sample_episode(task, 0, 10, rng)
        values = {}
        for method in ("cavia", "maml", "sim_viable", "rel_viable"):
            kw = dict(method=method, context_dim=3, hidden=(8,), inner_lr=1.0)
            if method in ("sim_viable", "rel_viable"):
                kw["loss_net_hidden"] = (6,)
            spec = MethodSpec(**kw)
            theta, psi = init_params(spec, np.random.default_rng(7))
            values[method] = batch_objective_value(spec, theta, psi, [episode])
            metric = task_metric(spec, theta, psi, episode)
            assert metric == values[method], method
        assert len(set(values.values())) == 1


class TestTrainLoop:
    def test_zero_iters_returns_initialization(self):
        spec = toy_spec("cavia")
        cfg = TrainConfig(iters=0, seed=3, val_tasks=4)
        state = train(spec, cfg)
        fresh = init_train_state(spec, cfg)
        assert state.theta.bytes_equal(fresh.theta)
        assert len(state.history) == 1
        assert state.best_score == state.history[0][1]

    def test_history_length_and_best(self):
        spec = toy_spec("cavia")
        cfg = TrainConfig(iters=6, seed=1, val_every=2, meta_batch=2, val_tasks=3)
        state = train(spec, cfg)
        assert len(state.history) == 6 // 2 + 1
        assert state.best_score == min(score for _, score in state.history)

    def test_validation_set_is_fixed(self):
        spec = toy_spec("cavia")
        cfg = TrainConfig(iters=0, seed=5, val_tasks=6)
        from metaloss.rng import rng_stream

        a = build_validation_set(spec, cfg, rng_stream(5, "validation"))
        b = build_validation_set(spec, cfg, rng_stream(5, "validation"))
        assert all(
            x.x_train.tobytes() == y.x_train.tobytes() for x, y in zip(a, b)
        )

    def test_training_is_deterministic(self):
        spec = toy_spec("sim_viable")
        cfg = TrainConfig(iters=4, seed=9, val_every=2, meta_batch=2, val_tasks=3)
        a = train(spec, cfg)
        b = train(spec, cfg)
        assert a.theta.bytes_equal(b.theta)
        assert a.history == b.history


class TestAdaptAtTest:
    def test_shared_parameters_untouched(self, rng):
        spec = toy_spec("rel_viable")
        theta, psi = init_params(spec, rng)
        theta_bytes = {k: v.tobytes() for k, v in theta.items()}
        psi_bytes = {k: v.tobytes() for k, v in psi.items()}
        for _ in range(10):
            ep = make_episodes(rng, 1)[0]
            adapt_at_test(spec, theta, psi, ep)
        assert all(theta[k].tobytes() == theta_bytes[k] for k in theta)
        assert all(psi[k].tobytes() == psi_bytes[k] for k in psi)

    def test_adaptation_is_deterministic(self, rng):
        spec = toy_spec("cavia")
        theta, _ = init_params(spec, rng)
        ep = make_episodes(rng, 1)[0]
        a = adapt_at_test(spec, theta, None, ep)
        b = adapt_at_test(spec, theta, None, ep)
        assert a.context.tobytes() == b.context.tobytes()

    def test_empty_episode_gives_zero_context(self, rng):
        spec = toy_spec("cavia")
        theta, _ = init_params(spec, rng)
        task = sample_sine_task(rng)
        ep = sample_episode(task, 0, 4, rng)
        adapted = adapt_at_test(spec, theta, None, ep)
        np.testing.assert_array_equal(adapted.context, np.zeros((1, 2)))

    def test_maml_returns_adapted_params(self, rng):
        spec = toy_spec("maml", inner_lr=0.05)
        theta, _ = init_params(spec, rng)
        ep = make_episodes(rng, 1)[0]
        adapted = adapt_at_test(spec, theta, None, ep)
        assert adapted.params is not None
        assert not adapted.params.bytes_equal(theta)
        out = predict_after_adaptation(spec, theta, adapted, ep.x_test)
        assert out.shape == (ep.k_test, 1)


class TestMethodSpecValidation:
    def test_loss_net_required(self):
        with pytest.raises(ValueError):
            MethodSpec(method="sim_viable")

    def test_loss_net_forbidden(self):
        with pytest.raises(ValueError):
            MethodSpec(method="cavia", loss_net_hidden=(4,))

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            MethodSpec(method="fomaml")

    def test_negative_inner_lr(self):
        with pytest.raises(ValueError):
            MethodSpec(method="cavia", inner_lr=-0.1)
