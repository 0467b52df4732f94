"""Finite-difference verification suites.

These run before any training is trusted: every primitive's gradient and
every method's meta-gradient (the gradient of the post-update test loss
with respect to the shared and loss-net parameters) is compared against
central finite differences on small models.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, concat_cols
from .nn import ParamSet
from .tasks import sample_episode, sample_sine_task
from .training import (
    MethodSpec,
    batch_objective_value,
    init_params,
    meta_batch_objective,
)
from .nn import mount_params

__all__ = ["CheckResult", "primitive_checks", "meta_gradient_checks", "run_all"]

PRIMITIVE_TOL = 1e-6
META_TOL = 1e-4
FD_STEP = 1e-5
REL_CLAMP = 1e-8


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"[{status}] {self.name}: max rel err {self.max_rel_err:.3e} (tol {self.tolerance:.0e})"


def _central_diff(f, x0, h=FD_STEP):
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    it = np.nditer(x0, flags=["multi_index"])
    while not it.finished:
        ix = it.multi_index
        xp, xm = x0.copy(), x0.copy()
        xp[ix] += h
        xm[ix] -= h
        grad[ix] = (f(xp) - f(xm)) / (2.0 * h)
        it.iternext()
    return grad


def _rel_err(analytic, numeric):
    a, n = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_CLAMP)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def _check_scalar_fn(name, build, x0, tol) -> CheckResult:
    g = Graph()
    x = g.variable(x0)
    out = build(g, x)
    analytic = g.value(g.grad(out, [x])[x])

    def f(xv):
        gg = Graph()
        return gg.scalar(build(gg, gg.variable(xv)))

    numeric = _central_diff(f, np.asarray(x0, dtype=np.float64).reshape(x.shape))
    return CheckResult(name, _rel_err(analytic, numeric), tol)


def primitive_checks(seed: int = 0) -> list[CheckResult]:
    """First-order checks, one scalar probe per primitive."""
    r = np.random.default_rng(seed)
    m = r.normal(size=(3, 4))
    w = r.normal(size=(4, 2))
    onehot = np.zeros((3, 4))
    onehot[np.arange(3), [0, 2, 1]] = 1.0
    relu_safe = r.normal(size=(3, 4))
    relu_safe[np.abs(relu_safe) < 0.05] = 0.3

    probes = [
        ("add", lambda g, x: g.sum(g.add(x, g.constant(m))), m.copy()),
        ("sub", lambda g, x: g.sum(g.sub(g.constant(m), x)), m.copy()),
        ("mul_elementwise", lambda g, x: g.sum(g.mul(x, g.constant(m + 2))), m.copy()),
        ("scalar_mul", lambda g, x: g.sum(g.scalar_mul(g.constant(m), x)), [[0.7]]),
        ("matmul", lambda g, x: g.sum(g.square(g.matmul(x, g.constant(w)))), m.copy()),
        (
            "concat_rows",
            lambda g, x: g.sum(g.square(g.concat_rows(x, g.constant(m)))),
            m.copy(),
        ),
        ("relu", lambda g, x: g.sum(g.relu(x)), relu_safe),
        ("tanh", lambda g, x: g.sum(g.tanh(x)), m.copy()),
        ("square", lambda g, x: g.sum(g.square(x)), m.copy()),
        ("exp", lambda g, x: g.sum(g.exp(x)), m * 0.5),
        ("log", lambda g, x: g.sum(g.log(x)), np.abs(m) + 0.5),
        ("sum", lambda g, x: g.sum(g.mul(x, x)), m.copy()),
        ("mean", lambda g, x: g.mean(g.square(x)), m.copy()),
        (
            "softmax_cross_entropy",
            lambda g, x: g.mean(g.softmax_cross_entropy(x, g.constant(onehot))),
            m.copy(),
        ),
        (
            "concat_cols",
            lambda g, x: g.sum(g.square(concat_cols(g, [x, g.constant(m)]))),
            m.copy(),
        ),
    ]
    return [
        _check_scalar_fn(f"primitive/{name}", build, x0, PRIMITIVE_TOL)
        for name, build, x0 in probes
    ]


def _toy_spec(method: str) -> MethodSpec:
    kw = dict(
        method=method, context_dim=2, hidden=(3,), activation="tanh",
        inner_lr=0.5, inner_steps=1,
    )
    if method == "sim_viable":
        kw["loss_net_hidden"] = (2,)
    elif method == "rel_viable":
        kw["loss_net_hidden"] = (1,)
    if method == "maml":
        kw["inner_lr"] = 0.1
    return MethodSpec(**kw)


def meta_gradient_checks(seed: int = 0) -> list[CheckResult]:
    """Second-order checks: outer gradients through one inner step on toy
    models, for every method and both parameter sets."""
    results = []
    for method in ("cavia", "maml", "sim_viable", "rel_viable"):
        spec = _toy_spec(method)
        r = np.random.default_rng(seed + 17)
        theta, psi = init_params(spec, r)
        episodes = []
        for _ in range(2):
            task = sample_sine_task(r)
            episodes.append(sample_episode(task, 3, 4, r))

        g = Graph()
        theta_refs = mount_params(g, theta)
        psi_refs = mount_params(g, psi) if psi is not None else None
        outer = meta_batch_objective(g, spec, theta_refs, psi_refs, episodes)
        wrt = list(theta_refs.values()) + (
            list(psi_refs.values()) if psi_refs else []
        )
        grads = g.grad(outer, wrt)

        def check(params, refs, label):
            worst = 0.0
            for name in params:
                def f(block, name=name):
                    blocks = {k: v.copy() for k, v in params.items()}
                    blocks[name] = block
                    p = ParamSet(params.role, blocks)
                    if label == "theta":
                        return batch_objective_value(spec, p, psi, episodes)
                    return batch_objective_value(spec, theta, p, episodes)

                numeric = _central_diff(f, params[name])
                worst = max(worst, _rel_err(g.value(grads[refs[name]]), numeric))
            results.append(CheckResult(f"meta/{method}/{label}", worst, META_TOL))

        check(theta, theta_refs, "theta")
        if psi is not None:
            check(psi, psi_refs, "psi")
    return results


def run_all(seed: int = 0) -> list[CheckResult]:
    return primitive_checks(seed) + meta_gradient_checks(seed)
