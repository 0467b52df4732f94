"""Test-time evaluation protocol and the experiment grids."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .rng import rng_stream
from .tasks import (
    Episode,
    linspace_eval_grid,
    sample_class_episode,
    sample_class_task,
    sample_episode,
    sample_sine_task,
)
from .training import MethodSpec, TrainConfig, task_metric, train

__all__ = [
    "EvalProtocol",
    "ResultRow",
    "aggregate",
    "evaluate",
    "evaluate_per_task",
    "run_vary_context_params",
    "run_vary_sample_points",
    "run_shot_generalization",
    "emit_loss_trajectory",
    "RunHooks",
]


@dataclass(frozen=True)
class EvalProtocol:
    """How a trained model is scored on fresh tasks."""

    n_tasks: int = 1000
    adapt_points: int = 10
    grid_points: int = 100
    metric: str = "mse"  # mse | accuracy
    # classification episodes
    n_way: int = 5
    k_query: int = 15
    class_dim: int = 16
    class_noise: float = 0.1

    def __post_init__(self):
        if self.n_tasks < 1:
            raise ValueError("n_tasks must be at least 1")
        if self.metric not in ("mse", "accuracy"):
            raise ValueError(f"unknown metric {self.metric!r}")


@dataclass(frozen=True)
class ResultRow:
    """One emitted measurement."""

    method: str
    phi_dim: int
    k_train: int
    seed: int
    split: str
    iteration: int
    metric: str
    value: float
    ci95: float

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError("result value must be finite")


def aggregate(values: np.ndarray) -> tuple[float, float]:
    """Mean and 95% half-width over per-task values. A single task has no
    spread estimate, so its half-width is defined as zero."""
    values = np.asarray(values, dtype=np.float64)
    mean = float(values.mean())
    if values.size < 2:
        return mean, 0.0
    stderr = values.std(ddof=1) / np.sqrt(values.size)
    return mean, float(1.96 * stderr)


def _eval_episode(spec, protocol, rng, amplitude_range):
    if spec.task_kind == "sine":
        task = sample_sine_task(rng, amplitude_range)
        adapt = sample_episode(task, protocol.adapt_points, 1, rng)
        grid = linspace_eval_grid(protocol.grid_points)
        return Episode(adapt.x_train, adapt.y_train, grid, task.targets(grid))
    _, episode = sample_class_task(
        rng, protocol.n_way, max(protocol.adapt_points, 1), protocol.k_query,
        protocol.class_dim, protocol.class_noise,
    )
    if protocol.adapt_points == 0:
        episode = Episode(
            episode.x_train[:0], episode.y_train[:0],
            episode.x_test, episode.y_test,
        )
    return episode


def evaluate_per_task(spec, theta, psi, protocol, rng,
                      amplitude_range=(0.1, 5.0)) -> np.ndarray:
    """Per-task metric values over fresh tasks (mse, or accuracy)."""
    values = np.empty(protocol.n_tasks)
    for t in range(protocol.n_tasks):
        episode = _eval_episode(spec, protocol, rng, amplitude_range)
        score = task_metric(spec, theta, psi, episode)
        values[t] = 1.0 - score if protocol.metric == "accuracy" else score
    return values


def evaluate(spec, theta, psi, protocol, rng, *, seed=0, iteration=0,
             split="test", amplitude_range=(0.1, 5.0)) -> ResultRow:
    """Adapt on fresh tasks and report the aggregate metric with its 95%
    confidence half-width. Never mutates the trained parameters."""
    values = evaluate_per_task(spec, theta, psi, protocol, rng, amplitude_range)
    mean, ci = aggregate(values)
    return ResultRow(
        method=spec.method,
        phi_dim=spec.context_dim,
        k_train=protocol.adapt_points,
        seed=seed,
        split=split,
        iteration=iteration,
        metric=protocol.metric,
        value=mean,
        ci95=ci,
    )


@dataclass(frozen=True)
class RunHooks:
    """Optional side channels for the grid runners."""

    on_trained: Callable | None = None  # (cell_key, spec, state) -> None
    log: Callable | None = None         # (message) -> None

    def trained(self, key, spec, state):
        if self.on_trained is not None:
            self.on_trained(key, spec, state)

    def info(self, message):
        if self.log is not None:
            self.log(message)


def _train_cell(spec: MethodSpec, cfg: TrainConfig):
    state = train(spec, cfg)
    return state


def run_vary_context_params(
    method_specs: Sequence[MethodSpec],
    context_dims: Sequence[int],
    cfg: TrainConfig,
    protocol: EvalProtocol,
    seeds: Sequence[int],
    eval_seed: int | None = None,
    hooks: RunHooks = RunHooks(),
) -> list[ResultRow]:
    """Train every (method, context size, seed) cell and evaluate it on its
    own fresh task set. Evaluation streams are shared across methods (same
    eval_seed) so comparisons are paired."""
    rows = []
    for spec in method_specs:
        for dim in context_dims:
            cell_spec = replace(spec, context_dim=dim)
            for seed in seeds:
                cell_cfg = replace(cfg, seed=seed)
                hooks.info(f"train {cell_spec.method} c={dim} seed={seed}")
                state = _train_cell(cell_spec, cell_cfg)
                hooks.trained((cell_spec.method, dim, seed), cell_spec, state)
                eval_rng = rng_stream(
                    eval_seed if eval_seed is not None else seed,
                    "evaluation", dim,
                )
                rows.append(
                    evaluate(
                        cell_spec, state.best_theta, state.best_psi, protocol,
                        eval_rng, seed=seed, iteration=state.iteration,
                        amplitude_range=cfg.amplitude_range,
                    )
                )
    return rows


def run_vary_sample_points(
    method_specs: Sequence[MethodSpec],
    eval_k: Sequence[int],
    cfg: TrainConfig,
    protocol: EvalProtocol,
    seeds: Sequence[int],
    eval_seed: int | None = None,
    hooks: RunHooks = RunHooks(),
) -> list[ResultRow]:
    """Train with a randomized adaptation-set size, then sweep the number
    of sample points shown at test time."""
    rows = []
    for spec in method_specs:
        for seed in seeds:
            cell_cfg = replace(cfg, seed=seed)
            hooks.info(f"train {spec.method} seed={seed} (k randomized)")
            state = _train_cell(spec, cell_cfg)
            hooks.trained((spec.method, "ksweep", seed), spec, state)
            for k in eval_k:
                eval_rng = rng_stream(
                    eval_seed if eval_seed is not None else seed,
                    "evaluation", k,
                )
                rows.append(
                    evaluate(
                        spec, state.best_theta, state.best_psi,
                        replace(protocol, adapt_points=k), eval_rng,
                        seed=seed, iteration=state.iteration,
                        amplitude_range=cfg.amplitude_range,
                    )
                )
    return rows


def run_shot_generalization(
    method_specs: Sequence[MethodSpec],
    shot_range: Sequence[int],
    cfg: TrainConfig,
    protocol: EvalProtocol,
    seeds: Sequence[int],
    eval_seed: int | None = None,
    hooks: RunHooks = RunHooks(),
) -> list[ResultRow]:
    """Train on fixed-shot classification episodes, then evaluate on
    episodes with a different number of shots per class."""
    rows = []
    for spec in method_specs:
        for seed in seeds:
            cell_cfg = replace(cfg, seed=seed)
            hooks.info(f"train {spec.method} seed={seed} ({cfg.k_shot}-shot)")
            state = _train_cell(spec, cell_cfg)
            hooks.trained((spec.method, "shots", seed), spec, state)
            for shots in shot_range:
                eval_rng = rng_stream(
                    eval_seed if eval_seed is not None else seed,
                    "evaluation", shots,
                )
                shot_protocol = replace(
                    protocol, metric="accuracy", adapt_points=shots,
                    n_way=cfg.n_way, k_query=cfg.k_query,
                    class_dim=cfg.class_dim, class_noise=cfg.class_noise,
                )
                values = np.empty(shot_protocol.n_tasks)
                for t in range(shot_protocol.n_tasks):
                    task, _ = sample_class_task(
                        eval_rng, cfg.n_way, 1, 1, cfg.class_dim, cfg.class_noise
                    )
                    episode = sample_class_episode(
                        task, shots, cfg.k_query, eval_rng
                    )
                    values[t] = 1.0 - task_metric(
                        spec, state.best_theta, state.best_psi, episode
                    )
                mean, ci = aggregate(values)
                rows.append(
                    ResultRow(
                        method=spec.method, phi_dim=spec.context_dim,
                        k_train=shots, seed=seed, split="test",
                        iteration=state.iteration, metric="accuracy",
                        value=mean, ci95=ci,
                    )
                )
    return rows


def emit_loss_trajectory(spec, theta, psi, protocol, rng,
                         amplitude_range=(0.1, 5.0)):
    """Task loss before and after adaptation on fresh evaluation tasks;
    feeds the pre/post comparison plot."""
    pre = np.empty(protocol.n_tasks)
    post = np.empty(protocol.n_tasks)
    for t in range(protocol.n_tasks):
        episode = _eval_episode(spec, protocol, rng, amplitude_range)
        unadapted = Episode(
            episode.x_train[:0], episode.y_train[:0],
            episode.x_test, episode.y_test,
        )
        pre[t] = task_metric(spec, theta, psi, unadapted)
        post[t] = task_metric(spec, theta, psi, episode)
    return pre, post
