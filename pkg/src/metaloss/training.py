"""Inner and outer loops.

The inner loop adapts per-task values (the context vector, or every
parameter for full-parameter adaptation) by gradient descent on either the
task loss or a learned loss. The outer loop differentiates the post-update
test loss through those inner steps and applies Adam to the shared
parameters. Loss-network weights are held fixed inside every inner loop
and move only in the outer update; the outer objective is always the true
task loss.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Graph, NodeRef, concat_cols
from .models import (
    PredictionModel,
    RelationLossNet,
    SimpleLossNet,
    pair_indices,
    predict,
    predict_rows,
)
from .nn import AdamState, LrSchedule, ParamSet, lr_at, mount_params
from .rng import rng_stream
from .tasks import (
    AMPLITUDE_RANGE,
    Episode,
    linspace_eval_grid,
    sample_class_task,
    sample_episode,
    sample_sine_task,
)

__all__ = [
    "METHODS",
    "MethodSpec",
    "TrainConfig",
    "TrainState",
    "Adapted",
    "init_train_state",
    "inner_update_cavia",
    "inner_update_maml",
    "inner_update_simviable",
    "inner_update_relviable",
    "meta_batch_objective",
    "batch_objective_value",
    "meta_train_step",
    "train",
    "adapt_at_test",
    "predict_after_adaptation",
    "task_metric",
    "build_validation_set",
]

METHODS = ("cavia", "maml", "sim_viable", "rel_viable")
CONTEXT_NAME = "context"


@dataclass(frozen=True)
class MethodSpec:
    """Everything that defines one trainable method instance."""

    method: str
    task_kind: str = "sine"  # sine | classification
    x_dim: int = 1
    y_dim: int = 1
    context_dim: int = 5
    hidden: tuple = (40, 40)
    loss_net_hidden: tuple | None = None
    inner_lr: float = 1.0
    inner_steps: int = 1
    activation: str = "relu"
    # Loss nets default to smooth hidden units: the meta-gradient that
    # trains them flows through their input-sensitivities, and with relu
    # those are piecewise constant in the weights' effect, which starves
    # the co-adaptation (observed as a hard quality ceiling at small k).
    loss_net_activation: str = "tanh"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.task_kind not in ("sine", "classification"):
            raise ValueError(f"unknown task kind {self.task_kind!r}")
        if self.inner_lr < 0:
            raise ValueError("inner_lr must be non-negative")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be at least 1")
        if self.needs_loss_net and self.loss_net_hidden is None:
            raise ValueError(f"{self.method} requires loss_net_hidden")
        if not self.needs_loss_net and self.loss_net_hidden is not None:
            raise ValueError(f"{self.method} takes no loss network")
        if self.loss_net_activation not in ("relu", "tanh"):
            raise ValueError(
                f"unknown loss_net_activation {self.loss_net_activation!r}"
            )

    @property
    def needs_loss_net(self) -> bool:
        return self.method in ("sim_viable", "rel_viable")

    @property
    def task_loss(self) -> str:
        return "mse" if self.task_kind == "sine" else "cross_entropy"

    @property
    def metric(self) -> str:
        return "mse" if self.task_kind == "sine" else "accuracy"

    def prediction_model(self) -> PredictionModel:
        return PredictionModel(
            x_dim=self.x_dim,
            y_dim=self.y_dim,
            context_dim=self.context_dim,
            hidden=self.hidden,
            activation=self.activation,
        )

    def loss_net(self):
        if self.method == "sim_viable":
            return SimpleLossNet(
                y_dim=self.y_dim, hidden=self.loss_net_hidden,
                activation=self.loss_net_activation,
            )
        if self.method == "rel_viable":
            return RelationLossNet(
                x_dim=self.x_dim, y_dim=self.y_dim, hidden=self.loss_net_hidden,
                activation=self.loss_net_activation,
            )
        return None


@dataclass(frozen=True)
class TrainConfig:
    """Run-level knobs: iteration counts, sampling policy, validation."""

    iters: int
    seed: int = 0
    val_every: int = 500
    meta_batch: int = 25
    k_train: int | tuple = 10  # fixed count, or (lo, hi) drawn uniformly
    k_test: int = 10           # per-episode meta-update rows
    val_tasks: int = 100
    val_adapt_points: int = 10
    grid_points: int = 100
    amplitude_range: tuple = AMPLITUDE_RANGE
    schedule: LrSchedule = field(default_factory=LrSchedule)
    # classification-task sampling
    n_way: int = 5
    k_shot: int = 5
    k_query: int = 15
    class_dim: int = 16
    class_noise: float = 0.1

    def __post_init__(self):
        if self.iters < 0:
            raise ValueError("iters must be non-negative")
        if self.val_every < 1:
            raise ValueError("val_every must be at least 1")
        if self.meta_batch < 1:
            raise ValueError("meta_batch must be at least 1")

    def draw_k_train(self, rng: np.random.Generator) -> int:
        if isinstance(self.k_train, tuple):
            lo, hi = self.k_train
            return int(rng.integers(lo, hi + 1))
        return int(self.k_train)


@dataclass
class TrainState:
    """Mutable training-run state; owned by a single driver."""

    theta: ParamSet
    psi: ParamSet | None
    adam_theta: AdamState
    adam_psi: AdamState | None
    iteration: int
    task_rng: np.random.Generator
    best_score: float
    best_theta: ParamSet
    best_psi: ParamSet | None
    history: list  # (iteration, validation score) pairs


@dataclass(frozen=True)
class Adapted:
    """Outcome of test-time adaptation: a context row for context methods,
    a full parameter set for full-parameter adaptation."""

    context: np.ndarray | None = None
    params: ParamSet | None = None


def init_params(spec: MethodSpec, rng: np.random.Generator):
    """Fresh parameter sets. Full-parameter adaptation meta-learns the
    starting context too, so it gets a context entry inside theta."""
    model = spec.prediction_model()
    theta = model.init_params(rng)
    if spec.method == "maml" and spec.context_dim > 0:
        theta.set(CONTEXT_NAME, np.zeros((1, spec.context_dim)))
    net = spec.loss_net()
    psi = net.init_params(rng) if net is not None else None
    return theta, psi


def init_train_state(spec: MethodSpec, cfg: TrainConfig) -> TrainState:
    theta, psi = init_params(spec, rng_stream(cfg.seed, "init"))
    return TrainState(
        theta=theta,
        psi=psi,
        adam_theta=AdamState(theta),
        adam_psi=AdamState(psi) if psi is not None else None,
        iteration=0,
        task_rng=rng_stream(cfg.seed, "tasks"),
        best_score=np.inf,
        best_theta=theta.copy(),
        best_psi=psi.copy() if psi is not None else None,
        history=[],
    )


# ---------------------------------------------------------------------- #
# batched graph construction
# ---------------------------------------------------------------------- #


class _Layout:
    """Stacked episode rows plus the constant index/weight arrays that keep
    per-task structure inside one batched graph."""

    def __init__(self, episodes: Sequence[Episode], with_pairs: bool):
        self.n_tasks = len(episodes)
        tr_rows, te_rows = [], []
        tr_task, te_task = [], []
        tr_w, te_w = [], []
        pair_first, pair_second, pair_w = [], [], []
        offset = 0
        for t, ep in enumerate(episodes):
            k = ep.k_train
            if k > 0:
                tr_rows.append(t)
                tr_task.append(np.full(k, t))
                tr_w.append(np.full(k, 1.0 / k))
                if with_pairs:
                    first, second = pair_indices(k)
                    pair_first.append(offset + first)
                    pair_second.append(offset + second)
                    pair_w.append(np.full(k * k, 1.0 / (k * k)))
                offset += k
            te_task.append(np.full(ep.k_test, t))
            te_w.append(np.full(ep.k_test, 1.0 / (self.n_tasks * ep.k_test)))

        def cat(parts, width):
            if parts:
                return np.concatenate(parts)
            return np.zeros(0) if width is None else np.zeros((0, width))

        self.x_train = cat([episodes[t].x_train for t in tr_rows],
                           episodes[0].x_train.shape[1])
        self.y_train = cat([episodes[t].y_train for t in tr_rows],
                           episodes[0].y_train.shape[1])
        self.train_task = cat(tr_task, None).astype(np.intp)
        self.inner_w = cat(tr_w, None).reshape(1, -1)
        self.x_test = np.concatenate([ep.x_test for ep in episodes])
        self.y_test = np.concatenate([ep.y_test for ep in episodes])
        self.test_task = cat(te_task, None).astype(np.intp)
        self.outer_w = cat(te_w, None).reshape(1, -1)
        if with_pairs:
            self.pair_first = cat(pair_first, None).astype(np.intp)
            self.pair_second = cat(pair_second, None).astype(np.intp)
            self.pair_w = cat(pair_w, None).reshape(1, -1)

    @property
    def n_train_rows(self) -> int:
        return self.x_train.shape[0]


def _per_sample_task_loss(graph, spec, predicted, target):
    """One loss value per row: squared error or softmax cross entropy."""
    if spec.task_loss == "mse":
        per = graph.square(graph.sub(predicted, target))
        if predicted.shape[1] > 1:
            per = graph.matmul(
                per, graph.constant(np.ones((predicted.shape[1], 1)))
            )
        return per
    return graph.softmax_cross_entropy(predicted, target)


def _inner_objective(graph, spec, model, net, theta_refs, psi_refs,
                     context, layout, x_tr, y_tr):
    """The scalar descended by the inner step, summed over tasks. Each
    task's term touches only its own context row, so one gradient call
    yields every per-task update direction at once."""
    ctx_rows = None
    if spec.context_dim > 0:
        ctx_rows = graph.gather_rows(context, layout.train_task)
    predicted = predict_rows(graph, model, theta_refs, ctx_rows, x_tr)
    per = _per_sample_task_loss(graph, spec, predicted, y_tr)
    if spec.method in ("cavia", "maml"):
        return graph.matmul(graph.constant(layout.inner_w), per)
    if spec.method == "sim_viable":
        rows = concat_cols(graph, [per, predicted, y_tr])
        learned = _net_forward(graph, net, psi_refs, rows)
        return graph.matmul(graph.constant(layout.inner_w), learned)
    member = concat_cols(graph, [per, x_tr, predicted, y_tr])
    pairs = concat_cols(graph, [
        graph.gather_rows(member, layout.pair_first),
        graph.gather_rows(member, layout.pair_second),
    ])
    learned = _net_forward(graph, net, psi_refs, pairs)
    return graph.matmul(graph.constant(layout.pair_w), learned)


def _net_forward(graph, net, psi_refs, rows):
    from .nn import mlp_forward

    return mlp_forward(graph, psi_refs, net.spec, rows)


def adapt_context_batch(graph, spec, theta_refs, psi_refs, episodes,
                        create_graph=True) -> NodeRef:
    """Run the inner loop for a batch of episodes inside one graph.

    Returns the adapted context matrix (one row per task), starting from
    zero. Tasks with an empty adaptation split keep a zero row. Loss-net
    values are read from psi_refs but never updated here."""
    layout = _Layout(episodes, with_pairs=spec.method == "rel_viable")
    context = graph.variable(np.zeros((layout.n_tasks, spec.context_dim)))
    if layout.n_train_rows == 0 or spec.context_dim == 0:
        return context
    model = spec.prediction_model()
    net = spec.loss_net()
    x_tr = graph.constant(layout.x_train)
    y_tr = graph.constant(layout.y_train)
    for _ in range(spec.inner_steps):
        objective = _inner_objective(
            graph, spec, model, net, theta_refs, psi_refs,
            context, layout, x_tr, y_tr,
        )
        step = graph.grad(objective, [context], create_graph=create_graph)[context]
        context = graph.sub(context, graph.scalar_mul(step, spec.inner_lr))
    return context


def _outer_loss_batch(graph, spec, theta_refs, context, episodes) -> NodeRef:
    """Post-update test loss, averaged per task and then over tasks; this
    is always the true task loss, never the learned one."""
    layout = _Layout(episodes, with_pairs=False)
    model = spec.prediction_model()
    ctx_rows = None
    if spec.context_dim > 0:
        ctx_rows = graph.gather_rows(context, layout.test_task)
    predicted = predict_rows(
        graph, model, theta_refs, ctx_rows, graph.constant(layout.x_test)
    )
    per = _per_sample_task_loss(
        graph, spec, predicted, graph.constant(layout.y_test)
    )
    return graph.matmul(graph.constant(layout.outer_w), per)


# ---------------------------------------------------------------------- #
# full-parameter adaptation
# ---------------------------------------------------------------------- #


def _forward_full(graph, spec, refs, x):
    model = spec.prediction_model()
    if spec.context_dim == 0:
        return predict_rows(graph, model, refs, None, x)
    tiled = graph.gather_rows(refs[CONTEXT_NAME], np.zeros(x.shape[0], dtype=np.intp))
    return predict_rows(graph, model, refs, tiled, x)


def _adapt_all_params(graph, spec, refs, episode, create_graph=True):
    """Gradient steps on every parameter (the context entry included)."""
    if episode.k_train == 0:
        return dict(refs)
    x_tr = graph.constant(episode.x_train)
    y_tr = graph.constant(episode.y_train)
    adapted = dict(refs)
    names = list(adapted)
    for _ in range(spec.inner_steps):
        predicted = _forward_full(graph, spec, adapted, x_tr)
        loss = graph.mean(_per_sample_task_loss(graph, spec, predicted, y_tr))
        grads = graph.grad(loss, [adapted[n] for n in names], create_graph=create_graph)
        adapted = {
            n: graph.sub(adapted[n], graph.scalar_mul(grads[adapted[n]], spec.inner_lr))
            for n in names
        }
    return adapted


def _maml_outer(graph, spec, theta_refs, episodes, create_graph=True) -> NodeRef:
    total = None
    for ep in episodes:
        adapted = _adapt_all_params(graph, spec, theta_refs, ep, create_graph)
        predicted = _forward_full(graph, spec, adapted, graph.constant(ep.x_test))
        per = _per_sample_task_loss(graph, spec, predicted, graph.constant(ep.y_test))
        term = graph.mean(per)
        total = term if total is None else graph.add(total, term)
    return graph.scalar_mul(total, 1.0 / len(episodes))


# ---------------------------------------------------------------------- #
# single-episode inner updates (the per-task building blocks)
# ---------------------------------------------------------------------- #


def inner_update_cavia(graph, spec, theta_refs, episode, create_graph=True) -> NodeRef:
    """Adapted context for one episode, descending the task loss."""
    return adapt_context_batch(graph, spec, theta_refs, None, [episode], create_graph)


def inner_update_simviable(graph, spec, theta_refs, psi_refs, episode,
                           create_graph=True) -> NodeRef:
    """Adapted context, descending the per-sample learned loss. The loss
    net stays a graph leaf, so gradients with respect to it exist."""
    return adapt_context_batch(
        graph, spec, theta_refs, psi_refs, [episode], create_graph
    )


def inner_update_relviable(graph, spec, theta_refs, psi_refs, episode,
                           create_graph=True) -> NodeRef:
    """Adapted context, descending the pairwise learned loss."""
    return adapt_context_batch(
        graph, spec, theta_refs, psi_refs, [episode], create_graph
    )


def inner_update_maml(graph, spec, theta_refs, episode, create_graph=True):
    """One episode of full-parameter adaptation; returns adapted refs."""
    return _adapt_all_params(graph, spec, theta_refs, episode, create_graph)


# ---------------------------------------------------------------------- #
# meta step and training loop
# ---------------------------------------------------------------------- #


def meta_batch_objective(graph, spec, theta_refs, psi_refs, episodes,
                         create_graph=True) -> NodeRef:
    """The outer objective over one task batch, differentiable through
    every inner update."""
    if spec.method == "maml":
        return _maml_outer(graph, spec, theta_refs, episodes, create_graph)
    context = adapt_context_batch(
        graph, spec, theta_refs, psi_refs, episodes, create_graph
    )
    return _outer_loss_batch(graph, spec, theta_refs, context, episodes)


def batch_objective_value(spec, theta, psi, episodes) -> float:
    """The outer objective's value at the given parameters."""
    graph = Graph()
    theta_refs = mount_params(graph, theta)
    psi_refs = mount_params(graph, psi) if psi is not None else None
    out = meta_batch_objective(
        graph, spec, theta_refs, psi_refs, episodes, create_graph=False
    )
    return graph.scalar(out)


def meta_train_step(state: TrainState, spec: MethodSpec, episodes,
                    schedule: LrSchedule) -> float:
    """One outer update: differentiate the post-update test loss through
    the inner loop and apply Adam to theta (and the loss net) at the
    current scheduled rate. Both gradients are taken at the pre-step
    values and applied together."""
    graph = Graph()
    theta_refs = mount_params(graph, state.theta)
    psi_refs = mount_params(graph, state.psi) if state.psi is not None else None
    outer = meta_batch_objective(graph, spec, theta_refs, psi_refs, episodes)
    wrt = list(theta_refs.values())
    if psi_refs:
        wrt += list(psi_refs.values())
    grads = graph.grad(outer, wrt, create_graph=False)
    lr = lr_at(schedule, state.iteration)
    theta_grads = {n: np.asarray(graph.value(grads[r])) for n, r in theta_refs.items()}
    state.adam_theta.step(state.theta, theta_grads, lr)
    if psi_refs:
        psi_grads = {n: np.asarray(graph.value(grads[r])) for n, r in psi_refs.items()}
        state.adam_psi.step(state.psi, psi_grads, lr)
    state.iteration += 1
    return graph.scalar(outer)


def sample_train_episode(spec: MethodSpec, cfg: TrainConfig,
                         rng: np.random.Generator) -> Episode:
    if spec.task_kind == "sine":
        task = sample_sine_task(rng, cfg.amplitude_range)
        return sample_episode(task, cfg.draw_k_train(rng), cfg.k_test, rng)
    _, episode = sample_class_task(
        rng, cfg.n_way, cfg.k_shot, cfg.k_query, cfg.class_dim, cfg.class_noise
    )
    return episode


def build_validation_set(spec: MethodSpec, cfg: TrainConfig,
                         rng: np.random.Generator) -> list:
    """A fixed set of held-out episodes; scoring against the same episodes
    every time makes early stopping well defined."""
    episodes = []
    if spec.task_kind == "sine":
        grid = linspace_eval_grid(cfg.grid_points)
        for _ in range(cfg.val_tasks):
            task = sample_sine_task(rng, cfg.amplitude_range)
            adapt = sample_episode(task, cfg.val_adapt_points, 1, rng)
            episodes.append(
                Episode(adapt.x_train, adapt.y_train, grid, task.targets(grid))
            )
    else:
        for _ in range(cfg.val_tasks):
            _, ep = sample_class_task(
                rng, cfg.n_way, cfg.k_shot, cfg.k_query,
                cfg.class_dim, cfg.class_noise,
            )
            episodes.append(ep)
    return episodes


def adapt_at_test(spec: MethodSpec, theta: ParamSet, psi: ParamSet | None,
                  episode: Episode) -> Adapted:
    """Test-time adaptation. Shared parameters and loss-net parameters are
    read only; no outer gradients are built."""
    graph = Graph()
    theta_refs = mount_params(graph, theta)
    if spec.method == "maml":
        adapted = _adapt_all_params(graph, spec, theta_refs, episode,
                                    create_graph=False)
        values = ParamSet(theta.role)
        for name in theta:
            values.set(name, np.array(graph.value(adapted[name])))
        return Adapted(params=values)
    psi_refs = mount_params(graph, psi) if psi is not None else None
    context = adapt_context_batch(
        graph, spec, theta_refs, psi_refs, [episode], create_graph=False
    )
    return Adapted(context=np.array(graph.value(context)))


def predict_after_adaptation(spec: MethodSpec, theta: ParamSet,
                             adapted: Adapted, x: np.ndarray) -> np.ndarray:
    model = spec.prediction_model()
    graph = Graph()
    if adapted.params is not None:
        refs = mount_params(graph, adapted.params)
        out = _forward_full(graph, spec, refs, graph.constant(x))
    else:
        refs = mount_params(graph, theta)
        out = predict(graph, model, refs, adapted.context, x)
    return np.array(graph.value(out))


def task_metric(spec: MethodSpec, theta: ParamSet, psi: ParamSet | None,
                episode: Episode) -> float:
    """Post-adaptation score on the episode's test split: mean squared
    error for regression, error rate for classification (both: lower is
    better)."""
    adapted = adapt_at_test(spec, theta, psi, episode)
    predicted = predict_after_adaptation(spec, theta, adapted, episode.x_test)
    if spec.task_kind == "sine":
        return float(np.mean((predicted - episode.y_test) ** 2))
    hits = predicted.argmax(axis=1) == episode.y_test.argmax(axis=1)
    return float(1.0 - np.mean(hits))


def validation_score(spec, theta, psi, episodes) -> float:
    return float(np.mean([task_metric(spec, theta, psi, ep) for ep in episodes]))


def train(spec: MethodSpec, cfg: TrainConfig,
          state: TrainState | None = None) -> TrainState:
    """Meta-train with periodic validation and best-snapshot retention.

    The validation set is rebuilt deterministically from the run seed, so
    resuming from a saved state scores against identical episodes."""
    if state is None:
        state = init_train_state(spec, cfg)
    val_set = build_validation_set(spec, cfg, rng_stream(cfg.seed, "validation"))

    def validate():
        score = validation_score(spec, state.theta, state.psi, val_set)
        state.history.append((state.iteration, score))
        if score < state.best_score:
            state.best_score = score
            state.best_theta = state.theta.copy()
            state.best_psi = state.psi.copy() if state.psi is not None else None

    if not state.history:
        validate()
    while state.iteration < cfg.iters:
        episodes = [
            sample_train_episode(spec, cfg, state.task_rng)
            for _ in range(cfg.meta_batch)
        ]
        meta_train_step(state, spec, episodes, cfg.schedule)
        if state.iteration % cfg.val_every == 0:
            validate()
    return state
