"""The three parameterized functions: a prediction network that reads a
per-task context vector alongside its input, and the two learned loss
networks (per-sample and pairwise) that can replace the task loss inside
the adaptation step."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .autodiff import Graph, NodeRef, ShapeError, concat_cols
from .nn import MlpSpec, ParamSet, ROLE_LOSS_NET, ROLE_MODEL, mlp_forward, mlp_init

__all__ = [
    "PredictionModel",
    "SimpleLossNet",
    "RelationLossNet",
    "EmptyBatchError",
    "predict",
    "predict_rows",
    "simple_loss",
    "relation_loss",
    "pair_indices",
]


class EmptyBatchError(ValueError):
    """Raised when a loss is requested over zero samples."""


@dataclass(frozen=True)
class PredictionModel:
    """Architecture of the prediction network. Context values enter by
    concatenation to every input row, so the first layer consumes
    x_dim + context_dim columns. Context starts at zero for every task."""

    x_dim: int
    y_dim: int
    context_dim: int
    hidden: tuple
    activation: str = "relu"

    @property
    def spec(self) -> MlpSpec:
        return MlpSpec(
            (self.x_dim + self.context_dim, *self.hidden, self.y_dim),
            hidden_activation=self.activation,
        )

    def init_params(self, rng: np.random.Generator) -> ParamSet:
        return mlp_init(self.spec, rng, role=ROLE_MODEL)

    def zero_context(self) -> np.ndarray:
        return np.zeros((1, self.context_dim))


def predict_rows(
    graph: Graph,
    model: PredictionModel,
    refs: Mapping[str, NodeRef],
    context_rows: NodeRef | None,
    x: NodeRef,
) -> NodeRef:
    """Forward pass where every sample row carries its own context row
    (rows from different tasks can share one batch)."""
    if x.shape[1] != model.x_dim:
        raise ShapeError(f"x has {x.shape[1]} columns, model expects {model.x_dim}")
    if model.context_dim == 0:
        return mlp_forward(graph, refs, model.spec, x)
    if context_rows is None or context_rows.shape != (x.shape[0], model.context_dim):
        raise ShapeError(
            f"context rows must be ({x.shape[0]}, {model.context_dim})"
        )
    joint = concat_cols(graph, [x, context_rows])
    return mlp_forward(graph, refs, model.spec, joint)


def predict(
    graph: Graph,
    model: PredictionModel,
    refs: Mapping[str, NodeRef],
    context: NodeRef | np.ndarray,
    x: NodeRef | np.ndarray,
) -> NodeRef:
    """Forward pass on a batch: each row is [x_row, context] through the MLP.

    ``context`` is one row applied to every sample. Raw arrays are entered
    as leaves (context as a variable, x as a constant)."""
    if not isinstance(x, NodeRef):
        x = graph.constant(np.asarray(x, dtype=np.float64).reshape(-1, model.x_dim))
    if model.context_dim == 0:
        return predict_rows(graph, model, refs, None, x)
    if not isinstance(context, NodeRef):
        context = graph.variable(context, (1, model.context_dim))
    if context.shape != (1, model.context_dim):
        raise ShapeError(
            f"context has shape {context.shape}, expected (1, {model.context_dim})"
        )
    tiled = graph.gather_rows(context, np.zeros(x.shape[0], dtype=np.intp))
    return predict_rows(graph, model, refs, tiled, x)


@dataclass(frozen=True)
class SimpleLossNet:
    """Learned per-sample loss over (task loss value, prediction, target);
    scalar output, unconstrained sign."""

    y_dim: int
    hidden: tuple
    activation: str = "relu"

    @property
    def spec(self) -> MlpSpec:
        return MlpSpec(
            (1 + 2 * self.y_dim, *self.hidden, 1), hidden_activation=self.activation
        )

    def init_params(self, rng: np.random.Generator) -> ParamSet:
        return mlp_init(self.spec, rng, role=ROLE_LOSS_NET)


def simple_loss(
    graph: Graph,
    net: SimpleLossNet,
    refs: Mapping[str, NodeRef],
    task_loss_per_sample: NodeRef,
    predicted: NodeRef,
    target: NodeRef,
) -> NodeRef:
    """Mean of the loss network over all samples (weight 1/M)."""
    m = task_loss_per_sample.shape[0]
    if m == 0:
        raise EmptyBatchError("simple_loss needs at least one sample")
    if predicted.shape[0] != m or target.shape[0] != m:
        raise ShapeError("simple_loss inputs must be row-aligned")
    if task_loss_per_sample.shape[1] != 1:
        raise ShapeError("per-sample task losses must be a single column")
    rows = concat_cols(graph, [task_loss_per_sample, predicted, target])
    per_sample = mlp_forward(graph, refs, net.spec, rows)
    return graph.mean(per_sample)


@dataclass(frozen=True)
class RelationLossNet:
    """Learned loss over ordered sample pairs, self-pairs included. Each
    pair row is (loss, x, prediction, target) for both members."""

    x_dim: int
    y_dim: int
    hidden: tuple
    activation: str = "relu"

    @property
    def member_width(self) -> int:
        return 1 + self.x_dim + 2 * self.y_dim

    @property
    def spec(self) -> MlpSpec:
        return MlpSpec(
            (2 * self.member_width, *self.hidden, 1),
            hidden_activation=self.activation,
        )

    def init_params(self, rng: np.random.Generator) -> ParamSet:
        return mlp_init(self.spec, rng, role=ROLE_LOSS_NET)


def pair_indices(m: int):
    """Row indices (first, second) enumerating all m^2 ordered pairs."""
    return np.repeat(np.arange(m), m), np.tile(np.arange(m), m)


def relation_loss(
    graph: Graph,
    net: RelationLossNet,
    refs: Mapping[str, NodeRef],
    task_loss_per_sample: NodeRef,
    x: NodeRef,
    predicted: NodeRef,
    target: NodeRef,
) -> NodeRef:
    """Mean of the loss network over all M^2 ordered pairs (weight 1/M^2)."""
    m = task_loss_per_sample.shape[0]
    if m == 0:
        raise EmptyBatchError("relation_loss needs at least one sample")
    for ref, name in ((x, "x"), (predicted, "predicted"), (target, "target")):
        if ref.shape[0] != m:
            raise ShapeError(f"relation_loss: {name} is not row-aligned")
    member = concat_cols(graph, [task_loss_per_sample, x, predicted, target])
    first, second = pair_indices(m)
    pairs = concat_cols(
        graph, [graph.gather_rows(member, first), graph.gather_rows(member, second)]
    )
    per_pair = mlp_forward(graph, refs, net.spec, pairs)
    return graph.mean(per_pair)
