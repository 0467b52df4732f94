"""MLPs, initialization, Adam, and the step-decay learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .autodiff import Graph, NodeRef, ShapeError

__all__ = [
    "ROLE_MODEL",
    "ROLE_CONTEXT",
    "ROLE_LOSS_NET",
    "ParamSet",
    "MlpSpec",
    "mlp_init",
    "mount_params",
    "mlp_forward",
    "AdamState",
    "LrSchedule",
    "lr_at",
]

# Role tags: which update rule owns a parameter set. Task-agnostic weights
# move only in the meta-update; context values are reset and adapted per
# task; loss-net weights move only in the meta-update and stay frozen
# inside every inner loop.
ROLE_MODEL = "task_agnostic"
ROLE_CONTEXT = "context"
ROLE_LOSS_NET = "loss_net"

_ROLES = (ROLE_MODEL, ROLE_CONTEXT, ROLE_LOSS_NET)


class ParamSet:
    """Ordered, named float64 blocks with a role tag.

    Blocks are plain 2-D arrays owned by the set; copying a ParamSet gives
    fully independent storage.
    """

    def __init__(self, role: str, blocks: Mapping[str, np.ndarray] | None = None):
        if role not in _ROLES:
            raise ValueError(f"unknown role {role!r}, expected one of {_ROLES}")
        self.role = role
        self._blocks: dict[str, np.ndarray] = {}
        if blocks:
            for name, block in blocks.items():
                self.set(name, block)

    def set(self, name: str, block) -> None:
        if name in self._blocks:
            raise ValueError(f"duplicate parameter name {name!r}")
        arr = np.array(block, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"parameter {name!r} must be 2-D, got {arr.ndim}-D")
        self._blocks[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._blocks[name]

    def __contains__(self, name: str) -> bool:
        return name in self._blocks

    def __iter__(self):
        return iter(self._blocks)

    def __len__(self) -> int:
        return len(self._blocks)

    def items(self):
        return self._blocks.items()

    def names(self):
        return list(self._blocks)

    @property
    def n_params(self) -> int:
        return sum(b.size for b in self._blocks.values())

    def copy(self) -> "ParamSet":
        return ParamSet(self.role, {k: v.copy() for k, v in self.items()})

    def bytes_equal(self, other: "ParamSet") -> bool:
        return self.names() == other.names() and all(
            self[k].tobytes() == other[k].tobytes() for k in self
        )

    def __repr__(self) -> str:
        return f"ParamSet({self.role!r}, {self.n_params} values)"


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths plus the hidden activation; output stays linear."""

    layer_sizes: tuple
    hidden_activation: str = "relu"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError(f"need at least input and output sizes, got {sizes}")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if self.hidden_activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.hidden_activation!r}")

    @property
    def in_width(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_width(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1


def mlp_init(spec: MlpSpec, rng: np.random.Generator, role: str = ROLE_MODEL) -> ParamSet:
    """Weights uniform in +-1/sqrt(fan_in), biases zero; names w1/b1, w2/b2, ..."""
    params = ParamSet(role)
    for i in range(spec.n_layers):
        fan_in = spec.layer_sizes[i]
        fan_out = spec.layer_sizes[i + 1]
        bound = 1.0 / np.sqrt(fan_in)
        params.set(f"w{i + 1}", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        params.set(f"b{i + 1}", np.zeros((1, fan_out)))
    return params


def mount_params(graph: Graph, params: ParamSet) -> dict[str, NodeRef]:
    """Enter every block as a differentiable leaf; values are snapshots."""
    return {name: graph.variable(block) for name, block in params.items()}


def mlp_forward(
    graph: Graph,
    refs: Mapping[str, NodeRef],
    spec: MlpSpec,
    x: NodeRef,
) -> NodeRef:
    """Batched forward pass; row i of the output depends on row i of x only."""
    if x.shape[1] != spec.in_width:
        raise ShapeError(
            f"input has {x.shape[1]} columns, network expects {spec.in_width}"
        )
    act = graph.relu if spec.hidden_activation == "relu" else graph.tanh
    tile = np.zeros(x.shape[0], dtype=np.intp)
    h = x
    for i in range(1, spec.n_layers + 1):
        bias = graph.gather_rows(refs[f"b{i}"], tile)
        h = graph.add(graph.matmul(h, refs[f"w{i}"]), bias)
        if i < spec.n_layers:
            h = act(h)
    return h


class AdamState:
    """Per-parameter Adam moments plus the shared step counter."""

    def __init__(self, params: ParamSet, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: ParamSet, grads: Mapping[str, np.ndarray], lr: float) -> None:
        """One standard bias-corrected Adam update, applied in place."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name in params:
            grad = grads[name]
            if grad.shape != params[name].shape:
                raise ShapeError(
                    f"gradient for {name!r} has shape {grad.shape}, "
                    f"parameter is {params[name].shape}"
                )
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * grad
            v *= b2
            v += (1.0 - b2) * grad * grad
            block = params[name]
            block -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def copy(self) -> "AdamState":
        dup = AdamState.__new__(AdamState)
        dup.beta1, dup.beta2, dup.eps, dup.t = self.beta1, self.beta2, self.eps, self.t
        dup.m = {k: v.copy() for k, v in self.m.items()}
        dup.v = {k: v.copy() for k, v in self.v.items()}
        return dup


@dataclass(frozen=True)
class LrSchedule:
    """Staircase decay: rate drops by ``decay`` once per ``period`` steps."""

    base: float = 1e-3
    decay: float = 0.9
    period: int = 5000

    def __post_init__(self):
        if self.base <= 0:
            raise ValueError("base learning rate must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay factor must be in (0, 1]")
        if self.period < 1:
            raise ValueError("decay period must be at least 1")


def lr_at(schedule: LrSchedule, step: int) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    return schedule.base * schedule.decay ** (step // schedule.period)
