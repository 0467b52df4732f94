"""Experiment configuration: a flat key = value text format with optional
organizational [section] headers, a typed schema, profile-driven defaults,
and builders for the runtime objects."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .evaluation import EvalProtocol
from .nn import LrSchedule
from .training import METHODS, MethodSpec, TrainConfig

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "EXPERIMENTS",
    "parse_config",
    "echo_config",
    "method_spec_for",
    "train_config_for",
    "eval_protocol_for",
]

EXPERIMENTS = (
    "sine_single",
    "sine_context_sweep",
    "sine_sample_sweep",
    "class_shot_gen",
    "gradcheck",
)
PROFILES = ("desk", "paper")
PROFILE_ITERS = {"desk": 20_000, "paper": 50_000}

_DEFAULT_METHODS = {
    "sine_single": ("cavia",),
    "sine_context_sweep": ("maml", "cavia", "sim_viable", "rel_viable"),
    "sine_sample_sweep": ("cavia", "sim_viable", "rel_viable"),
    "class_shot_gen": ("cavia", "sim_viable", "rel_viable"),
    "gradcheck": (),
}


class ConfigError(ValueError):
    """A config key is unknown, badly typed, or out of range."""


def _parse_int(key, text):
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {text!r}") from None


def _parse_float(key, text):
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {text!r}") from None


def _parse_int_list(key, text):
    if not text.strip():
        return ()
    return tuple(_parse_int(key, part.strip()) for part in text.split(","))


def _parse_int_or_range(key, text):
    if ".." in text:
        lo, hi = (part.strip() for part in text.split("..", 1))
        return (_parse_int(key, lo), _parse_int(key, hi))
    return _parse_int(key, text)


def _parse_float_range(key, text):
    if ".." not in text:
        raise ConfigError(f"{key}: expected a range like 0.1..5.0, got {text!r}")
    lo, hi = (part.strip() for part in text.split("..", 1))
    return (_parse_float(key, lo), _parse_float(key, hi))


def _parse_str(key, text):
    return text.strip()


def _parse_str_list(key, text):
    return tuple(part.strip() for part in text.split(",") if part.strip())


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    profile: str = "desk"
    methods: tuple = ()          # resolved per experiment if empty
    seeds: tuple = (0,)
    out_dir: str = "out"
    workers: int = 1
    # training
    iters: int = -1              # resolved from profile if negative
    val_every: int = 500
    meta_batch: int = 25
    inner_lr: float = 1.0
    inner_steps: int = -1        # resolved per task kind if negative
    outer_lr: float = 1e-3
    lr_decay: float = 0.9
    lr_decay_every: int = 5000
    val_tasks: int = 100
    # model
    phi_dim: int = 5
    phi_dims: tuple = (1, 2, 3, 4, 5)
    hidden: tuple = (40, 40)
    loss_net_hidden: tuple = (32, 32, 32)
    activation: str = "relu"
    loss_net_activation: str = "tanh"
    # sine task
    k_train: object = 10         # int, or (lo, hi) for a uniform draw
    k_test: int = 10
    amplitude_range: tuple = (0.1, 5.0)
    eval_k: tuple = (0, 1, 2, 3, 4, 20)
    p_eval: int = 10
    eval_tasks: int = 1000
    grid_points: int = 100
    # classification task
    n_way: int = 5
    k_shot: int = 5
    k_query: int = 15
    embed_dim: int = 16
    class_noise: float = 0.1
    eval_shots: tuple = (1, 2, 3, 4, 5, 6, 7, 8, 9)
    class_hidden: tuple = (64,)
    class_loss_net_hidden: tuple = (32, 32)
    class_phi_dim: int = 32


_PARSERS = {
    "experiment": _parse_str,
    "profile": _parse_str,
    "methods": _parse_str_list,
    "seeds": _parse_int_list,
    "out_dir": _parse_str,
    "workers": _parse_int,
    "iters": _parse_int,
    "val_every": _parse_int,
    "meta_batch": _parse_int,
    "inner_lr": _parse_float,
    "inner_steps": _parse_int,
    "outer_lr": _parse_float,
    "lr_decay": _parse_float,
    "lr_decay_every": _parse_int,
    "val_tasks": _parse_int,
    "phi_dim": _parse_int,
    "phi_dims": _parse_int_list,
    "hidden": _parse_int_list,
    "loss_net_hidden": _parse_int_list,
    "activation": _parse_str,
    "loss_net_activation": _parse_str,
    "k_train": _parse_int_or_range,
    "k_test": _parse_int,
    "amplitude_range": _parse_float_range,
    "eval_k": _parse_int_list,
    "p_eval": _parse_int,
    "eval_tasks": _parse_int,
    "grid_points": _parse_int,
    "n_way": _parse_int,
    "k_shot": _parse_int,
    "k_query": _parse_int,
    "embed_dim": _parse_int,
    "class_noise": _parse_float,
    "eval_shots": _parse_int_list,
    "class_hidden": _parse_int_list,
    "class_loss_net_hidden": _parse_int_list,
    "class_phi_dim": _parse_int,
}


def _validate(cfg: ExperimentConfig) -> ExperimentConfig:
    def require(cond, key, message):
        if not cond:
            raise ConfigError(f"{key}: {message}")

    require(cfg.experiment in EXPERIMENTS, "experiment",
            f"must be one of {', '.join(EXPERIMENTS)}; got {cfg.experiment!r}")
    require(cfg.profile in PROFILES, "profile",
            f"must be desk or paper, got {cfg.profile!r}")
    for m in cfg.methods:
        require(m in METHODS, "methods", f"unknown method {m!r}")
    require(len(cfg.seeds) >= 1, "seeds", "need at least one seed")
    require(cfg.workers >= 1, "workers", "must be at least 1")
    require(cfg.iters >= 0, "iters", f"must be non-negative, got {cfg.iters}")
    require(cfg.val_every >= 1, "val_every", "must be at least 1")
    require(cfg.meta_batch >= 1, "meta_batch", "must be at least 1")
    require(cfg.inner_lr > 0, "inner_lr", "must be positive")
    require(cfg.inner_steps >= 1, "inner_steps", "must be at least 1")
    require(cfg.outer_lr > 0, "outer_lr", "must be positive")
    require(0 < cfg.lr_decay <= 1, "lr_decay", "must be in (0, 1]")
    require(cfg.lr_decay_every >= 1, "lr_decay_every", "must be at least 1")
    require(cfg.val_tasks >= 1, "val_tasks", "must be at least 1")
    require(cfg.phi_dim >= 0, "phi_dim", "must be non-negative")
    require(all(d >= 0 for d in cfg.phi_dims), "phi_dims", "must be non-negative")
    require(cfg.activation in ("relu", "tanh"), "activation",
            f"must be relu or tanh, got {cfg.activation!r}")
    require(cfg.loss_net_activation in ("relu", "tanh"), "loss_net_activation",
            f"must be relu or tanh, got {cfg.loss_net_activation!r}")
    if isinstance(cfg.k_train, tuple):
        lo, hi = cfg.k_train
        require(0 <= lo <= hi, "k_train", f"bad range {lo}..{hi}")
    else:
        require(cfg.k_train >= 0, "k_train", "must be non-negative")
    require(cfg.k_test >= 1, "k_test", "must be at least 1")
    lo, hi = cfg.amplitude_range
    require(0 < lo <= hi, "amplitude_range", f"bad range {lo}..{hi}")
    require(all(k >= 0 for k in cfg.eval_k), "eval_k", "must be non-negative")
    require(cfg.p_eval >= 0, "p_eval", "must be non-negative")
    require(cfg.eval_tasks >= 1, "eval_tasks", "must be at least 1")
    require(cfg.grid_points >= 2, "grid_points", "must be at least 2")
    require(cfg.n_way >= 2, "n_way", "must be at least 2")
    require(cfg.k_shot >= 1, "k_shot", "must be at least 1")
    require(cfg.k_query >= 1, "k_query", "must be at least 1")
    require(cfg.embed_dim >= 1, "embed_dim", "must be at least 1")
    require(cfg.class_noise >= 0, "class_noise", "must be non-negative")
    require(len(cfg.eval_shots) >= 1 and all(k >= 1 for k in cfg.eval_shots),
            "eval_shots", "needs positive shot counts")
    require(cfg.class_phi_dim >= 0, "class_phi_dim", "must be non-negative")
    return cfg


def parse_config(text: str, overrides: dict | None = None) -> ExperimentConfig:
    """Parse key = value lines ([section] headers are allowed and ignored);
    every key must be in the schema. ``overrides`` (already-typed values,
    e.g. from command-line flags) are applied before defaults resolve."""
    raw: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.split("#", 1)[0].strip()
        if key not in _PARSERS:
            raise ConfigError(f"unknown key {key!r} (line {lineno})")
        if key in raw:
            raise ConfigError(f"duplicate key {key!r} (line {lineno})")
        raw[key] = _PARSERS[key](key, value)
    if "experiment" not in raw:
        raise ConfigError("experiment: required key is missing")
    if overrides:
        raw.update(overrides)
    cfg = ExperimentConfig(**raw)
    # profile- and experiment-dependent defaults, applied only for keys the
    # config did not set itself
    if "iters" not in raw:
        cfg = replace(cfg, iters=PROFILE_ITERS.get(cfg.profile, -1))
    if "inner_steps" not in raw:
        steps = 2 if cfg.experiment == "class_shot_gen" else 1
        cfg = replace(cfg, inner_steps=steps)
    if not cfg.methods:
        cfg = replace(cfg, methods=_DEFAULT_METHODS.get(cfg.experiment, ()))
    if cfg.experiment == "sine_sample_sweep" and "k_train" not in raw:
        cfg = replace(cfg, k_train=(0, 20))
    return _validate(cfg)


def echo_config(cfg: ExperimentConfig) -> str:
    """Render the resolved config as reparseable key = value text."""
    ranges = ("amplitude_range",)
    lines = []
    for f in fields(ExperimentConfig):
        value = getattr(cfg, f.name)
        if f.name in ranges or (f.name == "k_train" and isinstance(value, tuple)):
            lines.append(f"{f.name} = {value[0]}..{value[1]}")
        elif isinstance(value, tuple):
            lines.append(f"{f.name} = {','.join(str(v) for v in value)}")
        else:
            lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def _schedule(cfg: ExperimentConfig) -> LrSchedule:
    return LrSchedule(base=cfg.outer_lr, decay=cfg.lr_decay,
                      period=cfg.lr_decay_every)


def method_spec_for(cfg: ExperimentConfig, method: str,
                    phi_dim: int | None = None) -> MethodSpec:
    classification = cfg.experiment == "class_shot_gen"
    needs_net = method in ("sim_viable", "rel_viable")
    if classification:
        return MethodSpec(
            method=method,
            task_kind="classification",
            x_dim=cfg.embed_dim,
            y_dim=cfg.n_way,
            context_dim=phi_dim if phi_dim is not None else cfg.class_phi_dim,
            hidden=cfg.class_hidden,
            loss_net_hidden=cfg.class_loss_net_hidden if needs_net else None,
            inner_lr=cfg.inner_lr,
            inner_steps=cfg.inner_steps,
            activation=cfg.activation,
            loss_net_activation=cfg.loss_net_activation,
        )
    return MethodSpec(
        method=method,
        task_kind="sine",
        x_dim=1,
        y_dim=1,
        context_dim=phi_dim if phi_dim is not None else cfg.phi_dim,
        hidden=cfg.hidden,
        loss_net_hidden=cfg.loss_net_hidden if needs_net else None,
        inner_lr=cfg.inner_lr,
        inner_steps=cfg.inner_steps,
        activation=cfg.activation,
        loss_net_activation=cfg.loss_net_activation,
    )


def train_config_for(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    return TrainConfig(
        iters=cfg.iters,
        seed=seed,
        val_every=cfg.val_every,
        meta_batch=cfg.meta_batch,
        k_train=cfg.k_train,
        k_test=cfg.k_test,
        val_tasks=cfg.val_tasks,
        val_adapt_points=cfg.p_eval,
        grid_points=cfg.grid_points,
        amplitude_range=cfg.amplitude_range,
        schedule=_schedule(cfg),
        n_way=cfg.n_way,
        k_shot=cfg.k_shot,
        k_query=cfg.k_query,
        class_dim=cfg.embed_dim,
        class_noise=cfg.class_noise,
    )


def eval_protocol_for(cfg: ExperimentConfig) -> EvalProtocol:
    classification = cfg.experiment == "class_shot_gen"
    return EvalProtocol(
        n_tasks=cfg.eval_tasks,
        adapt_points=cfg.p_eval,
        grid_points=cfg.grid_points,
        metric="accuracy" if classification else "mse",
        n_way=cfg.n_way,
        k_query=cfg.k_query,
        class_dim=cfg.embed_dim,
        class_noise=cfg.class_noise,
    )
