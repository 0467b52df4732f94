"""Binary checkpoints.

Layout: magic "VIAB", format version as unsigned 32-bit little endian,
entry count as unsigned 64-bit little endian, then per entry: name length
(u64), UTF-8 name bytes, rank (u64), dims (rank x u64), values as IEEE-754
binary64 little endian. Everything a run needs to resume is flattened into
named entries, including random-stream state (bit-cast into value words)
and the best-validation snapshot.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .nn import AdamState, ParamSet, ROLE_LOSS_NET, ROLE_MODEL
from .training import METHODS, MethodSpec, TrainState

__all__ = [
    "CheckpointError",
    "CheckpointMagicError",
    "CheckpointVersionError",
    "CheckpointTruncatedError",
    "Checkpoint",
    "write_entries",
    "read_entries",
    "save_checkpoint",
    "load_checkpoint",
    "restore_train_state",
]

MAGIC = b"VIAB"
VERSION = 1

_TASK_KINDS = ("sine", "classification")
_ACTIVATIONS = ("relu", "tanh")


class CheckpointError(Exception):
    """Base class for checkpoint I/O failures."""


class CheckpointMagicError(CheckpointError):
    """The file does not start with the expected magic bytes."""


class CheckpointVersionError(CheckpointError):
    """The file's format version is not supported."""


class CheckpointTruncatedError(CheckpointError):
    """The file ends before the declared content does."""


@dataclass(frozen=True)
class Checkpoint:
    version: int
    entries: dict  # name -> 2-D float64 array


def write_entries(path, entries) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(entries))]
    for name, array in entries.items():
        arr = np.ascontiguousarray(array, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"entry {name!r} must be 2-D, got {arr.ndim}-D")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<Q", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_entries(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointTruncatedError(
                f"needed {n} bytes at offset {pos}, file has {len(view)}"
            )
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointMagicError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointVersionError(f"format version {version}, expected {VERSION}")
    (count,) = struct.unpack("<Q", take(8))
    entries = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<Q", take(8))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(dims)) if dims else 1
        raw = take(8 * size)
        entries[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
    if pos != len(view):
        raise CheckpointTruncatedError(
            f"{len(view) - pos} trailing bytes after declared content"
        )
    return Checkpoint(version=version, entries=entries)


def _scalar(value) -> np.ndarray:
    return np.array([[float(value)]])


def _rng_words(generator: np.random.Generator) -> np.ndarray:
    state = generator.bit_generator.state
    if state["bit_generator"] != "PCG64":
        raise CheckpointError("only PCG64 streams are supported")
    inner = state["state"]
    mask = (1 << 64) - 1
    words = np.array(
        [
            inner["state"] & mask,
            (inner["state"] >> 64) & mask,
            inner["inc"] & mask,
            (inner["inc"] >> 64) & mask,
            state["has_uint32"],
            state["uinteger"],
        ],
        dtype=np.uint64,
    )
    # Bit-cast into value words; round-trips exactly through the file.
    return words.view(np.float64).reshape(1, 6)


def _rng_restore(words: np.ndarray) -> np.random.Generator:
    raw = np.ascontiguousarray(words, dtype=np.float64).view(np.uint64).ravel()
    generator = np.random.default_rng(0)
    generator.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {
            "state": int(raw[0]) | (int(raw[1]) << 64),
            "inc": int(raw[2]) | (int(raw[3]) << 64),
        },
        "has_uint32": int(raw[4]),
        "uinteger": int(raw[5]),
    }
    return generator


def _sizes_entry(sizes) -> np.ndarray:
    return np.array([list(sizes)], dtype=np.float64).reshape(1, len(sizes))


def _spec_entries(spec: MethodSpec) -> dict:
    entries = {
        "spec/method": _scalar(METHODS.index(spec.method)),
        "spec/task_kind": _scalar(_TASK_KINDS.index(spec.task_kind)),
        "spec/x_dim": _scalar(spec.x_dim),
        "spec/y_dim": _scalar(spec.y_dim),
        "spec/context_dim": _scalar(spec.context_dim),
        "spec/inner_lr": _scalar(spec.inner_lr),
        "spec/inner_steps": _scalar(spec.inner_steps),
        "spec/activation": _scalar(_ACTIVATIONS.index(spec.activation)),
        "spec/loss_net_activation": _scalar(
            _ACTIVATIONS.index(spec.loss_net_activation)
        ),
        "spec/hidden": _sizes_entry(spec.hidden),
    }
    if spec.loss_net_hidden is not None:
        entries["spec/loss_net_hidden"] = _sizes_entry(spec.loss_net_hidden)
    return entries


def spec_from_entries(entries) -> MethodSpec:
    def scalar(name):
        return float(entries[name][0, 0])

    loss_hidden = None
    if "spec/loss_net_hidden" in entries:
        loss_hidden = tuple(int(v) for v in entries["spec/loss_net_hidden"].ravel())
    return MethodSpec(
        method=METHODS[int(scalar("spec/method"))],
        task_kind=_TASK_KINDS[int(scalar("spec/task_kind"))],
        x_dim=int(scalar("spec/x_dim")),
        y_dim=int(scalar("spec/y_dim")),
        context_dim=int(scalar("spec/context_dim")),
        hidden=tuple(int(v) for v in entries["spec/hidden"].ravel()),
        loss_net_hidden=loss_hidden,
        inner_lr=scalar("spec/inner_lr"),
        inner_steps=int(scalar("spec/inner_steps")),
        activation=_ACTIVATIONS[int(scalar("spec/activation"))],
        loss_net_activation=_ACTIVATIONS[int(scalar("spec/loss_net_activation"))],
    )


def _adam_entries(prefix: str, adam: AdamState) -> dict:
    entries = {
        f"{prefix}/meta": np.array([[adam.t, adam.beta1, adam.beta2, adam.eps]])
    }
    for name, block in adam.m.items():
        entries[f"{prefix}/m/{name}"] = block
    for name, block in adam.v.items():
        entries[f"{prefix}/v/{name}"] = block
    return entries


def _adam_restore(prefix: str, entries, params: ParamSet) -> AdamState:
    adam = AdamState(params)
    t, b1, b2, eps = entries[f"{prefix}/meta"].ravel()
    adam.t = int(t)
    adam.beta1, adam.beta2, adam.eps = float(b1), float(b2), float(eps)
    adam.m = {k: entries[f"{prefix}/m/{k}"].copy() for k in params}
    adam.v = {k: entries[f"{prefix}/v/{k}"].copy() for k in params}
    return adam


def _params_entries(prefix: str, params: ParamSet) -> dict:
    return {f"{prefix}/{name}": block for name, block in params.items()}


def _params_restore(prefix: str, entries, names, role) -> ParamSet:
    return ParamSet(role, {n: entries[f"{prefix}/{n}"].copy() for n in names})


def save_checkpoint(path, state: TrainState, spec: MethodSpec, seed: int) -> None:
    """Persist a training run so it can resume exactly where it stopped."""
    entries: dict = {}
    entries.update(_spec_entries(spec))
    entries["run/seed"] = _scalar(seed)
    entries["run/iteration"] = _scalar(state.iteration)
    entries["run/best_score"] = _scalar(
        state.best_score if np.isfinite(state.best_score) else np.inf
    )
    history = np.array(state.history, dtype=np.float64).reshape(-1, 2)
    entries["run/history"] = history
    entries["rng/tasks"] = _rng_words(state.task_rng)
    entries["run/theta_names"] = _scalar(len(state.theta.names()))
    entries.update(_params_entries("param/theta", state.theta))
    entries.update(_params_entries("best/theta", state.best_theta))
    entries.update(_adam_entries("adam/theta", state.adam_theta))
    if state.psi is not None:
        entries.update(_params_entries("param/psi", state.psi))
        entries.update(_params_entries("best/psi", state.best_psi))
        entries.update(_adam_entries("adam/psi", state.adam_psi))
    write_entries(path, entries)


def load_checkpoint(path) -> Checkpoint:
    return read_entries(path)


def restore_train_state(ckpt: Checkpoint, spec: MethodSpec) -> TrainState:
    """Rebuild a TrainState; the provided spec must match the saved one."""
    saved_spec = spec_from_entries(ckpt.entries)
    if saved_spec != spec:
        raise CheckpointError(
            f"checkpoint was trained with {saved_spec}, requested {spec}"
        )
    entries = ckpt.entries
    theta_names = [
        name[len("param/theta/"):]
        for name in entries
        if name.startswith("param/theta/")
    ]
    theta = _params_restore("param/theta", entries, theta_names, ROLE_MODEL)
    best_theta = _params_restore("best/theta", entries, theta_names, ROLE_MODEL)
    psi = best_psi = adam_psi = None
    psi_names = [
        name[len("param/psi/"):]
        for name in entries
        if name.startswith("param/psi/")
    ]
    if psi_names:
        psi = _params_restore("param/psi", entries, psi_names, ROLE_LOSS_NET)
        best_psi = _params_restore("best/psi", entries, psi_names, ROLE_LOSS_NET)
        adam_psi = _adam_restore("adam/psi", entries, psi)
    history = [(int(it), float(score)) for it, score in entries["run/history"]]
    return TrainState(
        theta=theta,
        psi=psi,
        adam_theta=_adam_restore("adam/theta", entries, theta),
        adam_psi=adam_psi,
        iteration=int(entries["run/iteration"][0, 0]),
        task_rng=_rng_restore(entries["rng/tasks"]),
        best_score=float(entries["run/best_score"][0, 0]),
        best_theta=best_theta,
        best_psi=best_psi,
        history=history,
    )


def checkpoint_seed(ckpt: Checkpoint) -> int:
    return int(ckpt.entries["run/seed"][0, 0])
