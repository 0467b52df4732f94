import numpy as np
import pytest

from metaloss.checkpoint import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    MAGIC,
    checkpoint_seed,
    load_checkpoint,
    read_entries,
    restore_train_state,
    save_checkpoint,
    spec_from_entries,
    write_entries,
)
from metaloss.training import (
    MethodSpec,
    TrainConfig,
    init_train_state,
    train,
)


def small_spec(method="sim_viable"):
    kw = dict(method=method, context_dim=2, hidden=(6,), inner_lr=1.0)
    if method in ("sim_viable", "rel_viable"):
        kw["loss_net_hidden"] = (5,)
    return MethodSpec(**kw)


def small_cfg(iters, seed=4):
    return TrainConfig(iters=iters, seed=seed, val_every=5, meta_batch=3,
                       val_tasks=4)


class TestEntriesFormat:
    def test_round_trip_bitwise(self, tmp_path, rng):
        entries = {
            "a/b": rng.normal(size=(3, 4)),
            "scalar": np.array([[7.0]]),
            "empty": np.zeros((0, 2)),
        }
        path = tmp_path / "x.viab"
        write_entries(path, entries)
        first = path.read_bytes()
        loaded = read_entries(path)
        for name, arr in entries.items():
            np.testing.assert_array_equal(loaded.entries[name], arr)
        write_entries(path, loaded.entries)
        assert path.read_bytes() == first

    def test_magic_error(self, tmp_path):
        path = tmp_path / "bad.viab"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CheckpointMagicError):
            read_entries(path)

    def test_version_error(self, tmp_path):
        path = tmp_path / "v9.viab"
        path.write_bytes(MAGIC + (9).to_bytes(4, "little") + (0).to_bytes(8, "little"))
        with pytest.raises(CheckpointVersionError):
            read_entries(path)

    def test_truncation_error(self, tmp_path, rng):
        path = tmp_path / "t.viab"
        write_entries(path, {"w": rng.normal(size=(4, 4))})
        data = path.read_bytes()
        path.write_bytes(data[:-9])
        with pytest.raises(CheckpointTruncatedError):
            read_entries(path)

    def test_trailing_bytes_error(self, tmp_path, rng):
        path = tmp_path / "t2.viab"
        write_entries(path, {"w": rng.normal(size=(2, 2))})
        path.write_bytes(path.read_bytes() + b"junk")
        with pytest.raises(CheckpointTruncatedError):
            read_entries(path)


class TestTrainStateCheckpoints:
    def test_save_load_save_bitwise(self, tmp_path):
        spec = small_spec()
        state = train(spec, small_cfg(6))
        p1 = tmp_path / "a.viab"
        p2 = tmp_path / "b.viab"
        save_checkpoint(p1, state, spec, seed=4)
        loaded = load_checkpoint(p1)
        restored = restore_train_state(loaded, spec)
        save_checkpoint(p2, restored, spec, seed=checkpoint_seed(loaded))
        assert p1.read_bytes() == p2.read_bytes()

    def test_spec_round_trip(self, tmp_path):
        for method in ("cavia", "maml", "sim_viable", "rel_viable"):
            spec = small_spec(method)
            state = init_train_state(spec, small_cfg(0))
            path = tmp_path / f"{method}.viab"
            save_checkpoint(path, state, spec, seed=4)
            assert spec_from_entries(load_checkpoint(path).entries) == spec

    def test_spec_mismatch_rejected(self, tmp_path):
        spec = small_spec("cavia")
        state = init_train_state(spec, small_cfg(0))
        path = tmp_path / "c.viab"
        save_checkpoint(path, state, spec, seed=0)
        other = small_spec("maml")
        with pytest.raises(CheckpointError):
            restore_train_state(load_checkpoint(path), other)

    def test_resume_matches_uninterrupted(self, tmp_path):
        """Stopping, checkpointing, and resuming reproduces the whole run
        bit for bit, validation history included."""
        spec = small_spec("rel_viable")
        full_cfg = small_cfg(20)
        whole = train(spec, full_cfg)

        half = train(spec, small_cfg(10))
        path = tmp_path / "half.viab"
        save_checkpoint(path, half, spec, seed=4)
        resumed = restore_train_state(load_checkpoint(path), spec)
        finished = train(spec, full_cfg, state=resumed)

        assert finished.history == whole.history
        assert finished.theta.bytes_equal(whole.theta)
        assert finished.psi.bytes_equal(whole.psi)
        assert finished.best_theta.bytes_equal(whole.best_theta)
        assert finished.best_score == whole.best_score
        assert finished.adam_theta.t == whole.adam_theta.t

    def test_rng_state_survives(self, tmp_path):
        spec = small_spec("cavia")
        state = train(spec, small_cfg(3))
        expected = state.task_rng.normal(size=8)
        path = tmp_path / "r.viab"
        # recreate the same point in the stream: train again and save
        state2 = train(spec, small_cfg(3))
        save_checkpoint(path, state2, spec, seed=4)
        restored = restore_train_state(load_checkpoint(path), spec)
        np.testing.assert_array_equal(restored.task_rng.normal(size=8), expected)
