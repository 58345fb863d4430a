import numpy as np
import pytest

from hybridnet.checkpoint import (
    CheckpointError,
    CorruptCheckpointError,
    checkpoint_load,
    checkpoint_save,
    decode,
    encode,
)
from hybridnet.model import HybridConfig, HybridModel, TrainState, predict, train_step
from hybridnet.tensor import Tensor


def trained_state(seed=0, steps=2):
    state = TrainState(HybridModel(HybridConfig.preset("desk", 3, seed=seed)), 1e-3)
    x = Tensor(np.random.default_rng(seed).normal(size=(4, 3, 32, 32)).astype(np.float32))
    for _ in range(steps):
        train_step(state, x, [0, 1, 2, 0])
    return state, x


class TestEncoding:
    def test_roundtrip(self, rng):
        tensors = {"a": rng.normal(size=(2, 3)).astype(np.float32), "b": np.ones(4, np.float32)}
        text, back = decode(encode("x=1\n", tensors))
        assert text == "x=1\n"
        assert list(back) == ["a", "b"]
        assert all(np.array_equal(back[k], tensors[k]) for k in tensors)

    def test_bad_magic(self):
        with pytest.raises(CorruptCheckpointError):
            decode(b"NOPE" + bytes(8))

    def test_version(self):
        buf = bytearray(encode("", {}))
        buf[4] = 9
        with pytest.raises(CheckpointError, match="version"):
            decode(bytes(buf))

    def test_truncation_names_tensor(self):
        buf = encode("", {"first": np.ones(2, np.float32), "second": np.ones(8, np.float32)})
        with pytest.raises(CorruptCheckpointError, match="second"):
            decode(buf[:-5])

    def test_trailing_bytes(self):
        with pytest.raises(CorruptCheckpointError):
            decode(encode("", {}) + b"\0")


class TestStateRoundTrip:
    def test_logits_bitwise(self, tmp_path):
        state, x = trained_state()
        before = predict(state.model, x)
        checkpoint_save(state, tmp_path / "a.hybk", ["x", "y", "z"])
        loaded, labels = checkpoint_load(tmp_path / "a.hybk")
        assert labels == ["x", "y", "z"]
        assert predict(loaded.model, x).tobytes() == before.tobytes()

    def test_resave_identical(self, tmp_path):
        state, _ = trained_state()
        state.plateau.best = 0.123456789
        checkpoint_save(state, tmp_path / "a.hybk", ["x", "y", "z"])
        loaded, labels = checkpoint_load(tmp_path / "a.hybk")
        checkpoint_save(loaded, tmp_path / "b.hybk", labels)
        assert (tmp_path / "a.hybk").read_bytes() == (tmp_path / "b.hybk").read_bytes()

    def test_training_resumes_identically(self, tmp_path):
        state, x = trained_state()
        checkpoint_save(state, tmp_path / "a.hybk")
        loaded, _ = checkpoint_load(tmp_path / "a.hybk")
        assert loaded.step == state.step and loaded.optimizer.t == state.optimizer.t
        _, l1 = train_step(state, x, [0, 1, 2, 0])
        _, l2 = train_step(loaded, x, [0, 1, 2, 0])
        assert l1 == l2

    def test_shape_mismatch_named(self, tmp_path):
        state, _ = trained_state(steps=0)
        checkpoint_save(state, tmp_path / "a.hybk")
        other = HybridConfig.preset("desk", 5)
        with pytest.raises(CheckpointError, match="classifier_out"):
            checkpoint_load(tmp_path / "a.hybk", expected=other)

    def test_truncated_file(self, tmp_path):
        state, _ = trained_state(steps=0)
        path = tmp_path / "a.hybk"
        checkpoint_save(state, path)
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(CorruptCheckpointError, match="tensor"):
            checkpoint_load(path)
