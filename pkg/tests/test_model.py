import math

import numpy as np
import pytest

from hybridnet.model import (
    SGD,
    Adam,
    HybridConfig,
    HybridModel,
    NonFiniteLossError,
    PlateauState,
    TrainState,
    forward,
    fuse,
    plateau_step,
    predict,
    train_step,
)
from hybridnet.tensor import Tensor, backward, check_gradients, no_grad


@pytest.fixture(scope="module")
def desk_model():
    return HybridModel(HybridConfig.preset("desk", 3, seed=0))


def images(n, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=(n, 3, 32, 32)).astype(np.float32))


class TestConfig:
    def test_text_roundtrip(self):
        cfg = HybridConfig.preset("tiny", 22, seed=5)
        assert HybridConfig.from_text(cfg.to_text()) == cfg

    def test_unknown_preset(self):
        with pytest.raises(ValueError):
            HybridConfig.preset("base", 2)

    def test_validate(self):
        with pytest.raises(ValueError):
            HybridConfig.preset("desk", 1).validate()


class TestFuse:
    def test_shape_and_order(self, rng):
        a = Tensor(rng.normal(size=(3, 256)))
        b = Tensor(rng.normal(size=(3, 256)))
        out = fuse(a, b)
        assert out.shape == (3, 512)
        assert np.array_equal(out.data[:, :256], a.data)

    def test_gradient_splits(self, rng):
        a = Tensor(rng.uniform(-1, 1, size=(2, 4)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, size=(2, 3)), requires_grad=True)
        r = rng.uniform(-1, 1, size=(2, 7))
        backward((fuse(a, b) * Tensor(r)).sum())
        assert np.array_equal(a.grad, r[:, :4])
        assert np.array_equal(b.grad, r[:, 4:])
        assert check_gradients(lambda: (fuse(a, b) * fuse(a, b)).sum(), [a, b]) < 1e-3

    def test_batch_mismatch(self):
        with pytest.raises(ValueError):
            fuse(Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 4))))


class TestClassify:
    @pytest.mark.parametrize("classes", [22, 11])
    def test_width(self, classes):
        model = HybridModel(HybridConfig.preset("desk", classes)).eval()
        fused = Tensor(np.random.default_rng(0).normal(size=(4, 512)).astype(np.float32))
        with no_grad():
            assert model.classify(fused).shape == (4, classes)

    def test_infer_deterministic(self, desk_model):
        desk_model.eval()
        fused = Tensor(np.random.default_rng(1).normal(size=(4, 512)).astype(np.float32))
        with no_grad():
            a = desk_model.classify(fused).data
            b = desk_model.classify(fused).data
        assert np.array_equal(a, b)


class TestForward:
    def test_shape_finite(self, desk_model):
        with no_grad():
            logits = forward(desk_model, images(2), "infer")
        assert logits.shape == (2, 3)
        assert np.all(np.isfinite(logits.data))

    def test_train_mode_runs(self, desk_model):
        with no_grad():
            assert forward(desk_model, images(2), "train").shape == (2, 3)

    def test_bad_mode(self, desk_model):
        with pytest.raises(ValueError):
            forward(desk_model, images(1), "eval")

    def test_batch_permutation(self, desk_model):
        x = images(4, seed=3)
        perm = np.array([2, 0, 3, 1])
        a = predict(desk_model, x)
        b = predict(desk_model, Tensor(x.data[perm]))
        assert np.allclose(a[perm], b, atol=1e-5)

    def test_zeroed_transformer_head_cuts_branch(self):
        model = HybridModel(HybridConfig.preset("desk", 2, seed=1))
        model.classifier_out.weight.data[:] = np.random.default_rng(0).normal(
            size=model.classifier_out.weight.shape)
        model.transformer_head.dense.weight.data[:] = 0
        model.transformer_head.dense.bias.data[:] = 0
        x = images(2, seed=4)
        base = predict(model, x)
        rng = np.random.default_rng(9)
        model.transformer.forward = lambda image: Tensor(
            rng.normal(size=(image.shape[0], 48)).astype(np.float32))
        assert np.array_equal(predict(model, x), base)

    def test_initial_prediction_uniform(self, desk_model):
        logits = predict(desk_model, images(3))
        assert np.array_equal(logits, np.zeros_like(logits))


class TestTrainStep:
    def test_zero_lr_keeps_params(self):
        state = TrainState(HybridModel(HybridConfig.preset("desk", 2)), 0.0)
        before = {k: p.data.copy() for k, p in state.model.named_parameters()}
        train_step(state, images(4), [0, 1, 0, 1])
        for k, p in state.model.named_parameters():
            assert np.array_equal(p.data, before[k]), k

    def test_determinism(self):
        def run():
            state = TrainState(HybridModel(HybridConfig.preset("desk", 2, seed=3)), 1e-3)
            return [train_step(state, images(4), [0, 1, 1, 0])[1] for _ in range(3)]

        assert run() == run()

    def test_initial_loss(self):
        state = TrainState(HybridModel(HybridConfig.preset("desk", 4)), 1e-3)
        _, loss = train_step(state, images(4), [0, 1, 2, 3])
        assert loss == pytest.approx(math.log(4), rel=1e-6)

    def test_overfit_fixed_batch(self):
        state = TrainState(HybridModel(HybridConfig.preset("desk", 2, seed=0)), 1e-3)
        x, y = images(8, seed=5), [0, 1] * 4
        losses = []
        for _ in range(300):
            state, loss = train_step(state, x, y)
            losses.append(loss)
            if loss < 0.05:
                break
        assert min(losses) < 0.05

    def test_non_finite(self):
        state = TrainState(HybridModel(HybridConfig.preset("desk", 2)), 1e-3)
        state.model.classifier_out.bias.data[0] = np.nan
        with pytest.raises(NonFiniteLossError):
            train_step(state, images(2), [0, 1])
        assert state.step == 0

    def test_label_range(self):
        state = TrainState(HybridModel(HybridConfig.preset("desk", 2)), 1e-3)
        with pytest.raises(ValueError):
            train_step(state, images(2), [0, 2])

    def test_sgd(self):
        model = HybridModel(HybridConfig.preset("desk", 2))
        state = TrainState(model, 1e-2, SGD(dict(model.named_parameters())))
        losses = [train_step(state, images(4), [0, 1, 0, 1])[1] for _ in range(5)]
        assert losses[-1] < losses[0]


class TestAdam:
    def test_first_step_is_sign_times_lr(self):
        p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        p.grad = np.array([0.5, -4.0, 0.0])
        Adam({"p": p}).step(0.1)
        # bias-corrected first step: m/sqrt(v) == sign(g)
        assert np.allclose(p.data, [0.9, -1.9, 3.0], atol=1e-6)


@pytest.fixture(scope="module")
def plateau_model():
    return HybridModel(HybridConfig.preset("desk", 2))


class TestPlateau:
    def make(self, model, lr=1.0, **kw):
        return TrainState(model, lr, plateau=PlateauState(**kw))

    def test_improving(self, plateau_model):
        s = self.make(plateau_model)
        for m in [1.0, 0.9, 0.8, 0.7, 0.6, 0.5]:
            plateau_step(s, m)
        assert s.lr == 1.0

    def test_flat_reduces_once(self, plateau_model):
        s = self.make(plateau_model, patience=3)
        for m in [1.0, 0.9, 0.8] + [0.8] * 4:
            plateau_step(s, m)
        assert s.lr == pytest.approx(0.1)
        assert s.plateau.reductions == 1

    def test_min_lr(self, plateau_model):
        s = self.make(plateau_model, lr=1e-5, patience=1, min_lr=1e-6)
        for _ in range(10):
            plateau_step(s, 1.0)
        assert s.lr == 1e-6

    def test_min_delta(self, plateau_model):
        s = self.make(plateau_model, patience=2, min_delta=0.1)
        for m in [1.0, 0.95, 0.92]:
            plateau_step(s, m)
        assert s.lr == pytest.approx(0.1)

    def test_non_finite_metric(self, plateau_model):
        with pytest.raises(ValueError):
            plateau_step(self.make(plateau_model), float("nan"))
