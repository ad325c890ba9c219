import math

import numpy as np
import pytest

from waveformer import autograd as ad
from waveformer.autograd import Var, gradcheck
from waveformer.model import toy_config
from waveformer.train import (AdamWState, SynthSample, TrainingDiverged, adamw_step, class_signatures, dice_ce_loss,
                              gen_synthetic, one_hot, train_toy)


class TestLoss:
    def test_uniform_logits(self):
        labels = np.random.default_rng(0).integers(0, 4, (4, 4, 4))
        terms = dice_ce_loss(Var(np.zeros((4, 4, 4, 4))), labels)
        assert math.isclose(terms.ce, math.log(4), rel_tol=1e-12)
        assert 0 < terms.dice < 1

    def test_confident_correct_is_near_zero(self):
        labels = np.random.default_rng(1).integers(0, 4, (4, 4, 4))
        logits = 20.0 * one_hot(labels, 4, np.float64)
        assert float(dice_ce_loss(Var(logits), labels).total.data) <= 1e-3

    def test_confident_wrong_is_large(self):
        labels = np.zeros((2, 2, 2), dtype=int)
        logits = 20.0 * one_hot(np.ones_like(labels), 2, np.float64)
        terms = dice_ce_loss(Var(logits), labels)
        assert terms.ce > 19 and terms.dice > 0.9

    def test_gradcheck(self):
        labels = np.random.default_rng(2).integers(0, 3, (2, 2, 2))
        logits = np.random.default_rng(3).standard_normal((3, 2, 2, 2))
        assert gradcheck(lambda z: dice_ce_loss(z, labels).total, [logits]) <= 1e-3

    def test_shape_and_range_checks(self):
        with pytest.raises(ValueError, match="do not match"):
            dice_ce_loss(Var(np.zeros((2, 2, 2, 2))), np.zeros((3, 3, 3), int))
        with pytest.raises(ValueError, match="labels must lie"):
            one_hot(np.array([0, 3]), 3)


def reference_adamw(p, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        p = p - lr * wd * p
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g ** 2
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return p


class TestAdamW:
    def test_matches_reference_over_steps(self):
        rng = np.random.default_rng(4)
        p0 = rng.standard_normal(5)
        grads = [rng.standard_normal(5) for _ in range(6)]
        state = AdamWState(lr=1e-2, weight_decay=0.1)
        params = {"w": p0}
        for g in grads:
            params = adamw_step(params, {"w": g}, state)
        np.testing.assert_allclose(params["w"], reference_adamw(p0, grads, 1e-2, 0.1), atol=1e-14)
        assert state.step == 6

    def test_first_step_moves_by_lr(self):
        out = adamw_step({"w": np.array([1.0, -1.0])}, {"w": np.array([3.0, -0.5])}, AdamWState(lr=0.1,
                                                                                               weight_decay=0))
        np.testing.assert_allclose(out["w"], [0.9, -0.9], atol=1e-7)

    def test_decay_without_gradient(self):
        out = adamw_step({"w": np.array([2.0])}, {}, AdamWState(lr=0.1, weight_decay=0.5))
        np.testing.assert_allclose(out["w"], [2.0 * (1 - 0.05)])

    def test_keeps_dtype_and_checks_shape(self):
        out = adamw_step({"w": np.ones(3, np.float32)}, {"w": np.ones(3, np.float32)}, AdamWState())
        assert out["w"].dtype == np.float32
        with pytest.raises(ValueError, match="gradient shape"):
            adamw_step({"w": np.ones(3)}, {"w": np.ones(2)}, AdamWState())


@pytest.fixture(scope="module")
def data():
    return gen_synthetic(5, 6, 32, 2, 3)


class TestSynthetic:
    def test_contract(self, data):
        assert len(data) == 6
        for s in data:
            assert s.volume.shape == (2, 32, 32, 32) and s.volume.dtype == np.float32
            assert s.labels.shape == (32, 32, 32)
            assert set(np.unique(s.labels)) == {0, 1, 2}
            assert 0.01 <= np.mean(s.labels > 0) <= 0.40

    def test_deterministic(self, data):
        again = gen_synthetic(5, 6, 32, 2, 3)
        assert all(np.array_equal(a.volume, b.volume) and np.array_equal(a.labels, b.labels)
                   for a, b in zip(data, again))
        other = gen_synthetic(6, 1, 32, 2, 3)[0]
        assert not np.array_equal(other.labels, data[0].labels)

    def test_intensity_signature(self, data):
        sig = class_signatures(3, 2)
        s = data[0]
        for k in range(3):
            means = s.volume[:, s.labels == k].mean(axis=1)
            np.testing.assert_allclose(means, sig[k], atol=0.1)

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            gen_synthetic(0, 1, 32, 2, 1)
        with pytest.raises(ValueError):
            gen_synthetic(0, 1, 4, 2, 3)


class TestTrainLoop:
    def test_overfit_probe_halves_loss(self):
        cfg = toy_config()
        batch = gen_synthetic(11, 2, 32, 2, 3)
        res = train_toy(cfg, batch, 50, seed=0, lr=1e-3, batch_size=2)
        assert res.trace[-1][1] <= 0.5 * res.trace[0][1]

    def test_deterministic(self):
        cfg = toy_config()
        data = gen_synthetic(12, 3, 32, 2, 3)
        a = train_toy(cfg, data, 3, seed=1, lr=1e-3)
        b = train_toy(cfg, data, 3, seed=1, lr=1e-3)
        assert a.trace == b.trace
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_divergence_raises(self):
        cfg = toy_config()
        s = gen_synthetic(13, 1, 32, 2, 3)[0]
        bad = SynthSample(np.full_like(s.volume, np.nan), s.labels)
        with pytest.raises(TrainingDiverged):
            train_toy(cfg, [bad], 1, seed=0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="does not match"):
            train_toy(toy_config(), gen_synthetic(0, 1, 64, 2, 3), 1, seed=0)

    def test_gradients_flow_to_every_parameter(self):
        cfg = toy_config()
        s = gen_synthetic(14, 1, 32, 2, 3)[0]
        from waveformer.model import forward, init_params

        params = init_params(cfg, 0).as_vars(requires_grad=True)
        ad.backward(dice_ce_loss(forward(params, s.volume, cfg), s.labels).total)
        missing = [k for k, v in params.items() if v.grad is None]
        assert not missing
