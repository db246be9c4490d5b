import math

import numpy as np
import pytest

from segxplain.nn import (
    Dense,
    Network,
    OptimizerState,
    PlateauSchedule,
    TrainingError,
    cross_entropy_grad,
    cross_entropy_loss,
    optimizer_step,
    plateau_update,
    soft_jaccard_grad,
    soft_jaccard_loss,
)
from segxplain.nn.losses import batch_soft_jaccard
from segxplain.rng import derive_rng


class TestCrossEntropy:
    def test_certain_correct_prediction_is_zero(self):
        assert cross_entropy_loss([0.0, 1.0, 0.0], [0, 1, 0]) == pytest.approx(0.0, abs=1e-6)

    def test_uniform_is_log_k(self):
        for k in (2, 3, 7):
            p = np.full(k, 1.0 / k)
            t = np.zeros(k)
            t[0] = 1
            assert cross_entropy_loss(p, t) == pytest.approx(math.log(k), rel=1e-9)

    def test_direct_evaluation(self):
        # p(true)=0.7 -> -ln 0.7
        loss = cross_entropy_loss([0.7, 0.3], [1, 0])
        assert loss == pytest.approx(0.35667494, abs=1e-6)

    def test_rejects_non_one_hot(self):
        with pytest.raises(ValueError):
            cross_entropy_loss([0.5, 0.5], [1, 1])
        with pytest.raises(ValueError):
            cross_entropy_loss([0.5, 0.5], [0.3, 0.7])

    def test_gradient_matches_finite_differences(self):
        rng = derive_rng("ce")
        p = rng.dirichlet(np.ones(4), size=3)
        t = np.eye(4)[[0, 2, 1]]
        g = cross_entropy_grad(p, t)
        eps = 1e-7
        for i in range(3):
            for j in range(4):
                pp = p.copy()
                pp[i, j] += eps
                pm = p.copy()
                pm[i, j] -= eps
                num = (cross_entropy_loss(pp, t) - cross_entropy_loss(pm, t)) / (2 * eps)
                assert g[i, j] == pytest.approx(num, abs=1e-4)


class TestSoftJaccard:
    def test_exact_match_is_zero(self):
        m = np.array([[1.0, 0], [0, 1]])
        assert soft_jaccard_loss(m, m) == 0.0

    def test_disjoint_is_near_one(self):
        a = np.zeros((8, 8))
        a[:4] = 1
        b = np.zeros((8, 8))
        b[4:] = 1
        assert soft_jaccard_loss(a, b) > 0.95

    def test_set_count_oracle(self):
        # all-ones 2x2 prediction vs 2-pixel target: J = 2/4 without smoothing
        p = np.ones((2, 2))
        t = np.array([[1.0, 0], [1, 0]])
        assert soft_jaccard_loss(p, t, smooth=0.0) == pytest.approx(0.5)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            soft_jaccard_loss(np.ones((2, 2)), np.ones((3, 2)))

    def test_gradient_matches_finite_differences(self):
        rng = derive_rng("sj")
        p = rng.random((4, 4))
        t = (rng.random((4, 4)) > 0.5).astype(float)
        g = soft_jaccard_grad(p, t)
        eps = 1e-7
        for i in range(4):
            for j in range(4):
                pp = p.copy()
                pp[i, j] += eps
                pm = p.copy()
                pm[i, j] -= eps
                num = (soft_jaccard_loss(pp, t) - soft_jaccard_loss(pm, t)) / (2 * eps)
                assert g[i, j] == pytest.approx(num, abs=1e-6)

    def test_batch_form_matches_per_sample_mean(self):
        rng = derive_rng("sjb")
        p = rng.random((3, 1, 4, 4))
        t = (rng.random((3, 1, 4, 4)) > 0.5).astype(float)
        loss, grad = batch_soft_jaccard(p, t)
        per = [soft_jaccard_loss(p[i], t[i]) for i in range(3)]
        assert loss == pytest.approx(float(np.mean(per)))
        assert grad.shape == p.shape


class TestOptimizer:
    def _param_net(self):
        net = Network([Dense(3, 2)], input_shape=(3,), precision=np.float64)
        return net

    def test_zero_gradient_keeps_parameters(self):
        net = self._param_net()
        before = net.copy_state()
        state = OptimizerState(net.parameters(), 0.01)
        grads = {p.name: np.zeros_like(p.array) for p in net.trainable_parameters()}
        optimizer_step(net.parameters(), grads, state)
        for a, b in zip(before, net.state_arrays()):
            assert np.array_equal(a, b)

    def test_sgd_definition(self):
        net = self._param_net()
        w0 = net.param("layer0.weight").array.copy()
        state = OptimizerState(net.parameters(), 0.1, mode="sgd")
        g = np.full_like(w0, 2.0)
        grads = {"layer0.weight": g,
                 "layer0.bias": np.zeros(2)}
        optimizer_step(net.parameters(), grads, state)
        assert np.allclose(net.param("layer0.weight").array, w0 - 0.1 * g)

    def test_adam_first_step_magnitude(self):
        # bias-corrected first step: |update| ~= lr regardless of grad scale
        net = self._param_net()
        w0 = net.param("layer0.weight").array.copy()
        state = OptimizerState(net.parameters(), 0.001)
        grads = {"layer0.weight": np.full_like(w0, 1234.5),
                 "layer0.bias": np.full(2, 1e-3)}
        optimizer_step(net.parameters(), grads, state)
        step_w = w0 - net.param("layer0.weight").array
        assert np.allclose(np.abs(step_w), 0.001, rtol=1e-3)

    def test_nan_gradient_names_parameter(self):
        net = self._param_net()
        state = OptimizerState(net.parameters(), 0.01)
        grads = {"layer0.weight": np.full((3, 2), np.nan),
                 "layer0.bias": np.zeros(2)}
        with pytest.raises(TrainingError, match="layer0.weight"):
            optimizer_step(net.parameters(), grads, state)

    def test_frozen_parameters_untouched(self):
        net = Network([Dense(3, 2), Dense(2, 2)], input_shape=(3,),
                      precision=np.float64, groups={0: "backbone"})
        net.freeze("backbone")
        frozen_before = net.param("layer0.weight").array.copy()
        state = OptimizerState(net.parameters(), 0.5, mode="sgd")
        grads = {"layer1.weight": np.ones((2, 2)), "layer1.bias": np.ones(2)}
        optimizer_step(net.parameters(), grads, state)
        assert np.array_equal(net.param("layer0.weight").array, frozen_before)

    def test_learning_rate_must_be_positive(self):
        net = self._param_net()
        with pytest.raises(ValueError):
            OptimizerState(net.parameters(), 0.0)


class TestPlateauSchedule:
    def test_improving_losses_keep_lr(self):
        s = PlateauSchedule(0.001)
        for loss in [1.0, 0.9, 0.8]:
            lr = plateau_update(s, loss)
        assert lr == 0.001

    def test_three_stale_epochs_halve_once(self):
        s = PlateauSchedule(0.001)
        for loss in [1.0, 1.0, 1.0, 1.0]:
            lr = plateau_update(s, loss)
        assert lr == pytest.approx(0.0005)

    def test_six_stale_epochs_quarter(self):
        s = PlateauSchedule(0.001)
        plateau_update(s, 1.0)
        for _ in range(6):
            lr = plateau_update(s, 1.0)
        assert lr == pytest.approx(0.00025)

    def test_lr_never_below_floor(self):
        s = PlateauSchedule(0.001, min_lr=0.0004)
        plateau_update(s, 1.0)
        for _ in range(30):
            lr = plateau_update(s, 1.0)
        assert lr == 0.0004

    def test_lr_non_increasing(self):
        s = PlateauSchedule(0.01)
        rng = derive_rng("plateau")
        last = s.learning_rate
        for _ in range(50):
            lr = plateau_update(s, float(rng.random()))
            assert lr <= last
            last = lr
