import numpy as np
import pytest

from dipreg.core import Rng, Tensor, backward
from dipreg.engine import (ImagePair, NumericalError, RunConfig, initial_state_check, mae_loss,
                           register)
from dipreg.generator import GeneratorConfig, init_params
from dipreg.synth import SynthSpec, synth_pair
from dipreg.warp import deformation, warp

from conftest import check_gradients


def small_generator():
    return GeneratorConfig(levels=3, channels_down=[8, 8, 8], channels_up=[8, 8, 8],
                           channels_skip=[2, 2, 2], input_channels=4)


def small_run(**kw):
    base = dict(iterations=30, log_every=10, generator=small_generator())
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def small_pair():
    pair, _ = synth_pair(SynthSpec(size=(32, 32), grid_spacing=16, max_displacement=3, seed=2))
    return pair


class TestMAE:
    def test_identical(self):
        assert mae_loss(Tensor([1.0, 2.0]), Tensor([1.0, 2.0])).item() == 0.0

    def test_value(self):
        assert mae_loss(Tensor([1.0, 2.0]), Tensor([1.0, 4.0])).item() == 1.0

    def test_subgradient(self):
        a = Tensor([2.0], requires_grad=True)
        backward(mae_loss(a, Tensor([0.0])))
        assert a.grad[0] == 1.0

    def test_tie_has_zero_gradient(self):
        a = Tensor([1.0, 3.0], requires_grad=True)
        backward(mae_loss(a, Tensor([1.0, 0.0])))
        np.testing.assert_array_equal(a.grad, [0.0, 0.5])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            mae_loss(Tensor([1.0]), Tensor([1.0, 2.0]))

    def test_gradients(self, rng):
        a, b = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 3))
        assert check_gradients(lambda a, b: mae_loss(a, b), [a, b]) < 1e-4


class TestImagePair:
    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="differ"):
            ImagePair(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_range(self):
        with pytest.raises(ValueError, match="\\[0, 1\\]"):
            ImagePair(np.full((4, 4), 2.0), np.zeros((4, 4)))


class TestRegister:
    def test_result_invariants(self, small_pair):
        cfg = small_run(iterations=25, log_every=10)
        res = register(small_pair, cfg)
        assert len(res.loss_curve) == 3
        assert res.u.shape == (2, 32, 32)
        np.testing.assert_array_equal(res.phi, deformation(Tensor(res.u)).data)
        np.testing.assert_array_equal(res.warped,
                                      warp(Tensor(small_pair.moving), Tensor(res.phi)).data)

    def test_deterministic(self, small_pair):
        a = register(small_pair, small_run(seed=9))
        b = register(small_pair, small_run(seed=9))
        np.testing.assert_array_equal(a.u, b.u)
        assert a.loss_curve == b.loss_curve

    def test_seed_matters(self, small_pair):
        a = register(small_pair, small_run(seed=1))
        b = register(small_pair, small_run(seed=2))
        assert not np.array_equal(a.u, b.u)

    def test_loss_decreases(self, small_pair):
        res = register(small_pair, small_run(iterations=150, lr=5e-3, log_every=1))
        losses = [l for _, l in res.loss_curve]
        assert min(losses[-10:]) < losses[0]
        running = np.minimum.accumulate(losses)
        assert np.all(np.diff(running) <= 0)

    def test_self_pair_stays_near_identity(self):
        img, _ = synth_pair(SynthSpec(size=(64, 64), max_displacement=0, seed=4))
        res = register(img, RunConfig(iterations=200))
        assert res.loss_curve[-1][1] <= res.loss_curve[0][1]
        assert np.hypot(res.u[0], res.u[1]).mean() < 1.0

    def test_indivisible_rejected(self):
        pair = ImagePair(np.zeros((1, 30, 32)), np.zeros((1, 30, 32)))
        with pytest.raises(ValueError, match="divisible"):
            register(pair, small_run())

    def test_nan_aborts_with_iteration(self, small_pair, monkeypatch):
        import dipreg.engine as engine

        calls = []

        def poisoned(a, b):
            calls.append(1)
            loss = mae_loss(a, b)
            return loss * Tensor(np.nan) if len(calls) > 3 else loss

        monkeypatch.setattr(engine, "mae_loss", poisoned)
        with pytest.raises(NumericalError, match="iteration 3"):
            register(small_pair, small_run(iterations=10, log_every=1))

    def test_non_finite_lr_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            small_run(lr=float("inf")).validate()

    def test_best_snapshot(self, small_pair):
        res = register(small_pair, small_run(best_snapshot=True, log_every=1))
        assert res.u.shape == (2, 32, 32)

    def test_patience_stops_early(self, small_pair):
        res = register(small_pair, small_run(iterations=500, lr=1e-9, patience=3, log_every=1))
        assert res.iterations_run < 500

    @pytest.mark.parametrize("kw", [dict(iterations=0), dict(lr=0.0), dict(loss="mse")])
    def test_bad_config(self, small_pair, kw):
        with pytest.raises(ValueError):
            register(small_pair, small_run(**kw))


class TestInitialState:
    def test_default_below_half_pixel(self):
        pair = ImagePair(np.zeros((1, 128, 128)), np.zeros((1, 128, 128)))
        for seed in range(3):
            rng = Rng(seed)
            assert initial_state_check(init_params(GeneratorConfig(), rng), pair, rng) < 0.5

    def test_zero_params(self):
        pair = ImagePair(np.zeros((1, 64, 64)), np.zeros((1, 64, 64)))
        net = init_params(GeneratorConfig(), Rng(0))
        net.scale_params(0.0)
        assert initial_state_check(net, pair) == 0.0

    def test_scaling_increases_magnitude(self):
        pair = ImagePair(np.zeros((1, 64, 64)), np.zeros((1, 64, 64)))
        net = init_params(GeneratorConfig(), Rng(0))
        before = initial_state_check(net, pair, Rng(1))
        net.scale_params(10.0)
        assert initial_state_check(net, pair, Rng(1)) > before
