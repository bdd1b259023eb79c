"""Depth network, depth-to-fog conversion and the frozen-weights guard."""

import numpy as np
import pytest

from conftest import full_stacks, tiny_scene
from lfderain.dernet import (DepthConfig, DERNet, estimate_depth, fog_from_depth, infer_depth,
                             train_dernet)
from lfderain.errors import ContractError, DomainError, ShapeError
from lfderain.losses import smooth_l1
from lfderain.nn import Adam
from lfderain.rain_synth import SceneData, depth_to_fog
from lfderain.tensor import Tensor, backward, finite_diff_check, sum_

SMALL = DepthConfig(width=4, blocks=2)


class TestFog:
    def test_points(self):
        assert fog_from_depth(np.array([0.0]))[0] == 0.0
        assert fog_from_depth(np.array([0.5]), 1.8)[0] == pytest.approx(0.59343, abs=5e-6)

    def test_shared_with_synthesis(self):
        d = np.random.default_rng(0).uniform(0, 3, size=(4, 4))
        np.testing.assert_array_equal(fog_from_depth(d, 1.3), depth_to_fog(d, 1.3)[1])

    def test_monotone_bounded(self):
        a = fog_from_depth(np.linspace(0, 4, 40))
        assert np.all(np.diff(a) > 0) and a.min() >= 0 and a.max() < 1

    def test_negative(self):
        with pytest.raises(DomainError):
            fog_from_depth(np.array([-1.0]))


class TestNetwork:
    def test_shape_and_positive(self, rng):
        d = DERNet(SMALL, seed=0)(rng.uniform(size=(3, 3, 3, 6, 6)))
        assert d.shape == (3, 1, 3, 6, 6) and (d.data > 0).all()

    def test_zero_network_is_softplus_zero(self, rng):
        m = DERNet(SMALL, seed=0)
        m.zero_()
        d = estimate_depth(m, rng.uniform(size=(2, 3, 2, 4, 4)), np.zeros((2, 3, 2, 4, 4)))
        np.testing.assert_allclose(d.data, np.log(2.0), atol=1e-15)

    def test_input_is_rain_subtracted(self, rng):
        m = DERNet(SMALL, seed=0)
        rainy = rng.uniform(size=(2, 3, 2, 4, 4))
        rain = rng.uniform(0, 0.2, size=rainy.shape)
        np.testing.assert_array_equal(estimate_depth(m, rainy, rain).data, m(rainy - rain).data)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            estimate_depth(DERNet(SMALL), np.zeros((1, 3, 1, 4, 4)), np.zeros((1, 3, 1, 4, 5)))

    def test_gradient(self, rng):
        m = DERNet(DepthConfig(width=2, blocks=1), seed=0)
        x = Tensor(rng.uniform(size=(2, 3, 2, 4, 4)))
        target = rng.uniform(size=(2, 1, 2, 4, 4))
        f = lambda t: smooth_l1(estimate_depth(m, t, np.zeros(x.shape)) - target)
        assert finite_diff_check(f, x) < 1e-3
        assert finite_diff_check(lambda w: smooth_l1(m(x) - target), m.head.weight) < 1e-3


class TestTraining:
    def test_loss_falls(self, scene):
        m = DERNet(SMALL, seed=0)
        losses = train_dernet(m, [scene], 100, lr=1e-3, seed=0)
        assert np.mean(losses[-5:]) < 0.9 * losses[0]
        assert m.is_frozen()

    def test_frozen_guard(self, scene, rng):
        m = DERNet(SMALL, seed=0)
        opt = Adam([m], lr=1e-3)
        m.freeze()
        before = m.checksum()
        g = backward(sum_(Tensor(rng.uniform(size=3), requires_grad=True) * 2.0))
        with pytest.raises(ContractError):
            opt.step(g)
        with pytest.raises(ContractError):
            Adam([m])
        assert m.checksum() == before

    def test_frozen_inference_deterministic(self, scene):
        m = DERNet(SMALL, seed=0)
        train_dernet(m, [scene], 3, seed=0)
        rainy, rain, _, _ = full_stacks(scene)
        np.testing.assert_array_equal(infer_depth(m, rainy, rain), infer_depth(m, rainy, rain))

    def test_needs_ground_truth(self, scene):
        with pytest.raises(ContractError):
            train_dernet(DERNet(SMALL), [SceneData("real", scene.rainy)], 1)

    def test_ramp_depth_recovered(self):
        ramp = np.broadcast_to(np.arange(16) / 15.0, (3, 3, 1, 16, 16)).copy()
        sc = tiny_scene(depth=ramp)
        m = DERNet(SMALL, seed=0)
        # the ramp is a function of absolute position, so patches cover the whole view
        train_dernet(m, [sc], 500, lr=1e-3, patch_size=16, seed=0)
        rainy, rain, _, depth = full_stacks(sc)
        assert np.abs(infer_depth(m, rainy, rain) - depth).mean() < 0.15
