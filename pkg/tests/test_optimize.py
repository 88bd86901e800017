import dataclasses

import numpy as np
import pytest

import svreg.optimize as opt
from svreg.diffeo import exponentiate
from svreg.field import GridMismatchError, warp
from svreg.optimize import (
    AdamConfig,
    NonFiniteLossError,
    RegistrationConfig,
    WeightParams,
    adam_step,
    gradient_check,
    low_res_dims,
    realize_weights,
    register,
    total_loss,
)
from svreg.regularizer import BetaPrior, GaussianPrior, UniformWeight, beta_penalty, gaussian_penalty, weighted_diffusion
from svreg.similarity import NccConfig, ncc_loss, one_hot
from svreg.synth import SCENARIOS, perlin_noise, shift_pair, sliding_pair_2d

from .oracles import adam_oracle

SLIDE_CFG = RegistrationConfig(prior=BetaPrior(alpha_prime=0.05, lambda_max=5.0), adam=AdamConfig(lr=0.05))


def _image(dims, seed=0):
    return np.clip(0.5 + 0.4 * perlin_noise(dims, 4.0, seed), 0.0, 1.0)


class TestWeights:
    """Realization of the weight map from low-resolution parameters."""

    def test_low_res_dims(self):
        assert low_res_dims((128, 128), 0.25) == (32, 32)
        assert low_res_dims((10, 5, 3), 0.25) == (3, 2, 2)
        with pytest.raises(ValueError):
            low_res_dims((8, 8), 0.0)

    def test_beta_midpoint(self):
        wp = WeightParams.initial((12, 10), BetaPrior(0.175, 3.354))
        lam, _ = realize_weights(wp, (12, 10))
        np.testing.assert_allclose(lam, 3.354 / 2, rtol=1e-15)

    def test_gaussian_relu(self):
        wp = WeightParams(np.full((3, 3), -3.0), GaussianPrior(0.525, 3.796))
        lam, _ = realize_weights(wp, (12, 12))
        assert np.all(lam == 0.0)

    def test_gaussian_starts_at_mean(self):
        wp = WeightParams.initial((8, 8), GaussianPrior(0.525, 3.796))
        lam, _ = realize_weights(wp, (8, 8))
        np.testing.assert_allclose(lam, 3.796)

    @pytest.mark.parametrize("prior", [BetaPrior(0.3, 2.5), GaussianPrior(0.5, 1.5)])
    def test_bounds_and_gradient(self, rng, prior):
        full = (10, 12)
        z = rng.normal(scale=2.0, size=low_res_dims(full, 0.5))
        up = rng.normal(size=full)
        lam, pb = realize_weights(WeightParams(z, prior, 0.5), full)
        assert lam.min() >= 0
        if isinstance(prior, BetaPrior):
            assert lam.max() <= prior.lambda_max

        def loss(x):
            lam_x, pb_x = realize_weights(WeightParams(x, prior, 0.5), full)
            return float(np.sum(lam_x * up)), pb_x(up)

        assert gradient_check(loss, z) <= 1e-5

    def test_uniform_is_constant(self):
        lam, pb = realize_weights(WeightParams(np.zeros((2, 2)), UniformWeight(1.7)), (6, 6))
        assert np.all(lam == 1.7)
        assert np.all(pb(np.ones((6, 6))) == 0)


class TestAdam:
    """Bias-corrected Adam."""

    def test_zero_gradient(self):
        params = {"w": np.array([1.0, -2.0])}
        state = {"w": (np.array([0.5, 0.5]), np.array([0.2, 0.2]))}
        new, st = adam_step(params, {"w": np.zeros(2)}, state, AdamConfig(), 3)
        m, s = st["w"]
        np.testing.assert_allclose(m, 0.45)
        np.testing.assert_allclose(s, 0.2 * 0.999)
        assert np.all(np.isfinite(new["w"]))

    def test_zero_gradient_fresh_state_no_move(self):
        new, _ = adam_step({"w": np.ones(3)}, {"w": np.zeros(3)}, None, AdamConfig(), 1)
        assert np.array_equal(new["w"], np.ones(3))

    def test_first_step_is_sign(self):
        cfg = AdamConfig(lr=0.01)
        g = np.array([1.0, -1.0, 5.0, -0.2])
        new, _ = adam_step({"w": np.zeros(4)}, {"w": g}, None, cfg, 1)
        np.testing.assert_allclose(new["w"], -cfg.lr * np.sign(g), atol=cfg.lr * cfg.eps / 0.2)

    def test_two_steps(self):
        cfg = AdamConfig(lr=0.01)
        params, state = {"x": np.array(0.0)}, None
        xs = []
        for t, g in enumerate([1.0, -1.0], start=1):
            params, state = adam_step(params, {"x": np.array(g)}, state, cfg, t)
            xs.append(float(params["x"]))
        np.testing.assert_allclose(xs, adam_oracle([1.0, -1.0], lr=0.01), atol=1e-12)
        # Hand computation: x1 = -0.01 / (1 + 1e-8); x2 = x1 + 0.01 * (0.01 / 0.19) / (1 + 1e-8).
        np.testing.assert_allclose(xs, [-0.0099999999, -0.0099999999 + 0.000526315784], atol=1e-12)

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            adam_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, None, AdamConfig(), 1)
        with pytest.raises(ValueError):
            adam_step({"w": np.zeros(3)}, {"w": np.zeros(3)}, None, AdamConfig(), 0)
        with pytest.raises(ValueError):
            AdamConfig(lr=0.0)


class TestTotalLoss:
    """Negative log posterior."""

    def test_identity_at_prior_mode(self):
        img = _image((16, 16))
        cfg = RegistrationConfig(prior=GaussianPrior(0.525, 3.796))
        wp = WeightParams.initial((16, 16), cfg.prior)
        ev = total_loss(img, img, np.zeros((2, 16, 16)), wp, cfg)
        assert ev.loss == pytest.approx(-1.0, abs=1e-12)

    @pytest.mark.parametrize("prior", [BetaPrior(0.175, 3.354), GaussianPrior(0.525, 3.796)])
    def test_additivity(self, rng, prior):
        dims = (14, 12)
        fixed, moving = _image(dims, 1), _image(dims, 2)
        v = rng.normal(scale=0.5, size=(2,) + dims)
        wp = WeightParams(rng.normal(size=low_res_dims(dims, 0.25)), prior)
        cfg = RegistrationConfig(prior=prior, ncc=NccConfig(sigma_i=1.5))
        ev = total_loss(fixed, moving, v, wp, cfg)
        lam, _ = realize_weights(wp, dims)
        ncc, _ = ncc_loss(fixed, warp(moving, exponentiate(v, cfg.n_squaring)))
        diff = weighted_diffusion(v, lam)[0]
        if isinstance(prior, BetaPrior):
            pen = beta_penalty(lam / prior.lambda_max, prior.alpha_prime)[0]
        else:
            pen = gaussian_penalty(lam, prior.sigma_prime, prior.lambda_mean)[0]
        assert ev.loss == pytest.approx(1.5 * ncc + diff + pen, abs=1e-12)

    @pytest.mark.parametrize("prior", [BetaPrior(0.175, 3.354), GaussianPrior(0.525, 3.796)])
    def test_full_gradient(self, rng, prior):
        dims = (12, 12, 12)
        fixed, moving = _image(dims, 3), _image(dims, 4)
        v0 = rng.normal(scale=0.5, size=(3,) + dims)
        z0 = rng.normal(size=low_res_dims(dims, 0.25))
        cfg = RegistrationConfig(prior=prior)
        if isinstance(prior, GaussianPrior):
            z0 = z0 + prior.lambda_mean

        def loss_v(x):
            ev = total_loss(fixed, moving, x, WeightParams(z0, prior), cfg)
            return ev.loss, ev.grad_v

        def loss_z(x):
            ev = total_loss(fixed, moving, v0, WeightParams(x, prior), cfg)
            return ev.loss, ev.grad_z

        assert gradient_check(loss_v, v0, n_probes=30) <= 1e-3
        assert gradient_check(loss_z, z0, n_probes=30) <= 1e-3

    def test_dice_term_gradient(self, rng):
        dims = (12, 10)
        lab_m = (perlin_noise(dims, 4.0, 5) > 0).astype(int)
        lab_f = (perlin_noise(dims, 4.0, 6) > 0).astype(int)
        labels = (one_hot(lab_m, [0, 1]), one_hot(lab_f, [0, 1]))
        cfg = RegistrationConfig(prior=BetaPrior(0.1, 2.0), dice_weight=1.0, n_squaring=3)
        wp = WeightParams.initial(dims, cfg.prior)
        fixed, moving = _image(dims, 7), _image(dims, 8)

        def loss(x):
            ev = total_loss(fixed, moving, x, wp, cfg, labels)
            return ev.loss, ev.grad_v

        v0 = rng.normal(scale=0.6, size=(2,) + dims)
        assert "dice" in total_loss(fixed, moving, v0, wp, cfg, labels).terms
        assert gradient_check(loss, v0) <= 1e-5

    def test_grid_mismatch(self):
        cfg = RegistrationConfig()
        with pytest.raises(GridMismatchError):
            total_loss(np.zeros((4, 4)), np.zeros((4, 5)), np.zeros((2, 4, 4)), WeightParams.initial((4, 4), cfg.prior), cfg)


class TestGradientCheck:
    """Finite-difference checker."""

    def test_quadratic(self, rng):
        a = rng.normal(size=(6, 6))
        q = a @ a.T
        assert gradient_check(lambda x: (0.5 * x @ q @ x, q @ x), rng.normal(size=6)) <= 1e-9


class TestRegister:
    """Per-pair registration loop."""

    def test_identical_images_stay_put(self):
        img = _image((32, 32))
        res = register(img, img, RegistrationConfig())
        assert np.abs(res.displacement).max() <= 0.05
        assert len(res.loss_trace) == 400
        # The beta penalty only vanishes as sigmoid(z) -> 1; at lr 1e-2 it is still ~0.014 here.
        assert res.loss_trace[-1]["total"] <= -0.98

    @pytest.mark.parametrize(
        "cfg",
        [
            RegistrationConfig(prior=GaussianPrior(0.525, 3.796)),
            RegistrationConfig(adam=AdamConfig(lr=0.05)),
        ],
    )
    def test_identical_images_reach_optimum(self, cfg):
        img = _image((32, 32))
        res = register(img, img, cfg)
        assert np.abs(res.displacement).max() <= 0.05
        assert res.loss_trace[-1]["total"] <= -0.99

    def test_shift_recovery(self):
        pair = shift_pair((64, 64), (3.0, 0.0), seed=0)
        res = register(pair["moving"], pair["fixed"], RegistrationConfig(adam=AdamConfig(lr=0.05)))
        err = np.sqrt(np.sum((res.displacement - pair["true_disp"]) ** 2, axis=0))
        assert err[pair["foreground"]].mean() <= 0.2

    def test_deterministic(self):
        pair = shift_pair((24, 24), (1.5, -1.0), seed=4)
        cfg = RegistrationConfig(iterations=30, adam=AdamConfig(lr=0.05))
        a = register(pair["moving"], pair["fixed"], cfg)
        b = register(pair["moving"], pair["fixed"], cfg)
        assert a.loss_trace == b.loss_trace
        assert np.array_equal(a.displacement, b.displacement)
        assert np.array_equal(a.lambda_field, b.lambda_field)

    @pytest.mark.parametrize("prior", [BetaPrior(0.05, 5.0), GaussianPrior(0.5, 2.0), UniformWeight(1.5)])
    def test_lambda_range_every_iteration(self, prior):
        pair = shift_pair((24, 24), (2.0, 1.0), seed=1)
        seen = []

        def cb(it, ev):
            seen.append((ev.lam.min(), ev.lam.max()))

        register(pair["moving"], pair["fixed"], RegistrationConfig(prior=prior, iterations=40, adam=AdamConfig(lr=0.1)), callback=cb)
        lows, highs = zip(*seen)
        assert min(lows) >= 0
        if isinstance(prior, BetaPrior):
            assert max(highs) <= prior.lambda_max
        if isinstance(prior, UniformWeight):
            assert min(lows) == max(highs) == prior.value

    @pytest.mark.parametrize("name", ["slide-v6", "slide-h4", "slide-strip4"])
    def test_descent_on_shipped_scenarios(self, name):
        pair = sliding_pair_2d(SCENARIOS[name])
        res = register(pair["moving"], pair["fixed"], dataclasses.replace(SLIDE_CFG, iterations=51))
        assert res.loss_trace[50]["total"] <= res.loss_trace[0]["total"]
        assert all(np.isfinite(t["total"]) for t in res.loss_trace)

    def test_rejects_unnormalized(self):
        img = _image((8, 8))
        with pytest.raises(ValueError):
            register(img * 3.0, img, RegistrationConfig(iterations=1))

    def test_rejects_grid_mismatch(self):
        with pytest.raises(GridMismatchError):
            register(np.zeros((8, 8)), np.zeros((8, 9)), RegistrationConfig(iterations=1))

    def test_non_finite_names_term(self, monkeypatch):
        def broken(fixed, warped, cfg):
            return float("nan"), np.zeros_like(warped)

        monkeypatch.setattr(opt, "ncc_loss", broken)
        img = _image((8, 8))
        with pytest.raises(NonFiniteLossError) as info:
            register(img, img, RegistrationConfig(iterations=3))
        assert info.value.term == "ncc" and info.value.iteration == 0

    def test_unregularized_limit(self):
        pair = shift_pair((24, 24), (1.0, 0.0), seed=2)
        res = register(pair["moving"], pair["fixed"], RegistrationConfig(prior=BetaPrior(0.0, 0.0), iterations=20))
        assert all(t["diffusion"] == 0.0 and t["prior"] == 0.0 for t in res.loss_trace)
