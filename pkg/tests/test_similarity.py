import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from svreg.field import GridMismatchError
from svreg.optimize import gradient_check
from svreg.similarity import NccConfig, box_sum, ncc_loss, one_hot, soft_dice_loss

from .oracles import ncc_oracle


def _textured(rng, shape):
    return rng.uniform(0.0, 1.0, size=shape)


class TestNccConfig:
    """Configuration validation."""

    @pytest.mark.parametrize("window", [0, 4, -3])
    def test_rejects_bad_window(self, window):
        with pytest.raises(ValueError):
            NccConfig(window=window)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            NccConfig(epsilon=0.0)
        with pytest.raises(ValueError):
            NccConfig(sigma_i=0.0)

    def test_per_axis_window(self):
        assert NccConfig(window=(3, 5)).radii(2) == (1, 2)
        with pytest.raises(ValueError):
            NccConfig(window=(3, 5)).radii(3)


class TestBoxSum:
    """Clipped window sums."""

    def test_self_adjoint(self, rng):
        x = rng.normal(size=(7, 6, 5))
        y = rng.normal(size=(7, 6, 5))
        r = (2, 1, 3)
        assert np.isclose(np.sum(box_sum(x, r) * y), np.sum(x * box_sum(y, r)), rtol=1e-12)

    def test_counts(self):
        out = box_sum(np.ones((5,)), (1,))
        np.testing.assert_array_equal(out, [2, 3, 3, 3, 2])


class TestNccLoss:
    """Windowed NCC energy and adjoint."""

    def test_self_correlation(self, rng):
        f = _textured(rng, (10, 10))
        energy, _ = ncc_loss(f, f)
        assert energy == pytest.approx(-1.0, abs=1e-12)

    def test_affine_intensity_invariance(self, rng):
        f = _textured(rng, (9, 9, 9))
        energy, _ = ncc_loss(f, 2.5 * f + 0.3)
        assert energy == pytest.approx(-1.0, abs=1e-12)

    def test_matches_oracle(self, rng):
        f = _textured(rng, (8, 8, 8))
        w = _textured(rng, (8, 8, 8))
        energy, _ = ncc_loss(f, w)
        assert energy == pytest.approx(ncc_oracle(f, w), abs=1e-10)

    def test_matches_oracle_small_window(self, rng):
        f = _textured(rng, (7, 9))
        w = _textured(rng, (7, 9))
        energy, _ = ncc_loss(f, w, NccConfig(window=3))
        assert energy == pytest.approx(ncc_oracle(f, w, window=3), abs=1e-10)

    def test_adjoint_finite_differences(self, rng):
        f = _textured(rng, (8, 8, 8))
        w = _textured(rng, (8, 8, 8))
        err = gradient_check(lambda x: ncc_loss(f, x), w, n_probes=20)
        assert err <= 1e-5

    def test_constant_windows_are_zero(self):
        f = np.zeros((12, 12))
        f[:, 6:] = np.linspace(0, 1, 6)[None, :]
        w = np.full((12, 12), 0.4)
        energy, adj = ncc_loss(f, w)
        # Box sums by cumulative sums leave round-off of order 1e-16 in the covariance.
        assert energy == pytest.approx(0.0, abs=1e-9)
        assert np.all(np.isfinite(adj))

    def test_both_constant_no_nan(self):
        energy, adj = ncc_loss(np.ones((6, 6)), np.ones((6, 6)))
        assert energy == 0.0 and np.all(adj == 0)

    def test_grid_mismatch(self):
        with pytest.raises(GridMismatchError):
            ncc_loss(np.zeros((4, 4)), np.zeros((4, 5)))

    @given(st.integers(0, 2**16))
    def test_symmetric_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        f = _textured(rng, (9, 8))
        w = _textured(rng, (9, 8))
        e1, _ = ncc_loss(f, w)
        e2, _ = ncc_loss(w, f)
        assert e1 == pytest.approx(e2, abs=1e-12)
        assert -1.0 - 1e-12 <= e1 <= 1.0 + 1e-12

    @given(st.integers(0, 2**16), st.floats(0.1, 10), st.floats(-5, 5), st.floats(0.1, 10), st.floats(-5, 5))
    def test_joint_affine_invariance(self, seed, a, b, c, d):
        rng = np.random.default_rng(seed)
        f = _textured(rng, (8, 8))
        w = _textured(rng, (8, 8))
        e1, _ = ncc_loss(f, w)
        e2, _ = ncc_loss(a * f + b, c * w + d)
        assert e1 == pytest.approx(e2, abs=1e-9)


class TestSoftDice:
    """Soft Dice energy and gradient."""

    def test_identical(self, rng):
        lab = rng.integers(0, 3, size=(6, 6))
        oh = one_hot(lab, [0, 1, 2])
        energy, _ = soft_dice_loss(oh, oh)
        assert energy == pytest.approx(0.0, abs=1e-6)

    def test_disjoint(self):
        a = np.zeros((1, 4, 4))
        b = np.zeros((1, 4, 4))
        a[0, :2] = 1
        b[0, 2:] = 1
        energy, _ = soft_dice_loss(a, b)
        assert energy == pytest.approx(1.0)

    def test_half_overlap(self):
        a = np.zeros((1, 3))
        b = np.zeros((1, 3))
        a[0, [0, 1]] = 1
        b[0, [1, 2]] = 1
        energy, _ = soft_dice_loss(a, b, eps=0.0)
        assert energy == 0.5

    def test_class_mismatch(self):
        with pytest.raises(ValueError):
            soft_dice_loss(np.zeros((2, 3, 3)), np.zeros((3, 3, 3)))

    def test_gradient(self, rng):
        b = one_hot(rng.integers(0, 3, size=(5, 5)), [0, 1, 2])
        a = rng.uniform(0, 1, size=b.shape)
        assert gradient_check(lambda x: soft_dice_loss(x, b), a) <= 1e-5
