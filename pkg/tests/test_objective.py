import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odereg import objective as O
from odereg.data import SequenceDataset
from odereg.grid import identity_lattice
from odereg.model import Arch, init_params


class TestNcc:
    def test_self(self):
        img = np.random.default_rng(0).uniform(size=(6, 6))
        assert O.ncc(img, img) == pytest.approx(1.0, abs=1e-15)

    def test_positive_affine(self):
        img = np.random.default_rng(1).uniform(size=(5, 7))
        assert O.ncc(img, 2 * img + 3) == pytest.approx(1.0, abs=1e-14)

    def test_hand_value(self):
        assert O.ncc(np.array([0.0, 1.0, 2.0]), np.array([0.0, 1.0, 1.0])) == pytest.approx(math.sqrt(3) / 2, rel=1e-14)

    def test_constant_inputs_rejected(self):
        with pytest.raises(ValueError, match="both"):
            O.ncc(np.ones(4), np.ones(4))
        with pytest.raises(ValueError, match="second"):
            O.ncc(np.arange(4.0), np.ones(4))

    def test_gradient(self):
        rng = np.random.default_rng(2)
        a, b = rng.uniform(size=(2, 5, 5))
        g = O.ncc_grad(a, b)
        h = 1e-6
        for idx in [(0, 0), (2, 3), (4, 1)]:
            ap, am = a.copy(), a.copy()
            ap[idx] += h
            am[idx] -= h
            assert g[idx] == pytest.approx((O.ncc(ap, b) - O.ncc(am, b)) / (2 * h), rel=1e-6)


class TestSimilarity:
    def test_identical(self):
        img = np.random.default_rng(0).uniform(size=(4, 4))
        assert O.similarity_loss(img, img) == pytest.approx(0.0, abs=1e-15)

    def test_anticorrelated(self):
        assert O.similarity_loss(np.array([0.0, 1.0]), np.array([1.0, 0.0])) == pytest.approx(2.0)

    @settings(max_examples=40, deadline=None)
    @given(scale=st.floats(0.01, 100), shift=st.floats(-10, 10), seed=st.integers(0, 1000))
    def test_affine_invariance_and_range(self, scale, shift, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(size=(2, 6, 6))
        assert O.similarity_loss(a, scale * b + shift) == pytest.approx(O.similarity_loss(a, b), abs=1e-10)
        assert -1e-12 <= O.similarity_loss(a, b) <= 2.0 + 1e-12


class TestRegularizers:
    def test_smoothness_zero_and_translation(self):
        assert O.smoothness_loss(np.zeros((2, 5, 5))) == 0.0
        assert O.smoothness_loss(np.full((3, 4, 4, 4), 2.5)) == 0.0

    def test_smoothness_unit_ramp(self):
        u = np.zeros((3, 5, 5, 5))
        u[0] = identity_lattice((5, 5, 5))[0]
        assert O.smoothness_loss(u) == pytest.approx(1.0)

    def test_smoothness_gradient(self):
        u = np.random.default_rng(0).normal(size=(2, 5, 6))
        g = O.smoothness_loss_grad(u)
        h = 1e-6
        for idx in [(0, 0, 0), (1, 2, 3), (0, 4, 5)]:
            up, um = u.copy(), u.copy()
            up[idx] += h
            um[idx] -= h
            assert g[idx] == pytest.approx((O.smoothness_loss(up) - O.smoothness_loss(um)) / (2 * h), rel=1e-6)

    def test_boundary_uniform(self):
        c = np.array([0.5, -1.5, 2.0])
        u = np.broadcast_to(c[:, None, None, None], (3, 4, 4, 4)).copy()
        # brute force: walk the six planes, each voxel counted once per plane
        total, count = 0.0, 0
        for axis in range(3):
            for side in (0, 3):
                for idx in np.ndindex(4, 4, 4):
                    if idx[axis] == side:
                        total += np.sum(u[(slice(None),) + idx] ** 2)
                        count += 1
        assert O.boundary_loss(u) == pytest.approx(total / count)
        assert O.boundary_loss(u) == pytest.approx(np.sum(c**2))

    def test_boundary_centre_only(self):
        u = np.zeros((3, 5, 5, 5))
        u[:, 2, 2, 2] = 4.0
        assert O.boundary_loss(u) == 0.0
        assert O.boundary_loss(np.zeros((2, 4, 4))) == 0.0

    def test_boundary_gradient(self):
        u = np.random.default_rng(1).normal(size=(2, 4, 5))
        g = O.boundary_loss_grad(u)
        h = 1e-6
        for idx in [(0, 0, 0), (1, 3, 2), (0, 1, 1)]:
            up, um = u.copy(), u.copy()
            up[idx] += h
            um[idx] -= h
            assert g[idx] == pytest.approx((O.boundary_loss(up) - O.boundary_loss(um)) / (2 * h), abs=1e-9)

    def test_strictly_positive_on_nonzero(self):
        u = np.zeros((2, 6, 6))
        u[0, 2, 3] = 0.1
        assert O.smoothness_loss(u) > 0
        u = np.zeros((2, 6, 6))
        u[1, 0, 3] = 0.1
        assert O.boundary_loss(u) > 0


def _sequence(seed=0, n=3, dims=(8, 8)):
    rng = np.random.default_rng(seed)
    return SequenceDataset([rng.uniform(size=dims) for _ in range(n)], list(range(n)))


def _fresh(mode="direct", dims=(8, 8)):
    return init_params(Arch(mode, dims, channels=(4,), hidden=16, time_hidden=8, latent_factor=2, smoothing_window=3), 0)


class TestRegressionLoss:
    def test_constant_sequence_zero(self):
        img = np.random.default_rng(0).uniform(size=(8, 8))
        ds = SequenceDataset([img, img, img], [0, 1, 2])
        for mode in ("direct", "latent"):
            assert O.regression_loss(_fresh(mode), ds).total == 0.0

    def test_identity_trajectory_value(self):
        ds = _sequence(1, 4)
        b = O.regression_loss(_fresh(), ds)
        expected = sum(1.0 - O.ncc(ds.images[0], ds.images[k]) for k in range(1, 4))
        assert b.similarity == expected and b.total == expected
        assert b.smoothness == 0.0 and b.boundary == 0.0
        assert len(b.per_time) == 3

    def test_pair_reduces_to_registration(self):
        ds = _sequence(2, 2)
        assert O.regression_loss(_fresh(), ds).total == O.similarity_loss(ds.images[0], ds.images[1])

    def test_breakdown_identity(self):
        m = _fresh()
        rng = np.random.default_rng(3)
        m = m.with_params({k: v + rng.normal(0, 0.3, v.shape) for k, v in m.params.items()})
        w = O.LossWeights(0.3, 0.02)
        b = O.regression_loss(m, _sequence(3), w)
        assert b.total == pytest.approx(b.similarity + 0.3 * b.smoothness + 0.02 * b.boundary, rel=1e-14)

    def test_too_short(self):
        with pytest.raises(ValueError):
            SequenceDataset([np.zeros((4, 4))], [0.0])

    def test_weights_validated(self):
        with pytest.raises(ValueError):
            O.LossWeights(-1.0, 0.0)


class TestCotangents:
    def test_matched_case_zero(self):
        img = np.random.default_rng(0).uniform(size=(8, 8))
        ds = SequenceDataset([img, img], [0, 1])
        cots, dec = O.loss_cotangents(_fresh("latent"), ds)
        assert all(np.allclose(c, 0.0, atol=1e-15) for c in cots)
        assert np.allclose(dec["decoder.residual"], 0.0, atol=1e-15)

    @pytest.mark.parametrize("mode", ["direct", "latent"])
    def test_matches_finite_differences_in_state(self, mode):
        m = _fresh(mode)
        ds = _sequence(4)
        w = O.LossWeights(0.05, 0.01)
        rng = np.random.default_rng(5)
        states = [np.zeros_like(O.trajectory(m, ds)[0])] + [
            rng.normal(scale=0.8, size=(2,) + m.arch.state_dims) for _ in range(2)
        ]
        cots, _ = O.loss_cotangents(m, ds, w, states)
        h = 1e-6
        for k in (1, 2):
            fd = np.zeros_like(states[k])
            for idx in np.ndindex(states[k].shape):
                sp = [s.copy() for s in states]
                sm = [s.copy() for s in states]
                sp[k][idx] += h
                sm[k][idx] -= h
                fd[idx] = (O.regression_loss(m, ds, w, sp).total - O.regression_loss(m, ds, w, sm).total) / (2 * h)
            assert np.max(np.abs(cots[k] - fd)) / np.max(np.abs(fd)) < 1e-4

    def test_lambda1_linearity(self):
        m = _fresh()
        ds = _sequence(6)
        rng = np.random.default_rng(7)
        states = [np.zeros((2, 8, 8))] + [rng.normal(size=(2, 8, 8)) for _ in range(2)]
        c0, _ = O.loss_cotangents(m, ds, O.LossWeights(0.0, 0.0), states)
        c1, _ = O.loss_cotangents(m, ds, O.LossWeights(0.05, 0.0), states)
        c2, _ = O.loss_cotangents(m, ds, O.LossWeights(0.10, 0.0), states)
        for k in (1, 2):
            np.testing.assert_allclose(c2[k] - c0[k], 2.0 * (c1[k] - c0[k]), rtol=1e-9, atol=1e-15)


class TestMetrics:
    def test_nrmse(self):
        ref = np.random.default_rng(0).uniform(size=(5, 5))
        assert O.nrmse(ref, ref) == 0.0
        assert O.nrmse(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 1.0
        with pytest.raises(ValueError):
            O.nrmse(ref, np.ones((5, 5)))

    def test_nrmse_argument_order(self):
        a = np.array([0.0, 1.0, 2.0])
        b = np.array([0.0, 0.5, 1.0])
        assert O.nrmse(a, b) != O.nrmse(b, a)

    def test_psnr(self):
        ref = np.zeros((10, 10))
        assert O.psnr(ref, ref) == math.inf
        pred = np.full((10, 10), 0.1)  # MSE 0.01
        assert O.psnr(pred, ref) == pytest.approx(20.0)

    def test_ssim_identical(self):
        img = np.random.default_rng(0).uniform(size=(12, 12))
        assert O.ssim(img, img) == pytest.approx(1.0, abs=1e-12)

    def test_ssim_constant_bias_luminance_only(self):
        ref = np.full((9, 9), 0.2)
        pred = ref + 0.5
        c1 = 1e-4
        lum = (2 * 0.2 * 0.7 + c1) / (0.2**2 + 0.7**2 + c1)
        assert O.ssim(pred, ref) == pytest.approx(lum, rel=1e-9)
        assert O.ssim(pred, ref) < 1.0

    def test_ssim_small_grid_rejected(self):
        with pytest.raises(ValueError):
            O.ssim(np.zeros((6, 9)), np.zeros((6, 9)))
