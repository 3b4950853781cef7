"""Oracle tests for the invariant kernels and their Monte Carlo estimators.

The exact-kernel oracles below are written from scratch with raw numpy
(explicit loops over orbit elements) so they cannot share a bug with the
vectorised implementations.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invgp.augment import AffineBounds, AugmentationSampler, OrbitSpec
from invgp.kernels import (
    InvariantKernelSpec,
    NotFiniteOrbit,
    RbfParams,
    SampleSet,
    TooFewSamples,
    double_estimate,
    draw_sample_set,
    k_rbf,
    k_rbf_matrix,
    kf_exact,
    kfu_estimate,
    kfu_exact,
)
from invgp.numcore import DimensionMismatch, RngStream, draw_array


V, L = 1.3, 0.8


def rbf_direct(a, b, v=V, l=L):
    return v * np.exp(-np.sum((np.asarray(a) - np.asarray(b)) ** 2) / (2 * l * l))


def rot2(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def orbit4(x):
    return [rot2(np.pi * p / 2) @ np.asarray(x, dtype=float) for p in range(4)]


def spec4(S=2):
    sampler = AugmentationSampler.finite_orbit(OrbitSpec.rotation_grid(4))
    return InvariantKernelSpec(RbfParams(V, L), sampler, S)


class TestKRbf:
    def test_same_point_gives_variance(self):
        p = RbfParams(2.5, 1.7)
        assert k_rbf([0.3, -1.0], [0.3, -1.0], p) == pytest.approx(2.5)

    def test_unit_distance_unit_params(self):
        p = RbfParams(1.0, 1.0)
        assert k_rbf([0.0, 0.0], [1.0, 0.0], p) == pytest.approx(0.606531, abs=1e-6)

    def test_far_points_decay_to_zero(self):
        p = RbfParams(1.0, 1.0)
        assert k_rbf([0.0], [40.0], p) < 1e-300

    def test_matches_direct_formula_on_random_pairs(self):
        rng = np.random.default_rng(2)
        p = RbfParams(V, L)
        for _ in range(20):
            a, b = rng.standard_normal((2, 3))
            assert k_rbf(a, b, p) == pytest.approx(rbf_direct(a, b), rel=1e-12)

    def test_dimension_mismatch_raises(self):
        with pytest.raises(DimensionMismatch):
            k_rbf([1.0, 2.0], [1.0, 2.0, 3.0], RbfParams())

    def test_per_dimension_lengthscales(self):
        p = RbfParams(1.0, [1.0, 2.0])
        a, b = np.array([0.0, 0.0]), np.array([1.0, 2.0])
        expected = np.exp(-0.5 * (1.0 / 1.0 + 4.0 / 4.0))
        assert k_rbf(a, b, p) == pytest.approx(expected, rel=1e-12)

    def test_gram_matrix_batched_inputs(self):
        rng = np.random.default_rng(4)
        X = rng.standard_normal((3, 5, 2))
        Y = rng.standard_normal((3, 4, 2))
        K = k_rbf_matrix(X, Y, RbfParams(V, L))
        assert K.shape == (3, 5, 4)
        assert K[1, 2, 3] == pytest.approx(rbf_direct(X[1, 2], Y[1, 3]), rel=1e-12)


class TestExactKernels:
    def test_single_point_orbit_reduces_to_base_kernel(self):
        spec = InvariantKernelSpec(
            RbfParams(V, L),
            AugmentationSampler.finite_orbit(OrbitSpec.explicit([lambda v: v])),
            S=2,
        )
        x, y = np.array([0.4, -0.2]), np.array([1.0, 0.7])
        assert kf_exact(x, y, spec) == pytest.approx(rbf_direct(x, y), rel=1e-12)
        assert kfu_exact(x, y, spec) == pytest.approx(rbf_direct(x, y), rel=1e-12)

    def test_kf_matches_sixteen_term_enumeration(self):
        x, y = np.array([0.9, -0.3]), np.array([-0.5, 1.2])
        brute = np.mean([[rbf_direct(a, b) for b in orbit4(y)] for a in orbit4(x)])
        assert kf_exact(x, y, spec4()) == pytest.approx(brute, rel=1e-12)

    def test_kfu_matches_four_term_enumeration(self):
        x, z = np.array([0.9, -0.3]), np.array([0.2, 0.6])
        brute = np.mean([rbf_direct(a, z) for a in orbit4(x)])
        assert kfu_exact(x, z, spec4()) == pytest.approx(brute, rel=1e-12)

    def test_strict_invariance_under_every_orbit_map(self):
        spec = spec4()
        x, y = np.array([1.1, 0.4]), np.array([-0.7, 0.3])
        base = kf_exact(x, y, spec)
        for p in range(4):
            assert kf_exact(rot2(np.pi * p / 2) @ x, y, spec) == pytest.approx(
                base, abs=1e-12
            )

    def test_kfu_invariant_in_first_slot(self):
        spec = spec4()
        x, z = np.array([0.8, -0.6]), np.array([0.1, 0.9])
        assert kfu_exact(rot2(np.pi / 2) @ x, z, spec) == pytest.approx(
            kfu_exact(x, z, spec), abs=1e-12
        )

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-3, 3), min_size=4, max_size=4))
    def test_swap_invariance_property(self, vals):
        swap_spec = InvariantKernelSpec(
            RbfParams(V, L),
            AugmentationSampler.finite_orbit(OrbitSpec.coordinate_swap()),
            S=2,
        )
        x, y = np.array(vals[:2]), np.array(vals[2:])
        assert kf_exact(x, y[::-1].copy(), swap_spec) == pytest.approx(
            kf_exact(x, y, swap_spec), abs=1e-12
        )

    def test_psd_on_random_points(self):
        rng = np.random.default_rng(8)
        spec = spec4()
        pts = rng.standard_normal((10, 2))
        gram = np.array([[kf_exact(a, b, spec) for b in pts] for a in pts])
        assert np.linalg.eigvalsh(gram).min() > -1e-8

    def test_continuous_sampler_rejected(self):
        sampler = AugmentationSampler.affine(AffineBounds(halfwidth=0.1),
                                             image_shape=(2, 1))
        spec = InvariantKernelSpec(RbfParams(), sampler, S=2)
        with pytest.raises(NotFiniteOrbit):
            kf_exact(np.zeros(2), np.zeros(2), spec)


class TestSampleSet:
    def test_without_replacement_requires_orbit_size(self):
        with pytest.raises(ValueError):
            SampleSet(np.zeros(2), np.zeros((2, 2)), "without_replacement")

    def test_oversized_sample_rejected(self):
        with pytest.raises(ValueError):
            SampleSet(np.zeros(2), np.zeros((5, 2)), "without_replacement", P=4)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            SampleSet(np.zeros(2), np.zeros((2, 2)), "bootstrap")

    def test_draw_sample_set_modes(self):
        sampler = AugmentationSampler.finite_orbit(OrbitSpec.rotation_grid(4))
        s = draw_sample_set(np.array([1.0, 0.0]), sampler, 2, RngStream(0, ("a",)))
        assert s.mode == "without_replacement" and s.P == 4
        s2 = draw_sample_set(np.array([1.0, 0.0]), sampler, 2,
                             RngStream(0, ("a",)), replace=True)
        assert s2.mode == "iid"

    def test_spec_requires_at_least_two_samples(self):
        with pytest.raises(ValueError):
            spec4(S=1)


class TestKfuEstimate:
    def test_zero_halfwidth_estimator_has_zero_variance(self):
        rng = np.random.default_rng(10)
        img = rng.uniform(0.2, 0.8, (6, 6))
        x = img.ravel()
        sampler = AugmentationSampler.affine(
            AffineBounds(centre=np.zeros(6), halfwidth=0.0), image_shape=(6, 6))
        base = RbfParams(1.0, 3.0)
        Z = rng.standard_normal((3, 36))
        a = kfu_estimate(draw_sample_set(x, sampler, 4, RngStream(1, ("u",))), Z, base)
        b = kfu_estimate(draw_sample_set(x, sampler, 4, RngStream(2, ("v",))), Z, base)
        np.testing.assert_allclose(a, b, atol=1e-12)
        np.testing.assert_allclose(a, k_rbf_matrix(x[None, :], Z, base)[0], atol=1e-10)

    def test_full_orbit_draw_equals_exact(self):
        spec = spec4()
        x = np.array([0.7, -0.4])
        Z = np.array([[0.2, 0.5], [-1.0, 0.3]])
        s = draw_sample_set(x, spec.sampler, 4, RngStream(3, ("f",)))
        est = kfu_estimate(s, Z, spec.base)
        exact = [kfu_exact(x, z, spec) for z in Z]
        np.testing.assert_allclose(est, exact, rtol=1e-12)

    def test_unbiased_at_partial_sampling(self):
        # mean over many S=2 draws approaches kfu_exact within 3 SE
        spec = spec4()
        x = np.array([0.9, -0.3])
        Z = np.array([[0.2, 0.6], [-0.8, 0.1], [1.5, 0.4]])
        R = 100_000
        from invgp.augment import draw_batch

        X = np.broadcast_to(x, (R, 2))
        aug = draw_batch(X, spec.sampler, 2, RngStream(17, ("mc",)))
        K = k_rbf_matrix(aug.reshape(-1, 2), Z, spec.base).reshape(R, 2, 3)
        ests = K.mean(axis=1)
        exact = np.array([kfu_exact(x, z, spec) for z in Z])
        se = ests.std(axis=0, ddof=1) / np.sqrt(R)
        assert np.all(np.abs(ests.mean(axis=0) - exact) < 3 * se)

    def test_matches_op_on_individual_sets(self):
        spec = spec4()
        x = np.array([0.9, -0.3])
        Z = np.array([[0.2, 0.6], [-0.8, 0.1], [1.5, 0.4]])
        for seed in range(5):
            s = draw_sample_set(x, spec.sampler, 2, RngStream(seed, ("one",)))
            est = kfu_estimate(s, Z, spec.base)
            manual = np.mean(
                [[rbf_direct(xa, z) for z in Z] for xa in s.augmented], axis=0)
            np.testing.assert_allclose(est, manual, rtol=1e-12)


class TestDoubleEstimate:
    def test_constant_pair_function_iid_exact(self):
        s = SampleSet(np.zeros(2), np.zeros((3, 2)), "iid")
        assert double_estimate(s, np.full((3, 3), 2.7)) == pytest.approx(2.7)

    def test_too_few_samples(self):
        s = SampleSet(np.zeros(2), np.zeros((1, 2)), "iid")
        with pytest.raises(TooFewSamples):
            double_estimate(s, np.ones((1, 1)))

    def test_full_orbit_without_replacement_recovers_double_sum(self):
        spec = spec4()
        x = np.array([0.6, -0.9])
        s = draw_sample_set(x, spec.sampler, 4, RngStream(5, ("w",)))
        r = k_rbf_matrix(s.augmented, s.augmented, spec.base)
        target = np.mean([[rbf_direct(a, b) for b in orbit4(x)] for a in orbit4(x)])
        assert double_estimate(s, r) == pytest.approx(target, rel=1e-12)

    @pytest.mark.parametrize("replace", [False, True], ids=["wr", "iid"])
    def test_unbiased_for_kf_diagonal(self, replace):
        spec = spec4()
        x = np.array([0.9, -0.3])
        exact = kf_exact(x, x, spec)
        R = 20_000
        vals = np.empty(R)
        root = RngStream(23 if replace else 29, ("rep",))
        for i in range(R):
            s = draw_sample_set(x, spec.sampler, 2, root.child(str(i)), replace=replace)
            r = k_rbf_matrix(s.augmented, s.augmented, spec.base)
            vals[i] = double_estimate(s, r)
        se = vals.std(ddof=1) / np.sqrt(R)
        assert abs(vals.mean() - exact) < 3 * se

    def test_variance_decreases_with_sample_count(self):
        # fixed case: orbit of size 8, estimator of kf(x,x)
        sampler = AugmentationSampler.finite_orbit(OrbitSpec.rotation_grid(8))
        base = RbfParams(V, L)
        x = np.array([1.0, 0.4])
        mats = [rot2(2 * np.pi * p / 8) for p in range(8)]
        r = np.array([[rbf_direct(m @ x, mm @ x) for mm in mats] for m in mats])
        R = 4000
        variances = []
        for S in (2, 4, 8):
            u = draw_array(RngStream(31, (f"s{S}",)), "uniform01", (R, 8))
            idx = np.argsort(u, axis=1)[:, :S]
            pairs = r[idx[:, :, None], idx[:, None, :]]
            diag = pairs[:, np.arange(S), np.arange(S)].sum(axis=1)
            off = pairs.sum(axis=(1, 2)) - diag
            est = off * (8 - 1) / (8 * S * (S - 1)) + diag / (8 * S)
            variances.append(est.var(ddof=1))
        assert variances[0] > variances[1] > variances[2] - 1e-12
        assert variances[2] < 1e-20  # full orbit is deterministic

    def test_graph_mode_produces_node(self):
        from invgp import autodiff as ad

        base = RbfParams(V, L)
        s = SampleSet(np.zeros(2), np.array([[0.1, 0.2], [0.3, -0.1]]), "iid")
        ctx = ad.GradientContext()
        r = k_rbf_matrix(s.augmented, s.augmented, base, ctx)
        out = double_estimate(s, r)
        assert isinstance(out, ad.Node)
        grads = ad.backward(out, ctx)
        assert "rbf/variance" in grads and "rbf/lengthscale" in grads
