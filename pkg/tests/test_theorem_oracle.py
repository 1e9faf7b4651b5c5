"""Anchor-loss decomposition certificates.

The split into a collapsed-label regularizer plus a policy-independent
spread term is checked on hand examples, on random aliased slices, and
under parameter perturbations.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as hst

from p2prl import nn
from p2prl.theorem_oracle import (
    AliasedSlice,
    BoundError,
    DecompositionError,
    bound_check,
    slice_from_actions,
    slice_stats,
    verify_decomposition,
)

LO = np.array([-0.7, -0.7])
HI = np.array([0.7, 0.7])


def make_policy(seed=0, obs_dim=4, dtype=np.float64):
    return nn.policy_init(np.random.default_rng(seed), obs_dim, LO, HI,
                          hidden=(8, 8), dtype=dtype)


def random_slices(seed, n=6, obs_dim=4, p=2, k_max=5, allow_single=False):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        k = int(rng.integers(1 if allow_single else 2, k_max + 1))
        xi = rng.normal(scale=0.8, size=(k, p))
        out.append(AliasedSlice(s=rng.uniform(-2.0, 3.0, obs_dim),
                                xi=xi, u_dagger=0.7 * np.tanh(xi),
                                m=rng.uniform(0.0, 1.0, k)))
    return out


class TestSlice:
    def test_single_label_allowed(self):
        sl = AliasedSlice(s=np.zeros(4), xi=[[0.1, 0.2]],
                          u_dagger=[[0.05, 0.1]], m=[1.0])
        assert sl.count == 1

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            AliasedSlice(s=np.zeros(4), xi=np.zeros((2, 2)),
                         u_dagger=np.zeros((3, 2)), m=np.ones(2))
        with pytest.raises(ValueError):
            AliasedSlice(s=np.zeros(4), xi=np.zeros((2, 2)),
                         u_dagger=np.zeros((2, 2)), m=np.ones(3))

    def test_weights_outside_unit_interval_rejected(self):
        for bad in (-0.1, 1.1):
            with pytest.raises(ValueError):
                AliasedSlice(s=np.zeros(4), xi=np.zeros((2, 2)),
                             u_dagger=np.zeros((2, 2)), m=[0.5, bad])

    def test_from_actions_squares_with_logit_map(self):
        sl = slice_from_actions(np.zeros(4), [[0.35, 0.0]], [1.0], LO, HI)
        assert sl.xi[0, 0] == pytest.approx(np.arctanh(0.5), abs=1e-12)
        assert sl.xi[0, 1] == 0.0


class TestSliceStats:
    def test_all_gates_closed_is_zero_triple(self):
        sl = AliasedSlice(s=np.zeros(4), xi=np.ones((3, 2)),
                          u_dagger=np.zeros((3, 2)), m=np.zeros(3))
        st = slice_stats(sl)
        assert st.gate_mean == 0.0
        np.testing.assert_array_equal(st.anchor_mean, np.zeros(2))
        assert st.spread == 0.0

    def test_single_label_has_no_spread(self):
        sl = AliasedSlice(s=np.zeros(4), xi=[[0.4, -0.9]],
                          u_dagger=[[0.2, -0.5]], m=[0.6])
        st = slice_stats(sl)
        np.testing.assert_allclose(st.anchor_mean, [0.4, -0.9])
        assert st.spread == 0.0

    def test_symmetric_pair_hand_value(self):
        # two fully-gated labels at +a and -a: mean cancels, spread is
        # |a|^2 over the action dimension
        a = np.array([1.0, 2.0])
        sl = AliasedSlice(s=np.zeros(4), xi=np.stack([a, -a]),
                          u_dagger=np.zeros((2, 2)), m=[1.0, 1.0])
        st = slice_stats(sl)
        assert st.gate_mean == 1.0
        np.testing.assert_array_equal(st.anchor_mean, np.zeros(2))
        assert st.spread == pytest.approx(np.dot(a, a) / 2, rel=1e-15)

    def test_one_open_gate_tracks_that_label(self):
        sl = AliasedSlice(s=np.zeros(4), xi=[[0.3, 0.1], [5.0, 5.0]],
                          u_dagger=np.zeros((2, 2)), m=[1.0, 0.0])
        st = slice_stats(sl)
        np.testing.assert_allclose(st.anchor_mean, [0.3, 0.1])
        assert st.spread == pytest.approx(0.0, abs=1e-15)

    def test_spread_nonnegative(self):
        for seed in range(30):
            for sl in random_slices(seed, allow_single=True):
                assert slice_stats(sl).spread >= 0.0

    @given(hst.integers(min_value=0, max_value=10_000))
    @settings(max_examples=60, deadline=None)
    def test_weighted_bias_variance_identity(self, seed):
        # E[w|a-X|^2] = wbar*|a-Xtilde|^2 + E[w|X|^2] - wbar*|Xtilde|^2
        rng = np.random.default_rng(seed)
        k = int(rng.integers(1, 6))
        p = int(rng.integers(1, 4))
        w = rng.uniform(0.0, 1.0, k)
        x = rng.normal(size=(k, p))
        a = rng.normal(size=p)
        lhs = np.mean(w * np.sum((a - x) ** 2, axis=1))
        wbar = w.mean()
        xt = (w[:, None] * x).sum(0) / w.sum() if wbar > 0 else np.zeros(p)
        rhs = (wbar * np.sum((a - xt) ** 2)
               + np.mean(w * np.sum(x * x, axis=1))
               - wbar * np.sum(xt * xt))
        assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


class TestDecomposition:
    def test_random_instance_certifies(self):
        policy = make_policy(seed=1)
        report = verify_decomposition(policy, random_slices(2), beta=10.0,
                                      rng=np.random.default_rng(3))
        assert report.grad_max_err <= 1e-12
        assert report.const_err <= 1e-12
        assert report.invariance_err <= 1e-12
        assert report.loss == pytest.approx(
            report.regularizer + report.constant, abs=1e-12)

    def test_no_aliasing_means_no_constant(self):
        policy = make_policy(seed=4)
        slices = [AliasedSlice(s=np.full(4, float(i)), xi=[[0.2 * i, -0.1]],
                               u_dagger=[[0.1, -0.05]], m=[0.8])
                  for i in range(5)]
        report = verify_decomposition(policy, slices, beta=3.0)
        assert report.constant == 0.0
        assert report.grad_max_err <= 1e-15
        assert report.loss == pytest.approx(report.regularizer, abs=1e-15)

    def test_closed_gates_kill_everything(self):
        policy = make_policy(seed=5)
        slices = random_slices(6)
        for sl in slices:
            sl.m[...] = 0.0
        report = verify_decomposition(policy, slices, beta=10.0)
        assert report.loss == 0.0
        assert report.regularizer == 0.0
        assert report.constant == 0.0

    def test_many_seeds_stay_within_tolerance(self):
        for seed in range(20):
            policy = make_policy(seed=seed)
            verify_decomposition(policy, random_slices(seed + 100),
                                 beta=float(1 + seed % 7))

    def test_narrow_precision_is_caught(self):
        # the identity needs 64-bit arithmetic; a 32-bit policy leaves
        # roundoff far above the stated constant tolerance
        policy = make_policy(seed=6, dtype=np.float32)
        with pytest.raises(DecompositionError):
            verify_decomposition(policy, random_slices(7, n=10), beta=10.0)

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            verify_decomposition(make_policy(), [], beta=1.0)
        with pytest.raises(ValueError):
            verify_decomposition(make_policy(), random_slices(8), beta=-1.0)


class TestBound:
    def test_random_suite_satisfies_bound(self):
        for seed in range(50):
            policy = make_policy(seed=seed)
            report = bound_check(policy, random_slices(seed + 500), beta=5.0)
            assert report.regularizer <= report.bound + 1e-12

    def test_single_fully_gated_slice_is_tight(self):
        policy = make_policy(seed=9)
        sl = AliasedSlice(s=np.ones(4), xi=[[0.5, -0.2]],
                          u_dagger=[[0.3, -0.1]], m=[1.0])
        report = bound_check(policy, [sl], beta=2.0)
        assert report.regularizer == pytest.approx(report.bound, rel=1e-12)

    def test_partial_gates_leave_slack(self):
        policy = make_policy(seed=10)
        slices = random_slices(11)
        for sl in slices:
            sl.m[...] = np.clip(sl.m, 0.0, 0.6)
        report = bound_check(policy, slices, beta=4.0)
        assert report.regularizer < report.bound

    def test_violation_raises(self):
        policy = make_policy(seed=12)
        with pytest.raises(BoundError):
            bound_check(policy, random_slices(13), beta=5.0, tol=-1e9)
