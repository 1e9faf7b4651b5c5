"""Network stack: init, manual backprop vs central differences, the
squashed-Gaussian sampler's density, Adam, and Polyak averaging."""

import numpy as np
import pytest

from p2prl import nn


def tiny_mlp(seed=0, sizes=(4, 8, 8, 1), dtype=np.float64):
    rng = np.random.default_rng(seed)
    return nn.mlp_init(rng, sizes, dtype=dtype)


def tiny_policy(seed=0, obs_dim=4, dtype=np.float64, hidden=(8, 8)):
    rng = np.random.default_rng(seed)
    return nn.policy_init(rng, obs_dim, lo=[-0.7, -0.7], hi=[0.7, 0.7],
                          hidden=hidden, dtype=dtype)


class TestInit:
    def test_shapes_and_names(self):
        params = tiny_mlp()
        assert sorted(params) == ["b0", "b1", "b2", "w0", "w1", "w2"]
        assert params["w0"].shape == (4, 8)
        assert params["w2"].shape == (8, 1)
        assert np.all(params["b1"] == 0)

    def test_fan_in_bound(self):
        params = tiny_mlp(sizes=(16, 8, 8, 2))
        assert np.max(np.abs(params["w0"])) <= 1.0 / 4.0
        assert np.max(np.abs(params["w1"])) <= 1.0 / np.sqrt(8)

    def test_policy_final_layer_damped(self):
        pol = tiny_policy()
        # everything upstream of the heads keeps the plain fan-in scale
        assert np.max(np.abs(pol.params["w2"])) <= 0.01 / np.sqrt(8)
        assert np.max(np.abs(pol.params["w1"])) > 0.01

    def test_seed_determinism(self):
        a, b = tiny_mlp(seed=7), tiny_mlp(seed=7)
        for k in a:
            assert a[k].tobytes() == b[k].tobytes()

    def test_dtype_toggle(self):
        p32 = tiny_mlp(dtype=np.float32)
        y, _ = nn.mlp_forward(p32, np.zeros((3, 4)))
        assert y.dtype == np.float32
        y64, _ = nn.mlp_forward(tiny_mlp(), np.zeros((3, 4)))
        assert y64.dtype == np.float64

    def test_critics_targets_start_equal(self):
        crit = nn.critics_init(np.random.default_rng(3), 4, 2, hidden=(8, 8),
                               dtype=np.float64)
        for k in crit.q1:
            assert crit.q1[k].tobytes() == crit.t1[k].tobytes()
            assert crit.q2[k].tobytes() == crit.t2[k].tobytes()
        assert crit.q1["w0"].tobytes() != crit.q2["w0"].tobytes()
        crit.q1["w0"] += 1.0
        assert crit.q1["w0"].tobytes() != crit.t1["w0"].tobytes()


class TestMlpBackward:
    def test_matches_finite_differences(self):
        params = tiny_mlp(seed=11)
        rng = np.random.default_rng(12)
        x = rng.normal(size=(5, 4))
        v = rng.normal(size=(5, 1))

        def loss(p):
            y, _ = nn.mlp_forward(p, x)
            return float(np.sum(v * y) + 0.5 * np.sum(y * y))

        y, cache = nn.mlp_forward(params, x)
        grads, _ = nn.mlp_backward(params, cache, v + y)
        fd = nn.finite_difference_gradient(loss, params)
        assert nn.gradient_rel_error(grads, fd) <= 1e-4

    def test_input_gradient(self):
        params = tiny_mlp(seed=21)
        x = np.random.default_rng(22).normal(size=(3, 4))
        y, cache = nn.mlp_forward(params, x)
        _, dx = nn.mlp_backward(params, cache, np.ones_like(y))
        h = 1e-6
        for i in range(3):
            for j in range(4):
                xp, xm = x.copy(), x.copy()
                xp[i, j] += h
                xm[i, j] -= h
                num = (nn.mlp_forward(params, xp)[0].sum()
                       - nn.mlp_forward(params, xm)[0].sum()) / (2 * h)
                assert abs(dx[i, j] - num) <= 1e-6 * max(1.0, abs(num))

    def test_zero_network_bias_slope(self):
        # all-zero weights: the only nonzero gradient of mean(y) is the
        # final bias, whose slope is exactly one
        params = {k: np.zeros_like(v) for k, v in tiny_mlp().items()}
        x = np.array([[1.0, -1.0, 1.0, -1.0], [-1.0, 1.0, -1.0, 1.0]])
        y, cache = nn.mlp_forward(params, x)
        grads, _ = nn.mlp_backward(params, cache, np.full_like(y, 0.5))
        assert grads["b2"][0] == 1.0
        for k in ("w0", "w1", "w2", "b0", "b1"):
            assert np.all(grads[k] == 0)

    def test_gradient_linearity(self):
        params = tiny_mlp(seed=31)
        x = np.random.default_rng(32).normal(size=(4, 4))
        _, cache = nn.mlp_forward(params, x)
        grads, _ = nn.mlp_backward(params, cache, np.ones((4, 1)))
        rng = np.random.default_rng(33)
        da = {k: rng.normal(size=v.shape) for k, v in params.items()}
        db = {k: rng.normal(size=v.shape) for k, v in params.items()}
        dot = lambda g, d: sum(float(np.sum(g[k] * d[k])) for k in g)
        both = {k: da[k] + db[k] for k in da}
        assert abs(dot(grads, both) - dot(grads, da) - dot(grads, db)) <= 1e-9


class TestSampler:
    def test_zero_noise_zero_mean_hits_midpoint(self):
        pol = tiny_policy()
        for k in pol.params:
            pol.params[k][:] = 0.0
        rec = nn.policy_sample(pol, np.zeros((3, 4)), np.zeros((3, 2)))
        assert np.all(rec.u == 0.0)  # midpoint of [-0.7, 0.7]
        assert np.all(np.isfinite(rec.log_prob))

    def test_bound_never_attained(self):
        pol = tiny_policy()
        pol.params["b2"][:2] = 60.0  # drive the mean head deep into saturation
        rec = nn.policy_sample(pol, np.zeros((4, 4)), np.zeros((4, 2)))
        assert np.all(rec.u < 0.7)
        assert np.all(rec.u > 0.69)
        assert np.all(np.isfinite(rec.log_prob))

    def test_million_samples_strictly_interior(self):
        pol = tiny_policy(seed=5)
        n = 1_000_000
        s = np.tile(np.array([[0.3, -0.2, 0.1, 0.4]]), (n, 1))
        noise = np.random.default_rng(6).normal(size=(n, 2))
        rec = nn.policy_sample(pol, s, noise)
        assert np.all(rec.u > -0.7) and np.all(rec.u < 0.7)
        assert np.all(np.isfinite(rec.log_prob))

    def test_histogram_matches_density(self):
        # one action dimension; bin probabilities from 1e6 draws against
        # the integral of exp(log_prob) over each bin
        rng = np.random.default_rng(8)
        pol = nn.policy_init(rng, 2, lo=[-0.7], hi=[0.7], hidden=(8, 8),
                             dtype=np.float64)
        pol.params["b2"][:] = [0.15, -0.4]  # mean and log-std heads
        n = 1_000_000
        s = np.tile(np.array([[0.5, -0.5]]), (n, 1))
        noise = np.random.default_rng(9).normal(size=(n, 1))
        u = nn.policy_sample(pol, s, noise).u[:, 0]

        mu, log_std, _, _ = nn.policy_forward(pol, s[:1])
        sigma = float(np.exp(log_std[0, 0]))
        edges = np.linspace(-0.7 + 1e-4, 0.7 - 1e-4, 101)
        counts, _ = np.histogram(u, bins=edges)
        for lo_e, hi_e, c in zip(edges[:-1], edges[1:], counts):
            grid = np.linspace(lo_e, hi_e, 21)
            xi = np.arctanh(grid / 0.7)
            eps = (xi - float(mu[0, 0])) / sigma
            rec = nn.policy_sample(pol, s[: grid.size], eps[:, None])
            prob = np.trapezoid(np.exp(rec.log_prob), grid)
            assert abs(c / n - prob) <= 1e-3

    def test_log_std_clamped(self):
        pol = tiny_policy()
        pol.params["b2"][2:] = [-500.0, 500.0]
        _, log_std, mask, _ = nn.policy_forward(pol, np.zeros((1, 4)))
        assert log_std[0, 0] == nn.LOG_STD_MIN
        assert log_std[0, 1] == nn.LOG_STD_MAX
        assert not mask[0, 0] and not mask[0, 1]

    def test_mean_action_deterministic(self):
        pol = tiny_policy(seed=13)
        s = np.random.default_rng(14).normal(size=(6, 4))
        a = nn.policy_mean_action(pol, s)
        b = nn.policy_mean_action(pol, s)
        assert a.tobytes() == b.tobytes()
        assert np.all(np.abs(a) < 0.7)


class TestSampleBackward:
    def test_actor_style_loss_matches_fd(self):
        # L = mean(alpha*log_prob - sum(v*u)) exercises both chains
        obs = np.random.default_rng(41).normal(size=(5, 4))
        noise = np.random.default_rng(42).normal(size=(5, 2))
        v = np.random.default_rng(43).normal(size=(5, 2))
        alpha = 0.2
        pol = tiny_policy(seed=40)

        def loss(params):
            p = nn.Policy(params=params, lo=pol.lo, hi=pol.hi)
            rec = nn.policy_sample(p, obs, noise)
            return float(np.mean(alpha * rec.log_prob)
                         - np.sum(v * rec.u) / len(obs))

        rec = nn.policy_sample(pol, obs, noise)
        grads, _ = nn.sample_backward(pol, rec, d_u=-v / len(obs),
                                      d_log_prob=np.full(5, alpha / 5))
        fd = nn.finite_difference_gradient(loss, pol.params)
        assert nn.gradient_rel_error(grads, fd) <= 1e-4

    def test_mu_only_path(self):
        # gradient w.r.t. the mean head alone, via d_u with zero noise
        pol = tiny_policy(seed=45)
        obs = np.random.default_rng(46).normal(size=(3, 4))
        target = np.array([0.2, -0.1])

        def loss(params):
            p = nn.Policy(params=params, lo=pol.lo, hi=pol.hi)
            rec = nn.policy_sample(p, obs, np.zeros((3, 2)))
            return float(np.sum((rec.u - target) ** 2))

        rec = nn.policy_sample(pol, obs, np.zeros((3, 2)))
        grads, _ = nn.sample_backward(pol, rec, d_u=2.0 * (rec.u - target),
                                      d_log_prob=np.zeros(3))
        fd = nn.finite_difference_gradient(loss, pol.params)
        assert nn.gradient_rel_error(grads, fd) <= 1e-4


class TestCriticBackward:
    def test_action_gradient_matches_fd(self):
        crit = nn.critics_init(np.random.default_rng(51), 4, 2,
                               hidden=(8, 8), dtype=np.float64)
        rng = np.random.default_rng(52)
        s = rng.normal(size=(4, 4))
        u = rng.normal(scale=0.3, size=(4, 2))
        q, cache = nn.critic_forward(crit.q1, s, u)
        _, dx = nn.mlp_backward(crit.q1, cache, np.ones((4, 1)))
        du = dx[:, 4:]
        h = 1e-6
        for i in range(4):
            for j in range(2):
                up, dn = u.copy(), u.copy()
                up[i, j] += h
                dn[i, j] -= h
                num = (nn.critic_forward(crit.q1, s, up)[0].sum()
                       - nn.critic_forward(crit.q1, s, dn)[0].sum()) / (2 * h)
                assert abs(du[i, j] - num) <= 1e-5 * max(1.0, abs(num))


class TestAdam:
    def test_two_steps_reference(self):
        params = {"p": np.array([1.0])}
        st = nn.adam_init(params, lr=0.1)
        m = v = 0.0
        p_ref = 1.0
        for step, g in enumerate([0.5, -0.25], start=1):
            nn.adam_step(st, params, {"p": np.array([g])})
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            p_ref -= 0.1 * (m / (1 - 0.9 ** step)) / (
                np.sqrt(v / (1 - 0.999 ** step)) + 1e-8)
        assert params["p"][0] == pytest.approx(p_ref, abs=1e-15)
        assert st.step == 2

    def test_moments_finite_and_dtype_kept(self):
        params = tiny_mlp(dtype=np.float32)
        st = nn.adam_init(params)
        grads = {k: np.ones_like(p) for k, p in params.items()}
        for _ in range(5):
            nn.adam_step(st, params, grads)
        for k in params:
            assert params[k].dtype == np.float32
            assert np.all(np.isfinite(st.m[k]))
            assert np.all(np.isfinite(st.v[k]))

    def test_update_determinism(self):
        runs = []
        for _ in range(2):
            params = tiny_mlp(seed=61)
            st = nn.adam_init(params)
            g_rng = np.random.default_rng(62)
            for _ in range(10):
                grads = {k: g_rng.normal(size=p.shape)
                         for k, p in params.items()}
                nn.adam_step(st, params, grads)
            runs.append({k: v.tobytes() for k, v in params.items()})
        assert runs[0] == runs[1]


class TestPolyak:
    def test_rho_one_freezes(self):
        t, o = tiny_mlp(seed=71), tiny_mlp(seed=72)
        before = {k: v.copy() for k, v in t.items()}
        nn.polyak_update(t, o, rho=1.0)
        for k in t:
            assert t[k].tobytes() == before[k].tobytes()

    def test_rho_zero_copies(self):
        t, o = tiny_mlp(seed=71), tiny_mlp(seed=72)
        nn.polyak_update(t, o, rho=0.0)
        for k in t:
            assert t[k].tobytes() == o[k].tobytes()

    def test_geometric_decay(self):
        t = {"p": np.array([1.0])}
        o = {"p": np.array([0.0])}
        for _ in range(10):
            nn.polyak_update(t, o, rho=0.5)
        assert t["p"][0] == 2.0 ** -10

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            nn.polyak_update({"p": np.zeros(2)}, {"q": np.zeros(2)}, 0.5)
        with pytest.raises(ValueError):
            nn.polyak_update({"p": np.zeros(2)}, {"p": np.zeros(3)}, 0.5)


class TestPolicyValidation:
    def test_bad_bounds_rejected(self):
        with pytest.raises(ValueError):
            nn.Policy(params=tiny_mlp(), lo=np.array([0.7]),
                      hi=np.array([-0.7]))
