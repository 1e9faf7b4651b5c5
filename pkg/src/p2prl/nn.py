"""Hand-rolled numpy networks: MLPs, a squashed-Gaussian policy head, twin
critics with Polyak targets, Adam, and a finite-difference gradient oracle.

Everything is explicit reverse-mode: each forward returns the cache its
backward needs, and every loss in the training code is certified against
central differences in 64-bit mode.  No autodiff framework, by design --
the whole parameter space is a handful of named arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_LOG_2PI = float(np.log(2.0 * np.pi))


# ------------------------------------------------------------------ MLP

def _n_layers(params: dict) -> int:
    # every dict here is w0..w{n-1} plus b0..b{n-1}
    return len(params) // 2


def mlp_init(rng: np.random.Generator, sizes, dtype=np.float32,
             final_scale: float = 1.0) -> dict:
    """Fan-in uniform init; final layer weights scaled by final_scale."""
    params = {}
    last = len(sizes) - 2
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        if i == last:
            w = w * final_scale
        params[f"w{i}"] = w.astype(dtype)
        params[f"b{i}"] = np.zeros(fan_out, dtype=dtype)
    return params


def mlp_forward(params: dict, x) -> tuple[np.ndarray, tuple]:
    """Rectified hidden layers, linear output; returns (y, cache)."""
    dtype = params["w0"].dtype
    x = np.asarray(x, dtype=dtype)
    n = _n_layers(params)
    acts = [x]
    pre = []
    h = x
    for i in range(n):
        z = h @ params[f"w{i}"] + params[f"b{i}"]
        pre.append(z)
        h = np.maximum(z, 0) if i < n - 1 else z
        acts.append(h)
    return h, (acts, pre)


def mlp_backward(params: dict, cache, dy) -> tuple[dict, np.ndarray]:
    """Gradients of sum(dy * y) w.r.t. params and the input."""
    acts, pre = cache
    n = _n_layers(params)
    grads = {}
    d = np.asarray(dy, dtype=acts[0].dtype)
    for i in range(n - 1, -1, -1):
        dz = d if i == n - 1 else d * (pre[i] > 0)
        grads[f"w{i}"] = acts[i].T @ dz
        grads[f"b{i}"] = dz.sum(axis=0)
        d = dz @ params[f"w{i}"].T
    return grads, d


# --------------------------------------------------------------- policy

@dataclass
class Policy:
    """Trunk MLP emitting [mean | raw log-std] for a box-bounded action."""
    params: dict
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if self.lo.shape != self.hi.shape or np.any(self.hi <= self.lo):
            raise ValueError("need lo < hi elementwise")
        # the trunk dtype never changes after init, so the typed copies the
        # sampling path needs can be made once
        dtype = self.params["w0"].dtype
        self._center = self.center.astype(dtype)
        self._width = self.width.astype(dtype)
        self._log_width = np.log(self._width)

    @property
    def n_actions(self) -> int:
        return self.lo.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.hi + self.lo)

    @property
    def width(self) -> np.ndarray:
        return 0.5 * (self.hi - self.lo)


def policy_init(rng: np.random.Generator, obs_dim: int, lo, hi,
                hidden=(256, 256), dtype=np.float32) -> Policy:
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    params = mlp_init(rng, (obs_dim, *hidden, 2 * lo.size), dtype,
                      final_scale=0.01)
    return Policy(params=params, lo=lo, hi=hi)


def policy_forward(policy: Policy, s):
    """Returns (mu, log_std, clip_mask, trunk cache)."""
    out, cache = mlp_forward(policy.params, s)
    p = policy.n_actions
    mu = out[:, :p]
    raw = out[:, p:]
    log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    mask = (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)
    return mu, log_std, mask, cache


@dataclass
class SampleRecord:
    """Everything the actor backward pass needs about one sampled batch."""
    u: np.ndarray
    log_prob: np.ndarray
    mu: np.ndarray
    log_std: np.ndarray
    clip_mask: np.ndarray
    sigma: np.ndarray
    xi: np.ndarray
    tanh_xi: np.ndarray
    noise: np.ndarray
    cache: tuple = field(repr=False, default=None)


def policy_sample(policy: Policy, s, noise) -> SampleRecord:
    """Reparameterized draw u = c + w*tanh(mu + sigma*noise).

    The log-density includes the tanh and affine change of variables;
    log(1 - tanh^2 x) is evaluated as 2(log 2 - x - softplus(-2x)) which
    stays finite deep into saturation.  tanh output is nudged off +-1 by a
    few ulps so actions are strictly interior even when saturated.
    """
    mu, log_std, mask, cache = policy_forward(policy, s)
    dtype = mu.dtype
    noise = np.asarray(noise, dtype=dtype)
    sigma = np.exp(log_std)
    xi = mu + sigma * noise
    tiny = 4.0 * np.finfo(dtype).eps
    tanh_xi = np.clip(np.tanh(xi), -1.0 + tiny, 1.0 - tiny)
    u = policy._center + policy._width * tanh_xi
    log1m_t2 = 2.0 * (np.log(2.0) - xi - np.logaddexp(0.0, -2.0 * xi))
    per_dim = (-0.5 * noise * noise - log_std - 0.5 * _LOG_2PI
               - log1m_t2 - policy._log_width)
    return SampleRecord(u=u, log_prob=per_dim.sum(axis=1).astype(dtype),
                        mu=mu, log_std=log_std, clip_mask=mask,
                        sigma=sigma, xi=xi, tanh_xi=tanh_xi, noise=noise,
                        cache=cache)


def sample_backward(policy: Policy, rec: SampleRecord, d_u,
                    d_log_prob) -> tuple[dict, np.ndarray]:
    """Gradients of sum(d_u*u) + sum(d_log_prob*log_prob) w.r.t. params.

    Holding the noise fixed (reparameterization), with t = tanh(xi):
      d log_prob / d xi = 2t        (from the -log(1-t^2) term)
      d u / d xi        = w (1-t^2)
      d xi / d mu = 1,  d xi / d log_std = sigma * noise
    """
    t = rec.tanh_xi
    dtype = rec.mu.dtype
    d_u = np.asarray(d_u, dtype=dtype)
    dlp = np.asarray(d_log_prob, dtype=dtype)[:, None]
    d_xi = dlp * (2.0 * t) + d_u * (policy._width * (1.0 - t * t))
    d_mu = d_xi
    d_log_std = d_xi * (rec.sigma * rec.noise) - dlp
    return policy_head_backward(policy, rec.cache, rec.clip_mask, d_mu,
                                d_log_std)


def policy_mean_action(policy: Policy, s) -> np.ndarray:
    """Deterministic evaluation action: squashed mean head."""
    mu, _, _, _ = policy_forward(policy, s)
    return policy._center + policy._width * np.tanh(mu)


def policy_head_backward(policy: Policy, cache, clip_mask, d_mu,
                         d_log_std) -> tuple[dict, np.ndarray]:
    """Push head gradients through the trunk; returns (grads, d_obs).

    d_log_std is zeroed where the raw head output sat outside the clamp
    (subgradient of clip).
    """
    dtype = policy.params["w0"].dtype
    d_mu = np.asarray(d_mu, dtype=dtype)
    d_log_std = np.asarray(d_log_std, dtype=dtype) * clip_mask
    return mlp_backward(policy.params, cache,
                        np.concatenate([d_mu, d_log_std], axis=1))


# --------------------------------------------------------------- critics

@dataclass
class TwinCritics:
    q1: dict
    q2: dict
    t1: dict
    t2: dict


def critics_init(rng: np.random.Generator, obs_dim: int, act_dim: int,
                 hidden=(256, 256), dtype=np.float32) -> TwinCritics:
    sizes = (obs_dim + act_dim, *hidden, 1)
    q1 = mlp_init(rng, sizes, dtype)
    q2 = mlp_init(rng, sizes, dtype)
    return TwinCritics(q1=q1, q2=q2,
                       t1={k: v.copy() for k, v in q1.items()},
                       t2={k: v.copy() for k, v in q2.items()})


def critic_forward(params: dict, s, u) -> tuple[np.ndarray, tuple]:
    dtype = params["w0"].dtype
    x = np.concatenate([np.asarray(s, dtype=dtype),
                        np.asarray(u, dtype=dtype)], axis=1)
    out, cache = mlp_forward(params, x)
    return out[:, 0], cache


# --------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: dict, lr: float = 3e-4) -> AdamState:
    return AdamState(m={k: np.zeros_like(p) for k, p in params.items()},
                     v={k: np.zeros_like(p) for k, p in params.items()},
                     lr=lr)


def adam_step(state: AdamState, params: dict, grads: dict) -> None:
    """Standard bias-corrected adaptive-moment update, in place."""
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for k in params:
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        num = np.asarray(m / c1)  # 0-d operands collapse to scalars
        num *= state.lr
        den = np.asarray(v / c2)
        np.sqrt(den, out=den)
        den += state.eps
        num /= den
        params[k] -= num


def polyak_update(targets: dict, online: dict, rho: float) -> None:
    """targets <- rho*targets + (1-rho)*online, in place."""
    if targets.keys() != online.keys():
        raise ValueError("parameter name mismatch")
    for k in targets:
        if targets[k].shape != online[k].shape:
            raise ValueError(f"shape mismatch on {k}")
        targets[k] *= rho
        targets[k] += (1.0 - rho) * online[k]


# ------------------------------------------- finite-difference oracle

def finite_difference_gradient(loss_fn, params: dict, h: float = 1e-5) -> dict:
    """Central differences, one coordinate at a time; mutates nothing."""
    grads = {}
    for k in sorted(params):
        p = params[k]
        g = np.zeros_like(p, dtype=np.float64)
        flat = p.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = float(loss_fn(params))
            flat[i] = keep - h
            dn = float(loss_fn(params))
            flat[i] = keep
            gf[i] = (up - dn) / (2.0 * h)
        grads[k] = g
    return grads


def gradient_rel_error(analytic: dict, reference: dict) -> float:
    """max-norm error ratio over all parameter blocks."""
    num = max(float(np.max(np.abs(analytic[k] - reference[k])))
              for k in reference)
    den = max(float(np.max(np.abs(reference[k]))) for k in reference)
    return num / max(den, 1e-8)
