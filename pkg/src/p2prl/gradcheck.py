"""Finite-difference certification of every training loss.

Each check runs the real update function on a 64-bit width-8 network,
recovers its gradient from the first Adam moment (one step from a fresh
optimizer leaves m = (1 - beta1) * g), and compares against central
differences of an independently written loss evaluation.
"""

from __future__ import annotations

import copy

import numpy as np

from . import nn
from .p2p_sac import (
    Batch,
    actor_update,
    critic_update,
    logit_anchor,
    output_pseudo_label,
    planner_logit,
    sac_init,
    soft_targets,
)

LOSSES = ("critic", "actor", "anchor", "temperature", "pseudo-label")


def _state_and_batch(hidden, batch_size, seed):
    lo, hi = np.array([-0.7, -0.7]), np.array([0.7, 0.7])
    state = sac_init(np.random.default_rng(seed), obs_dim=4, lo=lo, hi=hi,
                     hidden=hidden, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    s = rng.uniform(-2.0, 3.0, (batch_size, 4))
    h = (rng.random(batch_size) < 0.8).astype(float)
    batch = Batch(
        s=s,
        u=rng.uniform(-0.7, 0.7, (batch_size, 2)),
        r=rng.normal(size=batch_size),
        s_next=s + rng.normal(scale=0.05, size=(batch_size, 4)),
        u_dagger=rng.uniform(-0.5, 0.5, (batch_size, 2)) * h[:, None],
        h=h,
        done=(rng.random(batch_size) < 0.15).astype(float),
    )
    return state, batch, lo, hi


def _from_adam(opt) -> dict:
    return {k: v / (1.0 - opt.beta1) for k, v in opt.m.items()}


def certify_losses(hidden=(8, 8), batch_size=12, seed=0,
                   h: float = 1e-5) -> dict:
    """Relative finite-difference error for each loss, keyed by name."""
    state, batch, lo, hi = _state_and_batch(hidden, batch_size, seed)
    errors = {}

    # critic regression against a frozen soft target
    y = soft_targets(state, batch, np.random.default_rng(101))
    worked = copy.deepcopy(state)
    critic_update(worked, batch, np.random.default_rng(101))
    worst = 0.0
    for name in ("q1", "q2"):
        def critic_loss(params):
            q, _ = nn.critic_forward(params, batch.s, batch.u)
            return float(np.mean((q - y) ** 2))

        fd = nn.finite_difference_gradient(
            critic_loss, copy.deepcopy(getattr(state.critics, name)), h=h)
        analytic = _from_adam(getattr(worked, f"opt_{name}"))
        worst = max(worst, nn.gradient_rel_error(analytic, fd))
    errors["critic"] = worst

    # entropy-regularized actor objective
    noise = np.random.default_rng(102).standard_normal((batch_size, 2))
    q1p = copy.deepcopy(state.critics.q1)
    q2p = copy.deepcopy(state.critics.q2)
    alpha = state.alpha

    def actor_loss(params):
        pol = nn.Policy(params=params, lo=lo, hi=hi)
        rec = nn.policy_sample(pol, batch.s, noise)
        qa, _ = nn.critic_forward(q1p, batch.s, rec.u)
        qb, _ = nn.critic_forward(q2p, batch.s, rec.u)
        return float(np.mean(alpha * rec.log_prob - np.minimum(qa, qb)))

    worked = copy.deepcopy(state)
    actor_update(worked, batch, np.random.default_rng(102))
    fd = nn.finite_difference_gradient(
        actor_loss, copy.deepcopy(state.policy.params), h=h)
    errors["actor"] = nn.gradient_rel_error(_from_adam(worked.opt_policy), fd)

    # logit-space anchor
    xi = planner_logit(batch.u_dagger, lo, hi)
    w = np.random.default_rng(103).uniform(0.0, 3.0, batch_size) * batch.h
    _, analytic = logit_anchor(state.policy, batch.s, xi, w)

    def anchor_loss(params):
        pol = nn.Policy(params=params, lo=lo, hi=hi)
        return logit_anchor(pol, batch.s, xi, w)[0]

    fd = nn.finite_difference_gradient(
        anchor_loss, copy.deepcopy(state.policy.params), h=h)
    errors["anchor"] = nn.gradient_rel_error(analytic, fd)

    # temperature step toward the entropy target
    mean_lp = -0.41
    target = state.target_entropy
    analytic = {"log_alpha": np.asarray(-state.alpha * (mean_lp + target))}

    def temperature_loss(params):
        return float(-np.exp(params["log_alpha"]) * (mean_lp + target))

    fd = nn.finite_difference_gradient(
        temperature_loss, {"log_alpha": state.log_alpha["log_alpha"].copy()},
        h=h)
    errors["temperature"] = nn.gradient_rel_error(analytic, fd)

    # output-space pseudo-label
    _, analytic = output_pseudo_label(state.policy, batch.s,
                                      batch.u_dagger, w)

    def pseudo_loss(params):
        pol = nn.Policy(params=params, lo=lo, hi=hi)
        return output_pseudo_label(pol, batch.s, batch.u_dagger, w)[0]

    fd = nn.finite_difference_gradient(
        pseudo_loss, copy.deepcopy(state.policy.params), h=h)
    errors["pseudo-label"] = nn.gradient_rel_error(analytic, fd)

    return errors
