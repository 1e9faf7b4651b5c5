"""Numerical certificates for the anchor-loss decomposition.

When several planner labels alias one observation, the gate-weighted
anchor loss splits into two parts: a regularizer pulling the policy mean
toward the gate-weighted mean label, and a label-spread term the policy
parameters cannot influence.  The functions here evaluate both sides of
that identity on explicit buffer slices and certify gradient equality,
the constant offset, and its parameter independence.

Everything runs under stop-gradient semantics for the gate weights: they
enter as fixed numbers, exactly as the training loop treats them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .p2p_sac import logit_anchor, planner_logit


class DecompositionError(RuntimeError):
    """The split of the anchor loss failed a stated tolerance."""


class BoundError(RuntimeError):
    """The regularizer exceeded its worst-case slice bound."""


# -------------------------------------------------------------- slices

@dataclass(frozen=True)
class AliasedSlice:
    """All planner labels the buffer holds for one observation.

    `xi` are pre-squash label coordinates, `u_dagger` the box actions
    they came from, `m` the gate weights attached to each label.  A
    single-label slice is legal; it just has zero spread.
    """
    s: np.ndarray
    xi: np.ndarray
    u_dagger: np.ndarray
    m: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "s", np.asarray(self.s, dtype=float))
        object.__setattr__(self, "xi", np.atleast_2d(np.asarray(self.xi, dtype=float)))
        object.__setattr__(self, "u_dagger",
                           np.atleast_2d(np.asarray(self.u_dagger, dtype=float)))
        object.__setattr__(self, "m", np.atleast_1d(np.asarray(self.m, dtype=float)))
        if self.xi.shape != self.u_dagger.shape:
            raise ValueError("label arrays disagree in shape")
        if self.m.shape != (self.xi.shape[0],):
            raise ValueError("one gate weight per label required")
        if self.count < 1:
            raise ValueError("a slice needs at least one label")
        if np.any((self.m < 0.0) | (self.m > 1.0)):
            raise ValueError("gate weights live in [0, 1]")

    @property
    def count(self) -> int:
        return self.xi.shape[0]


def slice_from_actions(s, u_dagger, m, lo, hi,
                       margin: float = 1e-3) -> AliasedSlice:
    u = np.atleast_2d(np.asarray(u_dagger, dtype=float))
    return AliasedSlice(s=s, xi=planner_logit(u, lo, hi, margin),
                        u_dagger=u, m=m)


@dataclass(frozen=True)
class SliceStats:
    gate_mean: float
    anchor_mean: np.ndarray   # gate-weighted mean label, zero when gated out
    spread: float             # gate-weighted label variance, per action dim


def slice_stats(sl: AliasedSlice) -> SliceStats:
    p = sl.xi.shape[1]
    gate_mean = float(np.mean(sl.m))
    if gate_mean == 0.0:
        return SliceStats(0.0, np.zeros(p), 0.0)
    if sl.count == 1:
        # one label: the weighted mean is that label, exactly
        return SliceStats(gate_mean, sl.xi[0].copy(), 0.0)
    anchor_mean = (sl.m[:, None] * sl.xi).sum(axis=0) / sl.m.sum()
    # centered form keeps the spread nonnegative in floating point
    centered = sl.xi - anchor_mean
    spread = float(np.mean(sl.m * np.sum(centered * centered, axis=1)) / p)
    return SliceStats(gate_mean, anchor_mean, spread)


# -------------------------------------------------------- verification

@dataclass(frozen=True)
class DecompositionReport:
    loss: float            # anchor loss over all label rows
    regularizer: float     # collapsed-label quadratic
    constant: float        # weighted label spread, policy independent
    grad_max_err: float
    const_err: float
    invariance_err: float


@dataclass(frozen=True)
class BoundReport:
    regularizer: float
    bound: float


def _label_rows(slices):
    s = np.concatenate([np.tile(sl.s, (sl.count, 1)) for sl in slices])
    xi = np.concatenate([sl.xi for sl in slices])
    m = np.concatenate([sl.m for sl in slices])
    return s, xi, m


def _collapsed(policy: nn.Policy, slices, beta: float):
    """Regularizer value and gradient from one row per slice, weighted by
    that slice's share of the buffer times its mean gate."""
    n_rows = sum(sl.count for sl in slices)
    stats = [slice_stats(sl) for sl in slices]
    s = np.stack([sl.s for sl in slices])
    xi = np.stack([st.anchor_mean for st in stats])
    share = np.array([sl.count / n_rows for sl in slices])
    gate = np.array([st.gate_mean for st in stats])
    # logit_anchor divides by its own row count, so scale back up
    w = beta * share * gate * len(slices)
    value, grads = logit_anchor(policy, s, xi, w)
    constant = beta * float(np.sum(share * [st.spread for st in stats]))
    return value, grads, constant


def verify_decomposition(policy: nn.Policy, slices, beta: float,
                         tol_grad: float = 1e-6,
                         tol_const: float = 1e-9,
                         tol_invariance: float = 1e-12,
                         rng: np.random.Generator | None = None,
                         n_perturbations: int = 2) -> DecompositionReport:
    """Certify loss = regularizer + constant, with matching gradients and
    a constant that ignores the policy parameters.

    Raises DecompositionError carrying the worst deviation when any of
    the three tolerances is exceeded.
    """
    if not slices:
        raise ValueError("need at least one slice")
    if beta < 0.0:
        raise ValueError("guidance weight must be nonnegative")
    rng = np.random.default_rng(0) if rng is None else rng
    s, xi, m = _label_rows(slices)
    loss, g_loss = logit_anchor(policy, s, xi, beta * m)
    reg, g_reg, constant = _collapsed(policy, slices, beta)

    grad_max_err = max(float(np.max(np.abs(g_loss[k] - g_reg[k])))
                       for k in g_loss)
    const_err = abs(loss - reg - constant)

    invariance_err = 0.0
    for _ in range(n_perturbations):
        bumped = {k: v + rng.normal(scale=0.3, size=v.shape).astype(v.dtype)
                  for k, v in policy.params.items()}
        shifted = nn.Policy(params=bumped, lo=policy.lo, hi=policy.hi)
        loss_b, _ = logit_anchor(shifted, s, xi, beta * m)
        reg_b, _, _ = _collapsed(shifted, slices, beta)
        invariance_err = max(invariance_err, abs((loss_b - reg_b) - constant))

    report = DecompositionReport(loss=loss, regularizer=reg,
                                 constant=constant,
                                 grad_max_err=grad_max_err,
                                 const_err=const_err,
                                 invariance_err=invariance_err)
    if grad_max_err > tol_grad:
        raise DecompositionError(
            f"gradient mismatch {grad_max_err:.3e} exceeds {tol_grad:.1e}")
    if const_err > tol_const:
        raise DecompositionError(
            f"loss split off by {const_err:.3e}, allowed {tol_const:.1e}")
    if invariance_err > tol_invariance:
        raise DecompositionError(
            f"constant moved {invariance_err:.3e} under perturbation")
    return report


def bound_check(policy: nn.Policy, slices, beta: float,
                tol: float = 1e-12) -> BoundReport:
    """The regularizer never exceeds beta/p times the worst collapsed
    slice distance: slice shares sum to one and gates sit in [0, 1]."""
    if not slices:
        raise ValueError("need at least one slice")
    reg, _, _ = _collapsed(policy, slices, beta)
    p = slices[0].xi.shape[1]
    worst = 0.0
    for sl in slices:
        st = slice_stats(sl)
        mu = nn.policy_forward(policy, sl.s[None, :])[0][0]
        worst = max(worst, float(np.sum((mu - st.anchor_mean) ** 2)))
    bound = beta / p * worst
    if reg > bound + tol:
        raise BoundError(f"regularizer {reg:.6e} above bound {bound:.6e}")
    return BoundReport(regularizer=reg, bound=bound)
