"""Anytime-feasible barrier flow for condensed MPC QPs.

The solver evolves a primal-dual pair under an explicit-Euler gradient flow
of a relaxed log-barrier merit function.  Interrupted at any iteration
budget it returns a strictly feasible stacked input; run longer it
converges to the optimum of the guard-tightened QP.

Two practical departures from the textbook flow, both load-bearing:

* rows are shifted inward by ``guard`` (default 1/sharpness) before the
  barrier sees them, which places the barrier's singular wall exactly
  ``1/tightening`` inside the original feasible set -- without the shift the
  wall sits outside it and intermediate iterates can leave the feasible set;
* rows whose normal is numerically zero (constants in the decision
  variable) are excluded from the barrier: no primal step can restore such
  a row's log domain, so they act as preconditions checked up front.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .lin_mpc import (
    CondensedQP,
    LtiModel,
    MpcProblem,
    Polytope,
    condense,
    normalize_rows,
    riccati_terminal_weight,
    steady_state,
    supporting_halfspace,
)


class BarrierDomainError(ValueError):
    """A log argument is not positive at the queried point."""


class StalledStepError(RuntimeError):
    """Backtracking exhausted 40 halvings without restoring the domain."""


class InfeasibleProblemError(RuntimeError):
    """Phase-I could not find a strictly feasible start."""


class InfeasibleStateError(RuntimeError):
    """Current state violates the tightened constraints; no plan exists."""


@dataclass(frozen=True)
class BarrierParams:
    """sharpness and tightening shape the relaxed barrier
    -log(1 - sharpness*(v + 1/tightening)); speed and step discretize the
    flow; guard is the inward row shift (None selects 1/sharpness)."""

    sharpness: float = 100.0
    tightening: float = 1e4
    speed: float = 1.0
    step: float = 1e-3
    guard: float = None

    def __post_init__(self):
        if not (self.sharpness > 0 and self.tightening > 0
                and self.speed > 0 and self.step > 0):
            raise ValueError("barrier parameters must be positive")
        if self.sharpness / self.tightening >= 1.0:
            raise ValueError("need sharpness/tightening < 1 so active rows stay in domain")
        if self.guard is None:
            object.__setattr__(self, "guard", 1.0 / self.sharpness)
        elif self.guard < 0:
            raise ValueError("guard must be nonnegative")


@dataclass(frozen=True)
class PlannerBudget:
    max_iters: int

    def __post_init__(self):
        if self.max_iters < 0:
            raise ValueError("budget must be >= 0")


@dataclass(frozen=True)
class PrimalDualState:
    u: np.ndarray
    lam: np.ndarray
    iters_used: int = 0

    def __post_init__(self):
        object.__setattr__(self, "u", np.asarray(self.u, dtype=float))
        object.__setattr__(self, "lam", np.asarray(self.lam, dtype=float))
        if np.any(self.lam < 0):
            raise ValueError("duals must be nonnegative")


def _live_rows(qp: CondensedQP) -> np.ndarray:
    if qp.n_rows == 0:
        return np.zeros(0, dtype=bool)
    return np.linalg.norm(qp.eta, axis=1) > 0.0


def _log_args(qp: CondensedQP, params: BarrierParams, u: np.ndarray,
              live: np.ndarray) -> np.ndarray:
    v = qp.eta[live] @ u + qp.g[live] + params.guard
    return 1.0 - params.sharpness * (v + 1.0 / params.tightening)


def barrier_value(qp: CondensedQP, params: BarrierParams,
                  state: PrimalDualState) -> float:
    """Merit value J(u) - sum_i lam_i * log(arg_i) over live rows."""
    live = _live_rows(qp)
    args = _log_args(qp, params, state.u, live)
    if np.any(args <= 0.0):
        raise BarrierDomainError(f"log argument <= 0 (min {args.min():.3e})")
    return qp.cost(state.u) - float(state.lam[live] @ np.log(args))


@njit(cache=True)
def _flow_kernel(h, f, eta, g_shifted, sharpness, mu_inv, speed, step,
                 u, lam, budget, resid_tol):
    """Euler steps of the primal-dual flow; mutates u and lam.

    Returns (iters_done, status, worst_v); status 1 means backtracking
    exhausted.  worst_v is the largest shifted row value seen over every
    visited iterate, including the start and the final point.
    g_shifted already includes the guard; mu_inv is 1/tightening.
    """
    m, n = eta.shape
    v = np.empty(m)
    grad_u = np.empty(n)
    dlam = np.empty(m)
    du = np.empty(n)
    eta_du = np.empty(m)
    done = 0
    worst_v = -1.0e300
    for _ in range(budget):
        for i in range(m):
            s = g_shifted[i]
            for k in range(n):
                s += eta[i, k] * u[k]
            v[i] = s
            if s > worst_v:
                worst_v = s
        for k in range(n):
            s = f[k]
            for j in range(n):
                s += h[k, j] * u[j]
            grad_u[k] = s
        resid = 0.0
        for i in range(m):
            arg = 1.0 - sharpness * (v[i] + mu_inv)
            # settled rows (zero dual, slack beyond the guard) contribute
            # exactly nothing: skip their log and gradient terms
            if lam[i] == 0.0 and arg > 1.0:
                dlam[i] = 0.0
                continue
            w = sharpness * lam[i] / arg
            for k in range(n):
                grad_u[k] += w * eta[i, k]
            d = -np.log(arg)
            if lam[i] == 0.0 and d < 0.0:
                d = 0.0
            dlam[i] = d
            if abs(d) > resid:
                resid = abs(d)
        for k in range(n):
            if abs(grad_u[k]) > resid:
                resid = abs(grad_u[k])
        if resid < resid_tol:
            break
        for k in range(n):
            du[k] = -speed * step * grad_u[k]
        for i in range(m):
            s = 0.0
            for k in range(n):
                s += eta[i, k] * du[k]
            eta_du[i] = s
        scale = 1.0
        accepted = False
        for _ in range(41):
            ok = True
            for i in range(m):
                arg_new = 1.0 - sharpness * (v[i] + scale * eta_du[i] + mu_inv)
                if not arg_new >= 1e-12:
                    ok = False
                    break
            if ok:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            return done, 1, worst_v
        for k in range(n):
            u[k] += scale * du[k]
        for i in range(m):
            lam[i] += speed * step * dlam[i]
            if lam[i] < 0.0:
                lam[i] = 0.0
        done += 1
    for i in range(m):  # final iterate never reaches the loop head
        s = g_shifted[i]
        for k in range(n):
            s += eta[i, k] * u[k]
        if s > worst_v:
            worst_v = s
    return done, 0, worst_v


def _prepare(qp: CondensedQP, params: BarrierParams):
    live = _live_rows(qp)
    h = np.ascontiguousarray(qp.h, dtype=np.float64)
    f = np.ascontiguousarray(qp.f, dtype=np.float64)
    eta = np.ascontiguousarray(qp.eta[live], dtype=np.float64)
    g_shifted = np.ascontiguousarray(qp.g[live] + params.guard, dtype=np.float64)
    return live, h, f, eta, g_shifted


def _run(qp: CondensedQP, params: BarrierParams, state: PrimalDualState,
         n_iters: int, resid_tol: float):
    live, h, f, eta, g_shifted = _prepare(qp, params)
    u = state.u.copy()
    lam_live = np.ascontiguousarray(state.lam[live], dtype=np.float64)
    args = 1.0 - params.sharpness * (eta @ u + g_shifted + 1.0 / params.tightening)
    if np.any(args <= 0.0):
        raise BarrierDomainError("start outside the barrier domain")
    done, status, worst_v = _flow_kernel(
        h, f, eta, g_shifted, params.sharpness, 1.0 / params.tightening,
        params.speed, params.step, u, lam_live, n_iters, resid_tol)
    if status == 1:
        raise StalledStepError("40 halvings could not keep the log domain; "
                               "problem is ill-conditioned at this state")
    lam = state.lam.copy()
    lam[live] = lam_live
    out = PrimalDualState(u=u, lam=lam, iters_used=state.iters_used + done)
    worst = worst_v - params.guard
    dead = qp.g[~live] if qp.n_rows else np.zeros(0)
    if dead.size:
        worst = max(worst, float(dead.max()))
    return out, worst


def flow_step(qp: CondensedQP, params: BarrierParams,
              state: PrimalDualState) -> PrimalDualState:
    """One safeguarded Euler step (no-op when already at the fixed point)."""
    return _run(qp, params, state, 1, 1e-12)[0]


def solve(qp: CondensedQP, params: BarrierParams, state: PrimalDualState,
          budget: PlannerBudget) -> PrimalDualState:
    """Run exactly budget.max_iters steps, or stop early at a fixed point
    (residual < 1e-12).  Feasible at any budget, including zero."""
    return _run(qp, params, state, budget.max_iters, 1e-12)[0]


def solve_traced(qp: CondensedQP, params: BarrierParams,
                 state: PrimalDualState,
                 budget: PlannerBudget) -> tuple[PrimalDualState, float]:
    """solve plus the largest original-row value over every visited
    iterate, start and endpoint included.  Lets the interruption guarantee
    be certified at kernel speed instead of stepping from Python."""
    return _run(qp, params, state, budget.max_iters, 1e-12)


def feasible_init(qp: CondensedQP, params: BarrierParams,
                  guess: np.ndarray | None = None,
                  max_iters: int = 50_000) -> PrimalDualState:
    """Strictly feasible start: max live-row value <= -(guard + 1e-6),
    duals at 1e-3.  Phase-I is subgradient descent on the worst row.

    Constant rows (zero eta) must already satisfy g <= 0, else the problem
    has no solution in u at all.
    """
    live = _live_rows(qp)
    if np.any(qp.g[~live] > 0.0):
        raise InfeasibleProblemError("a constant row is violated")
    eta = qp.eta[live]
    g = qp.g[live] + params.guard
    u = np.zeros(qp.n_vars) if guess is None else np.asarray(guess, dtype=float).copy()
    lam = np.full(qp.n_rows, 1e-3)
    if eta.shape[0] == 0:
        return PrimalDualState(u=u, lam=lam)
    target = -1e-6
    for _ in range(max_iters):
        v = eta @ u + g
        worst = int(np.argmax(v))
        if v[worst] <= target:
            return PrimalDualState(u=u, lam=lam)
        row = eta[worst]
        u = u - row * ((v[worst] - 2.0 * target) / (row @ row))
    raise InfeasibleProblemError(
        f"phase-I stuck at violation {float(np.max(eta @ u + g)):.3e}")


# --------------------------------------------------------------- planner

@dataclass(frozen=True)
class PlanResult:
    action: np.ndarray          # first input block
    u_stack: np.ndarray
    state: PrimalDualState
    cost: float
    min_slack: float            # -max original row value; > 0 strictly inside
    warm_started: bool


class ReapPlanner:
    """Receding-horizon wrapper: rebuild, warm-start, solve, execute head.

    Per cycle the circular keep-outs are replaced by one supporting
    halfspace each (linearized at the current state), inflated by the robot
    radius plus the safety margin; the arena box is inset the same way.
    The terminal set equals the per-cycle state set, weighted by the
    Riccati terminal matrix.

    Predicted states are tightened by an extra disturbance headroom so the
    executed state, blown off the plan by at most that much per step, still
    enters the margin set the next cycle accepts.
    """

    def __init__(self, view, horizon: int = 15,
                 state_weight=None, input_weight=None,
                 input_halfwidth: float = 0.5,
                 margin: float = 0.05, robot_radius: float = 0.35,
                 disturbance_headroom: float = 0.004,
                 params: BarrierParams = None,
                 budget: int = 300, dt: float = 0.02):
        nz = 2
        self.model = LtiModel(a=np.eye(nz), b=dt * np.eye(nz), dt=dt)
        self.horizon = int(horizon)
        self.margin = float(margin)
        self.robot_radius = float(robot_radius)
        self.headroom = float(disturbance_headroom)
        if self.headroom < 0:
            raise ValueError("disturbance headroom must be >= 0")
        self.params = params if params is not None else BarrierParams()
        self.budget = PlannerBudget(int(budget))
        self.view = view
        state_weight = np.eye(nz) if state_weight is None else np.asarray(state_weight, float)
        input_weight = np.eye(nz) if input_weight is None else np.asarray(input_weight, float)
        inset = self.robot_radius + self.margin + self.headroom
        arena = Polytope.from_box(np.asarray(view.arena_lo, float) + inset,
                                  np.asarray(view.arena_hi, float) - inset)
        entry_inset = self.robot_radius + self.margin
        self._entry_arena = Polytope.from_box(
            np.asarray(view.arena_lo, float) + entry_inset,
            np.asarray(view.arena_hi, float) - entry_inset)
        input_set = Polytope.from_box([-input_halfwidth] * nz, [input_halfwidth] * nz)
        state_ref, input_ref = steady_state(self.model, view.goal)
        terminal_weight = riccati_terminal_weight(self.model, state_weight, input_weight)
        self.problem = MpcProblem(
            model=self.model, horizon=self.horizon,
            state_weight=state_weight, input_weight=input_weight,
            terminal_weight=terminal_weight,
            state_set=arena, input_set=input_set, terminal_set=arena,
            state_ref=state_ref, input_ref=input_ref,
            target=np.asarray(view.goal, float))
        self._input_halfwidth = input_halfwidth
        self._warm: PrimalDualState | None = None
        self._build_template()

    def reset(self):
        self._warm = None

    def _build_template(self):
        """Precompute everything in the condensed QP that is affine or
        quadratic in the query state, plus slots for the per-query
        obstacle rows, so plan() avoids a full condensation."""
        n = self.horizon
        nz = 2
        dt = self.model.dt
        e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        probes = [np.zeros(nz), e1, e2, -e1, -e2, e1 + e2]
        base = [normalize_rows(condense(self.problem, z)) for z in probes]
        q0 = base[0]
        self._tpl_h = q0.h
        self._tpl_f0 = q0.f
        self._tpl_fz = np.column_stack([base[1].f - q0.f, base[2].f - q0.f])
        c0 = q0.const_term
        lx = 0.5 * (base[1].const_term - base[3].const_term)
        ly = 0.5 * (base[2].const_term - base[4].const_term)
        qxx = 0.5 * (base[1].const_term + base[3].const_term) - c0
        qyy = 0.5 * (base[2].const_term + base[4].const_term) - c0
        qxy = 0.5 * (base[5].const_term - c0 - lx - ly - qxx - qyy)
        self._tpl_c0 = c0
        self._tpl_cl = np.array([lx, ly])
        self._tpl_cq = np.array([[qxx, qxy], [qxy, qyy]])

        # full layout: per state step the arena rows then one row per
        # obstacle; inputs; terminal arena rows then terminal obstacle rows
        n_obs = len(self.view.obstacle_centers)
        ns = self.problem.state_set.n_rows
        ni = self.problem.input_set.n_rows
        steps = list(range(1, n)) + [n]
        total = (ns + n_obs) * (n - 1) + ni * n + ns + n_obs
        static_idx, obs_groups, kinds = [], [], np.zeros(total, dtype=np.int8)
        pos = 0
        for _ in range(1, n):
            static_idx.extend(range(pos, pos + ns))
            pos += ns
            obs_groups.append(list(range(pos, pos + n_obs)))
            pos += n_obs
        kinds[:pos] = 0
        static_idx.extend(range(pos, pos + ni * n))
        kinds[pos:pos + ni * n] = 1
        pos += ni * n
        kinds[pos:] = 2
        static_idx.extend(range(pos, pos + ns))
        pos += ns
        obs_groups.append(list(range(pos, pos + n_obs)))
        static_idx = np.array(static_idx, dtype=np.intp)
        self._tpl_kinds = kinds
        self._tpl_obs_flat = np.array([i for grp in obs_groups for i in grp],
                                      dtype=np.intp)
        self._tpl_eta = np.zeros((total, n * nz))
        self._tpl_eta[static_idx] = q0.eta
        self._tpl_g0 = np.zeros(total)
        self._tpl_g0[static_idx] = q0.g
        self._tpl_gz = np.zeros((total, nz))
        self._tpl_gz[static_idx] = np.column_stack([base[1].g - q0.g,
                                                    base[2].g - q0.g])
        # normalized obstacle row for step s is tile(a, s) / sqrt(s); its
        # offset is (distance - keep_out) / (dt * sqrt(s))
        root_s = np.sqrt(np.array(steps, dtype=float))
        mask = np.zeros((len(steps), n * nz))
        for j, s in enumerate(steps):
            mask[j, : s * nz] = 1.0 / root_s[j]
        self._tpl_obs_mask = mask
        self._tpl_obs_scale = dt * root_s
        self._tpl_keep_out = (np.asarray(self.view.obstacle_radii, float)
                              + self.robot_radius + self.margin + self.headroom)

    def _assemble(self, z: np.ndarray) -> CondensedQP:
        """Condensed, row-normalized QP at z via the precomputed template;
        agrees with normalize_rows(condense(...)) to roundoff."""
        n = self.horizon
        centers = np.asarray(self.view.obstacle_centers, float)
        g = self._tpl_g0 + self._tpl_gz @ z
        eta = self._tpl_eta.copy()
        if centers.size:
            diff = centers - z
            dist = np.linalg.norm(diff, axis=1)
            a = diff / dist[:, None]
            tiles = np.tile(a, (1, n))
            eta[self._tpl_obs_flat] = (self._tpl_obs_mask[:, None, :]
                                       * tiles[None, :, :]).reshape(-1, eta.shape[1])
            g[self._tpl_obs_flat] = ((self._tpl_keep_out - dist)[None, :]
                                     / self._tpl_obs_scale[:, None]).reshape(-1)
        f = self._tpl_f0 + self._tpl_fz @ z
        const = float(self._tpl_c0 + self._tpl_cl @ z + z @ self._tpl_cq @ z)
        return CondensedQP(h=self._tpl_h, f=f, const_term=const, eta=eta,
                           g=g, n_inputs=self.model.n_inputs, horizon=n,
                           kinds=self._tpl_kinds)

    def _obstacle_rows(self, z: np.ndarray) -> Polytope:
        normals, offsets = [], []
        for center, radius in zip(self.view.obstacle_centers, self.view.obstacle_radii):
            keep_out = float(radius) + self.robot_radius + self.margin + self.headroom
            a, b = supporting_halfspace(center, keep_out, z)
            normals.append(a)
            offsets.append(b)
        if not normals:
            return Polytope.empty_in(2)
        return Polytope(np.array(normals), np.array(offsets))

    def condensed_problem(self, z) -> CondensedQP:
        """Precondition-checked, normalized QP for one query state."""
        z = np.asarray(z, dtype=float)
        for center, radius in zip(self.view.obstacle_centers, self.view.obstacle_radii):
            if np.linalg.norm(z - np.asarray(center, float)) <= 1e-12:
                raise InfeasibleStateError("state at a keep-out center")
            if np.linalg.norm(z - np.asarray(center, float)) \
                    < float(radius) + self.robot_radius + self.margin:
                raise InfeasibleStateError("state inside a margin keep-out")
        if not self._entry_arena.contains(z):
            raise InfeasibleStateError("state violates the tightened constraint set")
        return self._assemble(z)

    def plan(self, z) -> PlanResult:
        qp = self.condensed_problem(z)
        state, warm = self._warm_state(qp)
        state = solve(qp, self.params, state, self.budget)
        self._warm = state
        p = qp.n_inputs
        values = qp.row_values(state.u)
        return PlanResult(action=state.u[:p].copy(), u_stack=state.u.copy(),
                          state=state, cost=qp.cost(state.u),
                          min_slack=float(-values.max()) if len(values) else np.inf,
                          warm_started=warm)

    def _warm_state(self, qp: CondensedQP):
        p = qp.n_inputs
        if self._warm is not None and self._warm.u.shape == (qp.n_vars,) \
                and self._warm.lam.shape == (qp.n_rows,):
            tail = np.clip(self.problem.input_ref,
                           -self._input_halfwidth + 1e-9, self._input_halfwidth - 1e-9)
            u = np.concatenate([self._warm.u[p:], tail])
            live = _live_rows(qp)
            args = _log_args(qp, self.params, u, live)
            if np.all(args >= 1e-9):
                return PrimalDualState(u=u, lam=self._warm.lam.copy(),
                                       iters_used=self._warm.iters_used), True
        try:
            return feasible_init(qp, self.params), False
        except InfeasibleProblemError as err:
            raise InfeasibleStateError(str(err)) from err
