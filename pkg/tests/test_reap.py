"""Barrier-flow solver and receding-horizon planner tests.

Convergence is certified against the exact-KKT reference solver on the
guard-tightened QP; feasibility is checked on the original rows at every
iterate, which is the property the whole design exists to provide.
"""

from dataclasses import dataclass, field

import numpy as np
import pytest

from p2prl.lin_mpc import CondensedQP, tighten_rows
from p2prl.qp_oracle import solve_exact
from p2prl.reap import (
    BarrierDomainError,
    BarrierParams,
    InfeasibleProblemError,
    InfeasibleStateError,
    PlannerBudget,
    PrimalDualState,
    ReapPlanner,
    StalledStepError,
    barrier_value,
    feasible_init,
    flow_step,
    solve,
    solve_traced,
)

from families import kkt_qp, random_mpc_qp


def one_row_qp(h=2.0, f=0.0, g=-1.0):
    return CondensedQP(h=np.array([[h]]), f=np.array([f]), const_term=0.0,
                       eta=np.array([[1.0]]), g=np.array([g]),
                       n_inputs=1, horizon=1, kinds=np.array([1], dtype=np.int8))


def total_shift(params: BarrierParams) -> float:
    return params.guard + 1.0 / params.tightening


class TestParams:
    def test_defaults(self):
        p = BarrierParams()
        assert p.sharpness == 100.0 and p.tightening == 1e4
        assert p.guard == 1.0 / p.sharpness

    @pytest.mark.parametrize("kw", [
        dict(sharpness=0.0), dict(tightening=-1.0), dict(speed=0.0),
        dict(step=0.0), dict(guard=-0.1),
    ])
    def test_positivity(self, kw):
        with pytest.raises(ValueError):
            BarrierParams(**kw)

    def test_sharpness_tightening_ratio(self):
        # active rows must keep a positive log argument at equilibrium
        with pytest.raises(ValueError):
            BarrierParams(sharpness=100.0, tightening=50.0)

    def test_budget_nonnegative(self):
        with pytest.raises(ValueError):
            PlannerBudget(-1)

    def test_duals_nonnegative(self):
        with pytest.raises(ValueError):
            PrimalDualState(u=np.zeros(1), lam=np.array([-1e-9]))


class TestBarrierValue:
    def test_zero_duals_is_plain_cost(self):
        qp = one_row_qp()
        st = PrimalDualState(u=np.array([0.3]), lam=np.zeros(1))
        assert barrier_value(qp, BarrierParams(), st) == pytest.approx(qp.cost([0.3]))

    def test_hand_value(self):
        qp = one_row_qp()
        params = BarrierParams()
        st = PrimalDualState(u=np.array([0.5]), lam=np.array([0.2]))
        arg = 1.0 - 100.0 * ((0.5 - 1.0 + 0.01) + 1e-4)
        expect = 0.25 - 0.2 * np.log(arg)
        assert barrier_value(qp, params, st) == pytest.approx(expect, rel=1e-12)

    def test_domain_error(self):
        qp = one_row_qp()
        st = PrimalDualState(u=np.array([1.2]), lam=np.array([0.1]))
        with pytest.raises(BarrierDomainError):
            barrier_value(qp, BarrierParams(), st)

    def test_constant_rows_ignored(self):
        # a violated constant row is a precondition failure, not a barrier term
        qp = CondensedQP(h=np.eye(1), f=np.zeros(1), const_term=0.0,
                         eta=np.array([[1.0], [0.0]]), g=np.array([-1.0, 5.0]),
                         n_inputs=1, horizon=1, kinds=np.array([1, 0], dtype=np.int8))
        st = PrimalDualState(u=np.array([0.0]), lam=np.array([0.1, 0.1]))
        barrier_value(qp, BarrierParams(), st)  # no domain error
        with pytest.raises(InfeasibleProblemError):
            feasible_init(qp, BarrierParams())


def analytic_fixed_point(params: BarrierParams):
    """For min 0.5 u^2 - 2u s.t. u <= 1: the flow settles on the tightened
    boundary u = 1 - guard - 1/tightening with dual (2 - u)/sharpness."""
    u = 1.0 - total_shift(params)
    lam = (2.0 - u) / params.sharpness
    return u, lam


class TestFlow:
    def test_fixed_point_is_stationary(self):
        qp = one_row_qp(h=1.0, f=-2.0)
        params = BarrierParams()
        u, lam = analytic_fixed_point(params)
        st = PrimalDualState(u=np.array([u]), lam=np.array([lam]))
        out = flow_step(qp, params, st)
        assert out.u[0] == st.u[0] and out.lam[0] == st.lam[0]
        assert out.iters_used == st.iters_used  # residual gate fired, no step

    def test_step_decreases_merit_for_fixed_duals(self):
        qp = one_row_qp(h=1.0, f=-2.0)
        params = BarrierParams()
        st = PrimalDualState(u=np.array([0.3]), lam=np.array([0.05]))
        out = flow_step(qp, params, st)
        frozen = PrimalDualState(u=out.u, lam=st.lam)
        assert barrier_value(qp, params, frozen) < barrier_value(qp, params, st)
        assert out.iters_used == 1

    def test_converges_to_analytic_fixed_point(self):
        qp = one_row_qp(h=1.0, f=-2.0)
        params = BarrierParams()
        st = solve(qp, params,
                   PrimalDualState(u=np.array([0.0]), lam=np.array([1e-3])),
                   PlannerBudget(50_000))
        u_ref, lam_ref = analytic_fixed_point(params)
        assert st.u[0] == pytest.approx(u_ref, abs=1e-9)
        assert st.lam[0] == pytest.approx(lam_ref, abs=1e-9)
        assert st.iters_used < 50_000  # residual exit, not budget exhaustion

    def test_budget_zero_returns_start(self):
        qp = one_row_qp()
        st = PrimalDualState(u=np.array([0.2]), lam=np.array([0.3]))
        out = solve(qp, BarrierParams(), st, PlannerBudget(0))
        assert out.u[0] == 0.2 and out.lam[0] == 0.3 and out.iters_used == 0

    def test_solve_equals_repeated_flow_step(self):
        rng = np.random.default_rng(7)
        case = kkt_qp(rng, shift=total_shift(BarrierParams()), max_vars=8, max_rows=20)
        params = BarrierParams()
        st0 = feasible_init(case.qp, params)
        once = solve(case.qp, params, st0, PlannerBudget(7))
        step = st0
        for _ in range(7):
            step = flow_step(case.qp, params, step)
        assert once.u.tobytes() == step.u.tobytes()
        assert once.lam.tobytes() == step.lam.tobytes()
        assert once.iters_used == step.iters_used == 7

    def test_start_outside_domain_raises(self):
        qp = one_row_qp()
        st = PrimalDualState(u=np.array([1.5]), lam=np.array([0.1]))
        with pytest.raises(BarrierDomainError):
            flow_step(qp, BarrierParams(), st)

    def test_stalled_step_from_sub_resolution_start(self):
        # log argument below the 1e-12 floor and the cost pulling outward
        # (dual zero, so nothing pushes back): no halving can recover it
        qp = one_row_qp(h=2.0, f=-10.0)
        params = BarrierParams()
        u = 1.0 - total_shift(params) + (1.0 - 5e-13) / params.sharpness
        st = PrimalDualState(u=np.array([u]), lam=np.zeros(1))
        with pytest.raises(StalledStepError):
            flow_step(qp, params, st)

    def test_anytime_feasibility_every_iterate(self):
        params = BarrierParams()
        rng = np.random.default_rng(11)
        for _ in range(8):
            case = random_mpc_qp(rng)
            st = feasible_init(case.qp, params)
            for _ in range(300):
                st = flow_step(case.qp, params, st)
                worst = case.qp.row_values(st.u).max()
                assert worst <= 1e-9, f"row violated by {worst:.3e}"

    def test_traced_worst_matches_stepwise_maximum(self):
        params = BarrierParams()
        rng = np.random.default_rng(13)
        case = random_mpc_qp(rng)
        st0 = feasible_init(case.qp, params)
        manual = case.qp.row_values(st0.u).max()
        st = st0
        for _ in range(40):
            st = flow_step(case.qp, params, st)
            manual = max(manual, case.qp.row_values(st.u).max())
        traced_state, worst = solve_traced(case.qp, params, st0,
                                           PlannerBudget(40))
        assert traced_state.u.tobytes() == st.u.tobytes()
        assert worst == pytest.approx(manual, abs=1e-12)

    def test_traced_budget_zero_reports_start(self):
        params = BarrierParams()
        rng = np.random.default_rng(17)
        case = random_mpc_qp(rng)
        st0 = feasible_init(case.qp, params)
        out, worst = solve_traced(case.qp, params, st0, PlannerBudget(0))
        assert out.u.tobytes() == st0.u.tobytes()
        assert worst == pytest.approx(case.qp.row_values(st0.u).max(),
                                      abs=1e-12)

    def test_traced_sees_constant_rows(self):
        from p2prl.lin_mpc import CondensedQP
        qp = CondensedQP(h=np.eye(1), f=np.array([-0.1]), const_term=0.0,
                         eta=np.array([[1.0], [0.0]]),
                         g=np.array([-1.0, -0.2]), n_inputs=1, horizon=1)
        st = PrimalDualState(u=np.array([0.0]), lam=np.full(2, 1e-3))
        _, worst = solve_traced(qp, BarrierParams(), st, PlannerBudget(5))
        assert worst == pytest.approx(-0.2)  # the dead row dominates

    def test_matches_exact_solver_on_tightened_problem(self):
        params = BarrierParams()
        shift = total_shift(params)
        rng = np.random.default_rng(23)
        for _ in range(10):
            case = kkt_qp(rng, shift=shift)
            st = solve(case.qp, params, feasible_init(case.qp, params),
                       PlannerBudget(10_000))
            ref = solve_exact(tighten_rows(case.qp, shift)).u
            np.testing.assert_allclose(ref, case.u_star, atol=1e-7)
            rel = abs(st.u[0] - ref[0]) / max(1.0, abs(ref[0]))
            assert rel <= 1e-4, f"first-element gap {rel:.3e}"

    def test_longer_budget_never_hurts(self):
        # monotonicity is asserted on the full-vector distance: a single
        # coordinate can pass through its limit and rebound microscopically
        # even for an ideal exponential flow, the state distance cannot
        params = BarrierParams()
        shift = total_shift(params)
        rng = np.random.default_rng(29)
        ladder = [625, 1250, 2500, 5000, 10_000]
        for _ in range(5):
            case = kkt_qp(rng, shift=shift)
            st0 = feasible_init(case.qp, params)
            ref = solve_exact(tighten_rows(case.qp, shift)).u
            gaps = []
            for budget in ladder:
                st = solve(case.qp, params, st0, PlannerBudget(budget))
                gaps.append(float(np.linalg.norm(st.u - ref)))
            for small, big in zip(gaps, gaps[1:]):
                assert big <= small + 1e-9

    def test_bit_identical_replay(self):
        params = BarrierParams()
        outs = []
        for _ in range(2):
            case = kkt_qp(np.random.default_rng(101), shift=total_shift(params))
            st = solve(case.qp, params, feasible_init(case.qp, params),
                       PlannerBudget(2_000))
            outs.append((st.u.tobytes(), st.lam.tobytes(), st.iters_used))
        assert outs[0] == outs[1]


class TestFeasibleInit:
    def test_strict_interior_depth(self):
        rng = np.random.default_rng(37)
        params = BarrierParams()
        for _ in range(5):
            case = random_mpc_qp(rng)
            st = feasible_init(case.qp, params)
            live = np.linalg.norm(case.qp.eta, axis=1) > 0
            worst = (case.qp.row_values(st.u) + params.guard)[live].max()
            assert worst <= -1e-6
            assert np.all(st.lam == 1e-3)

    def test_contradictory_rows_raise(self):
        qp = CondensedQP(h=np.eye(1), f=np.zeros(1), const_term=0.0,
                         eta=np.array([[1.0], [-1.0]]), g=np.array([1.0, 1.0]),
                         n_inputs=1, horizon=1, kinds=np.array([1, 1], dtype=np.int8))
        with pytest.raises(InfeasibleProblemError):
            feasible_init(qp, BarrierParams(), max_iters=2_000)

    def test_guess_is_used_when_already_deep(self):
        qp = one_row_qp()
        st = feasible_init(qp, BarrierParams(), guess=np.array([-2.0]))
        assert st.u[0] == -2.0


@dataclass(frozen=True)
class StubView:
    obstacle_centers: tuple = ((0.0, 0.15), (0.0, 1.45), (1.3, 0.75),
                               (-1.3, 0.75), (1.3, -0.45), (-1.3, -0.45))
    obstacle_radii: tuple = (0.23,) * 6
    arena_lo: tuple = (-2.2, -2.0)
    arena_hi: tuple = (2.0, 3.5)
    goal: tuple = field(default=(0.0, 2.8))


class TestPlanner:
    def make(self, budget=300):
        return ReapPlanner(StubView(), budget=budget)

    def test_first_action_heads_to_goal(self):
        res = self.make().plan(np.array([0.6, -1.2]))
        assert res.action.shape == (2,)
        assert res.action[1] > 0.25          # mostly upward
        assert res.min_slack > 0.0
        assert np.all(np.abs(res.action) <= 0.5)

    def test_warm_start_after_first_cycle(self):
        planner = self.make()
        first = planner.plan(np.array([0.6, -1.2]))
        second = planner.plan(np.array([0.6, -1.19]))
        assert not first.warm_started and second.warm_started
        planner.reset()
        assert not planner.plan(np.array([0.6, -1.2])).warm_started

    def test_inside_keepout_is_infeasible(self):
        with pytest.raises(InfeasibleStateError):
            self.make().plan(np.array([0.1, 0.15]))

    def test_outside_arena_is_infeasible(self):
        with pytest.raises(InfeasibleStateError):
            self.make().plan(np.array([1.75, 0.0]))

    def test_deterministic_across_instances(self):
        track = []
        for _ in range(2):
            planner = self.make()
            acts = [planner.plan(np.array([0.6, -1.2 + 0.01 * k])).action.tobytes()
                    for k in range(5)]
            track.append(acts)
        assert track[0] == track[1]

    def test_closed_loop_progress_and_clearance(self):
        planner = self.make()
        view = planner.view
        z = np.array([0.5, -1.0])
        goal = np.asarray(view.goal)
        start_dist = np.linalg.norm(z - goal)
        clear = np.inf
        for _ in range(250):
            z = z + 0.02 * planner.plan(z).action
            for c in view.obstacle_centers:
                clear = min(clear, float(np.linalg.norm(z - np.asarray(c))))
        assert np.linalg.norm(z - goal) < start_dist - 1.0
        assert clear >= 0.6

    def test_budget_counts_accumulate(self):
        planner = self.make(budget=50)
        first = planner.plan(np.array([0.6, -1.2]))
        second = planner.plan(np.array([0.6, -1.19]))
        assert first.state.iters_used == 50
        assert second.state.iters_used == 100
