"""Brute-force reference solver for strongly convex inequality QPs.

Used to certify the barrier-flow planner from the outside; deliberately a
different algorithm family sharing no solver code with the flow.  The
workhorse is a textbook feasible-start active-set method seeded by a
Dykstra projection; projected gradient serves as an independent fallback
candidate when the active-set route fails to certify.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.optimize import nnls

from .lin_mpc import CondensedQP


class OracleFailure(RuntimeError):
    """The reference solver could not certify a solution to tolerance."""


class InfeasibleCandidateError(ValueError):
    """Candidate handed to suboptimality_gap violates the rows."""


@dataclass(frozen=True)
class KktCertificate:
    stationarity: float     # ||h@u + f + eta.T@mu||_2
    feasibility: float      # max row value (<= 0 means feasible)
    min_dual: float
    complementarity: float  # max |mu_i * row_i|

    def ok(self, stat_tol=1e-9, feas_tol=1e-10, comp_tol=1e-9) -> bool:
        return (self.stationarity <= stat_tol and self.feasibility <= feas_tol
                and self.min_dual >= -1e-12 and self.complementarity <= comp_tol)


@dataclass(frozen=True)
class OracleSolution:
    u: np.ndarray
    duals: np.ndarray
    certificate: KktCertificate


@njit(cache=True)
def _dykstra(eta, g, y, max_passes, tol):
    """Project y onto {u : eta@u + g <= 0} by Dykstra's alternating scheme."""
    m, n = eta.shape
    x = y.copy()
    corr = np.zeros((m, n))
    z = np.empty(n)
    for _ in range(max_passes):
        for i in range(m):
            for k in range(n):
                z[k] = x[k] + corr[i, k]
            v = g[i]
            nn = 0.0
            for k in range(n):
                v += eta[i, k] * z[k]
                nn += eta[i, k] * eta[i, k]
            if v > 0.0 and nn > 0.0:
                scale = v / nn
                for k in range(n):
                    x[k] = z[k] - scale * eta[i, k]
            else:
                for k in range(n):
                    x[k] = z[k]
            for k in range(n):
                corr[i, k] = z[k] - x[k]
        worst = -1e300
        for i in range(m):
            v = g[i]
            for k in range(n):
                v += eta[i, k] * x[k]
            if v > worst:
                worst = v
        if worst <= tol:
            break
    return x


@njit(cache=True)
def _projected_gradient(h, f, eta, g, u0, step, max_iters, tol):
    u = u0.copy()
    n = u.shape[0]
    grad = np.empty(n)
    for _ in range(max_iters):
        for k in range(n):
            s = f[k]
            for j in range(n):
                s += h[k, j] * u[j]
            grad[k] = s
        y = u - step * grad
        u_new = _dykstra(eta, g, y, 200, 1e-13)
        move = 0.0
        for k in range(n):
            d = abs(u_new[k] - u[k])
            if d > move:
                move = d
        u = u_new
        if move <= tol:
            break
    return u


def _active_set_solve(h, f, eta, g, u0):
    """Primal active-set method from a feasible start (Nocedal-Wright 16.5).

    Finite for nondegenerate strictly convex problems; the iteration cap
    only guards against degenerate cycling, in which case the caller falls
    back to projected gradient.
    """
    n = h.shape[0]
    m = len(g)
    x = u0.copy()
    work: list[int] = []
    for _ in range(60 * (m + n + 1)):
        a = eta[work] if work else np.zeros((0, n))
        kkt = np.block([[h, a.T], [a, np.zeros((len(work), len(work)))]])
        rhs = np.concatenate([-(h @ x + f), np.zeros(len(work))])
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        d, mu = sol[:n], sol[n:]
        if np.max(np.abs(d), initial=0.0) <= 1e-13:
            if not work or mu.min() >= -1e-11:
                return x
            work.pop(int(np.argmin(mu)))
            continue
        values = eta @ x + g
        alpha, blocker = 1.0, -1
        for i in range(m):
            if i in work:
                continue
            s = float(eta[i] @ d)
            if s > 1e-14:
                cand = max(-values[i] / s, 0.0)
                if cand < alpha:
                    alpha, blocker = cand, i
        x = x + alpha * d
        if blocker >= 0 and alpha < 1.0:
            work.append(blocker)
    return x


def _refine_on_active(h, f, eta, g, x, tol=1e-6):
    """Re-solve exactly on the active set detected at x.

    Near the optimum the detection is unambiguous (slacks are far from the
    activity tolerance), and the equality-KKT solve lands on the true
    vertex even when the iterate drifted by lstsq noise; rows meeting at
    one point form a consistent system, so rank deficiency is harmless.
    """
    n = h.shape[0]
    act = np.where(eta @ x + g >= -tol)[0]
    if len(act) == 0:
        return np.linalg.solve(h, -f)
    a = eta[act]
    kkt = np.block([[h, a.T], [a, np.zeros((len(act), len(act)))]])
    rhs = np.concatenate([-f, -g[act]])
    sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    return sol[:n]


def _certificate(qp: CondensedQP, u: np.ndarray) -> tuple[np.ndarray, KktCertificate]:
    grad = qp.h @ u + qp.f
    if qp.n_rows == 0:
        cert = KktCertificate(float(np.linalg.norm(grad)), -np.inf, 0.0, 0.0)
        return np.zeros(0), cert
    values = qp.eta @ u + qp.g
    near = np.where(values >= -1e-6)[0]
    if len(near):
        mu_near, _ = nnls(qp.eta[near].T, -grad)
    else:
        mu_near = np.zeros(0)
    mu = np.zeros(qp.n_rows)
    mu[near] = mu_near
    stat = float(np.linalg.norm(grad + qp.eta.T @ mu))
    cert = KktCertificate(stationarity=stat,
                          feasibility=float(values.max()),
                          min_dual=float(mu.min()) if len(mu) else 0.0,
                          complementarity=float(np.max(np.abs(mu * values))) if len(mu) else 0.0)
    return mu, cert


def solve_exact(qp: CondensedQP) -> OracleSolution:
    """Solve the QP to KKT residual <= 1e-10; deterministic; raises on failure."""
    h = np.ascontiguousarray(qp.h, dtype=np.float64)
    f = np.ascontiguousarray(qp.f, dtype=np.float64)
    u_free = np.linalg.solve(h, -f)
    if qp.n_rows == 0:
        duals, cert = _certificate(qp, u_free)
        return OracleSolution(u=u_free, duals=duals, certificate=cert)

    # drop rows that are constant in u; they cannot bind the minimizer
    norms = np.linalg.norm(qp.eta, axis=1)
    live = norms > 0.0
    eta = np.ascontiguousarray(qp.eta[live], dtype=np.float64)
    g = np.ascontiguousarray(qp.g[live], dtype=np.float64)
    if np.any(qp.g[~live] > 0.0):
        raise OracleFailure("constant row is violated; problem infeasible")

    u0 = _dykstra(eta, g, u_free, 2000, 1e-13)
    live_qp = CondensedQP(h=h, f=f, const_term=0.0, eta=eta, g=g,
                          n_inputs=qp.n_inputs, horizon=qp.horizon)

    best = None
    for make in (lambda: _active_set_solve(h, f, eta, g, u0),
                 lambda: _projected_gradient(
                     h, f, eta, g, u0,
                     1.0 / float(np.linalg.eigvalsh(h)[-1]), 20_000, 1e-11)):
        raw = make()
        for cand in (_refine_on_active(h, f, eta, g, raw), raw):
            duals_live, cert = _certificate(live_qp, cand)
            if cert.ok(stat_tol=1e-10, feas_tol=1e-10, comp_tol=1e-10):
                duals = np.zeros(qp.n_rows)
                duals[live] = duals_live
                return OracleSolution(u=cand, duals=duals, certificate=cert)
            if best is None or cert.stationarity < best[2].stationarity:
                best = (cand, duals_live, cert)
    raise OracleFailure(f"could not certify KKT to 1e-10: {best[2]}")


@dataclass(frozen=True)
class GapReport:
    first_element_gap: float
    full_gap: float
    reference: np.ndarray


def suboptimality_gap(qp: CondensedQP, candidate) -> GapReport:
    """Distance from a feasible candidate to the exact optimum.

    first_element_gap compares only the leading input block (the piece a
    receding-horizon loop would execute); full_gap the whole stacked input.
    """
    candidate = np.asarray(candidate, dtype=float)
    values = qp.row_values(candidate)
    if len(values) and values.max() > 1e-9:
        raise InfeasibleCandidateError(f"candidate violates rows by {values.max():.3e}")
    ref = solve_exact(qp).u
    p = qp.n_inputs
    return GapReport(first_element_gap=float(np.linalg.norm(candidate[:p] - ref[:p])),
                     full_gap=float(np.linalg.norm(candidate - ref)),
                     reference=ref)
