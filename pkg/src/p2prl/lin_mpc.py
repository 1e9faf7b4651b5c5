"""Discrete-time linear MPC setup and condensation.

Everything here is a pure function of its arguments: models, polytopic
constraint sets, reference computation, and the reduction of a horizon-N
tracking problem to a dense strongly convex QP in the stacked input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog


class SingularSteadyStateError(ValueError):
    """Raised when no input holds the requested steady state."""


class RiccatiDivergenceError(RuntimeError):
    """Raised when the terminal-weight fixed point does not converge."""


@dataclass(frozen=True)
class LtiModel:
    """x_next = a @ x + b @ u, sampled at dt seconds."""

    a: np.ndarray
    b: np.ndarray
    dt: float

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        b = np.asarray(self.b, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"a must be square, got {a.shape}")
        if b.ndim != 2 or b.shape[0] != a.shape[0]:
            raise ValueError(f"b must be ({a.shape[0]}, p), got {b.shape}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def n_states(self) -> int:
        return self.a.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.b.shape[1]


@dataclass(frozen=True)
class Polytope:
    """Halfspace intersection {x : normals @ x + offsets <= 0}.

    Rows may be empty (no constraints).  Degenerate polytopes (empty
    interior) are constructible; certify_interior() is the explicit check
    used wherever a contract demands a nonempty interior.
    """

    normals: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        nrm = np.atleast_2d(np.asarray(self.normals, dtype=float))
        off = np.atleast_1d(np.asarray(self.offsets, dtype=float))
        if nrm.size == 0:
            nrm = nrm.reshape(0, nrm.shape[-1] if nrm.ndim == 2 and nrm.shape[-1] else 1)
        if nrm.shape[0] != off.shape[0]:
            raise ValueError(f"{nrm.shape[0]} normals vs {off.shape[0]} offsets")
        object.__setattr__(self, "normals", nrm)
        object.__setattr__(self, "offsets", off)

    @classmethod
    def from_box(cls, lo, hi) -> "Polytope":
        """Axis-aligned box; per dimension the upper row precedes the lower."""
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        if lo.shape != hi.shape:
            raise ValueError("lo/hi shape mismatch")
        if np.any(hi < lo):
            raise ValueError("box with hi < lo")
        d = lo.shape[0]
        normals = np.zeros((2 * d, d))
        offsets = np.zeros(2 * d)
        for j in range(d):
            normals[2 * j, j] = 1.0
            offsets[2 * j] = -hi[j]
            normals[2 * j + 1, j] = -1.0
            offsets[2 * j + 1] = lo[j]
        return cls(normals, offsets)

    @classmethod
    def empty_in(cls, dim: int) -> "Polytope":
        return cls(np.zeros((0, dim)), np.zeros(0))

    @property
    def n_rows(self) -> int:
        return self.normals.shape[0]

    @property
    def dim(self) -> int:
        return self.normals.shape[1]

    def values(self, x) -> np.ndarray:
        return self.normals @ np.asarray(x, dtype=float) + self.offsets

    def contains(self, x, margin: float = 0.0) -> bool:
        if self.n_rows == 0:
            return True
        return bool(np.all(self.values(x) <= -margin))

    def certify_interior(self) -> np.ndarray:
        """Return a strictly interior point (Chebyshev center), or raise.

        Solves max r s.t. normals@x + offsets + r*||normal|| <= 0 with an LP;
        r <= 0 means the interior is empty.
        """
        if self.n_rows == 0:
            return np.zeros(self.dim)
        row_norms = np.linalg.norm(self.normals, axis=1)
        c = np.zeros(self.dim + 1)
        c[-1] = -1.0  # maximize r
        a_ub = np.hstack([self.normals, row_norms[:, None]])
        res = linprog(c, A_ub=a_ub, b_ub=-self.offsets,
                      bounds=[(None, None)] * self.dim + [(None, None)],
                      method="highs")
        if not res.success or res.x[-1] <= 1e-12:
            raise ValueError("polytope has empty interior")
        return res.x[:-1]


def supporting_halfspace(center, radius: float, point) -> tuple[np.ndarray, float]:
    """Halfspace that keeps `point`'s side of a circular keep-out region.

    Linearizes the disk ||x - center|| >= radius at the surface point nearest
    `point`: returns (a, b) with a@x + b <= 0 tangent there.  `point` must not
    coincide with the center.
    """
    center = np.asarray(center, dtype=float)
    delta = np.asarray(point, dtype=float) - center
    dist = float(np.linalg.norm(delta))
    if dist <= 1e-12:
        raise ValueError("point coincides with keep-out center")
    outward = delta / dist
    # outward @ (x - center) >= radius  <=>  -outward @ x + outward@center + radius <= 0
    return -outward, float(outward @ center + radius)


@dataclass(frozen=True)
class MpcProblem:
    """Finite-horizon tracking problem around a steady reference."""

    model: LtiModel
    horizon: int
    state_weight: np.ndarray
    input_weight: np.ndarray
    terminal_weight: np.ndarray
    state_set: Polytope
    input_set: Polytope
    terminal_set: Polytope
    state_ref: np.ndarray
    input_ref: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        for name in ("state_weight", "input_weight", "terminal_weight",
                     "state_ref", "input_ref", "target"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        _check_psd(self.state_weight, "state_weight", strict=False)
        _check_psd(self.input_weight, "input_weight", strict=True)
        _check_psd(self.terminal_weight, "terminal_weight", strict=True)
        res = self.model.a @ self.state_ref + self.model.b @ self.input_ref - self.state_ref
        if np.linalg.norm(res) > 1e-9:
            raise ValueError(f"reference is not a steady state, residual {np.linalg.norm(res):.3e}")
        if not self.state_set.contains(self.state_ref, margin=1e-12):
            raise ValueError("state reference not strictly inside the state set")
        if not self.input_set.contains(self.input_ref, margin=1e-12):
            raise ValueError("input reference not strictly inside the input set")
        if not self.terminal_set.contains(self.state_ref, margin=1e-12):
            raise ValueError("state reference not strictly inside the terminal set")


@dataclass(frozen=True)
class CondensedQP:
    """cost(u) = 0.5 u'@h@u + f@u + const over {eta @ u + g <= 0}.

    Row order: state constraints at steps 0..N-1 (step-major, polytope row
    order within a step), then input constraints at steps 0..N-1, then the
    terminal rows at step N.  kinds holds 0/1/2 for state/input/terminal.
    """

    h: np.ndarray
    f: np.ndarray
    const_term: float
    eta: np.ndarray
    g: np.ndarray
    n_inputs: int
    horizon: int
    kinds: np.ndarray = field(default=None, repr=False)

    @property
    def n_rows(self) -> int:
        return self.eta.shape[0]

    @property
    def n_vars(self) -> int:
        return self.h.shape[0]

    def cost(self, u) -> float:
        u = np.asarray(u, dtype=float)
        return float(0.5 * u @ self.h @ u + self.f @ u + self.const_term)

    def row_values(self, u) -> np.ndarray:
        if self.n_rows == 0:
            return np.zeros(0)
        return self.eta @ np.asarray(u, dtype=float) + self.g


def _check_psd(m: np.ndarray, name: str, strict: bool):
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square")
    if np.linalg.norm(m - m.T) > 1e-12 * (1.0 + np.linalg.norm(m)):
        raise ValueError(f"{name} must be symmetric")
    ev_min = float(np.linalg.eigvalsh(m)[0])
    if strict and ev_min <= 0:
        raise ValueError(f"{name} must be positive definite, min eig {ev_min:.3e}")
    if not strict and ev_min < -1e-12:
        raise ValueError(f"{name} must be positive semidefinite, min eig {ev_min:.3e}")


def steady_state(model: LtiModel, target) -> tuple[np.ndarray, np.ndarray]:
    """Input that holds the state `target` fixed: solve b@u = (I - a)@target.

    Least-squares solve with an exact-consistency gate; raises
    SingularSteadyStateError when the target admits no holding input.
    """
    target = np.asarray(target, dtype=float)
    rhs = (np.eye(model.n_states) - model.a) @ target
    if model.n_inputs == 0 or not np.any(model.b):
        if np.linalg.norm(rhs) > 1e-9:
            raise SingularSteadyStateError("no input channel can hold this target")
        return target, np.zeros(model.n_inputs)
    u, *_ = np.linalg.lstsq(model.b, rhs, rcond=None)
    residual = float(np.linalg.norm(model.b @ u - rhs))
    if residual > 1e-9:
        raise SingularSteadyStateError(
            f"target unreachable as a steady state, residual {residual:.3e}")
    return target, u


def prediction_matrices(model: LtiModel, horizon: int) -> tuple[np.ndarray, np.ndarray]:
    """Stacked free response phi (N+1 blocks of a^k) and forced response gamma.

    z_stack = phi @ z0 + gamma @ u_stack, with z_stack holding steps 0..N.
    """
    nz, p = model.n_states, model.n_inputs
    powers = [np.eye(nz)]
    for _ in range(horizon):
        powers.append(model.a @ powers[-1])
    phi = np.vstack(powers)
    gamma = np.zeros(((horizon + 1) * nz, horizon * p))
    for k in range(1, horizon + 1):
        for j in range(k):
            gamma[k * nz:(k + 1) * nz, j * p:(j + 1) * p] = powers[k - 1 - j] @ model.b
    return phi, gamma


def simulate(model: LtiModel, z0, u_stack) -> np.ndarray:
    """Roll the model forward; returns states for steps 0..N."""
    z0 = np.asarray(z0, dtype=float)
    u = np.asarray(u_stack, dtype=float).reshape(-1, model.n_inputs)
    out = np.empty((u.shape[0] + 1, model.n_states))
    out[0] = z0
    for k in range(u.shape[0]):
        out[k + 1] = model.a @ out[k] + model.b @ u[k]
    return out


def condense(problem: MpcProblem, z0,
             extra_state_rows: Polytope | None = None,
             extra_terminal_rows: Polytope | None = None) -> CondensedQP:
    """Reduce the horizon problem at state z0 to a dense QP in u_stack.

    Rows are emitted unnormalized so that each row value equals the original
    constraint evaluated on the predicted trajectory; apply normalize_rows()
    before handing the QP to a conditioning-sensitive solver.

    extra_state_rows / extra_terminal_rows carry per-call halfspaces (e.g.
    obstacle linearizations valid only near z0); they are appended after the
    problem's own rows within each step and share the step's kind code.
    """
    z0 = np.asarray(z0, dtype=float)
    n = problem.horizon
    nz, p = problem.model.n_states, problem.model.n_inputs
    phi, gamma = prediction_matrices(problem.model, n)

    w_blocks = [problem.state_weight] * n + [problem.terminal_weight]
    free = phi @ z0 - np.tile(problem.state_ref, n + 1)
    u_ref_stack = np.tile(problem.input_ref, n)

    # weighted blocks of gamma, row block k scaled by its cost weight
    wgamma = np.vstack([w_blocks[k] @ gamma[k * nz:(k + 1) * nz] for k in range(n + 1)])
    wfree = np.concatenate([w_blocks[k] @ free[k * nz:(k + 1) * nz] for k in range(n + 1)])
    r_bar = np.kron(np.eye(n), problem.input_weight)

    h = 2.0 * (gamma.T @ wgamma + r_bar)
    h = 0.5 * (h + h.T)
    f = 2.0 * (gamma.T @ wfree) - 2.0 * (r_bar @ u_ref_stack)
    const = float(free @ wfree + u_ref_stack @ (r_bar @ u_ref_stack))

    def _step_rows(polytope: Polytope | None):
        if polytope is None:
            return ()
        return zip(polytope.normals, polytope.offsets)

    rows_eta, rows_g, kinds = [], [], []
    # the entry state is data, not a decision: rows start at step 1
    for k in range(1, n):
        gamma_k = gamma[k * nz:(k + 1) * nz]
        zk_free = phi[k * nz:(k + 1) * nz] @ z0
        for a_row, b_row in list(_step_rows(problem.state_set)) + list(_step_rows(extra_state_rows)):
            rows_eta.append(gamma_k.T @ a_row)
            rows_g.append(float(a_row @ zk_free + b_row))
            kinds.append(0)
    for k in range(n):
        for c_row, d_row in zip(problem.input_set.normals, problem.input_set.offsets):
            eta = np.zeros(n * p)
            eta[k * p:(k + 1) * p] = c_row
            rows_eta.append(eta)
            rows_g.append(float(d_row))
            kinds.append(1)
    gamma_n = gamma[n * nz:]
    zn_free = phi[n * nz:] @ z0
    for a_row, b_row in list(_step_rows(problem.terminal_set)) + list(_step_rows(extra_terminal_rows)):
        rows_eta.append(gamma_n.T @ a_row)
        rows_g.append(float(a_row @ zn_free + b_row))
        kinds.append(2)

    eta = np.array(rows_eta) if rows_eta else np.zeros((0, n * p))
    g = np.array(rows_g)
    return CondensedQP(h=h, f=f, const_term=const, eta=eta, g=g,
                       n_inputs=p, horizon=n, kinds=np.array(kinds, dtype=np.int8))


def normalize_rows(qp: CondensedQP) -> CondensedQP:
    """Scale each row to unit normal; rows with (numerically) zero eta are
    left untouched -- they are constants in u and carry no direction."""
    if qp.n_rows == 0:
        return qp
    norms = np.linalg.norm(qp.eta, axis=1)
    scale = np.where(norms > 1e-300, norms, 1.0)
    return CondensedQP(h=qp.h, f=qp.f, const_term=qp.const_term,
                       eta=qp.eta / scale[:, None], g=qp.g / scale,
                       n_inputs=qp.n_inputs, horizon=qp.horizon, kinds=qp.kinds)


def tighten_rows(qp: CondensedQP, margin: float) -> CondensedQP:
    """Shift every row inward by `margin` (in that row's own scale)."""
    return CondensedQP(h=qp.h, f=qp.f, const_term=qp.const_term,
                       eta=qp.eta, g=qp.g + margin,
                       n_inputs=qp.n_inputs, horizon=qp.horizon, kinds=qp.kinds)


def riccati_terminal_weight(model: LtiModel, state_weight, input_weight,
                            tol: float = 1e-12, max_iters: int = 100_000) -> np.ndarray:
    """Fixed point of the discrete Riccati recursion, iterated from state_weight."""
    a, b = model.a, model.b
    q = np.asarray(state_weight, dtype=float)
    r = np.asarray(input_weight, dtype=float)
    p = q.copy()
    for _ in range(max_iters):
        # divergence shows up as overflow first; the isfinite gate is the
        # detector, so the intermediate overflow warning is just noise
        with np.errstate(over="ignore", invalid="ignore"):
            bpb = r + b.T @ p @ b
            gain = np.linalg.solve(bpb, b.T @ p @ a)
            p_next = q + a.T @ p @ a - a.T @ p @ b @ gain
        p_next = 0.5 * (p_next + p_next.T)
        if not np.all(np.isfinite(p_next)):
            raise RiccatiDivergenceError("recursion diverged (non-finite iterate)")
        if np.max(np.abs(p_next - p)) <= tol:
            return p_next
        p = p_next
    raise RiccatiDivergenceError(f"no fixed point within {max_iters} iterations")


def terminal_ingredients(model: LtiModel, state_weight, input_weight,
                         state_set: Polytope, state_ref,
                         base_halfwidth: float = 1.0,
                         shrink: float = 1.0) -> tuple[np.ndarray, Polytope]:
    """Terminal weight (Riccati fixed point) and a terminal set.

    The set is the largest axis-aligned box centered at state_ref that fits
    inside state_set (closed form per row), scaled by `shrink`, intersected
    with state_set.  shrink = 0 collapses the box to the reference point.
    """
    state_ref = np.asarray(state_ref, dtype=float)
    weight = riccati_terminal_weight(model, state_weight, input_weight)
    d = state_ref.shape[0]
    half = np.full(d, base_halfwidth)
    scale = 1.0
    for a_row, b_row in zip(state_set.normals, state_set.offsets):
        spread = float(np.abs(a_row) @ half)
        slack = float(-(a_row @ state_ref) - b_row)
        if slack <= 0:
            raise ValueError("state_ref not inside state_set")
        if spread > 0:
            scale = min(scale, slack / spread)
    half = half * scale * shrink
    box = Polytope.from_box(state_ref - half, state_ref + half)
    normals = np.vstack([box.normals, state_set.normals]) if state_set.n_rows else box.normals
    offsets = np.concatenate([box.offsets, state_set.offsets]) if state_set.n_rows else box.offsets
    return weight, Polytope(normals, offsets)
