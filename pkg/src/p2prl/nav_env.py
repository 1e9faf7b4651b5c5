"""Deterministic 2D obstacle-course simulator.

Single-integrator robot in a walled rectangle with six circular obstacles,
sparse time/energy cost, terminal bonus at the goal and penalty on
collision.  The true dynamics add a small sinusoidal drift on top of the
integrator so that a model-based planner faces a nonzero residual.

The agent-facing observation deliberately contains no obstacle geometry;
the planner-facing view carries all of it.
"""

from __future__ import annotations

from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np

from .lin_mpc import Polytope

TERMINAL_NONE = "none"
TERMINAL_GOAL = "goal"
TERMINAL_CRASH = "crash"
TERMINAL_TIMEOUT = "timeout"


class SpawnRejectionError(RuntimeError):
    """Rejection sampling could not place the robot (>1e5 draws)."""


class EpisodeTerminatedError(RuntimeError):
    """step() called on a state whose episode already ended."""


def _default_centers():
    return np.array([[0.00, 0.15], [0.00, 1.45],
                     [1.30, 0.75], [-1.30, 0.75],
                     [1.30, -0.45], [-1.30, -0.45]])


@dataclass(frozen=True)
class NavConfig:
    x_range: tuple = (-2.2, 2.0)
    y_range: tuple = (-2.0, 3.5)
    obstacle_centers: np.ndarray = field(default_factory=_default_centers)
    obstacle_radii: np.ndarray = field(default_factory=lambda: np.full(6, 0.23))
    goal: np.ndarray = field(default_factory=lambda: np.array([0.0, 2.8]))
    goal_tol: float = 0.3
    robot_radius: float = 0.35
    max_steps: int = 8000
    dt: float = 0.02
    action_bound: float = 0.7
    disturbance_max: float = 0.002
    spawn_y_max: float = 0.75
    spawn_x_abs_max: float = 1.1
    spawn_margin: float = 0.06

    def __post_init__(self):
        object.__setattr__(self, "obstacle_centers",
                           np.atleast_2d(np.asarray(self.obstacle_centers, dtype=float)))
        object.__setattr__(self, "obstacle_radii",
                           np.atleast_1d(np.asarray(self.obstacle_radii, dtype=float)))
        object.__setattr__(self, "goal", np.asarray(self.goal, dtype=float))
        if self.obstacle_centers.shape[0] != self.obstacle_radii.shape[0]:
            raise ValueError("obstacle centers/radii length mismatch")
        if not (self.goal_tol > 0 and self.robot_radius >= 0 and self.dt > 0
                and self.max_steps >= 1 and self.action_bound > 0
                and self.disturbance_max >= 0 and self.spawn_margin >= 0
                and self.spawn_x_abs_max > 0):
            raise ValueError("bad scalar config value")
        crash = self.obstacle_radii + self.robot_radius
        for i in range(len(crash)):
            d = np.linalg.norm(self.goal - self.obstacle_centers[i])
            if d < crash[i]:
                raise ValueError("goal sits inside a crash disc")
            for j in range(i + 1, len(crash)):
                gap = np.linalg.norm(self.obstacle_centers[i] - self.obstacle_centers[j])
                if gap < crash[i] + crash[j]:
                    raise ValueError("inflated obstacles overlap; no corridor")


@dataclass(frozen=True)
class FullState:
    position: np.ndarray
    t: int
    phases: tuple
    terminal: str = TERMINAL_NONE

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float)
        if not np.all(np.isfinite(pos)):
            raise ValueError("non-finite position")
        object.__setattr__(self, "position", pos)


@dataclass(frozen=True)
class StepResult:
    state: FullState
    observation: np.ndarray
    reward: float
    terminal: str


@dataclass(frozen=True)
class PlannerView:
    """Privileged scene description: everything the policy never sees."""
    obstacle_centers: np.ndarray
    obstacle_radii: np.ndarray
    boundary_normals: np.ndarray
    boundary_offsets: np.ndarray
    arena_lo: np.ndarray
    arena_hi: np.ndarray
    goal: np.ndarray


class NavEnv:
    def __init__(self, config: NavConfig | None = None):
        self.config = config if config is not None else NavConfig()
        c = self.config
        lo = np.array([c.x_range[0], c.y_range[0]])
        hi = np.array([c.x_range[1], c.y_range[1]])
        walls = Polytope.from_box(lo, hi)
        self._view = PlannerView(
            obstacle_centers=c.obstacle_centers.copy(),
            obstacle_radii=c.obstacle_radii.copy(),
            boundary_normals=walls.normals, boundary_offsets=walls.offsets,
            arena_lo=lo, arena_hi=hi, goal=c.goal.copy())

    # ------------------------------------------------------------- lifecycle

    def reset(self, seed: int) -> tuple[FullState, np.ndarray]:
        """Spawn in the lower band, clear of walls and obstacles; draw the
        disturbance phases from the same stream so one seed fixes the
        whole episode."""
        c = self.config
        rng = np.random.default_rng(seed)
        # spawn_margin keeps starts strictly clear of any planner's safety
        # tightening, not just the crash set
        r = c.robot_radius + c.spawn_margin
        keep_out = c.obstacle_radii + r
        for _ in range(100_000):
            pos = np.array([rng.uniform(c.x_range[0], c.x_range[1]),
                            rng.uniform(c.y_range[0], c.spawn_y_max)])
            if pos[0] < c.x_range[0] + r or pos[0] > c.x_range[1] - r:
                continue
            # the side columns seal the wall lanes once a planner adds its
            # safety margins; inboard starts never need those lanes
            if abs(pos[0]) > c.spawn_x_abs_max:
                continue
            if pos[1] < c.y_range[0] + r:
                continue
            if np.any(np.linalg.norm(c.obstacle_centers - pos, axis=1) < keep_out):
                continue
            phases = tuple(rng.uniform(0.0, 2.0 * np.pi, size=2))
            state = FullState(position=pos, t=0, phases=phases)
            return state, self.observe(state)
        raise SpawnRejectionError("no free spawn in 1e5 draws")

    def step(self, state: FullState, u) -> StepResult:
        if state.terminal != TERMINAL_NONE:
            raise EpisodeTerminatedError(f"episode ended with '{state.terminal}'")
        u = np.asarray(u, dtype=float)
        if u.shape != (2,) or not np.all(np.isfinite(u)):
            raise ValueError("action must be a finite 2-vector")
        c = self.config
        u = np.clip(u, -c.action_bound, c.action_bound)
        drift = c.disturbance_max * np.array([
            np.sin(state.phases[0] + 0.013 * state.t),
            np.cos(state.phases[1] + 0.017 * state.t)])
        pos = state.position + c.dt * u + drift
        t_next = state.t + 1

        reward = -(1.0 + 0.02 * float(u @ u))
        cause = TERMINAL_NONE
        if np.linalg.norm(pos - c.goal) < c.goal_tol:
            cause = TERMINAL_GOAL
            reward += 100.0
        elif self._crashed(pos):
            cause = TERMINAL_CRASH
            reward -= 200.0
        elif t_next >= c.max_steps:
            cause = TERMINAL_TIMEOUT

        nxt = FullState(position=pos, t=t_next, phases=state.phases, terminal=cause)
        return StepResult(state=nxt, observation=self.observe(nxt),
                          reward=reward, terminal=cause)

    def _crashed(self, pos: np.ndarray) -> bool:
        c = self.config
        if (pos[0] < c.x_range[0] or pos[0] > c.x_range[1]
                or pos[1] < c.y_range[0] or pos[1] > c.y_range[1]):
            return True
        dists = np.linalg.norm(c.obstacle_centers - pos, axis=1)
        return bool(np.any(dists < c.obstacle_radii + c.robot_radius))

    # ----------------------------------------------------------- emissions

    def observe(self, state: FullState) -> np.ndarray:
        """Agent observation [x, y, x_goal, y_goal]; no scene geometry."""
        return np.concatenate([state.position, self.config.goal])

    def planner_view(self, state: FullState) -> tuple[np.ndarray, PlannerView]:
        return state.position.copy(), self._view

    @property
    def view(self) -> PlannerView:
        return self._view


# --------------------------------------------------------------- metrics

TrajectoryPoint = namedtuple("TrajectoryPoint", "t x y u_x u_y reward terminal")


@dataclass(frozen=True)
class EpisodeMetrics:
    success: bool
    crash: bool
    path_length: float
    path_optimality: float
    duration_s: float
    avg_velocity: float


def episode_metrics(trajectory, goal, dt: float = 0.02) -> EpisodeMetrics:
    """Summarize one finished episode.

    `trajectory` holds one TrajectoryPoint per visited state, spawn first;
    the action/reward fields on the last point describe the step that
    produced it.  Optimality compares the polyline against the straight
    spawn-to-goal distance, so it is reported (and only meaningful) on
    successful runs but still computed for crashes.
    """
    if len(trajectory) == 0:
        raise ValueError("empty trajectory")
    pts = np.array([[p.x, p.y] for p in trajectory], dtype=float)
    seg = np.diff(pts, axis=0)
    path_length = float(np.sum(np.linalg.norm(seg, axis=1)))
    straight = float(np.linalg.norm(np.asarray(goal, dtype=float) - pts[0]))
    n_steps = len(trajectory) - 1
    duration = n_steps * dt
    last = trajectory[-1].terminal
    return EpisodeMetrics(
        success=last == TERMINAL_GOAL,
        crash=last == TERMINAL_CRASH,
        path_length=path_length,
        path_optimality=path_length / straight if straight > 0 else np.inf,
        duration_s=duration,
        avg_velocity=path_length / duration if duration > 0 else 0.0)
