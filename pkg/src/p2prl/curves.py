"""CSV emission and aggregation for training curves and rollouts.

All files are plain comma-separated text with a fixed header row; floats
are written with repr so identical runs produce identical bytes.
"""

from __future__ import annotations

import numpy as np

from .nav_env import TrajectoryPoint
from .p2p_sac import CurvePoint

CURVE_FIELDS = ("steps", "rew_mean", "rew_lo", "rew_hi",
                "suc_mean", "suc_lo", "suc_hi", "crash_rate", "gate_mean")
CURVE_HEADER = ",".join(CURVE_FIELDS)

TRAJECTORY_HEADER = "t,x,y,u_x,u_y,reward,terminal"

VERIFY_HEADER = "problem-id,budget,gap"


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------- curve files

def write_curve(path, points) -> None:
    lines = [CURVE_HEADER]
    for pt in points:
        lines.append(",".join([str(int(pt.steps))] + [
            _fmt(v) for v in (pt.rew_mean, pt.rew_lo, pt.rew_hi,
                              pt.suc_mean, pt.suc_lo, pt.suc_hi,
                              pt.crash_rate, pt.gate_mean)]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_curve(path) -> list:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln]
    if not lines or lines[0] != CURVE_HEADER:
        raise ValueError(f"{path}: not a curve file (bad header)")
    points = []
    for ln in lines[1:]:
        cells = ln.split(",")
        if len(cells) != len(CURVE_FIELDS):
            raise ValueError(f"{path}: row has {len(cells)} cells")
        points.append(CurvePoint(steps=int(cells[0]),
                                 **{name: float(c) for name, c
                                    in zip(CURVE_FIELDS[1:], cells[1:])}))
    return points


# ------------------------------------------------------------ rollouts

def write_trajectory(path, rows) -> None:
    lines = [TRAJECTORY_HEADER]
    for r in rows:
        lines.append(",".join([str(int(r.t))] +
                              [_fmt(v) for v in (r.x, r.y, r.u_x, r.u_y,
                                                 r.reward)] + [r.terminal]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_trajectory(path) -> list:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln]
    if not lines or lines[0] != TRAJECTORY_HEADER:
        raise ValueError(f"{path}: not a trajectory file (bad header)")
    rows = []
    for ln in lines[1:]:
        t, x, y, ux, uy, rew, terminal = ln.split(",")
        rows.append(TrajectoryPoint(int(t), float(x), float(y), float(ux),
                                    float(uy), float(rew), terminal))
    return rows


def write_verify(path, rows) -> None:
    lines = [VERIFY_HEADER]
    for problem_id, budget, gap in rows:
        lines.append(f"{problem_id},{int(budget)},{_fmt(gap)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ----------------------------------------------------------- aggregation

def aggregate(curve_lists) -> list:
    """Combine per-seed curves into one: mean plus mean +/- std envelopes
    computed across seeds at each evaluation step."""
    if not curve_lists:
        raise ValueError("nothing to aggregate")
    grids = [[pt.steps for pt in curve] for curve in curve_lists]
    if any(g != grids[0] for g in grids[1:]):
        raise ValueError("mismatched step grids across seed curves")
    out = []
    for idx, steps in enumerate(grids[0]):
        rew = np.array([c[idx].rew_mean for c in curve_lists])
        suc = np.array([c[idx].suc_mean for c in curve_lists])
        crash = np.array([c[idx].crash_rate for c in curve_lists])
        gate = np.array([c[idx].gate_mean for c in curve_lists])
        out.append(CurvePoint(
            steps=steps,
            rew_mean=float(rew.mean()),
            rew_lo=float(rew.mean() - rew.std()),
            rew_hi=float(rew.mean() + rew.std()),
            suc_mean=float(suc.mean()),
            suc_lo=float(suc.mean() - suc.std()),
            suc_hi=float(suc.mean() + suc.std()),
            crash_rate=float(crash.mean()),
            gate_mean=float(gate.mean()),
        ))
    return out
