"""Run configuration: one flat record that pins every knob of a run.

The record covers algorithm choice, training scale, network and SAC
hyperparameters, the guidance schedule, replay capacities, planner
settings, and the episode cap.  Arena geometry stays with NavConfig's
defaults; runs share one fixed scene.  A canonical JSON form backs both
the config files and the hash that stamps every output.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields

from .nav_env import NavConfig, NavEnv
from .p2p_sac import AgentConfig
from .reap import ReapPlanner

RUN_ALGORITHMS = ("p2p-sac", "sac", "accel-sac", "reap-only")
PRESETS = ("paper", "desk")


@dataclass(frozen=True)
class RunConfig:
    """Defaults are the desk preset; `preset_config` spells out both."""
    algorithm: str = "p2p-sac"
    seed: int = 0
    preset: str = "desk"
    total_steps: int = 200_000
    eval_every: int = 5_000
    eval_episodes: int = 20
    hidden: tuple = (64, 64)
    float64: bool = False
    lr: float = 3e-4
    discount: float = 0.99
    polyak: float = 0.995
    batch_size: int = 256
    alpha_init: float = 0.2
    target_entropy: float = -2.0
    plateau_steps: int = 20_000
    anneal_steps: int = 0
    beta_start: float = 10.0
    beta_end: float = 10.0
    gate_temperature: float = 1.0
    logit_margin: float = 1e-3
    planner_capacity: int = 100_000
    online_capacity: int = 100_000
    planner_budget: int = 150
    planner_horizon: int = 15
    env_max_steps: int = 2_000

    def __post_init__(self):
        if self.algorithm not in RUN_ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        object.__setattr__(self, "hidden", tuple(int(n) for n in self.hidden))
        if self.planner_budget < 0 or self.planner_horizon < 1:
            raise ValueError("bad planner settings")
        if self.env_max_steps < 1:
            raise ValueError("episode cap must be positive")

    def to_json(self) -> str:
        doc = asdict(self)
        doc["hidden"] = list(self.hidden)
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def config_from_json(text: str) -> RunConfig:
    doc = json.loads(text)
    if not isinstance(doc, dict):
        raise ValueError("config document must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if "hidden" in doc:
        doc["hidden"] = tuple(doc["hidden"])
    return RunConfig(**doc)


def preset_config(name: str, algorithm: str = "p2p-sac", seed: int = 0,
                  **overrides) -> RunConfig:
    """Scale presets.  `desk` trains in hours on one CPU core; `paper`
    restates the published full-scale settings and is not expected to be
    runnable here."""
    if name == "desk":
        base = dict(total_steps=200_000, eval_every=5_000, eval_episodes=20,
                    hidden=(64, 64), plateau_steps=20_000,
                    planner_capacity=100_000, online_capacity=100_000,
                    planner_budget=150, env_max_steps=2_000)
        if algorithm == "accel-sac":
            base.update(anneal_steps=10_000, beta_end=0.0)
    elif name == "paper":
        base = dict(total_steps=5_000_000, eval_every=25_000,
                    eval_episodes=10, hidden=(256, 256),
                    plateau_steps=100_000,
                    planner_capacity=1_000_000, online_capacity=2_000_000,
                    planner_budget=300, env_max_steps=8_000)
        if algorithm == "accel-sac":
            base.update(anneal_steps=50_000, beta_end=0.0)
    else:
        raise ValueError(f"unknown preset {name!r}")
    base.update(overrides)
    return RunConfig(algorithm=algorithm, seed=seed, preset=name, **base)


# ------------------------------------------------------------ builders

def build_env(cfg: RunConfig) -> NavEnv:
    return NavEnv(NavConfig(max_steps=cfg.env_max_steps))


def build_planner(cfg: RunConfig, env: NavEnv) -> ReapPlanner | None:
    if cfg.algorithm == "sac":
        return None
    return ReapPlanner(env.view, horizon=cfg.planner_horizon,
                       budget=cfg.planner_budget)


def agent_config(cfg: RunConfig) -> AgentConfig:
    if cfg.algorithm == "reap-only":
        raise ValueError("the planner-only configuration has nothing to train")
    return AgentConfig(
        algorithm=cfg.algorithm, seed=cfg.seed, total_steps=cfg.total_steps,
        eval_every=cfg.eval_every, eval_episodes=cfg.eval_episodes,
        hidden=cfg.hidden, dtype="float64" if cfg.float64 else "float32",
        lr=cfg.lr, discount=cfg.discount, polyak=cfg.polyak,
        batch_size=cfg.batch_size, alpha_init=cfg.alpha_init,
        target_entropy=cfg.target_entropy, plateau_steps=cfg.plateau_steps,
        anneal_steps=cfg.anneal_steps, beta_start=cfg.beta_start,
        beta_end=cfg.beta_end, gate_temperature=cfg.gate_temperature,
        logit_margin=cfg.logit_margin,
        planner_capacity=cfg.planner_capacity,
        online_capacity=cfg.online_capacity)
