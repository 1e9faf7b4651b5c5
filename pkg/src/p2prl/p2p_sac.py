"""Planner-guided soft actor-critic.

One training loop, three behaviours.  The guided configuration queries the
trajectory planner online, executes the planner's action while the guidance
schedule is immature, stores those transitions in a write-once partition,
and anchors the policy's pre-squash mean to the planner's logit with an
advantage-gated weight once mature.  Plain SAC switches all of that off;
the accelerated baseline swaps the logit anchor for an output-space
pseudo-label whose weight decays to zero.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import nn
from .reap import InfeasibleStateError

ALGORITHMS = ("p2p-sac", "sac", "accel-sac")

_STOP_BOOTSTRAP = ("goal", "crash")  # timeout still bootstraps


class EmptyBufferError(RuntimeError):
    """A batch was requested while both buffer partitions are empty."""


# ------------------------------------------------------------- replay

@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    u: np.ndarray
    r: float
    s_next: np.ndarray
    u_dagger: np.ndarray  # zero sentinel whenever h == 0
    h: int
    done: int             # bootstrap mask, 1 only on goal/crash
    cause: str = "none"


@dataclass
class Batch:
    s: np.ndarray
    u: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    u_dagger: np.ndarray
    h: np.ndarray
    done: np.ndarray

    def __len__(self):
        return self.r.shape[0]


class _Partition:
    """Flat array storage; FIFO ring or write-once depending on `fifo`."""

    def __init__(self, capacity: int, fifo: bool):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self.fifo = fifo
        self.size = 0
        self._head = 0
        self._cols = None

    def _ensure(self, tr: Transition):
        if self._cols is None:
            n, ds, du = self.capacity, tr.s.size, tr.u.size
            self._cols = {
                "s": np.zeros((n, ds)), "u": np.zeros((n, du)),
                "r": np.zeros(n), "s_next": np.zeros((n, ds)),
                "u_dagger": np.zeros((n, du)), "h": np.zeros(n),
                "done": np.zeros(n),
            }

    def add(self, tr: Transition) -> bool:
        if self.capacity == 0 or (self.size == self.capacity and not self.fifo):
            return False
        self._ensure(tr)
        i = self._head
        c = self._cols
        c["s"][i] = tr.s
        c["u"][i] = tr.u
        c["r"][i] = tr.r
        c["s_next"][i] = tr.s_next
        c["u_dagger"][i] = tr.u_dagger
        c["h"][i] = tr.h
        c["done"][i] = tr.done
        self._head = (self._head + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return True

    def gather(self, idx) -> dict:
        return {k: v[idx] for k, v in self._cols.items()}

    def digest(self) -> bytes:
        if self._cols is None:
            return hashlib.sha256(b"empty").digest()
        acc = hashlib.sha256()
        for k in sorted(self._cols):
            acc.update(self._cols[k][: self.size].tobytes())
        return acc.digest()


class DualReplayBuffer:
    """Planner partition is write-once (never evicts, rejects when full);
    the online partition is a FIFO ring.  Routing is the caller's mature
    flag, nothing else."""

    def __init__(self, planner_capacity: int = 1_000_000,
                 online_capacity: int = 1_000_000):
        self.planner = _Partition(planner_capacity, fifo=False)
        self.online = _Partition(online_capacity, fifo=True)

    @property
    def total_size(self) -> int:
        return self.planner.size + self.online.size

    def add(self, tr: Transition, mature: bool) -> str:
        if tr.h not in (0, 1):
            raise ValueError("h must be 0 or 1")
        if mature:
            return "online" if self.online.add(tr) else "rejected"
        return "planner" if self.planner.add(tr) else "rejected"

    def sample(self, rng: np.random.Generator, batch_size: int) -> Batch:
        """Equal-weight mixture: floor(B/2) planner rows, the rest online;
        an empty partition cedes its share to the other."""
        n_p, n_o = self.planner.size, self.online.size
        if n_p == 0 and n_o == 0:
            raise EmptyBufferError("no transitions stored")
        if n_p == 0:
            b_p = 0
        elif n_o == 0:
            b_p = batch_size
        else:
            b_p = batch_size // 2
        parts = []
        if b_p:
            parts.append(self.planner.gather(rng.integers(0, n_p, b_p)))
        if batch_size - b_p:
            parts.append(self.online.gather(
                rng.integers(0, n_o, batch_size - b_p)))
        cols = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
        return Batch(**cols)

    def planner_digest(self) -> bytes:
        return self.planner.digest()


# ------------------------------------------------------------ schedule

@dataclass
class GuidanceSchedule:
    """Plateau at beta_start, linear anneal to beta_end, then mature.
    Maturity is absorbing."""
    plateau_steps: int
    anneal_steps: int
    beta_start: float
    beta_end: float
    gate_temperature: float = 1.0
    t: int = 0
    beta: float = field(init=False)
    mature: bool = False

    def __post_init__(self):
        if self.plateau_steps < 0 or self.anneal_steps < 0:
            raise ValueError("phase lengths must be >= 0")
        if not 0.0 <= self.beta_end <= self.beta_start:
            raise ValueError("need 0 <= beta_end <= beta_start")
        if self.gate_temperature <= 0.0:
            raise ValueError("gate temperature must be positive")
        self.beta = self.beta_start

    def tick(self, t: int) -> tuple[float, int]:
        if t < 0:
            raise ValueError("t must be >= 0")
        self.t = t
        if t > self.plateau_steps + self.anneal_steps:
            self.mature = True
        if self.mature:
            beta = self.beta_end
        elif t <= self.plateau_steps:
            beta = self.beta_start
        else:
            frac = (t - self.plateau_steps) / self.anneal_steps
            beta = self.beta_start - frac * (self.beta_start - self.beta_end)
        self.beta = beta
        return beta, int(self.mature)


# ----------------------------------------------------------- SAC state

@dataclass
class SacState:
    policy: nn.Policy
    critics: nn.TwinCritics
    log_alpha: dict
    target_entropy: float
    discount: float
    polyak: float
    batch_size: int
    opt_policy: nn.AdamState
    opt_q1: nn.AdamState
    opt_q2: nn.AdamState
    opt_alpha: nn.AdamState

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha["log_alpha"]))


def sac_init(rng: np.random.Generator, obs_dim: int, lo, hi,
             hidden=(256, 256), dtype=np.float32, lr: float = 3e-4,
             alpha_init: float = 0.2, target_entropy: float | None = None,
             discount: float = 0.99, polyak: float = 0.995,
             batch_size: int = 256) -> SacState:
    if not 0.0 <= discount < 1.0:
        raise ValueError("discount must be in [0, 1)")
    if alpha_init <= 0.0:
        raise ValueError("initial temperature must be positive")
    policy = nn.policy_init(rng, obs_dim, lo, hi, hidden=hidden, dtype=dtype)
    critics = nn.critics_init(rng, obs_dim, policy.n_actions, hidden=hidden,
                              dtype=dtype)
    log_alpha = {"log_alpha": np.array(np.log(alpha_init))}
    if target_entropy is None:
        target_entropy = -float(policy.n_actions)
    return SacState(
        policy=policy, critics=critics, log_alpha=log_alpha,
        target_entropy=target_entropy, discount=discount, polyak=polyak,
        batch_size=batch_size,
        opt_policy=nn.adam_init(policy.params, lr),
        opt_q1=nn.adam_init(critics.q1, lr),
        opt_q2=nn.adam_init(critics.q2, lr),
        opt_alpha=nn.adam_init(log_alpha, lr),
    )


# ------------------------------------------------------------- pieces

def planner_logit(u_dagger, lo, hi, margin: float = 1e-3) -> np.ndarray:
    """Pre-squash coordinates of a planner action: atanh of the action
    mapped to (-1, 1), clipped margin-inside the open interval."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(hi <= lo):
        raise ValueError("degenerate action bounds")
    if not 0.0 < margin < 1.0:
        raise ValueError("margin must be in (0, 1)")
    unit = 2.0 * (np.asarray(u_dagger, dtype=float) - lo) / (hi - lo) - 1.0
    return np.arctanh(np.clip(unit, -(1.0 - margin), 1.0 - margin))


def soft_targets(state: SacState, batch: Batch,
                 rng: np.random.Generator) -> np.ndarray:
    """Bellman targets y = r + gamma*(1-done)*(min target Q - alpha*logpi)
    with a fresh next action per row.  done is 1 only for goal/crash, so
    timeouts still bootstrap."""
    B = len(batch)
    p = state.policy.n_actions
    rec = nn.policy_sample(state.policy, batch.s_next,
                           rng.standard_normal((B, p)))
    q1t, _ = nn.critic_forward(state.critics.t1, batch.s_next, rec.u)
    q2t, _ = nn.critic_forward(state.critics.t2, batch.s_next, rec.u)
    v_next = np.minimum(q1t, q2t) - state.alpha * rec.log_prob
    return batch.r + state.discount * (1.0 - batch.done) * v_next


def critic_update(state: SacState, batch: Batch,
                  rng: np.random.Generator) -> tuple[float, float]:
    """One Adam step on each critic against the shared soft target."""
    B = len(batch)
    y = soft_targets(state, batch, rng)
    losses = []
    for params, opt in ((state.critics.q1, state.opt_q1),
                        (state.critics.q2, state.opt_q2)):
        q, cache = nn.critic_forward(params, batch.s, batch.u)
        resid = q - y.astype(q.dtype)
        losses.append(float(np.mean(resid * resid)))
        grads, _ = nn.mlp_backward(params, cache,
                                   (2.0 / B) * resid[:, None])
        nn.adam_step(opt, params, grads)
    return losses[0], losses[1]


@dataclass
class GateResult:
    value: np.ndarray       # soft state value under the current policy
    advantage: np.ndarray   # planner action's advantage over that value
    m: np.ndarray           # sigmoid(advantage / temperature)
    weight: np.ndarray      # 1 while immature, m once mature


def gate_values(state: SacState, batch: Batch, mature: int,
                gate_temperature: float,
                rng: np.random.Generator) -> GateResult:
    """Advantage gate, entirely stop-gradient (no backward passes)."""
    B = len(batch)
    p = state.policy.n_actions
    rec = nn.policy_sample(state.policy, batch.s, rng.standard_normal((B, p)))
    q1, _ = nn.critic_forward(state.critics.q1, batch.s, rec.u)
    q2, _ = nn.critic_forward(state.critics.q2, batch.s, rec.u)
    value = (np.minimum(q1, q2) - state.alpha * rec.log_prob).astype(float)
    d1, _ = nn.critic_forward(state.critics.q1, batch.s, batch.u_dagger)
    d2, _ = nn.critic_forward(state.critics.q2, batch.s, batch.u_dagger)
    adv = np.minimum(d1, d2).astype(float) - value
    m = expit(adv / gate_temperature)
    weight = m if mature else np.ones_like(m)
    return GateResult(value=value, advantage=adv, m=m, weight=weight)


def logit_anchor(policy: nn.Policy, s, xi_dagger,
                 weight) -> tuple[float, dict]:
    """Weighted squared distance between the mean head and planner logits,
    averaged over batch and action dimension; gradients for the policy."""
    mu, _, mask, cache = nn.policy_forward(policy, s)
    xi = np.asarray(xi_dagger, dtype=mu.dtype)
    w = np.asarray(weight, dtype=mu.dtype)
    B, p = mu.shape
    diff = mu - xi
    loss = float(np.sum(w * np.sum(diff * diff, axis=1)) / (B * p))
    d_mu = (2.0 / (B * p)) * w[:, None] * diff
    grads, _ = nn.policy_head_backward(policy, cache, mask, d_mu,
                                       np.zeros_like(mu))
    return loss, grads


def output_pseudo_label(policy: nn.Policy, s, u_dagger,
                        weight) -> tuple[float, dict]:
    """Accelerated-baseline loss: squared distance between the squashed
    mean action and the planner action.  Its gradient dies with the tanh
    derivative when the mean saturates, which is the point of contrast
    with the logit anchor."""
    mu, _, mask, cache = nn.policy_forward(policy, s)
    dtype = mu.dtype
    t = np.tanh(mu)
    width = policy._width
    ubar = policy._center + width * t
    diff = ubar - np.asarray(u_dagger, dtype=dtype)
    w = np.asarray(weight, dtype=dtype)
    B, p = mu.shape
    loss = float(np.sum(w * np.sum(diff * diff, axis=1)) / (B * p))
    d_mu = (2.0 / (B * p)) * w[:, None] * diff * width * (1.0 - t * t)
    grads, _ = nn.policy_head_backward(policy, cache, mask, d_mu,
                                       np.zeros_like(mu))
    return loss, grads


def actor_update(state: SacState, batch: Batch, rng: np.random.Generator,
                 anchor=None, pseudo_label=None) -> tuple[float, float, float]:
    """One Adam step on the policy; returns (SAC loss, guidance loss,
    mean log-probability of the fresh sample).  `anchor` is (planner
    logits, per-row weights) for the logit-space loss; `pseudo_label` is
    per-row weights for the output-space loss.  Critic parameters stay
    frozen."""
    B = len(batch)
    p = state.policy.n_actions
    rec = nn.policy_sample(state.policy, batch.s, rng.standard_normal((B, p)))
    q1, c1 = nn.critic_forward(state.critics.q1, batch.s, rec.u)
    q2, c2 = nn.critic_forward(state.critics.q2, batch.s, rec.u)
    qmin = np.minimum(q1, q2)
    l_sac = float(np.mean(state.alpha * rec.log_prob - qmin))
    pick1 = (q1 <= q2).astype(q1.dtype)[:, None] / B
    _, dx1 = nn.mlp_backward(state.critics.q1, c1, pick1)
    _, dx2 = nn.mlp_backward(state.critics.q2, c2, (1.0 / B) - pick1)
    obs_dim = batch.s.shape[1]
    dqmin_du = dx1[:, obs_dim:] + dx2[:, obs_dim:]
    grads, _ = nn.sample_backward(state.policy, rec, d_u=-dqmin_du,
                                  d_log_prob=np.full(B, state.alpha / B))
    l_guides = 0.0
    if anchor is not None:
        xi, w = anchor
        l_guides, extra = logit_anchor(state.policy, batch.s, xi, w)
        for k in grads:
            grads[k] = grads[k] + extra[k]
    if pseudo_label is not None:
        l_guides, extra = output_pseudo_label(state.policy, batch.s,
                                              batch.u_dagger, pseudo_label)
        for k in grads:
            grads[k] = grads[k] + extra[k]
    nn.adam_step(state.opt_policy, state.policy.params, grads)
    return l_sac, l_guides, float(np.mean(rec.log_prob))


def temperature_update(state: SacState, batch: Batch,
                       rng: np.random.Generator,
                       mean_log_prob: float | None = None) -> float:
    """Gradient step on log(alpha) toward the entropy target.  Pass the
    actor step's mean log-probability to reuse its sample."""
    if mean_log_prob is None:
        B = len(batch)
        p = state.policy.n_actions
        rec = nn.policy_sample(state.policy, batch.s,
                               rng.standard_normal((B, p)))
        mean_log_prob = float(np.mean(rec.log_prob))
    mean_lp = mean_log_prob
    alpha = state.alpha
    grad = {"log_alpha": np.asarray(-alpha * (mean_lp + state.target_entropy))}
    nn.adam_step(state.opt_alpha, state.log_alpha, grad)
    return state.alpha


def select_action(policy: nn.Policy, planner, s, z, mature: int,
                  rng: np.random.Generator, substitute: bool = True):
    """Returns (u executed, u_dagger, h).  A planner infeasible-state
    failure downgrades to h = 0 and the policy acts."""
    p = policy.n_actions
    if planner is None:
        u_dagger, h = np.zeros(p), 0
    else:
        try:
            u_dagger, h = np.asarray(planner.plan(z).action, dtype=float), 1
        except InfeasibleStateError:
            u_dagger, h = np.zeros(p), 0
    if substitute and not mature and h == 1:
        return u_dagger.copy(), u_dagger, h
    rec = nn.policy_sample(policy, np.asarray(s, float)[None, :],
                           rng.standard_normal((1, p)))
    return np.asarray(rec.u[0], dtype=float), u_dagger, h


# ------------------------------------------------------------ training

@dataclass(frozen=True)
class AgentConfig:
    algorithm: str = "p2p-sac"
    seed: int = 0
    total_steps: int = 200_000
    eval_every: int = 5_000
    eval_episodes: int = 20
    hidden: tuple = (256, 256)
    dtype: str = "float32"
    lr: float = 3e-4
    discount: float = 0.99
    polyak: float = 0.995
    batch_size: int = 256
    alpha_init: float = 0.2
    target_entropy: float = -2.0
    plateau_steps: int = 100_000
    anneal_steps: int = 0
    beta_start: float = 10.0
    beta_end: float = 10.0
    gate_temperature: float = 1.0
    logit_margin: float = 1e-3
    planner_capacity: int = 1_000_000
    online_capacity: int = 1_000_000

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.total_steps < 0 or self.eval_every <= 0:
            raise ValueError("bad step counts")


@dataclass(frozen=True)
class CurvePoint:
    steps: int
    rew_mean: float
    rew_lo: float
    rew_hi: float
    suc_mean: float
    suc_lo: float
    suc_hi: float
    crash_rate: float
    gate_mean: float


@dataclass
class EvalStats:
    rew_mean: float
    rew_lo: float
    rew_hi: float
    suc_mean: float
    suc_lo: float
    suc_hi: float
    crash_rate: float


@dataclass
class TrainResult:
    curve: list
    best: dict
    final: dict
    best_step: int
    best_success: float
    best_reward: float
    buffer: "DualReplayBuffer | None" = None
    state: "SacState | None" = None


def snapshot(state: SacState) -> dict:
    """Flat named copies of every learned array."""
    out = {}
    groups = (("policy", state.policy.params), ("q1", state.critics.q1),
              ("q2", state.critics.q2), ("t1", state.critics.t1),
              ("t2", state.critics.t2), ("alpha", state.log_alpha))
    for prefix, params in groups:
        for k, v in params.items():
            out[f"{prefix}/{k}"] = np.array(v, copy=True)
    return out


def load_snapshot(state: SacState, entries: dict) -> None:
    groups = {"policy": state.policy.params, "q1": state.critics.q1,
              "q2": state.critics.q2, "t1": state.critics.t1,
              "t2": state.critics.t2, "alpha": state.log_alpha}
    for name, value in entries.items():
        prefix, _, key = name.partition("/")
        if prefix not in groups or key not in groups[prefix]:
            raise KeyError(f"unknown checkpoint entry {name!r}")
        dst = groups[prefix][key]
        if dst.shape != value.shape:
            raise ValueError(f"shape mismatch for {name!r}")
        dst[...] = value.astype(dst.dtype)


def _eval_seed(seed_root: int, k: int) -> int:
    return int(np.random.SeedSequence([seed_root, k]).generate_state(1)[0])


def evaluate(policy: nn.Policy, env, episodes: int,
             seed_root: int) -> EvalStats:
    """Deterministic squashed-mean rollouts on a fixed spawn set."""
    rews = np.zeros(episodes)
    sucs = np.zeros(episodes)
    crashes = np.zeros(episodes)
    for k in range(episodes):
        fs, obs = env.reset(_eval_seed(seed_root, k))
        total = 0.0
        while fs.terminal == "none":
            u = nn.policy_mean_action(policy, obs[None, :])[0]
            res = env.step(fs, np.asarray(u, dtype=float))
            total += res.reward
            fs, obs = res.state, res.observation
        rews[k] = total
        sucs[k] = float(fs.terminal == "goal")
        crashes[k] = float(fs.terminal == "crash")
    r_m, r_s = float(rews.mean()), float(rews.std())
    s_m, s_s = float(sucs.mean()), float(sucs.std())
    return EvalStats(rew_mean=r_m, rew_lo=r_m - r_s, rew_hi=r_m + r_s,
                     suc_mean=s_m, suc_lo=s_m - s_s, suc_hi=s_m + s_s,
                     crash_rate=float(crashes.mean()))


def train(cfg: AgentConfig, env, planner=None, progress=None) -> TrainResult:
    """Run the full loop and return curves plus best/final snapshots.

    Per step: schedule tick, act (with substitution while immature),
    store, then one gradient pass in fixed order: critics, gate, actor,
    temperature, target drift.
    """
    if cfg.algorithm != "sac" and planner is None:
        raise ValueError(f"{cfg.algorithm} needs a planner")
    streams = np.random.SeedSequence(cfg.seed).spawn(4)
    r_init, r_act, r_grad, r_env = (np.random.default_rng(s) for s in streams)
    dtype = np.float32 if cfg.dtype == "float32" else np.float64
    bound = env.config.action_bound
    lo, hi = np.array([-bound, -bound]), np.array([bound, bound])
    state = sac_init(r_init, obs_dim=4, lo=lo, hi=hi, hidden=cfg.hidden,
                     dtype=dtype, lr=cfg.lr, alpha_init=cfg.alpha_init,
                     target_entropy=cfg.target_entropy,
                     discount=cfg.discount, polyak=cfg.polyak,
                     batch_size=cfg.batch_size)
    sched = GuidanceSchedule(cfg.plateau_steps, cfg.anneal_steps,
                             cfg.beta_start, cfg.beta_end,
                             cfg.gate_temperature)
    buf = DualReplayBuffer(cfg.planner_capacity, cfg.online_capacity)
    eval_root = (cfg.seed << 16) ^ 0xE7A1

    fs, obs = env.reset(int(r_env.integers(2 ** 63)))
    if planner is not None:
        planner.reset()
    curve: list[CurvePoint] = []
    best = None
    best_key = (-np.inf, -np.inf)
    best_step = 0
    gate_sum, gate_n = 0.0, 0

    for t in range(cfg.total_steps):
        beta, mature = sched.tick(t)
        z, _ = env.planner_view(fs)
        want_planner = (cfg.algorithm == "p2p-sac"
                        or (cfg.algorithm == "accel-sac" and beta > 0.0))
        u, u_dag, h = select_action(
            state.policy, planner if want_planner else None, obs, z, mature,
            r_act, substitute=cfg.algorithm != "sac")
        res = env.step(fs, u)
        tr = Transition(s=obs, u=u, r=res.reward, s_next=res.observation,
                        u_dagger=u_dag, h=h,
                        done=int(res.terminal in _STOP_BOOTSTRAP),
                        cause=res.terminal)
        buf.add(tr, mature=bool(mature) or cfg.algorithm != "p2p-sac")
        fs, obs = res.state, res.observation
        if fs.terminal != "none":
            fs, obs = env.reset(int(r_env.integers(2 ** 63)))
            if planner is not None:
                planner.reset()

        if buf.total_size >= cfg.batch_size:
            batch = buf.sample(r_grad, cfg.batch_size)
            l_q1, l_q2 = critic_update(state, batch, r_grad)
            anchor = pseudo = None
            if cfg.algorithm == "p2p-sac":
                gate = gate_values(state, batch, mature,
                                   cfg.gate_temperature, r_grad)
                n_h = float(np.sum(batch.h))
                if n_h > 0:
                    gate_sum += float(np.sum(gate.m * batch.h))
                    gate_n += int(n_h)
                xi = planner_logit(batch.u_dagger, lo, hi, cfg.logit_margin)
                anchor = (xi, beta * gate.weight * batch.h)
            elif cfg.algorithm == "accel-sac" and beta > 0.0:
                pseudo = beta * batch.h
            l_pi, l_guide, mean_lp = actor_update(state, batch, r_grad,
                                                  anchor=anchor,
                                                  pseudo_label=pseudo)
            alpha = temperature_update(state, batch, r_grad,
                                       mean_log_prob=mean_lp)
            nn.polyak_update(state.critics.t1, state.critics.q1, cfg.polyak)
            nn.polyak_update(state.critics.t2, state.critics.q2, cfg.polyak)
            if not np.isfinite([l_q1, l_q2, l_pi, l_guide, alpha]).all():
                raise RuntimeError(f"non-finite loss at step {t}")

        if (t + 1) % cfg.eval_every == 0:
            stats = evaluate(state.policy, env, cfg.eval_episodes, eval_root)
            gate_mean = gate_sum / gate_n if gate_n else float("nan")
            gate_sum, gate_n = 0.0, 0
            point = CurvePoint(steps=t + 1, rew_mean=stats.rew_mean,
                               rew_lo=stats.rew_lo, rew_hi=stats.rew_hi,
                               suc_mean=stats.suc_mean, suc_lo=stats.suc_lo,
                               suc_hi=stats.suc_hi,
                               crash_rate=stats.crash_rate,
                               gate_mean=gate_mean)
            curve.append(point)
            key = (stats.suc_mean, stats.rew_mean)
            if key > best_key:
                best_key = key
                best = snapshot(state)
                best_step = t + 1
            if progress is not None:
                progress(point)

    final = snapshot(state)
    if best is None:
        best, best_step, best_key = final, cfg.total_steps, (0.0, 0.0)
    return TrainResult(curve=curve, best=best, final=final,
                       best_step=best_step, best_success=float(best_key[0]),
                       best_reward=float(best_key[1]), buffer=buf, state=state)
