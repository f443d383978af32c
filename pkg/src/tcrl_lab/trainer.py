"""PPO-clip with PID-controlled Lagrange multipliers and the TCRL objective.

One call to :func:`train_epoch` runs the per-iteration steps of the TCRL
loop in order: rollout (optionally under the training attacker), policy
bounds and admissible sets, worst next actions and worst-case cost targets,
worst-case critic fit, reward-defense statistics, and the policy update.
"""
from __future__ import annotations

import copy
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .attackers import AttackConfig, AttackContext, CriticSet
from .cmdp import TabularCmdp
from .critics import (
    MlpCritic, TabularCritic, Transitions, fit_worst_cost, gae_advantages, omega_table,
    policy_q_values, value_iteration_worst, worst_cost_target, worst_cost_values_tabular,
    _continuous_extreme,
)
from .defense import EntropyHistogram, corr_penalty, max_entropy_rate, squared_lag_sum, RewardWindow
from .errors import ConfigError, TrainingError
from .nets import Adam
from .perturbation import PerturbationBudget, grow, norm
from .policies import MlpGaussianPolicy, TabularSoftmaxPolicy

METHODS = ("vanilla", "random_adv", "mc_adv", "tcrl")
METHOD_ATTACKER = {"vanilla": "none", "random_adv": "random", "mc_adv": "mc", "tcrl": "worst_tc"}
CONSTRAINTS = ("cost", "corr", "ent")


@dataclass
class PpoConfig:
    clip: float = 0.02
    gamma: float = 0.99
    gae_lambda: float = 0.95
    target_kl: float = 0.01
    actor_steps: int = 80
    actor_lr: float = 2e-4
    critic_lr: float = 1e-3
    tabular_critic_lr: float = 0.1
    critic_steps: int = 80
    batch_size: int = 4000
    minibatch_size: int = 300
    epochs: int = 100
    n_envs: int = 40
    normalize_advantages: bool = True

    def __post_init__(self):
        if not 0.0 < self.clip < 1.0:
            raise ConfigError("clip must lie in (0, 1)")
        if self.actor_lr <= 0 or self.critic_lr <= 0 or self.tabular_critic_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma={self.gamma} must lie in [0, 1)")


@dataclass
class PidGains:
    kp: float = 0.1
    ki: float = 0.005
    kd: float = 0.002


@dataclass
class LagrangeState:
    multipliers: dict = field(default_factory=lambda: {k: 0.0 for k in CONSTRAINTS})
    integral: dict = field(default_factory=lambda: {k: 0.0 for k in CONSTRAINTS})
    prev_error: dict = field(default_factory=lambda: {k: 0.0 for k in CONSTRAINTS})
    gains: PidGains = field(default_factory=PidGains)


def pid_update(state: LagrangeState, measured: dict, thresholds: dict) -> LagrangeState:
    """PID step for every constraint present in ``measured``.

    e = measured - threshold; integral <- max(0, integral + e);
    λ <- max(0, K_P e + K_I integral + K_D (e - e_prev)).
    """
    g = state.gains
    lam, integ, prev = dict(state.multipliers), dict(state.integral), dict(state.prev_error)
    for key, value in measured.items():
        if value is None:
            continue
        e = float(value) - float(thresholds[key])
        integ[key] = max(0.0, integ[key] + e)
        lam[key] = max(0.0, g.kp * e + g.ki * integ[key] + g.kd * (e - prev[key]))
        prev[key] = e
    return LagrangeState(lam, integ, prev, g)


@dataclass
class TrainerConfig:
    method: str = "tcrl"
    cost_threshold: float = 5.0
    eps_corr: float = 5.0
    eps_ent: float = 2.0
    use_worst_cost: bool | None = None  # None -> method default
    use_reward_defense: bool | None = None
    train_attacker: str | None = None  # None -> method default
    orientation: str = "max"
    worst_critic_steps: int = 80
    window: int = 16
    n_bins: int = 10
    reward_range: tuple | None = None
    fixed_multipliers: dict | None = None
    pid: PidGains = field(default_factory=PidGains)
    exact_attack_critics: bool = True
    worst_critic_init: float = 0.0
    attack_fraction: float = 0.5

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method {self.method!r} not in {METHODS}")
        tcrl = self.method == "tcrl"
        if self.use_worst_cost is None:
            self.use_worst_cost = tcrl
        if self.use_reward_defense is None:
            self.use_reward_defense = tcrl
        if self.train_attacker is None:
            self.train_attacker = METHOD_ATTACKER[self.method]
        if not 0.0 <= self.attack_fraction <= 1.0:
            raise ConfigError("attack_fraction must lie in [0, 1]")
        if self.orientation not in ("max", "min"):
            raise ConfigError("orientation must be 'max' or 'min'")

    @property
    def lagrangian_form(self) -> str:
        """'ppol' (1/(1+λ)-normalized baseline path) or 'tcrl' (unnormalized)."""
        return "tcrl" if self.method == "tcrl" else "ppol"


# --------------------------------------------------------------------------
# losses


def ppo_clip_loss(policy, obs, actions, logp_old, advantages, clip):
    """Negated mean clipped surrogate and its parameter gradient.

    Rows with a non-finite ratio are skipped; their count is returned last.
    """
    logp = policy.log_prob_batch(obs, actions)
    ratio = np.exp(logp - logp_old)
    ok = np.isfinite(ratio)
    skipped = int(np.sum(~ok))
    ratio = np.where(ok, ratio, 1.0)
    adv = np.where(ok, advantages, 0.0)
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip)
    surr = np.minimum(ratio * adv, clipped * adv)
    n = max(int(ok.sum()), 1)
    active = (ratio * adv <= clipped * adv) & ok
    weights = np.where(active, adv * ratio, 0.0) / n
    grad = -policy.weighted_grad(obs, actions, weights)
    return -float(np.sum(np.where(ok, surr, 0.0)) / n), grad, skipped


def ppol_loss(ppo_loss: float, v_r: float, v_c: float, lam: float) -> float:
    """ℓ_ppol = (ℓ_ppo + V_r − λ V_c) / (1 + λ)."""
    if lam < 0:
        raise ConfigError("multiplier must be nonnegative")
    return (ppo_loss + v_r - lam * v_c) / (1.0 + lam)


def combined_advantage(form, lagrange: LagrangeState, adv_r, adv_cost, pen_corr=None,
                       pen_ent=None):
    """Per-step advantage whose clipped surrogate realizes the Lagrangian.

    ``pen_corr`` / ``pen_ent`` are per-step copies of the centered
    trajectory penalties (score-function terms with a batch-mean baseline).
    """
    lam = lagrange.multipliers
    if form == "ppol":
        return (adv_r - lam["cost"] * adv_cost) / (1.0 + lam["cost"])
    out = adv_r - lam["cost"] * adv_cost
    if pen_corr is not None:
        out = out - lam["corr"] * pen_corr
    if pen_ent is not None:
        out = out - lam["ent"] * pen_ent
    return out


def tcrl_objective(policy, batch, lagrange: LagrangeState, measured: dict, thresholds: dict,
                   clip: float):
    """Scalar Lagrangian (maximized) and its gradient at the current policy.

    ``batch`` provides obs, actions, logp_old, adv_r, adv_cost and optional
    pen_corr / pen_ent (centered per-step penalties).  Constraint terms of
    unready constraints (measured None) are zero.
    """
    if batch.get("adv_cost") is None:
        raise ConfigError("cost advantages missing: no cost critic supplied")
    adv = combined_advantage("tcrl", lagrange, batch["adv_r"], batch["adv_cost"],
                             batch.get("pen_corr"), batch.get("pen_ent"))
    loss, grad, _ = ppo_clip_loss(policy, batch["obs"], batch["actions"], batch["logp_old"],
                                  adv, clip)
    value = -loss
    for key in CONSTRAINTS:
        if measured.get(key) is not None:
            value -= lagrange.multipliers[key] * (measured[key] - thresholds[key])
    return value, -grad


# --------------------------------------------------------------------------
# agent


@dataclass
class Agent:
    policy: object
    v_reward: object
    v_cost: object
    worst: object
    q_reward: object = None
    q_cost: object = None
    lagrange: LagrangeState = field(default_factory=LagrangeState)
    actor_opt: Adam | None = None
    epoch: int = 0
    hist_range: tuple | None = None


def build_agent(env, ppo: PpoConfig, tcfg: TrainerConfig, rng, hidden=(256, 256),
                critic_hidden=(64, 64), init_scale=0.0) -> Agent:
    if isinstance(env, TabularCmdp):
        policy = TabularSoftmaxPolicy(env.lattice, env.n_actions, rng=rng, init_scale=init_scale)
        S, A = env.n_states, env.n_actions
        agent = Agent(policy, TabularCritic.zeros("reward", S), TabularCritic.zeros("cost", S),
                      TabularCritic("worst_cost", np.full((S, A), tcfg.worst_critic_init)))
    else:
        policy = MlpGaussianPolicy(env.obs_dim, env.action_dim, hidden, rng)
        o, a = env.obs_dim, env.action_dim
        agent = Agent(
            policy,
            MlpCritic("reward", o, 0, critic_hidden, ppo.critic_lr, rng),
            MlpCritic("cost", o, 0, critic_hidden, ppo.critic_lr, rng),
            MlpCritic("worst_cost", o, a, critic_hidden, ppo.critic_lr, rng),
            MlpCritic("reward", o, a, critic_hidden, ppo.critic_lr, rng),
            MlpCritic("cost", o, a, critic_hidden, ppo.critic_lr, rng),
        )
    agent.lagrange = LagrangeState(gains=replace(tcfg.pid))
    if tcfg.fixed_multipliers:
        agent.lagrange.multipliers.update({k: float(v) for k, v in tcfg.fixed_multipliers.items()})
    agent.actor_opt = Adam(agent.policy.n_params, ppo.actor_lr)
    return agent


STREAMS = ("init", "env", "act", "attack", "minibatch", "critic", "worst", "eval")


def make_streams(seed: int, purpose: int = 0) -> dict:
    """Independent counter-based generators, one per component.

    ``purpose`` separates families (0 training, 1 evaluation) for one seed.
    """
    names = STREAMS
    children = np.random.SeedSequence([int(seed), int(purpose)]).spawn(len(names))
    return {n: np.random.Generator(np.random.Philox(c)) for n, c in zip(names, children)}


# --------------------------------------------------------------------------
# rollouts


@dataclass
class Episode:
    states: np.ndarray
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    dones: np.ndarray
    next_states: np.ndarray
    perturbations: np.ndarray
    eps_bars: np.ndarray
    complete: bool
    terminal: bool
    fallbacks: int = 0

    def __len__(self):
        return len(self.rewards)


def collect(env, policy, ctx: AttackContext | None, budget: PerturbationBudget, streams,
            n_slots: int, horizon: int, min_steps: int | None = None,
            episodes: int | None = None, act_stream="act", env_stream="env",
            attack_stream="attack", attack_fraction: float = 1.0) -> list[Episode]:
    """Run ``n_slots`` environments in lockstep.

    With ``min_steps`` slots restart finished episodes until that many steps
    are collected (unfinished episodes are returned truncated).  With
    ``episodes`` each slot runs exactly one episode.  Only the first
    ``round(attack_fraction * n_slots)`` slots are attacked.
    """
    rng_env, rng_act, rng_att = streams[env_stream], streams[act_stream], streams[attack_stream]
    if episodes is not None:
        n_slots = episodes
    states = env.reset_batch(n_slots, rng_env)
    obs_dim = env.obs_dim
    prev = np.zeros((n_slots, obs_dim))
    eps_bar = np.full(n_slots, budget.eps_bar, dtype=float)
    bufs = [[] for _ in range(n_slots)]
    live = np.ones(n_slots, dtype=bool)
    out: list[Episode] = []
    total = 0
    attacking = ctx is not None and ctx.config.kind != "none"
    hit = np.arange(n_slots) < int(round(attack_fraction * n_slots))

    def finalize(i, complete, terminal):
        rows = bufs[i]
        cols = list(zip(*rows))
        out.append(Episode(*[np.array(c) for c in cols[:9]], complete=complete,
                           terminal=terminal, fallbacks=int(np.sum(cols[9]))))
        bufs[i] = []

    while True:
        idx = np.flatnonzero(live)
        if len(idx) == 0:
            break
        s = states[idx]
        o = env.observe_batch(s)
        pert, fb = np.zeros_like(o), np.zeros(len(idx), dtype=bool)
        sel = hit[idx]
        if attacking and sel.any():
            pert[sel], _, fb[sel] = ctx.attack_batch(o[sel], prev[idx][sel], eps_bar[idx][sel],
                                                     rng_att)
        o_tilde = o + pert
        a = policy.act_batch(o_tilde, rng_act)
        a_env = a if env.discrete else np.clip(a, env.action_low, env.action_high)
        nxt, r, c, d = env.step_batch(s, a_env, rng_env)
        for j, i in enumerate(idx):
            bufs[i].append((s[j], o_tilde[j], a[j], r[j], c[j], d[j], nxt[j], pert[j],
                            eps_bar[i], fb[j]))
        total += len(idx)
        eps_bar[idx] = grow(eps_bar[idx], budget.alpha, norm(pert, budget.p), budget.eps_bar_max)
        prev[idx] = pert
        states[idx] = nxt
        for j, i in enumerate(idx):
            ended = bool(d[j]) or len(bufs[i]) >= horizon
            if not ended:
                continue
            finalize(i, True, bool(d[j]))
            if episodes is not None:
                live[i] = False
            else:
                states[i] = env.reset_batch(1, rng_env)[0]
                prev[i] = 0.0
                eps_bar[i] = budget.eps_bar
        if min_steps is not None and total >= min_steps:
            break
    for i in range(n_slots):
        if bufs[i]:
            finalize(i, False, False)
    return out


# --------------------------------------------------------------------------
# epoch


@dataclass
class EpochReport:
    epoch: int
    mean_reward: float
    std_reward: float
    mean_cost: float
    std_cost: float
    worst_cost: float
    c_corr: float
    c_ent: float
    lambda_cost: float
    lambda_corr: float
    lambda_ent: float
    attack_norm: float
    attack_eps_bar: float
    attack_fallbacks: int
    episodes: int
    skipped_ratios: int
    actor_steps: int
    wall_time: float = field(default=0.0, compare=False)

    def metrics(self) -> dict:
        d = asdict(self)
        d.pop("wall_time")
        return d


def _values(critic, states):
    if isinstance(critic, TabularCritic):
        return critic.table[np.asarray(states, dtype=np.int64)]
    return critic.q(states)


def exact_critics(env: TabularCmdp, policy, eps, orientation="max") -> CriticSet:
    """Model-based Q_r, Q_c and Q̲_c of ``policy`` (white-box attacker view)."""
    pi = policy.table()
    worst = value_iteration_worst(env, policy, eps, tol=1e-6, orientation=orientation).table
    return CriticSet(reward=policy_q_values(env, pi, "reward"),
                     cost=policy_q_values(env, pi, "cost"), worst=worst)


def attack_context(env, agent: Agent, config: AttackConfig, exact=True, orientation="max"):
    if config.kind == "none":
        return None
    if config.kind == "random":
        return AttackContext(agent.policy, None, config)
    if isinstance(env, TabularCmdp) and exact:
        critics = exact_critics(env, agent.policy, config.budget.eps, orientation)
    else:
        critics = CriticSet(reward=agent.q_reward, cost=agent.q_cost, worst=agent.worst)
    return AttackContext(agent.policy, critics, config)


def _stack(episodes, name):
    return np.concatenate([getattr(e, name) for e in episodes])


def _minibatches(rng, n, size, steps):
    for _ in range(steps):
        yield rng.choice(n, size=min(size, n), replace=False)


def _fit_values(agent, env, ppo, streams, states, ret_r, ret_c):
    rng = streams["critic"]
    n = len(ret_r)
    for idx in _minibatches(rng, n, ppo.minibatch_size, ppo.critic_steps):
        for critic, ret in ((agent.v_reward, ret_r), (agent.v_cost, ret_c)):
            if isinstance(critic, TabularCritic):
                s = np.asarray(states[idx], dtype=np.int64)
                num = np.bincount(s, ret[idx] - critic.table[s], minlength=len(critic.table))
                den = np.bincount(s, minlength=len(critic.table))
                hit = den > 0
                critic.table[hit] += ppo.tabular_critic_lr * num[hit] / den[hit]
            else:
                critic.regress(states[idx], None, ret[idx])


def _fit_q(agent, env, ppo, streams, states, actions, rewards, costs, next_states, dones):
    """TD(0) fit of Q_r, Q_c networks (continuous envs; attacker support)."""
    rng = streams["critic"]
    live = 1.0 - dones.astype(float)
    for idx in _minibatches(rng, len(rewards), ppo.minibatch_size, ppo.critic_steps):
        for q, v, sig in ((agent.q_reward, agent.v_reward, rewards), (agent.q_cost, agent.v_cost, costs)):
            y = sig[idx] + ppo.gamma * live[idx] * v.q(next_states[idx])
            q.regress(states[idx], actions[idx], y)


def _worst_critic_step(agent, env, ppo, tcfg, budget, streams, batch: Transitions, omega):
    rng = streams["worst"]
    lr = ppo.tabular_critic_lr if isinstance(agent.worst, TabularCritic) else ppo.critic_lr
    losses = []
    coords = env.coords if isinstance(env, TabularCmdp) else None
    for idx in _minibatches(rng, len(batch), ppo.minibatch_size, tcfg.worst_critic_steps):
        sub = Transitions(batch.states[idx], batch.actions[idx], batch.costs[idx],
                          batch.next_states[idx], batch.dones[idx])
        y = worst_cost_target(sub, agent.policy, agent.worst, budget.eps, ppo.gamma,
                              tcfg.orientation, omega=omega, coords=coords)
        losses.append(fit_worst_cost(agent.worst, sub, y, lr))
    return float(np.mean(losses)) if losses else 0.0


def _worst_value(agent, env, budget, states, omega, orientation):
    if isinstance(agent.worst, TabularCritic):
        return worst_cost_values_tabular(agent.worst, omega, states, orientation)
    return _continuous_extreme(agent.worst, agent.policy, states, budget.eps, orientation, False)


def _defense_stats(episodes, tcfg: TrainerConfig, hist: EntropyHistogram):
    """Per-episode (C_corr, Σφ², C_ent); None entries when not ready."""
    w = tcfg.window
    out = []
    for ep in episodes:
        r = ep.rewards
        if len(r) < w:
            out.append((None, None, None))
            continue
        win = RewardWindow(w)
        win.extend(r[-w:])
        c_ent = max_entropy_rate(hist, r)
        out.append((corr_penalty(win), squared_lag_sum(r[-w:]), c_ent))
    return out


def _standardize(x):
    sd = x.std()
    return (x - x.mean()) / sd if sd > 1e-8 else x - x.mean()


def train_epoch(env, agent: Agent, ppo: PpoConfig, tcfg: TrainerConfig,
                budget: PerturbationBudget, attack: AttackConfig | None, streams) -> EpochReport:
    """One TCRL iteration; on a non-finite loss or parameter the agent is
    restored to its state at entry and :class:`TrainingError` is raised."""
    backup = copy.deepcopy(agent)
    try:
        return _train_epoch(env, agent, ppo, tcfg, budget, attack, streams)
    except (TrainingError, FloatingPointError) as err:
        agent.__dict__.update(backup.__dict__)
        if isinstance(err, TrainingError):
            raise
        raise TrainingError(f"epoch {agent.epoch} aborted: {err}") from err


def _train_epoch(env, agent, ppo, tcfg, budget, attack, streams) -> EpochReport:
    t0 = time.perf_counter()
    horizon = env.horizon
    # 4: rollout, under the training attacker if any
    kind = tcfg.train_attacker
    cfg = replace(attack or AttackConfig(budget=budget), kind=kind, budget=budget)
    ctx = attack_context(env, agent, cfg, tcfg.exact_attack_critics, tcfg.orientation)
    eps_list = collect(env, agent.policy, ctx, budget, streams, _slots(ppo, horizon), horizon,
                       min_steps=ppo.batch_size, attack_fraction=tcfg.attack_fraction)
    states = _stack(eps_list, "states")
    obs = _stack(eps_list, "obs")
    actions = _stack(eps_list, "actions")
    rewards = _stack(eps_list, "rewards")
    costs = _stack(eps_list, "costs")
    dones = _stack(eps_list, "dones")
    next_states = _stack(eps_list, "next_states")
    ep_of = np.concatenate([np.full(len(e), k) for k, e in enumerate(eps_list)])

    # advantages from the current value critics
    adv_r, adv_c, ret_r, ret_c = [], [], [], []
    for e in eps_list:
        last_s = e.next_states[-1:]
        for critic, sig, adv_out, ret_out in ((agent.v_reward, e.rewards, adv_r, ret_r),
                                              (agent.v_cost, e.costs, adv_c, ret_c)):
            v = _values(critic, e.states)
            last = 0.0 if e.terminal else float(_values(critic, last_s)[0])
            a = gae_advantages(sig, v, ppo.gamma, ppo.gae_lambda, last, e.dones)
            adv_out.append(a)
            ret_out.append(a + v)
    adv_r, adv_c = np.concatenate(adv_r), np.concatenate(adv_c)
    ret_r, ret_c = np.concatenate(ret_r), np.concatenate(ret_c)

    # 5-9: bounds / Ω, worst next actions, worst-case targets, critic fit
    tabular = isinstance(env, TabularCmdp)
    train_worst = tcfg.use_worst_cost or not tabular
    omega = omega_table(agent.policy, env.coords, budget.eps) if tabular and train_worst else None
    worst_estimate = float("nan")
    if train_worst:
        batch = Transitions(states, actions, costs, next_states, dones)
        _worst_critic_step(agent, env, ppo, tcfg, budget, streams, batch, omega)
        starts = np.array([e.states[0] for e in eps_list])
        worst_estimate = float(np.mean(_worst_value(agent, env, budget, starts, omega,
                                                    tcfg.orientation)))

    # 10-11: reward-defense statistics
    complete = [e for e in eps_list if e.complete]
    hist = EntropyHistogram(tcfg.n_bins, window=tcfg.window)
    if tcfg.reward_range is not None:
        hist.r_min, hist.r_max = map(float, tcfg.reward_range)
    else:
        if agent.hist_range is None:
            first = rewards[:tcfg.window]
            lo, hi = float(first.min()), float(first.max())
            if hi <= lo:
                lo, hi = lo - 0.5, hi + 0.5
            agent.hist_range = (lo, hi)
        hist.r_min, hist.r_max = agent.hist_range
    stats = _defense_stats(eps_list, tcfg, hist)
    c_corr_vals = [s[0] for s in stats if s[0] is not None]
    c_ent_vals = [s[2] for s in stats if s[2] is not None]
    c_corr = float(np.mean(c_corr_vals)) if c_corr_vals else None
    c_ent = float(np.mean(c_ent_vals)) if c_ent_vals else None

    # multipliers
    disc_cost = np.array([np.sum(e.costs * ppo.gamma ** np.arange(len(e))) for e in complete]) \
        if complete else np.zeros(1)
    measured = {"cost": worst_estimate if tcfg.use_worst_cost else float(disc_cost.mean())}
    if tcfg.use_reward_defense:
        measured.update(corr=c_corr, ent=c_ent)
    thresholds = {"cost": tcfg.cost_threshold, "corr": tcfg.eps_corr, "ent": tcfg.eps_ent}
    if not tcfg.fixed_multipliers:
        agent.lagrange = pid_update(agent.lagrange, measured, thresholds)

    # 12: policy update
    if tcfg.use_worst_cost:
        if tabular:
            s_int = np.asarray(states, np.int64)
            q_taken = agent.worst.table[s_int, np.asarray(actions, np.int64)]
            base = np.sum(agent.policy.probs(obs) * agent.worst.table[s_int], axis=1)
        else:
            q_taken = agent.worst.q(states, actions)
            base = agent.worst.q(states, agent.policy.mean(obs))
        adv_cost = q_taken - base
    else:
        adv_cost = adv_c
    pen_corr = pen_ent = None
    if tcfg.use_reward_defense:
        pc = np.array([s[1] if s[1] is not None else np.nan for s in stats])
        pe = np.array([s[2] if s[2] is not None else np.nan for s in stats])
        pen_corr = _centered_per_step(pc, ep_of)
        pen_ent = _centered_per_step(pe, ep_of)
    adv = combined_advantage(tcfg.lagrangian_form, agent.lagrange, adv_r, adv_cost,
                             pen_corr, pen_ent)
    if ppo.normalize_advantages:
        adv = _standardize(adv)
    logp_old = agent.policy.log_prob_batch(obs, actions)
    skipped, steps = _actor_update(agent, ppo, streams, obs, actions, logp_old, adv)
    _fit_values(agent, env, ppo, streams, states, ret_r, ret_c)
    if not tabular:
        _fit_q(agent, env, ppo, streams, states, actions, rewards, costs, next_states, dones)
    bad = _non_finite(agent)
    if bad:
        raise TrainingError(f"non-finite {bad} parameters in epoch {agent.epoch}")

    ep_r = np.array([e.rewards.sum() for e in complete]) if complete else np.zeros(1)
    ep_c = np.array([e.costs.sum() for e in complete]) if complete else np.zeros(1)
    perts = _stack(eps_list, "perturbations")
    lam = agent.lagrange.multipliers
    report = EpochReport(
        epoch=agent.epoch, mean_reward=float(ep_r.mean()), std_reward=float(ep_r.std()),
        mean_cost=float(ep_c.mean()), std_cost=float(ep_c.std()),
        worst_cost=worst_estimate,
        c_corr=float("nan") if c_corr is None else c_corr,
        c_ent=float("nan") if c_ent is None else c_ent,
        lambda_cost=lam["cost"], lambda_corr=lam["corr"], lambda_ent=lam["ent"],
        attack_norm=float(np.mean(norm(perts, budget.p))),
        attack_eps_bar=float(np.mean(_stack(eps_list, "eps_bars"))),
        attack_fallbacks=int(sum(e.fallbacks for e in eps_list)),
        episodes=len(complete), skipped_ratios=skipped, actor_steps=steps,
        wall_time=time.perf_counter() - t0,
    )
    agent.epoch += 1
    return report


def _non_finite(agent) -> str | None:
    if not np.all(np.isfinite(agent.policy.get_flat())):
        return "policy"
    for name in ("v_reward", "v_cost", "worst", "q_reward", "q_cost"):
        c = getattr(agent, name)
        if c is None:
            continue
        flat = c.table if isinstance(c, TabularCritic) else c.net.get_flat()
        if not np.all(np.isfinite(flat)):
            return name
    return None


def _slots(ppo: PpoConfig, horizon: int) -> int:
    """Parallel episodes per batch: batch_size // horizon, capped at n_envs."""
    return max(1, min(ppo.n_envs, ppo.batch_size // horizon))


def _centered_per_step(per_episode, ep_of):
    """Per-step copy of centered episode penalties; unready episodes get 0."""
    ready = np.isfinite(per_episode)
    if not ready.any():
        return None
    centered = np.where(ready, per_episode - per_episode[ready].mean(), 0.0)
    return centered[ep_of]


def _actor_update(agent, ppo, streams, obs, actions, logp_old, adv):
    rng = streams["minibatch"]
    pol = agent.policy
    skipped = 0
    steps = 0
    for idx in _minibatches(rng, len(adv), ppo.minibatch_size, ppo.actor_steps):
        kl = float(np.mean(logp_old - pol.log_prob_batch(obs, actions)))
        if kl > ppo.target_kl:
            break
        loss, grad, sk = ppo_clip_loss(pol, obs[idx], actions[idx], logp_old[idx], adv[idx],
                                       ppo.clip)
        if not np.isfinite(loss):
            raise TrainingError("non-finite PPO loss")
        skipped += sk
        pol.set_flat(agent.actor_opt.step(pol.get_flat(), grad))
        steps += 1
    return skipped, steps


def ppo_epoch(env, agent: Agent, ppo: PpoConfig, budget: PerturbationBudget, streams):
    """Plain PPO epoch (no attacker, no constraints); reference code path."""
    eps_list = collect(env, agent.policy, None, budget, streams, _slots(ppo, env.horizon),
                       env.horizon, min_steps=ppo.batch_size)
    states = _stack(eps_list, "states")
    obs = _stack(eps_list, "obs")
    actions = _stack(eps_list, "actions")
    adv_r, ret_r, ret_c = [], [], []
    for e in eps_list:
        last_s = e.next_states[-1:]
        v = _values(agent.v_reward, e.states)
        last = 0.0 if e.terminal else float(_values(agent.v_reward, last_s)[0])
        a = gae_advantages(e.rewards, v, ppo.gamma, ppo.gae_lambda, last, e.dones)
        adv_r.append(a)
        ret_r.append(a + v)
        vc = _values(agent.v_cost, e.states)
        lastc = 0.0 if e.terminal else float(_values(agent.v_cost, last_s)[0])
        ret_c.append(gae_advantages(e.costs, vc, ppo.gamma, ppo.gae_lambda, lastc, e.dones) + vc)
    adv = np.concatenate(adv_r)
    if ppo.normalize_advantages:
        adv = _standardize(adv)
    logp_old = agent.policy.log_prob_batch(obs, actions)
    _actor_update(agent, ppo, streams, obs, actions, logp_old, adv)
    _fit_values(agent, env, ppo, streams, states, np.concatenate(ret_r), np.concatenate(ret_c))
    agent.epoch += 1
    return eps_list


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    attacker: str
    episodes: int
    mean_reward: float
    std_reward: float
    mean_cost: float
    std_cost: float
    attack_norm: float
    max_eps_bar: float
    fallbacks: int
    episode_rewards: np.ndarray = field(repr=False, default=None)
    episode_costs: np.ndarray = field(repr=False, default=None)
    trajectories: list = field(repr=False, default=None)


def evaluate_under_attack(env, agent: Agent, attack: AttackConfig, episodes: int, streams,
                          exact_critics_for_tabular=True, orientation="max",
                          keep_trajectories=False) -> EvalReport:
    ctx = attack_context(env, agent, attack, exact_critics_for_tabular, orientation)
    eps_list = collect(env, agent.policy, ctx, attack.budget, streams, episodes, env.horizon,
                       episodes=episodes, act_stream="eval", env_stream="eval",
                       attack_stream="eval")
    R = np.array([e.rewards.sum() for e in eps_list])
    C = np.array([e.costs.sum() for e in eps_list])
    perts = _stack(eps_list, "perturbations")
    return EvalReport(
        attack.kind, len(eps_list), float(R.mean()), float(R.std()), float(C.mean()),
        float(C.std()), float(np.mean(norm(perts, attack.budget.p))),
        float(max(e.eps_bars.max() for e in eps_list)),
        int(sum(e.fallbacks for e in eps_list)), R, C,
        eps_list if keep_trajectories else None,
    )
