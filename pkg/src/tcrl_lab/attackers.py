"""Evaluation-time observation attackers: Random, MAD, MC and Worst-TC.

All attackers work on batches of true observations and return
perturbations that satisfy both the base ball ``||p|| <= eps`` and the
temporal ball ``||p - p_prev|| <= eps_bar``.

MLP policies are attacked with projected gradient steps.  A tabular
policy is piecewise constant in its observation (zero gradient almost
everywhere), so it is attacked by exhaustive search over the lattice cells
reachable inside the feasible set, which is exact for the ℓ∞ ball.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .critics import GRID_POINTS, ActionSet, admissible_action_set, omega_table
from .errors import ConfigError, DomainError
from .perturbation import PerturbationBudget, grow, norm, parse_norm, project_batch
from .policies import TabularSoftmaxPolicy, softmax

KINDS = ("none", "random", "mad", "mc", "worst_tc")
LINE_SEARCH_HALVINGS = 5


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "worst_tc"
    steps: int = 10
    lr: float = 0.05
    weight: float = 0.5  # trade-off λ in Q_r - λ Q_c (Worst-TC)
    budget: PerturbationBudget = field(default_factory=lambda: PerturbationBudget(eps=0.1))
    cost_critic: str = "worst"  # Worst-TC uses Q̲_c ("worst") or Q_c ("nominal")
    step_rule: str = "steepest"  # "steepest" (sign / normalized) or "raw"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"attack kind {self.kind!r} not in {KINDS}")
        if self.lr <= 0:
            raise ConfigError("attack learning rate must be positive")
        if self.steps < 1:
            raise ConfigError("attack step count must be at least 1")
        if self.kind == "worst_tc" and not self.weight < 1:
            raise ConfigError("Worst-TC weight must be < 1")
        if self.cost_critic not in ("worst", "nominal"):
            raise ConfigError("cost_critic must be 'worst' or 'nominal'")
        if self.step_rule not in ("steepest", "raw"):
            raise ConfigError("step_rule must be 'steepest' or 'raw'")


@dataclass
class CriticSet:
    """Critics an attacker may query; tables (S, A) or MlpCritic objects."""

    reward: object = None
    cost: object = None
    worst: object = None


@dataclass
class AttackResult:
    perturbed: np.ndarray
    perturbation: np.ndarray
    objective: float
    budget: PerturbationBudget
    infeasible: bool = False
    fallback: bool = False


def _direction(grad, p, rule):
    if rule == "raw":
        return grad
    if parse_norm(p) == np.inf:
        return np.sign(grad)
    n = np.sqrt(np.sum(grad * grad, axis=-1, keepdims=True))
    return np.where(n > 0, grad / np.maximum(n, 1e-300), 0.0)


def pgd_step_batch(grad, current, lr, eps, eps_bar, prev, p, rule="steepest"):
    """``Proj[current - lr * d(grad)]`` row by row (descent on the objective)."""
    grad = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite attack gradient")
    lr = np.asarray(lr, dtype=float).reshape(-1, 1) if np.ndim(lr) else lr
    cand = current - lr * _direction(grad, p, rule)
    return project_batch(cand, prev, eps, eps_bar, p)[0]


def pgd_step(objective_gradient, current, lr, budget: PerturbationBudget, prev_perturbation,
             rule="steepest"):
    return pgd_step_batch(np.atleast_2d(objective_gradient), np.atleast_2d(current), lr,
                          budget.eps, budget.eps_bar, np.atleast_2d(prev_perturbation),
                          budget.p, rule)[0]


def sample_ball(n, dim, eps, p, rng):
    if parse_norm(p) == np.inf:
        return rng.uniform(-eps, eps, size=(n, dim))
    d = rng.standard_normal((n, dim))
    d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)
    return d * eps * rng.random((n, 1)) ** (1.0 / dim)


def _table(critic):
    return critic.table if hasattr(critic, "table") else np.asarray(critic, dtype=float)


class AttackContext:
    """Attacker bound to one (frozen) policy and critic set."""

    def __init__(self, policy, critics: CriticSet | None, config: AttackConfig):
        self.policy = policy
        self.critics = critics or CriticSet()
        self.config = config
        self.tabular = isinstance(policy, TabularSoftmaxPolicy)
        if self.tabular and config.kind in ("mad", "mc", "worst_tc"):
            self._prepare_tabular()

    # ---- tabular --------------------------------------------------------
    def _prepare_tabular(self):
        pol, cfg = self.policy, self.config
        pi = pol.table()
        if cfg.kind == "mad":
            logp = np.log(pi)
            # obj[s, c] = KL(π(c) || π(s))
            self.obj = (pi * logp).sum(1)[None, :] - logp @ pi.T
        elif cfg.kind == "mc":
            qc = _table(self.critics.cost)
            self.obj = qc @ pi.T
        else:
            self.target_actions = self._tabular_targets()
            self.obj = np.log(pi[:, self.target_actions]).T

    def _tabular_targets(self):
        pol, cfg = self.policy, self.config
        qr = _table(self.critics.reward)
        qc = _table(self.critics.worst if cfg.cost_critic == "worst" else self.critics.cost)
        coords = pol.lattice.coords()
        omega = omega_table(pol, coords, cfg.budget.eps)
        score = np.where(omega, qr - cfg.weight * qc, np.inf)
        return np.argmin(score, axis=1)

    def _tabular_search(self, obs, prev, eps_bar):
        lat = self.policy.lattice
        eps, p = self.config.budget.eps, self.config.budget.p
        B, d = obs.shape
        R = int(np.floor(eps + 0.5)) + 1
        offs = np.stack([m.ravel() for m in np.meshgrid(*([np.arange(-R, R + 1)] * d),
                                                           indexing="ij")], axis=1)
        here = lat.cell_of(obs)
        cells = here[:, None, :] + offs[None, :, :]  # (B, K, d)
        shape = np.asarray(lat.shape)
        inside = np.all((cells >= 0) & (cells < shape), axis=2)
        cells = np.clip(cells, 0, shape - 1)
        rlo, rhi = lat.region(cells)
        rb = np.asarray(eps_bar, dtype=float).reshape(-1, 1, 1)
        blo = np.maximum(-eps, prev[:, None, :] - rb)
        bhi = np.minimum(eps, prev[:, None, :] + rb)
        lo = np.maximum(rlo - obs[:, None, :], blo)
        hi = np.minimum(rhi - obs[:, None, :], bhi)
        ok = inside & np.all(lo <= hi, axis=2)
        pert = np.clip(np.broadcast_to(prev[:, None, :], lo.shape), lo, np.maximum(lo, hi))
        if parse_norm(p) != np.inf:
            flat, _ = project_batch(pert.reshape(-1, d), np.repeat(prev, len(offs), axis=0),
                                    eps, np.repeat(np.asarray(eps_bar, float).reshape(-1),
                                                   len(offs)), p)
            pert = flat.reshape(pert.shape)
            ok &= np.all(lat.cell_of(obs[:, None, :] + pert) == cells, axis=2)
        states = lat.index_grid[tuple(np.moveaxis(cells, 2, 0))]
        return pert, ok, states

    def _attack_tabular(self, obs, prev, eps_bar):
        pert, ok, cand = self._tabular_search(obs, prev, eps_bar)
        s = self.policy.lattice.decode(obs)
        obj = self.obj[s[:, None], cand]
        obj = np.where(ok, np.round(obj, 12), -np.inf)
        change = np.where(ok, norm(pert - prev[:, None, :], self.config.budget.p), np.inf)
        # ties on the objective go to the smallest change from p_prev, then lowest index
        top = obj >= obj.max(axis=1, keepdims=True)
        best = np.argmin(np.where(top, change, np.inf), axis=1)
        rows = np.arange(len(obs))
        return pert[rows, best], obj[rows, best]

    # ---- continuous -----------------------------------------------------
    def _objective(self, obs, pert, anchor):
        pol, cfg, crit = self.policy, self.config, self.critics
        x = obs + pert
        mu = pol.mean(x)
        if cfg.kind == "mad":
            var = np.exp(2.0 * pol.clamped_log_std())
            diff = mu - anchor
            return np.sum(diff * diff / (2 * var), 1), lambda: pol.mean_input_grad(x, diff / var)
        if cfg.kind == "mc":
            val = crit.cost.q(obs, mu)
            return val, lambda: pol.mean_input_grad(x, crit.cost.action_grad(obs, mu))
        diff = mu - anchor
        return -np.sum(diff * diff, 1), lambda: pol.mean_input_grad(x, -2.0 * diff)

    def _continuous_targets(self, obs):
        pol, cfg, crit = self.policy, self.config, self.critics
        qc = crit.worst if cfg.cost_critic == "worst" else crit.cost
        out = np.zeros((len(obs), pol.action_dim))
        for b, o in enumerate(obs):
            grid = admissible_action_set(pol, o, cfg.budget.eps).grid(GRID_POINTS)
            rep = np.repeat(o[None], len(grid), axis=0)
            score = crit.reward.q(rep, grid) - cfg.weight * qc.q(rep, grid)
            out[b] = grid[int(np.argmin(score))]
        return out

    def _attack_continuous(self, obs, prev, eps_bar, rng):
        cfg = self.config
        eps, p = cfg.budget.eps, cfg.budget.p
        if cfg.kind == "mad":
            anchor = self.policy.mean(obs)
            start = sample_ball(len(obs), obs.shape[1], eps, p, rng)
        elif cfg.kind == "worst_tc":
            anchor = self._continuous_targets(obs)
            start = prev
        else:
            anchor = None
            start = prev
        cur = project_batch(start, prev, eps, eps_bar, p)[0]
        val, gfun = self._objective(obs, cur, anchor)
        for _ in range(cfg.steps):
            grad = gfun()
            lr = np.full(len(obs), cfg.lr)
            accepted = np.zeros(len(obs), dtype=bool)
            new, new_val = cur.copy(), val.copy()
            for _ in range(LINE_SEARCH_HALVINGS + 1):
                trial = pgd_step_batch(-grad, cur, lr, eps, eps_bar, prev, p, cfg.step_rule)
                tval, _ = self._objective(obs, trial, anchor)
                good = (~accepted) & (tval >= val)
                new[good], new_val[good] = trial[good], tval[good]
                accepted |= good
                if accepted.all():
                    break
                lr = np.where(accepted, lr, lr / 2.0)
            cur, val = new, new_val
            val, gfun = self._objective(obs, cur, anchor)
        return cur, val

    # ---- public ---------------------------------------------------------
    def attack_batch(self, obs, prev, eps_bar, rng):
        """Perturbations (B, d), objective values (B,), fallback flags (B,)."""
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        prev = np.atleast_2d(np.asarray(prev, dtype=float))
        cfg = self.config
        eps, p = cfg.budget.eps, cfg.budget.p
        B = len(obs)
        fallback = np.zeros(B, dtype=bool)
        if cfg.kind == "none" or eps == 0.0:
            pert = project_batch(np.zeros_like(obs), prev, eps, eps_bar, p)[0]
            return pert, np.zeros(B), fallback
        if cfg.kind == "random":
            cand = sample_ball(B, obs.shape[1], eps, p, rng)
            return project_batch(cand, prev, eps, eps_bar, p)[0], np.zeros(B), fallback
        if self.tabular:
            pert, val = self._attack_tabular(obs, prev, eps_bar)
            return pert, val, fallback
        try:
            pert, val = self._attack_continuous(obs, prev, eps_bar, rng)
        except FloatingPointError:
            cand = sample_ball(B, obs.shape[1], eps, p, rng)
            pert = project_batch(cand, prev, eps, eps_bar, p)[0]
            return pert, np.full(B, np.nan), np.ones(B, dtype=bool)
        return pert, val, fallback


def _single(policy, critics, state, config, prev, rng):
    state = np.asarray(state, dtype=float)
    if prev is None:
        prev = np.zeros_like(state)
    budget = config.budget
    ctx = AttackContext(policy, critics, config)
    rng = rng if rng is not None else np.random.default_rng(0)
    pert, val, fb = ctx.attack_batch(state[None], np.asarray(prev, float)[None],
                                     np.array([budget.eps_bar]), rng)
    return AttackResult(state + pert[0], pert[0], float(val[0]), budget, fallback=bool(fb[0]))


def random_attack(state, budget: PerturbationBudget, rng, prev_perturbation=None) -> AttackResult:
    cfg = AttackConfig(kind="random", budget=budget)
    return _single(None, None, state, cfg, prev_perturbation, rng)


def mad_attack(policy, state, config: AttackConfig, prev_perturbation=None, rng=None):
    return _single(policy, None, state, replace(config, kind="mad"), prev_perturbation, rng)


def mc_attack(policy, cost_critic, state, config: AttackConfig, prev_perturbation=None, rng=None):
    return _single(policy, CriticSet(cost=cost_critic), state, replace(config, kind="mc"),
                   prev_perturbation, rng)


def worst_tc_attack(policy, reward_critic, cost_critic, state, config: AttackConfig,
                    prev_perturbation=None, rng=None) -> AttackResult:
    """Worst-TC step.  ``config.budget`` holds ε̄ for the previous step; it is
    advanced with ``prev_perturbation`` before the feasible set is formed."""
    state = np.asarray(state, dtype=float)
    prev = np.zeros_like(state) if prev_perturbation is None else np.asarray(prev_perturbation, float)
    b = config.budget
    budget = replace(b, eps_bar=float(grow(b.eps_bar, b.alpha, norm(prev, b.p), b.eps_bar_max)))
    key = "worst" if config.cost_critic == "worst" else "cost"
    critics = CriticSet(reward=reward_critic, **{key: cost_critic})
    return _single(policy, critics, state, replace(config, kind="worst_tc", budget=budget),
                   prev, rng)


def worst_tc_target(policy, reward_critic, cost_critic, state, config: AttackConfig):
    """Target action argmin_{a∈Ω(s)} Q_r(s,a) - λ Q_c(s,a)."""
    state = np.asarray(state, dtype=float)
    omega: ActionSet = admissible_action_set(policy, state, config.budget.eps)
    if omega.discrete:
        s = policy.lattice.decode(state)
        score = _table(reward_critic)[s, omega.indices] - config.weight * _table(cost_critic)[s, omega.indices]
        return int(omega.indices[int(np.argmin(score))])
    grid = omega.grid(GRID_POINTS)
    rep = np.repeat(state[None], len(grid), axis=0)
    score = reward_critic.q(rep, grid) - config.weight * cost_critic.q(rep, grid)
    return grid[int(np.argmin(score))]


def run_episode_attacks(ctx: AttackContext, observations, rng, budget: PerturbationBudget):
    """Attack a fixed observation sequence; returns perturbations and ε̄ trace.

    Used to audit the budget law: ε̄_0 = budget.eps_bar and
    ε̄_t = min(ε̄_max, ε̄_{t-1} + α ||p_{t-1}||).
    """
    obs = np.atleast_2d(np.asarray(observations, dtype=float))
    prev = np.zeros(obs.shape[1])
    eps_bar = budget.eps_bar
    perts, trace = [], []
    for t, o in enumerate(obs):
        if t > 0:
            eps_bar = float(grow(eps_bar, budget.alpha, norm(prev, budget.p), budget.eps_bar_max))
        pert, _, _ = ctx.attack_batch(o[None], prev[None], np.array([eps_bar]), rng)
        prev = pert[0]
        perts.append(prev)
        trace.append(eps_bar)
    return np.array(perts), np.array(trace)
