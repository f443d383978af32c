"""Reward/cost critics and the worst-case cost Bellman operator.

The worst-case operator backs up ``c(s,a) + γ E_{s'}[ext_{a'∈Ω(s')} Q(s',a')]``
where Ω(s') holds the actions an observation attack of radius ε can make
the policy pick at s'.  ``ext`` is ``max`` by default; ``min`` is exposed
through ``orientation``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cmdp import TabularCmdp
from .errors import DomainError, NonConvergenceError, UnsupportedOperation
from .nets import MLP, Adam
from .policies import MlpGaussianPolicy, TabularSoftmaxPolicy, actions_from_bounds

GRID_POINTS = 17
ORIENTATIONS = ("max", "min")


@dataclass
class ActionSet:
    indices: np.ndarray | None = None  # discrete
    low: np.ndarray | None = None  # continuous
    high: np.ndarray | None = None

    @property
    def discrete(self) -> bool:
        return self.indices is not None

    def __contains__(self, action) -> bool:
        if self.discrete:
            return int(action) in set(self.indices.tolist())
        a = np.atleast_1d(action)
        return bool(np.all(a >= self.low - 1e-12) and np.all(a <= self.high + 1e-12))

    def grid(self, points: int = GRID_POINTS) -> np.ndarray:
        if self.discrete:
            return self.indices.copy()
        axes = [np.linspace(l, h, points) for l, h in zip(self.low, self.high)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


def admissible_action_set(policy, state, eps, p=np.inf, method: str = "exact") -> ActionSet:
    """Ω(s, π) or a sound superset of it.

    For tabular policies ``method="exact"`` enumerates the lattice cells in
    the ball; ``"bounds"`` applies the probability-bound rule, which can
    only add actions.  Continuous policies use the IBP mean interval.
    """
    state = np.asarray(state, dtype=float)
    if isinstance(policy, TabularSoftmaxPolicy):
        if method == "exact":
            return ActionSet(indices=policy.reachable_actions(state, eps))
        b = policy.interval_bounds(state, eps, p)
        return ActionSet(indices=actions_from_bounds(b.lower, b.upper))
    b = policy.interval_bounds(state, eps, p)
    return ActionSet(low=b.lower, high=b.upper)


def omega_table(policy: TabularSoftmaxPolicy, coords, eps, method="exact") -> np.ndarray:
    """Boolean (S, A) mask; row s is Ω at observation ``coords[s]``."""
    mask = np.zeros((len(coords), policy.n_actions), dtype=bool)
    for s, obs in enumerate(coords):
        mask[s, admissible_action_set(policy, obs, eps, method=method).indices] = True
    return mask


def _extreme(Q, mask, orientation):
    if orientation == "max":
        return np.where(mask, Q, -np.inf).max(axis=1)
    if orientation == "min":
        return np.where(mask, Q, np.inf).min(axis=1)
    raise DomainError(f"orientation must be one of {ORIENTATIONS}")


def worst_backup(spec: TabularCmdp, Q, omega, orientation="max") -> np.ndarray:
    """Γ̲Q for every (s, a); ``omega`` is the (S, A) admissible mask."""
    ext = _extreme(np.asarray(Q, dtype=float), omega, orientation)
    return spec.C + spec.gamma * spec.P @ ext


def bellman_backup_worst(spec, policy, Q, s, a, eps, orientation="max", method="exact") -> float:
    if not isinstance(spec, TabularCmdp):
        raise UnsupportedOperation("exact backups need a tabular spec; use the fitted critic")
    table = Q.table if isinstance(Q, TabularCritic) else np.asarray(Q, dtype=float)
    omega = omega_table(policy, spec.coords, eps, method)
    ext = _extreme(table, omega, orientation)
    return float(spec.C[s, a] + spec.gamma * spec.P[s, a] @ ext)


@dataclass
class TabularCritic:
    """Table critic; ``role`` is one of reward, cost, worst_cost."""

    role: str
    table: np.ndarray
    target: np.ndarray | None = None
    fits: int = 0
    refresh_every: int = 10

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=float)
        if self.target is None:
            self.target = self.table.copy()

    @classmethod
    def zeros(cls, role, n_states, n_actions=None):
        shape = (n_states,) if n_actions is None else (n_states, n_actions)
        return cls(role, np.zeros(shape))

    def q(self, states):
        return self.table[np.asarray(states, dtype=np.int64)]


def value_iteration_worst(spec: TabularCmdp, policy, eps, tol=1e-8, max_iters=100_000,
                          orientation="max", method="exact", init=None) -> TabularCritic:
    if not isinstance(spec, TabularCmdp):
        raise UnsupportedOperation("value iteration needs a tabular spec")
    if tol <= 0:
        raise DomainError("tol must be positive")
    omega = omega_table(policy, spec.coords, eps, method)
    Q = np.zeros_like(spec.C) if init is None else np.array(init, dtype=float)
    residual = np.inf
    for it in range(1, max_iters + 1):
        nxt = worst_backup(spec, Q, omega, orientation)
        residual = float(np.max(np.abs(nxt - Q)))
        Q = nxt
        if residual < tol:
            critic = TabularCritic("worst_cost", Q)
            critic.iterations = it
            critic.residual = residual
            return critic
    raise NonConvergenceError("worst-case value iteration did not converge", residual, max_iters)


def policy_q_values(spec: TabularCmdp, pi_table, signal="cost") -> np.ndarray:
    """Exact on-policy Q for reward or cost via a linear solve."""
    base = spec.C if signal == "cost" else spec.R
    S, A = base.shape
    live = ~spec.terminal
    # V = Σ_a π (base + γ P V), terminal rows held at 0
    P_pi = np.einsum("sa,sat->st", pi_table, spec.P) * live[None, :]
    b = np.sum(pi_table * base, axis=1)
    V = np.linalg.solve(np.eye(S) - spec.gamma * P_pi * live[:, None], b * live)
    return base + spec.gamma * spec.P @ (V * live)


@dataclass
class Transitions:
    """Transition batch.  Tabular states are indices; continuous are vectors."""

    states: np.ndarray
    actions: np.ndarray
    costs: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    weights: np.ndarray | None = None

    def __len__(self):
        return len(self.costs)


class MlpCritic:
    """Q(s, a) (``action_dim > 0``) or V(s) network with a frozen target copy."""

    def __init__(self, role, obs_dim, action_dim=0, hidden=(64, 64), lr=1e-3,
                 rng=None, refresh_every=10):
        self.role = role
        self.action_dim = action_dim
        self.net = MLP((obs_dim + action_dim, *hidden, 1), rng)
        self.target = self.net.copy()
        self.opt = Adam(self.net.n_params, lr)
        self.fits = 0
        self.refresh_every = refresh_every

    def _x(self, states, actions=None):
        states = np.atleast_2d(np.asarray(states, dtype=float))
        if self.action_dim:
            actions = np.asarray(actions, dtype=float).reshape(len(states), self.action_dim)
            return np.concatenate([states, actions], axis=1)
        return states

    def q(self, states, actions=None, target=False):
        net = self.target if target else self.net
        return net(self._x(states, actions))[:, 0]

    def action_grad(self, states, actions):
        """∂Q/∂a row by row."""
        _, cache = self.net.forward(self._x(states, actions))
        _, dx = self.net.backward(cache, np.ones((len(cache[0]), 1)), need_params=False)
        return dx[:, -self.action_dim:]

    def regress(self, x_states, x_actions, targets, weights=None):
        """One Adam step on the weighted mean squared error; returns loss before."""
        x = self._x(x_states, x_actions)
        y, cache = self.net.forward(x)
        resid = y[:, 0] - np.asarray(targets, dtype=float)
        w = np.ones(len(resid)) if weights is None else np.asarray(weights, dtype=float)
        w = w / w.sum()
        loss = float(np.sum(w * resid * resid))
        grad, _ = self.net.backward(cache, (2.0 * w * resid)[:, None])
        self.net.set_flat(self.opt.step(self.net.get_flat(), grad))
        return loss


def _continuous_extreme(critic: MlpCritic, policy: MlpGaussianPolicy, obs, eps, orientation,
                        use_target):
    """ext over a G-per-dimension grid of the IBP mean interval, per row."""
    obs = np.atleast_2d(obs)
    lo, hi = policy.mlp.interval(obs - eps, obs + eps)
    k = lo.shape[1]
    t = np.linspace(0.0, 1.0, GRID_POINTS)
    mesh = np.stack([m.ravel() for m in np.meshgrid(*([t] * k), indexing="ij")], axis=1)
    acts = lo[:, None, :] + mesh[None, :, :] * (hi - lo)[:, None, :]
    n, g = len(obs), len(mesh)
    vals = critic.q(np.repeat(obs, g, axis=0), acts.reshape(n * g, k), target=use_target)
    vals = vals.reshape(n, g)
    return vals.max(axis=1) if orientation == "max" else vals.min(axis=1)


def worst_cost_target(batch: Transitions, policy, critic, eps, gamma, orientation="max",
                      omega=None, coords=None) -> np.ndarray:
    """Targets ``c + γ ext_{a'∈Ω(s')} Q̲_target(s', a')`` (no bootstrap at done)."""
    if len(batch) == 0:
        raise DomainError("empty transition batch")
    live = 1.0 - np.asarray(batch.dones, dtype=float)
    if isinstance(critic, TabularCritic):
        if omega is None:
            omega = omega_table(policy, coords, eps)
        ext = _extreme(critic.target, omega, orientation)
        cont = ext[np.asarray(batch.next_states, dtype=np.int64)]
    else:
        cont = _continuous_extreme(critic, policy, batch.next_states, eps, orientation, True)
    return np.asarray(batch.costs, dtype=float) + gamma * live * cont


def fit_worst_cost(critic, batch: Transitions, targets, learning_rate) -> float:
    """One step on L = mean (target - Q̲(s,a))²; returns the loss before the step.

    Tabular critics take a per-cell normalized step
    ``Q(s,a) += lr * mean_{i at (s,a)} (y_i - Q(s,a))``.
    """
    if len(batch) == 0:
        raise DomainError("empty transition batch")
    targets = np.asarray(targets, dtype=float)
    w = np.ones(len(targets)) if batch.weights is None else np.asarray(batch.weights, dtype=float)
    if isinstance(critic, TabularCritic):
        s = np.asarray(batch.states, dtype=np.int64)
        a = np.asarray(batch.actions, dtype=np.int64)
        resid = targets - critic.table[s, a]
        loss = float(np.sum(w * resid * resid) / w.sum())
        num = np.zeros_like(critic.table)
        den = np.zeros_like(critic.table)
        np.add.at(num, (s, a), w * resid)
        np.add.at(den, (s, a), w)
        hit = den > 0
        critic.table[hit] += learning_rate * num[hit] / den[hit]
    else:
        critic.opt.lr = learning_rate
        loss = critic.regress(batch.states, batch.actions, targets, w)
    critic.fits += 1
    if critic.fits % critic.refresh_every == 0:
        refresh_target(critic)
    return loss


def refresh_target(critic):
    if isinstance(critic, TabularCritic):
        critic.target = critic.table.copy()
    else:
        critic.target = critic.net.copy()


def worst_cost_value(critic, policy, state, eps, p=np.inf, orientation="max") -> float:
    """V̲(s) = max_{a∈Ω(s)} Q̲(s, a)."""
    state = np.asarray(state, dtype=float)
    if isinstance(critic, TabularCritic):
        s = policy.lattice.decode(state)
        omega = admissible_action_set(policy, state, eps, p)
        vals = critic.table[s, omega.indices]
        return float(vals.max() if orientation == "max" else vals.min())
    return float(_continuous_extreme(critic, policy, state[None], eps, orientation, False)[0])


def worst_cost_values_tabular(critic: TabularCritic, omega, states, orientation="max"):
    return _extreme(critic.table, omega, orientation)[np.asarray(states, dtype=np.int64)]


def gae_advantages(rewards, values, gamma, lam, last_value=0.0, dones=None) -> np.ndarray:
    """Generalized advantage estimates computed backward over one trajectory.

    ``values[t]`` is V(s_t); ``last_value`` bootstraps after the final step
    unless that step is terminal (``dones[-1]``).
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    if r.shape != v.shape:
        raise DomainError("rewards and values must have the same length")
    d = np.zeros(len(r), dtype=bool) if dones is None else np.asarray(dones, dtype=bool)
    nxt = np.append(v[1:], last_value)
    nxt = np.where(d, 0.0, nxt)
    delta = r + gamma * nxt - v
    adv = np.zeros_like(r)
    running = 0.0
    for t in range(len(r) - 1, -1, -1):
        running = delta[t] + gamma * lam * (0.0 if d[t] else running)
        adv[t] = running
    return adv
