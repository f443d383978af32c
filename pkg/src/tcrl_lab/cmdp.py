"""Constrained MDPs, the built-in desk-scale environments, and trajectories.

Every environment exposes a batched interface (``reset_batch``,
``observe_batch``, ``step_batch``) used by the trainer and a strict
single-step ``step`` that validates its inputs.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError, UnsupportedOperation

ROW_TOL = 1e-9

# GridHazard action table: (dx, dy)
MOVES = ((0, -1), (0, 1), (-1, 0), (1, 0), (0, 0))
MOVE_NAMES = ("up", "down", "left", "right", "stay")


@dataclass
class Lattice:
    """Maps integer lattice coordinates to state indices.

    An observation is decoded to the lattice point obtained by rounding
    (``floor(x + 0.5)``) and clipping each coordinate to the grid, so
    cell ``j`` owns the half-open interval ``[j - 0.5, j + 0.5)`` and the
    edge cells extend to infinity.
    """

    shape: tuple[int, ...]
    index_grid: np.ndarray  # shape -> state index

    @classmethod
    def full(cls, shape: Sequence[int]) -> "Lattice":
        shape = tuple(int(n) for n in shape)
        # state index is row-major over (x, y, ...) coordinates
        return cls(shape, np.arange(int(np.prod(shape))).reshape(shape))

    @property
    def dim(self) -> int:
        return len(self.shape)

    def coords(self) -> np.ndarray:
        n = int(self.index_grid.max()) + 1
        out = np.zeros((n, self.dim))
        for idx in np.ndindex(*self.shape):
            out[self.index_grid[idx]] = idx
        return out

    def cell_of(self, obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs, dtype=float)
        cells = np.floor(obs + 0.5).astype(np.int64)
        upper = np.asarray(self.shape) - 1
        return np.clip(cells, 0, upper)

    def decode(self, obs: np.ndarray) -> np.ndarray:
        """State index for each observation row (or a scalar for one row)."""
        obs = np.asarray(obs, dtype=float)
        cells = self.cell_of(obs)
        if cells.ndim == 1:
            return int(self.index_grid[tuple(cells)])
        return self.index_grid[tuple(cells.T)]

    def cell_range(self, lo: np.ndarray, hi: np.ndarray) -> list[np.ndarray]:
        """Per-dimension cell indices whose regions meet the box [lo, hi]."""
        first = self.cell_of(np.asarray(lo, dtype=float))
        last = self.cell_of(np.asarray(hi, dtype=float))
        return [np.arange(a, b + 1) for a, b in zip(first, last)]

    def states_in_box(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        axes = self.cell_range(lo, hi)
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.unique(self.index_grid[tuple(m.ravel() for m in mesh)])

    def region(self, cell: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Closed box of observations decoding to ``cell`` (edges unbounded)."""
        cell = np.asarray(cell, dtype=float)
        upper = np.asarray(self.shape) - 1
        lo = np.where(cell <= 0, -np.inf, cell - 0.5)
        hi = np.where(cell >= upper, np.inf, cell + 0.5 - 1e-9)
        return lo, hi


@dataclass
class TabularCmdp:
    """Finite CMDP with a lattice embedding used as its observation channel."""

    P: np.ndarray  # (S, A, S)
    R: np.ndarray  # (S, A)
    C: np.ndarray  # (S, A)
    gamma: float
    cost_threshold: float
    init_dist: np.ndarray
    lattice: Lattice
    terminal: np.ndarray | None = None
    horizon: int = 200
    name: str = "tabular"

    discrete = True

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        self.C = np.asarray(self.C, dtype=float)
        self.init_dist = np.asarray(self.init_dist, dtype=float)
        S, A, S2 = self.P.shape
        if S != S2 or self.R.shape != (S, A) or self.C.shape != (S, A):
            raise DomainError("inconsistent shapes for P, R, C")
        if np.any(self.P < 0):
            raise DomainError("transition probabilities must be nonnegative")
        if np.any(np.abs(self.P.sum(axis=2) - 1.0) > ROW_TOL):
            raise DomainError("transition rows must sum to 1")
        if np.any(self.C < 0):
            raise DomainError("cost must be nonnegative")
        if not 0.0 <= self.gamma < 1.0:
            raise DomainError(f"discount gamma={self.gamma} must lie in [0, 1)")
        if abs(self.init_dist.sum() - 1.0) > ROW_TOL or np.any(self.init_dist < 0):
            raise DomainError("initial distribution must be a probability vector")
        if self.terminal is None:
            self.terminal = np.zeros(S, dtype=bool)
        self.terminal = np.asarray(self.terminal, dtype=bool)
        self.coords = self.lattice.coords()
        if self.coords.shape[0] != S:
            raise DomainError("lattice size does not match the number of states")

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.lattice.dim

    @property
    def c_max(self) -> float:
        return float(self.C.max(initial=0.0))

    def observe_batch(self, states: np.ndarray) -> np.ndarray:
        return self.coords[np.asarray(states, dtype=np.int64)]

    def observe(self, state: int) -> np.ndarray:
        return self.coords[int(state)].copy()

    def reset_batch(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.choice(self.n_states, size=n, p=self.init_dist)

    def step_batch(self, states, actions, rng: np.random.Generator):
        states = np.asarray(states, dtype=np.int64)
        actions = np.asarray(actions, dtype=np.int64)
        rows = self.P[states, actions]
        u = rng.random(len(states))[:, None]
        nxt = np.minimum((np.cumsum(rows, axis=1) < u).sum(axis=1), self.n_states - 1)
        return nxt, self.R[states, actions], self.C[states, actions], self.terminal[nxt]

    def step(self, state, action, rng: np.random.Generator | None = None):
        if not (isinstance(state, (int, np.integer)) and 0 <= state < self.n_states):
            raise DomainError(f"state {state!r} outside [0, {self.n_states})")
        if not (isinstance(action, (int, np.integer)) and 0 <= action < self.n_actions):
            raise DomainError(f"action {action!r} outside [0, {self.n_actions})")
        rng = rng if rng is not None else np.random.default_rng(0)
        nxt, r, c, d = self.step_batch(np.array([state]), np.array([action]), rng)
        return int(nxt[0]), float(r[0]), float(c[0]), bool(d[0])


def grid_hazard(
    layout: Sequence[str] = ("S.H", "...", "..G"),
    n_actions: int = 4,
    goal_reward: float = 1.0,
    step_penalty: float = 0.0,
    hazard_cost: float = 1.0,
    slip: float = 0.0,
    gamma: float = 0.99,
    cost_threshold: float = 5.0,
    horizon: int = 200,
) -> TabularCmdp:
    """Grid world; entering an ``H`` cell costs ``hazard_cost``.

    Layout rows are indexed by y (top row y=0), columns by x.  ``S`` marks
    start cells (uniform initial distribution), ``G`` absorbing goal cells.
    Actions are up/down/left/right, plus stay when ``n_actions == 5``.
    Moves into a wall leave the agent in place.  With probability ``slip``
    the agent stays in place instead of moving.
    """
    if n_actions not in (4, 5):
        raise DomainError("GridHazard supports 4 or 5 actions")
    rows = [r for r in layout]
    height, width = len(rows), len(rows[0])
    if any(len(r) != width for r in rows):
        raise DomainError("layout rows must have equal length")
    lattice = Lattice.full((width, height))
    S = width * height
    P = np.zeros((S, n_actions, S))
    R = np.zeros((S, n_actions))
    C = np.zeros((S, n_actions))
    hazard = np.zeros(S, dtype=bool)
    goal = np.zeros(S, dtype=bool)
    start = np.zeros(S)
    for y, row in enumerate(rows):
        for x, ch in enumerate(row):
            s = lattice.index_grid[x, y]
            hazard[s] = ch == "H"
            goal[s] = ch == "G"
            start[s] = ch == "S"
    if not start.any():
        start[lattice.index_grid[0, 0]] = 1.0
    for x in range(width):
        for y in range(height):
            s = lattice.index_grid[x, y]
            for a in range(n_actions):
                if goal[s]:
                    P[s, a, s] = 1.0
                    continue
                dx, dy = MOVES[a]
                nx, ny = x + dx, y + dy
                if not (0 <= nx < width and 0 <= ny < height):
                    nx, ny = x, y
                t = lattice.index_grid[nx, ny]
                P[s, a, t] += 1.0 - slip
                P[s, a, s] += slip
                arrive = P[s, a]
                C[s, a] = hazard_cost * float(arrive[hazard].sum())
                R[s, a] = goal_reward * float(arrive[goal].sum()) - step_penalty
    env = TabularCmdp(
        P, R, C, gamma, cost_threshold, start / start.sum(), lattice,
        terminal=goal, horizon=horizon, name="GridHazard",
    )
    env.hazard = hazard
    env.layout = tuple(rows)
    return env


class PointEnv:
    """Deterministic point mass driven by clipped acceleration commands."""

    discrete = False
    name = "point"

    def __init__(self, pos_dim: int, dt: float, accel: float, gamma: float,
                 cost_threshold: float, horizon: int):
        self.pos_dim = pos_dim
        self.dt = dt
        self.accel = accel
        self.gamma = gamma
        self.cost_threshold = cost_threshold
        self.horizon = horizon
        if not 0.0 <= gamma < 1.0:
            raise DomainError(f"discount gamma={gamma} must lie in [0, 1)")

    @property
    def obs_dim(self) -> int:
        return 2 * self.pos_dim

    @property
    def action_dim(self) -> int:
        return self.pos_dim

    action_low = -1.0
    action_high = 1.0

    def observe_batch(self, states):
        return np.asarray(states, dtype=float).copy()

    def observe(self, state):
        return np.asarray(state, dtype=float).copy()

    def initial_state(self) -> np.ndarray:
        return np.zeros(self.obs_dim)

    def reset_batch(self, n, rng):
        return np.tile(self.initial_state(), (n, 1))

    def dynamics(self, states, actions):
        d = self.pos_dim
        pos, vel = states[:, :d], states[:, d:]
        vel = vel + self.accel * self.dt * np.clip(actions, -1.0, 1.0)
        pos = pos + self.dt * vel
        return np.concatenate([pos, vel], axis=1)

    def step_batch(self, states, actions, rng=None):
        states = np.asarray(states, dtype=float)
        actions = np.asarray(actions, dtype=float).reshape(len(states), -1)
        nxt = self.dynamics(states, actions)
        r, c = self.reward_cost(nxt)
        return nxt, r, c, np.zeros(len(states), dtype=bool)

    def step(self, state, action, rng=None):
        state = np.asarray(state, dtype=float)
        action = np.atleast_1d(np.asarray(action, dtype=float))
        if state.shape != (self.obs_dim,) or not np.all(np.isfinite(state)):
            raise DomainError(f"state must be a finite vector of length {self.obs_dim}")
        if action.shape != (self.action_dim,) or not np.all(np.isfinite(action)):
            raise DomainError(f"action must be a finite vector of length {self.action_dim}")
        bad = np.flatnonzero((action < self.action_low) | (action > self.action_high))
        if bad.size:
            raise DomainError(f"action component {int(bad[0])} outside [-1, 1]")
        nxt, r, c, d = self.step_batch(state[None], action[None])
        return nxt[0], float(r[0]), float(c[0]), bool(d[0])


class PointRun(PointEnv):
    """1-D run task: reward ``speed_bonus * velocity``; cost 1 past the
    boundary ``|x| > boundary`` or above the speed limit ``|v| > v_max``."""

    name = "PointRun"

    def __init__(self, boundary=1.0, v_max=0.5, speed_bonus=1.0, dt=0.1, accel=1.0,
                 gamma=0.99, cost_threshold=5.0, horizon=200):
        super().__init__(1, dt, accel, gamma, cost_threshold, horizon)
        self.boundary = boundary
        self.v_max = v_max
        self.speed_bonus = speed_bonus

    def reward_cost(self, nxt):
        x, v = nxt[:, 0], nxt[:, 1]
        r = self.speed_bonus * v
        c = ((np.abs(x) > self.boundary) | (np.abs(v) > self.v_max)).astype(float)
        return r, c


class PointCircle(PointEnv):
    """2-D circle task: reward for counter-clockwise motion near radius
    ``radius``; cost 1 outside the annulus ``r_in <= |pos| <= r_out``."""

    name = "PointCircle"

    def __init__(self, radius=1.0, r_in=0.7, r_out=1.3, dt=0.1, accel=1.0,
                 gamma=0.99, cost_threshold=5.0, horizon=200):
        super().__init__(2, dt, accel, gamma, cost_threshold, horizon)
        self.radius = radius
        self.r_in = r_in
        self.r_out = r_out

    def initial_state(self):
        return np.array([self.radius, 0.0, 0.0, 0.0])

    def reward_cost(self, nxt):
        x, y, vx, vy = nxt.T
        rad = np.hypot(x, y)
        r = (-y * vx + x * vy) / (1.0 + np.abs(rad - self.radius))
        c = ((rad < self.r_in) | (rad > self.r_out)).astype(float)
        return r, c


def make_env(variant: str, **geometry):
    variants = {"GridHazard": grid_hazard, "PointRun": PointRun, "PointCircle": PointCircle}
    if variant not in variants:
        raise DomainError(f"unknown environment variant {variant!r}")
    return variants[variant](**geometry)


def step(env, state, action, rng=None):
    return env.step(state, action, rng)


def enumerate_transitions(spec) -> list[tuple[int, int, int, float, float, float]]:
    """All (s, a, s', prob, r, c) with nonzero probability, in index order."""
    if not isinstance(spec, TabularCmdp):
        raise UnsupportedOperation("transition enumeration needs a tabular spec")
    out = []
    for s in range(spec.n_states):
        for a in range(spec.n_actions):
            for s2 in np.flatnonzero(spec.P[s, a] > 0):
                out.append((s, a, int(s2), float(spec.P[s, a, s2]),
                            float(spec.R[s, a]), float(spec.C[s, a])))
    return out


@dataclass
class Trajectory:
    states: list = field(default_factory=list)
    perturbed: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    costs: list = field(default_factory=list)
    dones: list = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def append(self, state, perturbed, action, reward, cost, done):
        self.states.append(state)
        self.perturbed.append(perturbed)
        self.actions.append(action)
        self.rewards.append(float(reward))
        self.costs.append(float(cost))
        self.dones.append(bool(done))

    def __len__(self):
        return len(self.rewards)

    def validate(self):
        n = len(self.rewards)
        for name in ("states", "perturbed", "actions", "costs", "dones"):
            if len(getattr(self, name)) != n:
                raise DomainError(f"trajectory field {name} has length "
                                  f"{len(getattr(self, name))}, expected {n}")
        if any(self.dones[:-1]):
            raise DomainError("done flag set before the final entry")


def _discounted_sum(values, gamma: float) -> float:
    if not 0.0 <= gamma < 1.0:
        raise DomainError(f"discount gamma={gamma} must lie in [0, 1)")
    if len(values) == 0:
        warnings.warn("empty trajectory; discounted sum is 0", RuntimeWarning, stacklevel=3)
        return 0.0
    v = np.asarray(values, dtype=float)
    return float(np.sum(v * gamma ** np.arange(len(v))))


def discounted_return(traj: Trajectory, gamma: float) -> float:
    return _discounted_sum(traj.rewards, gamma)


def discounted_cost(traj: Trajectory, gamma: float) -> float:
    return _discounted_sum(traj.costs, gamma)


def truncation_bound(gamma: float, horizon: int, c_max: float) -> float:
    """Discounted cost mass lost by truncating after ``horizon`` steps."""
    return gamma ** horizon * c_max / (1.0 - gamma)
