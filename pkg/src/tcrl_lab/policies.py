"""Policies: tabular softmax over lattice cells and an MLP Gaussian.

Both policies act on observation vectors.  Batched methods take arrays
of shape (B, obs_dim); the single-observation helpers wrap them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cmdp import Lattice
from .errors import DomainError, UnsupportedOperation
from .nets import MLP
from .perturbation import parse_norm

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
LOG_2PI = np.log(2.0 * np.pi)
TIE_TOL = 1e-12


@dataclass
class PolicyBounds:
    """Per-action probability bounds (discrete) or mean bounds (continuous)."""

    lower: np.ndarray
    upper: np.ndarray
    discrete: bool
    cells: np.ndarray | None = None  # tabular: states whose cells meet the ball


def _check_obs(obs):
    obs = np.asarray(obs, dtype=float)
    if not np.all(np.isfinite(obs)):
        raise DomainError("observation contains non-finite entries")
    return obs


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def greedy_set(probs) -> np.ndarray:
    """Indices of the maximal entries of a probability vector (ties kept)."""
    return np.flatnonzero(probs >= probs.max() - TIE_TOL)


def actions_from_bounds(lower, upper) -> np.ndarray:
    """Actions that can be the most likely one under the given bounds."""
    return np.flatnonzero(np.asarray(upper) >= np.max(lower) - TIE_TOL)


class TabularSoftmaxPolicy:
    discrete = True

    def __init__(self, lattice: Lattice, n_actions: int, logits=None,
                 rng: np.random.Generator | None = None, init_scale: float = 0.0):
        self.lattice = lattice
        n_states = int(lattice.index_grid.max()) + 1
        if logits is None:
            logits = np.zeros((n_states, n_actions))
            if rng is not None and init_scale > 0:
                logits = rng.uniform(-init_scale, init_scale, size=(n_states, n_actions))
        self.logits = np.asarray(logits, dtype=float).copy()
        if self.logits.shape != (n_states, n_actions):
            raise DomainError("logit table shape does not match lattice and action count")

    @property
    def n_states(self):
        return self.logits.shape[0]

    @property
    def n_actions(self):
        return self.logits.shape[1]

    @property
    def obs_dim(self):
        return self.lattice.dim

    @property
    def n_params(self):
        return self.logits.size

    def get_flat(self):
        return self.logits.ravel().copy()

    def set_flat(self, flat):
        self.logits = np.asarray(flat, dtype=float).reshape(self.logits.shape).copy()

    def copy(self):
        return TabularSoftmaxPolicy(self.lattice, self.n_actions, self.logits)

    def table(self) -> np.ndarray:
        """π(·|s) for every state, shape (S, A)."""
        return softmax(self.logits)

    def cells(self, obs):
        obs = _check_obs(obs)
        if obs.shape[-1] != self.lattice.dim:
            raise DomainError(f"observation dimension {obs.shape[-1]} != {self.lattice.dim}")
        return self.lattice.decode(np.atleast_2d(obs))

    def probs(self, obs):
        return softmax(self.logits[self.cells(obs)])

    def act_batch(self, obs, rng):
        p = self.probs(obs)
        u = rng.random(len(p))[:, None]
        return np.minimum((np.cumsum(p, axis=1) < u).sum(axis=1), self.n_actions - 1)

    def log_prob_batch(self, obs, actions):
        p = self.probs(obs)
        return np.log(p[np.arange(len(p)), np.asarray(actions, dtype=np.int64)])

    def act(self, obs, rng):
        return int(self.act_batch(np.atleast_2d(obs), rng)[0])

    def log_prob(self, obs, action):
        return float(self.log_prob_batch(np.atleast_2d(obs), [action])[0])

    def weighted_grad(self, obs, actions, weights):
        """Σ_i w_i ∇_θ log π(a_i | o_i) as a flat vector."""
        s = self.cells(obs)
        a = np.asarray(actions, dtype=np.int64)
        w = np.asarray(weights, dtype=float)
        p = softmax(self.logits[s])
        g = np.zeros_like(self.logits)
        np.add.at(g, s, -w[:, None] * p)
        np.add.at(g, (s, a), w)
        return g.ravel()

    def grad_log_prob(self, obs, action):
        return self.weighted_grad(np.atleast_2d(obs), [action], [1.0])

    def kl_batch(self, obs_a, obs_b):
        p, q = self.probs(obs_a), self.probs(obs_b)
        return np.sum(p * (np.log(p) - np.log(q)), axis=1)

    def kl_divergence(self, obs_a, obs_b):
        return float(self.kl_batch(np.atleast_2d(obs_a), np.atleast_2d(obs_b))[0])

    def interval_bounds(self, state, eps, p=np.inf) -> PolicyBounds:
        if parse_norm(p) != np.inf:
            raise UnsupportedOperation("interval bounds need the ℓ∞ ball")
        state = _check_obs(state)
        cells = self.lattice.states_in_box(state - eps, state + eps)
        probs = softmax(self.logits[cells])
        return PolicyBounds(probs.min(axis=0), probs.max(axis=0), True, cells)

    def reachable_actions(self, state, eps) -> np.ndarray:
        """Exact set of greedy actions over the cells meeting the ℓ∞ ball."""
        state = _check_obs(state)
        cells = self.lattice.states_in_box(state - eps, state + eps)
        probs = softmax(self.logits[cells])
        hit = probs >= probs.max(axis=1, keepdims=True) - TIE_TOL
        return np.flatnonzero(hit.any(axis=0))


class MlpGaussianPolicy:
    """Gaussian policy; mean from an MLP, state-independent log-std."""

    discrete = False

    def __init__(self, obs_dim: int, action_dim: int, hidden=(256, 256),
                 rng: np.random.Generator | None = None, log_std_init: float = -0.5):
        self.mlp = MLP((obs_dim, *hidden, action_dim), rng)
        self.log_std = np.full(action_dim, float(log_std_init))

    @property
    def obs_dim(self):
        return self.mlp.sizes[0]

    @property
    def action_dim(self):
        return self.mlp.sizes[-1]

    @property
    def n_params(self):
        return self.mlp.n_params + self.action_dim

    def get_flat(self):
        return np.concatenate([self.mlp.get_flat(), self.log_std])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=float)
        self.mlp.set_flat(flat[:self.mlp.n_params])
        self.log_std = flat[self.mlp.n_params:].copy()

    def copy(self):
        twin = MlpGaussianPolicy.__new__(MlpGaussianPolicy)
        twin.mlp = self.mlp.copy()
        twin.log_std = self.log_std.copy()
        return twin

    def _obs(self, obs):
        obs = np.atleast_2d(_check_obs(obs))
        if obs.shape[1] != self.obs_dim:
            raise DomainError(f"observation dimension {obs.shape[1]} != {self.obs_dim}")
        return obs

    def clamped_log_std(self):
        return np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX)

    def mean(self, obs):
        return self.mlp(self._obs(obs))

    def act_batch(self, obs, rng):
        mu = self.mean(obs)
        return mu + np.exp(self.clamped_log_std()) * rng.standard_normal(mu.shape)

    def act(self, obs, rng):
        return self.act_batch(obs, rng)[0]

    def log_prob_batch(self, obs, actions):
        mu = self.mean(obs)
        ls = self.clamped_log_std()
        z = (np.atleast_2d(actions) - mu) / np.exp(ls)
        return np.sum(-0.5 * z * z - ls, axis=1) - 0.5 * mu.shape[1] * LOG_2PI

    def log_prob(self, obs, action):
        return float(self.log_prob_batch(obs, np.atleast_2d(action))[0])

    def weighted_grad(self, obs, actions, weights):
        obs = self._obs(obs)
        mu, cache = self.mlp.forward(obs)
        ls = self.clamped_log_std()
        var = np.exp(2.0 * ls)
        diff = np.atleast_2d(actions) - mu
        w = np.asarray(weights, dtype=float)[:, None]
        g_mlp, _ = self.mlp.backward(cache, w * diff / var)
        inside = (self.log_std >= LOG_STD_MIN) & (self.log_std <= LOG_STD_MAX)
        g_ls = np.sum(w * (diff * diff / var - 1.0), axis=0) * inside
        return np.concatenate([g_mlp, g_ls])

    def grad_log_prob(self, obs, action):
        return self.weighted_grad(obs, np.atleast_2d(action), [1.0])

    def mean_input_grad(self, obs, dmean):
        """∂/∂obs of Σ dmean · μ(obs), row by row."""
        _, cache = self.mlp.forward(self._obs(obs))
        _, dx = self.mlp.backward(cache, dmean, need_params=False)
        return dx

    def kl_batch(self, obs_a, obs_b):
        d = self.mean(obs_a) - self.mean(obs_b)
        var = np.exp(2.0 * self.clamped_log_std())
        return np.sum(d * d / (2.0 * var), axis=1)

    def kl_divergence(self, obs_a, obs_b):
        return float(self.kl_batch(obs_a, obs_b)[0])

    def interval_bounds(self, state, eps, p=np.inf) -> PolicyBounds:
        if parse_norm(p) != np.inf:
            raise UnsupportedOperation("interval bounds need the ℓ∞ ball")
        state = self._obs(state)
        lo, hi = self.mlp.interval(state - eps, state + eps)
        return PolicyBounds(lo[0], hi[0], False)
