"""Brute-force ground truth on tiny instances.

The perturbation ball is replaced by a regular grid of ``resolution``
points per observation dimension (odd, so the zero perturbation is on the
grid).  Everything here is enumeration; nothing reuses the Bellman
machinery in :mod:`critics`.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cmdp import TabularCmdp
from .critics import ActionSet
from .errors import ConfigError, UnsupportedOperation
from .perturbation import norm, parse_norm
from .policies import TIE_TOL, TabularSoftmaxPolicy

MAX_OBS_DIM = 3
MAX_STATES = 50


@dataclass(frozen=True)
class OracleConfig:
    resolution: int = 21
    T_max: int = 2000
    tol: float = 1e-6

    def __post_init__(self):
        if self.resolution < 3 or self.resolution % 2 == 0:
            raise ConfigError("oracle resolution must be odd and at least 3")


def perturbation_grid(dim: int, eps: float, p=np.inf, resolution: int = 21) -> np.ndarray:
    if dim > MAX_OBS_DIM:
        raise UnsupportedOperation(f"oracle grid limited to {MAX_OBS_DIM} observation dims")
    if resolution < 3 or resolution % 2 == 0:
        raise ConfigError("oracle resolution must be odd and at least 3")
    axis = np.linspace(-eps, eps, resolution)
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    if parse_norm(p) == 2:
        pts = pts[np.sqrt(np.sum(pts * pts, axis=1)) <= eps + 1e-12]
    return pts


def _greedy_mask(probs):
    return probs >= probs.max(axis=-1, keepdims=True) - TIE_TOL


def brute_force_action_set(policy, state, eps, p=np.inf, resolution: int = 21) -> ActionSet:
    state = np.asarray(state, dtype=float)
    pts = perturbation_grid(len(state), eps, p, resolution)
    obs = state[None] + pts
    if isinstance(policy, TabularSoftmaxPolicy):
        hit = _greedy_mask(policy.probs(obs)).any(axis=0)
        return ActionSet(indices=np.flatnonzero(hit))
    mu = policy.mean(obs)
    return ActionSet(low=mu.min(axis=0), high=mu.max(axis=0))


def truncation_bound(gamma: float, T_max: int, c_max: float) -> float:
    """Mass beyond the T_max+1 summed terms t = 0..T_max."""
    return gamma ** (T_max + 1) * c_max / (1.0 - gamma)


def horizon_for(gamma: float, c_max: float, tol: float) -> int:
    if gamma == 0.0 or c_max == 0.0:
        return 1
    return max(1, math.ceil(math.log(tol * (1.0 - gamma) / c_max) / math.log(gamma)))


def _cache_key(*arrays, **scalars) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=float).tobytes())
    h.update(repr(sorted(scalars.items())).encode())
    return h.hexdigest()[:32]


def brute_force_worst_cost(spec: TabularCmdp, policy: TabularSoftmaxPolicy, eps, gamma=None,
                           T_max: int = 2000, resolution: int = 21, p=np.inf,
                           temporal_budget: float | None = None,
                           cache_dir: str | Path | None = None) -> np.ndarray:
    """Per-(s, a) worst-case discounted cost, Σ_{t=0}^{T_max}.

    The adversary picks a grid perturbation at every visited state; the
    policy then plays one of its most likely actions at the perturbed cell
    (the adversary picks which on ties).  With ``temporal_budget`` the DP
    state carries the previous grid perturbation and consecutive
    perturbations must satisfy ``||p_t - p_{t-1}|| <= temporal_budget``.
    """
    if not isinstance(spec, TabularCmdp):
        raise UnsupportedOperation("oracle needs a tabular spec")
    if spec.n_states > MAX_STATES:
        raise UnsupportedOperation(f"oracle limited to {MAX_STATES} states")
    gamma = spec.gamma if gamma is None else gamma
    p = parse_norm(p)
    cache_file = None
    if cache_dir is not None:
        key = _cache_key(spec.P, spec.C, policy.logits, gamma=gamma, eps=eps, T=T_max,
                         res=resolution, p=str(p), tb=temporal_budget)
        cache_file = Path(cache_dir) / f"oracle-{key}.npy"
        if cache_file.exists():
            return np.load(cache_file)
    pts = perturbation_grid(spec.obs_dim, eps, p, resolution)
    nP = len(pts)
    obs = spec.coords[:, None, :] + pts[None, :, :]  # (S, P, d)
    probs = policy.probs(obs.reshape(-1, spec.obs_dim)).reshape(spec.n_states, nP, -1)
    greedy = _greedy_mask(probs)  # (S, P, A)
    C, P = spec.C, spec.P
    if temporal_budget is None:
        Q = C.copy()
        for _ in range(T_max):
            U = np.where(greedy, Q[:, None, :], -np.inf).max(axis=2)  # (S, P)
            Q = C + gamma * P @ U.max(axis=1)
        result = Q
    else:
        diff = norm(pts[:, None, :] - pts[None, :, :], p)
        feasible = diff <= temporal_budget + 1e-12  # (P_prev, P_next)
        Q = np.repeat(C[:, :, None], nP, axis=2)  # (S, A, P_prev)
        for _ in range(T_max):
            # U[s', j] for action chosen under perturbation j at s'
            U = np.where(greedy, np.moveaxis(Q, 2, 1), -np.inf).max(axis=2)  # (S, P)
            W = np.where(feasible[None, :, :], U[:, None, :], -np.inf).max(axis=2)  # (S, P_prev)
            Q = C[:, :, None] + gamma * np.einsum("sat,ti->sai", P, W)
        result = Q.max(axis=2)
    if cache_file is not None:
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        np.save(cache_file, result)
    return result


def brute_force_target_action(policy, reward_q, cost_q, state, eps, weight, resolution=21):
    """Exhaustive argmin of Q_r - λ Q_c over the enumerated action set."""
    omega = brute_force_action_set(policy, state, eps, np.inf, resolution)
    s = policy.lattice.decode(np.asarray(state, dtype=float))
    best, best_val = None, np.inf
    for a in omega.indices:
        v = reward_q[s, a] - weight * cost_q[s, a]
        if v < best_val:
            best, best_val = int(a), v
    return best
