"""Temporal-coupled perturbation budgets, validity checks, and projections.

A perturbation is ``p_t = s~_t - s_t``.  Each step is confined to the base
ball ``||p_t|| <= eps`` and to the temporal ball ``||p_t - p_{t-1}|| <=
eps_bar_t`` whose radius grows as ``eps_bar_t = eps_bar_{t-1} + alpha *
||p_{t-1}||`` (capped at ``eps_bar_max``).
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DomainError

VALID_TOL = 1e-9


def norm(v, p) -> np.ndarray | float:
    """ℓp norm along the last axis; ``p`` is 2 or ``np.inf``."""
    v = np.asarray(v, dtype=float)
    if p == np.inf or p == "inf":
        return np.max(np.abs(v), axis=-1, initial=0.0)
    if p == 2:
        return np.sqrt(np.sum(v * v, axis=-1))
    raise ConfigError(f"unsupported norm order {p!r}; use 2 or inf")


def parse_norm(p) -> float:
    if p in (np.inf, "inf", "Inf", "INF", float("inf")):
        return np.inf
    if p in (2, "2", 2.0):
        return 2
    raise ConfigError(f"unsupported norm order {p!r}; use 2 or inf")


@dataclass(frozen=True)
class PerturbationBudget:
    eps: float
    alpha: float = 0.1
    p: float = np.inf
    eps_bar: float | None = None  # None -> eps (first step has no predecessor)
    eps_bar_max: float | None = None  # None -> 10 * eps

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha={self.alpha} must lie strictly inside (0, 1)")
        if self.eps < 0:
            raise ConfigError(f"eps={self.eps} must be nonnegative")
        object.__setattr__(self, "p", parse_norm(self.p))
        if self.eps_bar is None:
            object.__setattr__(self, "eps_bar", float(self.eps))
        if self.eps_bar_max is None:
            object.__setattr__(self, "eps_bar_max", 10.0 * float(self.eps))
        if self.eps_bar < 0:
            raise ConfigError("eps_bar must be nonnegative")

    def reset(self) -> "PerturbationBudget":
        return replace(self, eps_bar=float(self.eps))


def grow(eps_bar, alpha, prev_norm, cap):
    """Budget law, elementwise over arrays."""
    return np.minimum(cap, eps_bar + alpha * prev_norm)


def update_budget(budget: PerturbationBudget, prev_perturbation) -> PerturbationBudget:
    step = float(norm(prev_perturbation, budget.p))
    return replace(budget, eps_bar=float(grow(budget.eps_bar, budget.alpha, step,
                                              budget.eps_bar_max)))


def is_valid_transition(budget: PerturbationBudget, s_t, s_tilde_t, s_next, s_tilde_next) -> bool:
    vecs = [np.asarray(v, dtype=float) for v in (s_t, s_tilde_t, s_next, s_tilde_next)]
    if len({v.shape for v in vecs}) != 1:
        raise DomainError("all four vectors must share the observation dimension")
    p_t = vecs[1] - vecs[0]
    p_next = vecs[3] - vecs[2]
    return bool(norm(p_t - p_next, budget.p) <= budget.eps_bar + VALID_TOL)


def _project_ball(x, center, radius):
    d = x - center
    n = np.sqrt(np.sum(d * d, axis=-1, keepdims=True))
    scale = np.where(n > radius, radius / np.maximum(n, 1e-300), 1.0)
    return center + d * scale


def project_batch(candidate, prev, eps, eps_bar, p):
    """Project rows of ``candidate`` onto B(0, eps) ∩ B(prev, eps_bar).

    Returns ``(projected, infeasible)``; ``infeasible`` marks rows where the
    two balls do not intersect, in which case the point of the temporal ball
    closest to the base ball is returned.
    """
    x = np.atleast_2d(np.asarray(candidate, dtype=float))
    prev = np.broadcast_to(np.atleast_2d(np.asarray(prev, dtype=float)), x.shape)
    eps = np.broadcast_to(np.asarray(eps, dtype=float).reshape(-1, 1), (len(x), 1))
    rb = np.broadcast_to(np.asarray(eps_bar, dtype=float).reshape(-1, 1), (len(x), 1))
    if parse_norm(p) == np.inf:
        lo = np.maximum(-eps, prev - rb)
        hi = np.minimum(eps, prev + rb)
        empty = lo > hi
        out = np.clip(x, lo, hi)
        fallback = np.clip(np.clip(x, -eps, eps), prev - rb, prev + rb)
        out = np.where(empty, fallback, out)
        return out, empty.any(axis=1)
    # ℓ2: alternating projections
    dist = np.sqrt(np.sum(prev * prev, axis=1, keepdims=True))
    empty = (dist > eps + rb)[:, 0]
    out = x.copy()
    for _ in range(100):
        nxt = _project_ball(_project_ball(out, 0.0, eps), prev, rb)
        moved = np.max(np.abs(nxt - out))
        out = nxt
        if moved < 1e-10:
            break
    if empty.any():
        # nearest point of the temporal ball to the origin
        unit = prev / np.maximum(dist, 1e-300)
        out[empty] = (prev - rb * unit)[empty]
    return out, empty


def project(budget: PerturbationBudget, candidate, prev_perturbation) -> np.ndarray:
    out, _ = project_checked(budget, candidate, prev_perturbation)
    return out


def project_checked(budget: PerturbationBudget, candidate, prev_perturbation):
    candidate = np.asarray(candidate, dtype=float)
    prev = np.asarray(prev_perturbation, dtype=float)
    if candidate.shape != prev.shape:
        raise DomainError("candidate and previous perturbation differ in dimension")
    out, empty = project_batch(candidate[None], prev[None], budget.eps, budget.eps_bar, budget.p)
    return out[0], bool(empty[0])


@dataclass
class PerturbationSequence:
    perturbations: list
    budgets: list

    def check(self, eps: float, p) -> bool:
        ps = [np.asarray(v, dtype=float) for v in self.perturbations]
        if any(norm(v, p) > eps + VALID_TOL for v in ps):
            return False
        return all(norm(ps[t] - ps[t - 1], p) <= self.budgets[t] + VALID_TOL
                   for t in range(1, len(ps)))
