"""Reward-window statistics behind the two reward-based defenses.

Autocorrelation at lag l is the Pearson correlation between the window's
leading segment ``x[l:]`` and lagged segment ``x[:-l]``; each segment uses
its own mean and (biased) standard deviation.  Lags with fewer than two
pairs, and zero-variance segments, contribute 0.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

ZERO_VAR = 1e-12


class RewardWindow:
    def __init__(self, capacity: int):
        if capacity < 1:
            raise DomainError("window capacity must be positive")
        self.capacity = int(capacity)
        self.buffer: deque[float] = deque(maxlen=self.capacity)

    def push(self, reward: float) -> None:
        self.buffer.append(float(reward))

    def extend(self, rewards) -> None:
        for r in rewards:
            self.push(r)

    def values(self) -> np.ndarray:
        return np.fromiter(self.buffer, dtype=float, count=len(self.buffer))

    @property
    def full(self) -> bool:
        return len(self.buffer) == self.capacity

    def __len__(self):
        return len(self.buffer)


def lag_correlation(x, lag: int) -> float | None:
    """φ at ``lag`` over the sequence ``x``; None when fewer than 2 pairs."""
    x = np.asarray(x, dtype=float)
    if lag < 1:
        raise DomainError("lag must be at least 1")
    if len(x) < lag + 2:
        return None
    lead, lagged = x[lag:], x[:-lag]
    dl, dg = lead - lead.mean(), lagged - lagged.mean()
    sl, sg = np.sqrt(np.mean(dl * dl)), np.sqrt(np.mean(dg * dg))
    if sl * sg < ZERO_VAR:
        return 0.0
    return float(np.clip(np.mean(dl * dg) / (sl * sg), -1.0, 1.0))


def autocorrelation(window: RewardWindow, lag: int) -> float | None:
    return lag_correlation(window.values(), lag)


def lag_profile(x, max_lag: int) -> np.ndarray:
    """φ for lags 1..max_lag (0 where a lag is not computable)."""
    out = np.zeros(max_lag)
    for l in range(1, max_lag + 1):
        v = lag_correlation(x, l)
        out[l - 1] = 0.0 if v is None else v
    return out


def corr_penalty_from_lags(phis, w: int) -> float:
    """(1/w²) Σ_{k=1}^{w} Σ_{l=1}^{k} |φ_l|; ``phis[l-1]`` is φ at lag l."""
    phis = np.abs(np.asarray(phis, dtype=float))
    total = 0.0
    for k in range(1, w + 1):
        total += phis[:min(k, len(phis))].sum()
    return total / (w * w)


def corr_penalty(window: RewardWindow, w: int | None = None) -> float | None:
    """C_corr of a full window, or None when the window is not full."""
    w = window.capacity if w is None else w
    if len(window) < w:
        return None
    x = window.values()[-w:]
    return corr_penalty_from_lags(lag_profile(x, w), w)


def squared_lag_sum(x, max_lag: int | None = None) -> float:
    """Σ_l φ_l² over computable lags; the per-trajectory penalty whose
    gradient the score-function estimator targets."""
    x = np.asarray(x, dtype=float)
    max_lag = max(len(x) - 2, 0) if max_lag is None else max_lag
    return float(np.sum(lag_profile(x, max_lag) ** 2)) if max_lag > 0 else 0.0


def corr_penalty_gradient(penalties, score_sums) -> np.ndarray | None:
    """Score-function gradient of E[penalty] with a batch-mean baseline.

    ``penalties[k]`` is trajectory k's Σ_l φ_l²; ``score_sums[k]`` is
    Σ_t ∇θ log π(a_t|s~_t) along it.  Returns None without trajectories.
    """
    pen = np.asarray(penalties, dtype=float)
    g = np.atleast_2d(np.asarray(score_sums, dtype=float))
    if len(pen) == 0 or len(g) != len(pen):
        return None
    return ((pen - pen.mean())[:, None] * g).mean(axis=0)


@dataclass
class EntropyHistogram:
    n_bins: int = 10
    r_min: float | None = None
    r_max: float | None = None
    window: int = 16
    prev_entropy: float | None = None
    clamped: int = 0

    @property
    def width(self) -> float:
        return (self.r_max - self.r_min) / self.n_bins

    def freeze_range(self, rewards) -> None:
        rewards = np.asarray(rewards, dtype=float)
        self.r_min, self.r_max = float(rewards.min()), float(rewards.max())


def _bin_index(hist: EntropyHistogram, r: np.ndarray) -> np.ndarray:
    if hist.r_min is None or hist.r_max is None or not hist.r_max > hist.r_min:
        raise DomainError("histogram range must satisfy r_max > r_min")
    idx = np.floor((r - hist.r_min) / hist.width).astype(np.int64)
    hist.clamped += int(np.sum((r < hist.r_min) | (r > hist.r_max)))
    return np.clip(idx, 0, hist.n_bins - 1)


def reward_histogram(hist: EntropyHistogram, rewards) -> np.ndarray:
    """Bin frequencies over N equal-width half-open bins; r_max goes to the
    last bin, out-of-range rewards are clamped into the boundary bins."""
    r = np.asarray(rewards, dtype=float)
    return np.bincount(_bin_index(hist, r), minlength=hist.n_bins) / len(r)


def window_entropy(probs) -> float:
    p = np.asarray(probs, dtype=float)
    nz = p[p > 0]
    return float(max(0.0, -np.sum(nz * np.log(nz))))


def entropy_rate(h_t: float, h_prev: float) -> float:
    return abs(float(h_t) - float(h_prev))


def entropy_trace(hist: EntropyHistogram, rewards) -> np.ndarray:
    """H_t for every position where a full window ends."""
    r = np.asarray(rewards, dtype=float)
    w = hist.window
    if len(r) < w:
        return np.zeros(0)
    onehot = np.eye(hist.n_bins)[_bin_index(hist, r)]
    cs = np.vstack([np.zeros(hist.n_bins), np.cumsum(onehot, axis=0)])
    p = (cs[w:] - cs[:-w]) / w
    logp = np.log(np.where(p > 0, p, 1.0))
    return np.maximum(0.0, -np.sum(p * logp, axis=1))


def max_entropy_rate(hist: EntropyHistogram, rewards) -> float | None:
    """max_t |H_t - H_{t-1}| over a reward stream; None if under w+1 samples."""
    h = entropy_trace(hist, rewards)
    if len(h) < 2:
        return None
    return float(np.max(np.abs(np.diff(h))))
