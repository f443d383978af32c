import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tcrl_lab.defense import (
    EntropyHistogram, RewardWindow, autocorrelation, corr_penalty, corr_penalty_from_lags,
    corr_penalty_gradient, entropy_rate, entropy_trace, lag_correlation, max_entropy_rate,
    reward_histogram, squared_lag_sum, window_entropy,
)
from tcrl_lab.errors import DomainError


def ref_phi(x, lag):
    a, b = np.asarray(x[lag:], float), np.asarray(x[:-lag], float)
    if a.std() * b.std() < 1e-12:
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])


def ref_ccorr(x, w):
    total = 0.0
    for k in range(1, w + 1):
        for l in range(1, k + 1):
            total += abs(ref_phi(x, l)) if len(x) >= l + 2 else 0.0
    return total / w ** 2


def window(values):
    win = RewardWindow(len(values))
    win.extend(values)
    return win


# ---- autocorrelation ----

def test_constant_sequence_zero():
    assert autocorrelation(window([1, 1, 1, 1]), 1) == 0.0


def test_alternating_minus_one():
    assert autocorrelation(window([1, -1, 1, -1, 1, -1]), 1) == pytest.approx(-1.0, abs=1e-9)


def test_white_noise_matches_reference(rng):
    x = rng.normal(size=64)
    assert abs(lag_correlation(x, 1) - ref_phi(x, 1)) <= 1e-12


def test_not_ready():
    assert autocorrelation(window([1.0, 2.0]), 1) is None
    with pytest.raises(DomainError):
        lag_correlation([1.0, 2.0, 3.0], 0)


@given(st.lists(st.floats(-100, 100), min_size=3, max_size=40), st.integers(1, 10))
def test_phi_in_unit_interval(xs, lag):
    v = lag_correlation(xs, lag)
    assert v is None or -1.0 <= v <= 1.0


# ---- C_corr ----

def test_zero_lags_zero_penalty():
    assert corr_penalty_from_lags(np.zeros(4), 4) == 0.0


def test_w2_hand_expansion():
    assert corr_penalty_from_lags([1.0, -1.0], 2) == pytest.approx(0.75)


def test_ar1_matches_reference(rng):
    x = np.zeros(16)
    for t in range(1, 16):
        x[t] = 0.9 * x[t - 1] + rng.normal()
    assert abs(corr_penalty(window(x)) - ref_ccorr(x, 16)) <= 1e-12


def test_corr_penalty_needs_full_window():
    win = RewardWindow(8)
    win.extend([1, 2, 3])
    assert corr_penalty(win) is None


@given(st.lists(st.floats(-5, 5), min_size=4, max_size=24))
def test_ccorr_nonnegative_and_zero_iff_flat(xs):
    c = corr_penalty(window(xs))
    assert c >= 0
    phis = [lag_correlation(xs, l) for l in range(1, len(xs) - 1)]
    assert (c == 0) == all(abs(p) == 0 for p in phis)


# ---- score-function gradient ----

def test_zero_penalties_zero_gradient(rng):
    g = corr_penalty_gradient(np.zeros(5), rng.normal(size=(5, 3)))
    assert np.all(g == 0)


def test_identical_penalties_cancel(rng):
    g = corr_penalty_gradient(np.full(7, 2.5), rng.normal(size=(7, 3)))
    assert np.allclose(g, 0.0, atol=1e-15)


def test_gradient_not_ready():
    assert corr_penalty_gradient([], np.zeros((0, 2))) is None


L = 6


def expected_penalty(theta):
    """Exact E[Σφ²] over all 2^L action sequences of a Bernoulli policy."""
    p1 = 1.0 / (1.0 + np.exp(theta))  # logits (θ, 0): π(1) = 1/(1+e^θ)
    total = 0.0
    for seq in itertools.product((0, 1), repeat=L):
        k = sum(seq)
        total += p1 ** k * (1 - p1) ** (L - k) * squared_lag_sum(np.array(seq, float))
    return total


@pytest.mark.parametrize("theta", [0.0, 0.7])
def test_score_function_gradient_matches_fd(theta):
    h = 1e-5
    fd = (expected_penalty(theta + h) - expected_penalty(theta - h)) / (2 * h)
    r = np.random.default_rng(2024)
    n = 10_000
    p0 = 1.0 / (1.0 + np.exp(-theta))
    acts = (r.random((n, L)) >= p0).astype(float)  # action 1 w.p. 1 - p0
    pens = np.array([squared_lag_sum(a) for a in acts])
    # ∂/∂θ log π(a) = 1{a=0} - π(0), summed over the trajectory
    scores = np.sum((acts == 0) - p0, axis=1)[:, None]
    est = corr_penalty_gradient(pens, scores)[0]
    terms = (pens - pens.mean()) * scores[:, 0]
    se = terms.std(ddof=1) / np.sqrt(n)
    assert abs(est - fd) <= 2 * se


# ---- histogram / entropy ----

def hist(n=4, lo=0.0, hi=1.0, w=4):
    return EntropyHistogram(n_bins=n, r_min=lo, r_max=hi, window=w)


def test_single_bin_histogram():
    assert reward_histogram(hist(), [0.1, 0.1, 0.2, 0.05]).tolist() == [1, 0, 0, 0]


def test_uniform_over_four_bins():
    assert np.allclose(reward_histogram(hist(), [0.1, 0.3, 0.6, 0.9]), 0.25)


def test_law_of_large_numbers(rng):
    p = reward_histogram(hist(10, 0, 1, 1000), rng.random(1000))
    assert np.all(np.abs(p - 0.1) <= 0.05)


def test_right_edge_goes_to_last_bin():
    assert reward_histogram(hist(), [1.0])[-1] == 1.0


def test_out_of_range_clamped_and_counted():
    h = hist()
    p = reward_histogram(h, [-3.0, 5.0, 0.5, 0.5])
    assert p.tolist() == [0.25, 0, 0.5, 0.25] and h.clamped == 2


def test_invalid_range():
    with pytest.raises(DomainError):
        reward_histogram(hist(lo=1.0, hi=1.0), [1.0])


def test_entropy_examples():
    assert window_entropy(np.full(8, 1 / 8)) == pytest.approx(np.log(8), abs=1e-12)
    assert window_entropy([0, 1, 0]) == 0.0
    assert entropy_rate(0.7, 0.7) == 0.0


@given(st.integers(0, 10_000), st.integers(2, 12))
def test_histogram_and_entropy_bounds(seed, n):
    r = np.random.default_rng(seed)
    h = hist(n, -1, 1, 16)
    x = r.normal(size=40)
    p = reward_histogram(h, x[:16])
    assert abs(p.sum() - 1) <= 1e-12
    H = entropy_trace(h, x)
    assert np.all(H >= 0) and np.all(H <= np.log(n) + 1e-12)


def test_entropy_trace_matches_reference(rng):
    h = hist(10, -2, 2, 16)
    x = rng.normal(size=60)
    edges = np.linspace(-2, 2, 11)
    ref = []
    for t in range(16, 61):
        counts, _ = np.histogram(np.clip(x[t - 16:t], -2, 2), bins=edges)
        q = counts / 16
        ref.append(-sum(v * np.log(v) for v in q if v > 0))
    assert np.allclose(entropy_trace(h, x), ref, atol=1e-12)
    assert max_entropy_rate(h, x) == pytest.approx(np.max(np.abs(np.diff(ref))), abs=1e-12)


def test_max_entropy_rate_needs_two_windows():
    assert max_entropy_rate(hist(w=4), [0.1, 0.2, 0.3, 0.4]) is None


def test_window_ring_buffer():
    win = RewardWindow(3)
    win.extend([1, 2, 3, 4])
    assert win.values().tolist() == [2, 3, 4] and win.full
