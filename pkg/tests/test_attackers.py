from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tcrl_lab.attackers import (
    AttackConfig, AttackContext, CriticSet, mad_attack, mc_attack, pgd_step, random_attack,
    run_episode_attacks, worst_tc_attack, worst_tc_target,
)
from tcrl_lab.cmdp import Lattice, grid_hazard
from tcrl_lab.critics import MlpCritic, admissible_action_set
from tcrl_lab.errors import ConfigError
from tcrl_lab.nets import MLP
from tcrl_lab.oracle import brute_force_target_action
from tcrl_lab.perturbation import PerturbationBudget, is_valid_transition, norm, project
from tcrl_lab.policies import MlpGaussianPolicy, TabularSoftmaxPolicy
from tcrl_lab.trainer import exact_critics


def linear_policy(slope=2.0):
    pol = MlpGaussianPolicy(1, 1, (4,), log_std_init=0.0)
    pol.mlp = MLP((1, 1))
    pol.mlp.weights[0][:] = slope
    pol.mlp.biases[0][:] = 0.0
    return pol


def test_config_validation():
    with pytest.raises(ConfigError):
        AttackConfig(lr=0.0)
    with pytest.raises(ConfigError):
        AttackConfig(steps=0)
    with pytest.raises(ConfigError):
        AttackConfig(kind="worst_tc", weight=1.0)
    assert AttackConfig().lr == 0.05 and AttackConfig().steps == 10


# ---- pgd ----

def test_pgd_zero_gradient_keeps_feasible_point():
    b = PerturbationBudget(eps=1.0, eps_bar=1.0)
    cur = np.array([0.3, -0.2])
    assert np.array_equal(pgd_step(np.zeros(2), cur, 0.05, b, np.zeros(2)), cur)


def test_pgd_vanishing_step_is_projection():
    b = PerturbationBudget(eps=0.5, eps_bar=0.2)
    cur, prev = np.array([0.9, -0.1]), np.array([0.4, 0.0])
    out = pgd_step(np.array([1.0, -1.0]), cur, 1e-14, b, prev)
    assert np.allclose(out, project(b, cur, prev), atol=1e-12)


@pytest.mark.parametrize("rule,lr", [("steepest", 0.05), ("raw", 0.1)])
def test_pgd_quadratic_reaches_nearest_boundary_point(rule, lr):
    b = PerturbationBudget(eps=1.0, eps_bar=100.0, eps_bar_max=1000.0)
    target = np.array([3.0, -0.4])
    x = np.zeros(2)
    for _ in range(50):
        x = pgd_step(2 * (x - target), x, lr, b, np.zeros(2), rule=rule)
    assert np.allclose(x, [1.0, -0.4], atol=1e-4)


def test_pgd_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        pgd_step(np.array([np.nan]), np.zeros(1), 0.1, PerturbationBudget(eps=1.0), np.zeros(1))


# ---- random ----

def test_random_zero_radius():
    s = np.array([0.3, 1.2])
    res = random_attack(s, PerturbationBudget(eps=0.0), np.random.default_rng(0))
    assert np.array_equal(res.perturbed, s)


def test_random_samples_inside_ball():
    ctx = AttackContext(None, None, AttackConfig(kind="random", budget=PerturbationBudget(eps=0.1)))
    obs = np.zeros((10_000, 3))
    p, _, _ = ctx.attack_batch(obs, np.zeros_like(obs), np.full(10_000, 0.1),
                               np.random.default_rng(1))
    assert np.abs(p).max() <= 0.1


def test_random_deterministic():
    b = PerturbationBudget(eps=0.2)
    a = random_attack(np.zeros(2), b, np.random.default_rng(3))
    c = random_attack(np.zeros(2), b, np.random.default_rng(3))
    assert np.array_equal(a.perturbation, c.perturbation)


# ---- MAD ----

def test_mad_zero_radius():
    res = mad_attack(linear_policy(), np.array([0.5]), AttackConfig(kind="mad",
                     budget=PerturbationBudget(eps=0.0)))
    assert res.objective == 0.0 and res.perturbed[0] == 0.5


def test_mad_constant_policy_flat():
    pol = linear_policy(0.0)
    res = mad_attack(pol, np.array([0.5]), AttackConfig(kind="mad",
                     budget=PerturbationBudget(eps=0.1)), rng=np.random.default_rng(0))
    assert res.objective == 0.0 and abs(res.perturbation[0]) <= 0.1


def test_mad_reaches_closed_form_maximum():
    res = mad_attack(linear_policy(2.0), np.array([0.3]),
                     AttackConfig(kind="mad", budget=PerturbationBudget(eps=0.1)),
                     rng=np.random.default_rng(0))
    assert res.objective >= 0.95 * 0.5 * 0.2 ** 2
    assert abs(res.perturbation[0]) == pytest.approx(0.1)


def test_mad_objective_nondecreasing(rng):
    pol = MlpGaussianPolicy(3, 2, (16,), rng)
    obs = rng.normal(size=(8, 3))
    vals = []
    for steps in (1, 3, 6, 10):
        cfg = AttackConfig(kind="mad", steps=steps, budget=PerturbationBudget(eps=0.2))
        ctx = AttackContext(pol, None, cfg)
        _, v, _ = ctx.attack_batch(obs, np.zeros_like(obs), np.full(8, 0.2),
                                   np.random.default_rng(5))
        vals.append(v)
    assert all(np.all(b >= a - 1e-12) for a, b in zip(vals, vals[1:]))


def test_mad_gradient_failure_falls_back(rng):
    pol = MlpGaussianPolicy(2, 1, (4,), rng)
    pol.mlp.weights[0][:] = np.nan
    res = mad_attack(pol, np.zeros(2), AttackConfig(kind="mad", budget=PerturbationBudget(eps=0.1)),
                     rng=np.random.default_rng(0))
    assert res.fallback and norm(res.perturbation, np.inf) <= 0.1


# ---- MC ----

def test_mc_constant_critic_flat(rng):
    pol = MlpGaussianPolicy(2, 1, (8,), rng)
    crit = MlpCritic("cost", 2, 1, (8,), rng=rng)
    for w in crit.net.weights:
        w[:] = 0.0
    res = mc_attack(pol, crit, np.zeros(2), AttackConfig(kind="mc", budget=PerturbationBudget(eps=0.1)))
    assert abs(res.objective - crit.q(np.zeros((1, 2)), np.zeros((1, 1)))[0]) < 1e-12


def test_mc_tabular_matches_grid_oracle(rng):
    lat = Lattice.full((5,))
    pol = TabularSoftmaxPolicy(lat, 2, rng.normal(size=(5, 2)) * 2)
    qc = np.tile([0.0, 1.0], (5, 1))
    cfg = AttackConfig(kind="mc", budget=PerturbationBudget(eps=0.8))
    for s in range(5):
        res = mc_attack(pol, qc, np.array([float(s)]), cfg)
        grid = s + np.arange(-0.8, 0.8 + 1e-9, 1e-3)
        best = pol.probs(grid[:, None])[:, 1].max()
        assert pol.probs(res.perturbed[None])[0, 1] == pytest.approx(best, abs=1e-12)


def test_mc_zero_radius(rng):
    pol = TabularSoftmaxPolicy(Lattice.full((3,)), 2, rng.normal(size=(3, 2)))
    res = mc_attack(pol, np.ones((3, 2)), np.array([1.0]),
                    AttackConfig(kind="mc", budget=PerturbationBudget(eps=0.0)))
    assert res.perturbed[0] == 1.0


# ---- Worst-TC ----

def test_worst_tc_zero_weight_minimizes_reward(rng):
    pol = TabularSoftmaxPolicy(Lattice.full((3,)), 3, np.zeros((3, 3)))
    qr = rng.normal(size=(3, 3))
    qc = rng.normal(size=(3, 3)) * 10
    cfg = AttackConfig(weight=0.0, budget=PerturbationBudget(eps=1.0))
    assert worst_tc_target(pol, qr, qc, np.array([1.0]), cfg) == int(qr[1].argmin())


@given(st.floats(0.01, 0.99))
def test_worst_tc_unique_cost_maximizer(weight):
    pol = TabularSoftmaxPolicy(Lattice.full((2,)), 3)
    qr = np.ones((2, 3))
    qc = np.array([[0.0, 2.0, 1.0], [0.0, 0.0, 0.0]])
    cfg = AttackConfig(weight=weight, budget=PerturbationBudget(eps=1.0))
    assert worst_tc_target(pol, qr, qc, np.array([0.0]), cfg) == 1


@pytest.mark.parametrize("seed", range(5))
def test_worst_tc_target_matches_oracle(seed):
    env = grid_hazard(("S.H", "...", "..G"))
    r = np.random.default_rng(seed)
    pol = TabularSoftmaxPolicy(env.lattice, 4, r.normal(size=(9, 4)))
    crit = exact_critics(env, pol, 1.0)
    cfg = AttackConfig(budget=PerturbationBudget(eps=1.0))
    for obs in env.coords:
        a = worst_tc_target(pol, crit.reward, crit.worst, obs, cfg)
        b = brute_force_target_action(pol, crit.reward, crit.worst, obs, 1.0, cfg.weight, 41)
        assert a == b


@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_worst_tc_target_scale_invariant(seed, scale):
    r = np.random.default_rng(seed)
    pol = TabularSoftmaxPolicy(Lattice.full((4,)), 3, r.normal(size=(4, 3)))
    qr, qc = r.normal(size=(2, 4, 3))
    cfg = AttackConfig(budget=PerturbationBudget(eps=1.0))
    s = np.array([float(r.integers(4))])
    assert worst_tc_target(pol, qr, qc, s, cfg) == worst_tc_target(pol, scale * qr, scale * qc, s, cfg)


def test_worst_tc_drives_tabular_policy_to_target(rng):
    env = grid_hazard(("S.H", "...", "..G"))
    pol = TabularSoftmaxPolicy(env.lattice, 4, rng.normal(size=(9, 4)) * 3)
    crit = exact_critics(env, pol, 1.0)
    cfg = AttackConfig(budget=PerturbationBudget(eps=1.0, eps_bar=1.0))
    for obs in env.coords:
        a_star = worst_tc_target(pol, crit.reward, crit.worst, obs, cfg)
        res = worst_tc_attack(pol, crit.reward, crit.worst, obs, cfg)
        reachable = admissible_action_set(pol, obs, 1.0).indices
        assert a_star in reachable
        # the chosen cell maximizes log π(a*|·) over the feasible cells
        got = np.log(pol.probs(res.perturbed[None])[0, a_star])
        cells = env.lattice.states_in_box(obs - 1.0, obs + 1.0)
        assert got == pytest.approx(np.log(pol.table()[cells, a_star]).max(), abs=1e-12)


def test_worst_tc_continuous_moves_toward_target(rng):
    pol = MlpGaussianPolicy(2, 1, (16,), rng)
    qr = MlpCritic("reward", 2, 1, (8,), rng=rng)
    qc = MlpCritic("cost", 2, 1, (8,), rng=rng)
    s = rng.normal(size=2)
    cfg = AttackConfig(cost_critic="nominal", budget=PerturbationBudget(eps=0.2))
    target = worst_tc_target(pol, qr, qc, s, cfg)
    res = worst_tc_attack(pol, qr, qc, s, cfg, rng=np.random.default_rng(0))
    before = np.sum((pol.mean(s)[0] - target) ** 2)
    after = np.sum((pol.mean(res.perturbed)[0] - target) ** 2)
    assert after <= before + 1e-12 and norm(res.perturbation, np.inf) <= 0.2 + 1e-12


@pytest.mark.parametrize("p", [np.inf, 2])
def test_episode_attacks_feasible_and_budget_grows(rng, p):
    env = grid_hazard(("........", "........", "SHHHHHHG"))
    pol = TabularSoftmaxPolicy(env.lattice, 4, rng.normal(size=(env.n_states, 4)) * 2)
    budget = PerturbationBudget(eps=1.0, alpha=0.1, p=p, eps_bar=0.05, eps_bar_max=10.0)
    ctx = AttackContext(pol, exact_critics(env, pol, 1.0), AttackConfig(budget=budget))
    states = env.coords[rng.integers(env.n_states, size=40)]
    perts, trace = run_episode_attacks(ctx, states, rng, budget)
    assert np.all(norm(perts, p) <= 1.0 + 1e-9)
    for t in range(1, len(perts)):
        b_t = replace(budget, eps_bar=trace[t])
        assert is_valid_transition(b_t, states[t - 1], states[t - 1] + perts[t - 1],
                                   states[t], states[t] + perts[t])
        expected = min(budget.eps_bar_max, trace[t - 1] + budget.alpha * norm(perts[t - 1], p))
        assert abs(trace[t] - expected) <= 1e-12
        if norm(perts[t - 1], p) > 0 and trace[t - 1] < budget.eps_bar_max:
            assert trace[t] > trace[t - 1]


def test_attack_deterministic(rng):
    pol = MlpGaussianPolicy(2, 1, (8,), rng)
    cfg = AttackConfig(kind="mad", budget=PerturbationBudget(eps=0.1))
    a = mad_attack(pol, np.ones(2), cfg, rng=np.random.default_rng(9))
    b = mad_attack(pol, np.ones(2), cfg, rng=np.random.default_rng(9))
    assert np.array_equal(a.perturbation, b.perturbation) and a.objective == b.objective
