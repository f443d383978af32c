from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tcrl_lab.attackers import AttackConfig
from tcrl_lab.cmdp import Lattice, PointRun, TabularCmdp, grid_hazard
from tcrl_lab.errors import ConfigError, TrainingError
from tcrl_lab.perturbation import PerturbationBudget, grow, is_valid_transition, norm
from tcrl_lab.policies import MlpGaussianPolicy, TabularSoftmaxPolicy
from tcrl_lab.trainer import (
    LagrangeState, PidGains, PpoConfig, TrainerConfig, build_agent, collect,
    combined_advantage, evaluate_under_attack, make_streams, pid_update, ppo_clip_loss,
    ppo_epoch, ppol_loss, tcrl_objective, train_epoch,
)

THR = {"cost": 5.0, "corr": 5.0, "ent": 2.0}


def small_ppo(**kw):
    base = dict(batch_size=400, minibatch_size=100, actor_steps=10, critic_steps=10,
                epochs=3, n_envs=4, actor_lr=0.05)
    base.update(kw)
    return PpoConfig(**base)


def tiny_grid(**kw):
    return grid_hazard(("S.H", "...", "..G"), horizon=40, **kw)


# ---- PID ----

def test_pid_zero_error_keeps_zero():
    st_ = LagrangeState()
    for _ in range(50):
        st_ = pid_update(st_, {"cost": 5.0, "corr": 5.0, "ent": 2.0}, THR)
    assert all(v == 0.0 for v in st_.multipliers.values())


def test_pid_constant_violation_unrolled():
    g = PidGains()
    st_ = LagrangeState()
    prev = -1.0
    for k in range(1, 30):
        st_ = pid_update(st_, {"cost": 6.0}, THR)
        lam = st_.multipliers["cost"]
        expected = g.kp + k * g.ki + (g.kd if k == 1 else 0.0)
        assert lam == pytest.approx(expected, abs=1e-15)
        assert lam > prev
        prev = lam


def test_pid_oscillation_never_negative():
    st_ = LagrangeState()
    for k in range(40):
        st_ = pid_update(st_, {"cost": 5.0 + (1 if k % 2 == 0 else -1)}, THR)
        assert st_.multipliers["cost"] >= 0 and st_.integral["cost"] >= 0


def test_pid_skips_unready():
    st_ = pid_update(LagrangeState(), {"cost": 7.0, "corr": None}, THR)
    assert st_.multipliers["corr"] == 0.0 and st_.prev_error["corr"] == 0.0


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=40))
def test_pid_nonnegative(errors):
    st_ = LagrangeState()
    for e in errors:
        st_ = pid_update(st_, {"cost": 5.0 + e, "corr": 5.0 - e, "ent": 2.0 + e / 3}, THR)
        assert min(st_.multipliers.values()) >= 0 and min(st_.integral.values()) >= 0


# ---- PPO clip ----

def batch_for(pol, rng, n=32):
    obs = rng.uniform(-0.5, 4.5, size=(n, 1))
    acts = pol.act_batch(obs, rng)
    return obs, acts, pol.log_prob_batch(obs, acts), rng.normal(size=n)


def test_unit_ratio_gives_mean_advantage(rng):
    pol = TabularSoftmaxPolicy(Lattice.full((5,)), 3, rng.normal(size=(5, 3)))
    obs, a, lp, adv = batch_for(pol, rng)
    loss, _, skipped = ppo_clip_loss(pol, obs, a, lp, adv, 0.02)
    assert -loss == pytest.approx(adv.mean(), abs=1e-15) and skipped == 0


def test_positive_advantage_clipped():
    pol = TabularSoftmaxPolicy(Lattice.full((1,)), 2)
    obs, a = np.zeros((1, 1)), np.array([0])
    lp_old = pol.log_prob_batch(obs, a) - np.log(1 + 2 * 0.02)  # ratio = 1 + 2ε
    loss, grad, _ = ppo_clip_loss(pol, obs, a, lp_old, np.array([3.0]), 0.02)
    assert -loss == pytest.approx(1.02 * 3.0)
    assert np.all(grad == 0)


def test_non_finite_ratio_skipped():
    pol = TabularSoftmaxPolicy(Lattice.full((1,)), 2)
    obs, a = np.zeros((2, 1)), np.array([0, 1])
    lp_old = np.array([-np.inf, np.log(0.5)])
    loss, _, skipped = ppo_clip_loss(pol, obs, a, lp_old, np.array([1.0, 2.0]), 0.2)
    assert skipped == 1 and -loss == pytest.approx(2.0)


@pytest.mark.parametrize("seed", range(4))
def test_clip_gradient_matches_finite_differences(seed):
    r = np.random.default_rng(seed)
    pol = MlpGaussianPolicy(2, 1, (8,), r)
    obs = r.normal(size=(24, 2))
    acts = pol.act_batch(obs, r)
    lp_old = pol.log_prob_batch(obs, acts) + r.normal(scale=0.1, size=24)
    adv = r.normal(size=24)
    theta = pol.get_flat()
    _, grad, _ = ppo_clip_loss(pol, obs, acts, lp_old, adv, 0.2)

    def f(x):
        pol.set_flat(x)
        return ppo_clip_loss(pol, obs, acts, lp_old, adv, 0.2)[0]

    fd = np.zeros_like(theta)
    for i in range(len(theta)):
        e = np.zeros_like(theta)
        e[i] = 1e-6
        fd[i] = (f(theta + e) - f(theta - e)) / 2e-6
    pol.set_flat(theta)
    assert np.linalg.norm(grad - fd) / np.linalg.norm(fd) <= 1e-4


def test_baseline_shift_unclipped(rng):
    pol = TabularSoftmaxPolicy(Lattice.full((5,)), 3, rng.normal(size=(5, 3)))
    obs, a, lp, adv = batch_for(pol, rng)
    base, _, _ = ppo_clip_loss(pol, obs, a, lp, adv, 0.2)
    shifted, _, _ = ppo_clip_loss(pol, obs, a, lp, adv + 1.5, 0.2)
    assert -shifted == pytest.approx(-base + 1.5, abs=1e-12)


# ---- Lagrangian forms ----

def test_ppol_loss_examples():
    assert ppol_loss(0.3, 2.0, 9.0, 0.0) == pytest.approx(2.3)
    assert ppol_loss(0.0, 2.0, 2.0, 1.0) == 0.0
    assert ppol_loss(1.0, 4.0, 1.0, 3.0) == 0.5
    with pytest.raises(ConfigError):
        ppol_loss(0, 0, 0, -1.0)


def test_combined_advantage_forms():
    lg = LagrangeState(multipliers={"cost": 1.0, "corr": 2.0, "ent": 3.0})
    ar, ac, pc, pe = np.array([2.0]), np.array([1.0]), np.array([0.5]), np.array([0.1])
    assert combined_advantage("ppol", lg, ar, ac)[0] == pytest.approx(0.5)
    assert combined_advantage("tcrl", lg, ar, ac, pc, pe)[0] == pytest.approx(2 - 1 - 1 - 0.3)


def tcrl_batch(pol, rng):
    obs, a, lp, adv = batch_for(pol, rng)
    return dict(obs=obs, actions=a, logp_old=lp, adv_r=adv, adv_cost=rng.normal(size=len(a)),
                pen_corr=rng.normal(size=len(a)), pen_ent=rng.normal(size=len(a)))


def test_zero_multipliers_reduce_to_ppo(rng):
    pol = TabularSoftmaxPolicy(Lattice.full((5,)), 3, rng.normal(size=(5, 3)))
    b = tcrl_batch(pol, rng)
    v, g = tcrl_objective(pol, b, LagrangeState(), {"cost": 9.0, "corr": 1.0, "ent": 4.0}, THR, 0.02)
    loss, grad, _ = ppo_clip_loss(pol, b["obs"], b["actions"], b["logp_old"], b["adv_r"], 0.02)
    assert v == -loss and np.array_equal(g, -grad)


def test_penalties_vanish_at_boundary(rng):
    pol = TabularSoftmaxPolicy(Lattice.full((5,)), 3, rng.normal(size=(5, 3)))
    b = tcrl_batch(pol, rng)
    lg = LagrangeState(multipliers={"cost": 2.0, "corr": 0.5, "ent": 0.7})
    v, _ = tcrl_objective(pol, b, lg, dict(THR), THR, 0.02)
    adv = combined_advantage("tcrl", lg, b["adv_r"], b["adv_cost"], b["pen_corr"], b["pen_ent"])
    assert v == pytest.approx(-ppo_clip_loss(pol, b["obs"], b["actions"], b["logp_old"], adv, 0.02)[0],
                              abs=1e-15)


def test_missing_cost_critic(rng):
    pol = TabularSoftmaxPolicy(Lattice.full((5,)), 3)
    b = tcrl_batch(pol, rng)
    b["adv_cost"] = None
    with pytest.raises(ConfigError):
        tcrl_objective(pol, b, LagrangeState(), {}, THR, 0.02)


def test_lambda_shifts_policy_toward_safe_action():
    """Two states; action 0 is safe (r=0, c=0), action 1 pays r=1 but c=1."""
    lams = [0.0, 0.5, 1.0, 2.0, 5.0, 20.0]
    for seed in range(20):
        r = np.random.default_rng(seed)
        lat = Lattice.full((2,))
        logits = r.normal(scale=0.3, size=(2, 2))
        pol = TabularSoftmaxPolicy(lat, 2, logits)
        obs = r.integers(0, 2, size=(256, 1)).astype(float)
        acts = pol.act_batch(obs, r)
        rew = acts.astype(float)
        cost = acts.astype(float)
        b = dict(obs=obs, actions=acts, logp_old=pol.log_prob_batch(obs, acts),
                 adv_r=rew - rew.mean(), adv_cost=cost - cost.mean())
        safe = []
        for lam in lams:
            lg = LagrangeState(multipliers={"cost": lam, "corr": 0.0, "ent": 0.0})
            _, g = tcrl_objective(pol, b, lg, {}, THR, 0.02)
            twin = pol.copy()
            twin.set_flat(pol.get_flat() + 0.5 * g)
            safe.append(twin.table()[:, 0].mean())
            # exact gradient of E[r - λ c] = (1 - λ) ∂π(1|s)/∂θ points the same way
            if lam != 1.0:
                pi = pol.table()
                exact = np.zeros((2, 2))
                for s in range(2):
                    d = pi[s, 1] * (np.eye(2)[1] - pi[s]) * (1 - lam)
                    exact[s] = d * np.mean(obs[:, 0] == s)
                assert np.sign(exact.ravel() @ g) > 0
        assert all(b_ >= a_ - 1e-15 for a_, b_ in zip(safe, safe[1:]))
        assert safe[-1] > safe[0]


# ---- training loop ----

def run(env, tcfg, seed=0, epochs=2, ppo=None, budget=None, attack=None):
    ppo = ppo or small_ppo()
    budget = budget or PerturbationBudget(eps=1.0)
    streams = make_streams(seed)
    agent = build_agent(env, ppo, tcfg, streams["init"], (16,), (16,))
    reps = [train_epoch(env, agent, ppo, tcfg, budget, attack, streams) for _ in range(epochs)]
    return agent, reps


def test_train_epoch_reduces_to_plain_ppo():
    env = tiny_grid()
    ppo = small_ppo()
    budget = PerturbationBudget(eps=1.0)
    tcfg = TrainerConfig(method="vanilla", train_attacker="none",
                         fixed_multipliers={"cost": 0.0, "corr": 0.0, "ent": 0.0})
    sa, sb = make_streams(3), make_streams(3)
    a = build_agent(env, ppo, tcfg, sa["init"])
    b = build_agent(env, ppo, tcfg, sb["init"])
    for _ in range(3):
        rep = train_epoch(env, a, ppo, tcfg, budget, None, sa)
        eps = ppo_epoch(env, b, ppo, budget, sb)
        assert rep.episodes == sum(e.complete for e in eps)
        assert np.array_equal(a.policy.get_flat(), b.policy.get_flat())
        assert np.array_equal(a.v_reward.table, b.v_reward.table)
    assert all(np.array_equal(sa[k].random(4), sb[k].random(4)) for k in sa)


def test_same_seed_same_reports():
    env = tiny_grid()
    _, r1 = run(env, TrainerConfig(method="tcrl"), seed=4)
    _, r2 = run(env, TrainerConfig(method="tcrl"), seed=4)
    assert r1 == r2
    assert [r.metrics() for r in r1] == [r.metrics() for r in r2]


def test_zero_cost_keeps_lambda_zero():
    env = tiny_grid(hazard_cost=0.0)
    for method in ("vanilla", "tcrl"):
        _, reps = run(env, TrainerConfig(method=method, train_attacker="none"), epochs=3)
        assert all(r.lambda_cost == 0.0 for r in reps)


def test_nan_loss_rolls_back(monkeypatch):
    env = tiny_grid()
    agent, _ = run(env, TrainerConfig(), epochs=1)
    before = agent.policy.get_flat().copy()
    worst = agent.worst.table.copy()
    epoch = agent.epoch
    streams = make_streams(1)
    monkeypatch.setattr(agent.actor_opt, "step", lambda p, g: p * np.nan)
    with pytest.raises(TrainingError):
        train_epoch(env, agent, small_ppo(), TrainerConfig(), PerturbationBudget(eps=1.0), None,
                    streams)
    assert np.array_equal(agent.policy.get_flat(), before)
    assert np.array_equal(agent.worst.table, worst) and agent.epoch == epoch


def test_report_fields_and_attack_stats():
    env = tiny_grid()
    _, reps = run(env, TrainerConfig(method="tcrl"), epochs=2)
    r = reps[-1]
    assert r.actor_steps <= 10 and r.episodes > 0
    assert np.isfinite(r.worst_cost) and r.attack_eps_bar >= 1.0
    assert "wall_time" not in r.metrics()


def test_continuous_epoch_runs():
    env = PointRun(horizon=50)
    ppo = small_ppo(batch_size=200, minibatch_size=50, actor_lr=1e-3)
    _, reps = run(env, TrainerConfig(method="tcrl"), ppo=ppo, budget=PerturbationBudget(eps=0.05),
                  epochs=2)
    assert all(np.isfinite(r.mean_reward) and np.isfinite(r.worst_cost) for r in reps)


def test_collect_budget_law_and_fraction(rng):
    env = tiny_grid()
    ppo = small_ppo()
    tcfg = TrainerConfig()
    streams = make_streams(0)
    agent = build_agent(env, ppo, tcfg, streams["init"], init_scale=1.0)
    budget = PerturbationBudget(eps=1.0, alpha=0.1, eps_bar=0.2)
    from tcrl_lab.trainer import attack_context
    ctx = attack_context(env, agent, AttackConfig(budget=budget))
    eps = collect(env, agent.policy, ctx, budget, streams, 4, 40, episodes=4, attack_fraction=0.5)
    attacked = [e for e in eps if np.any(e.perturbations != 0)]
    assert len(attacked) <= 2
    for e in eps:
        assert e.eps_bars[0] == 0.2
        for t in range(1, len(e)):
            exp = grow(e.eps_bars[t - 1], 0.1, norm(e.perturbations[t - 1], np.inf), 10.0)
            assert abs(e.eps_bars[t] - exp) <= 1e-12
            z = np.zeros(2)
            b = replace(budget, eps_bar=e.eps_bars[t])
            assert is_valid_transition(b, z, e.perturbations[t - 1], z, e.perturbations[t])


def test_evaluate_none_matches_plain_rollout():
    env = tiny_grid()
    agent, _ = run(env, TrainerConfig(method="vanilla"), epochs=1)
    b = PerturbationBudget(eps=1.0)
    rep = evaluate_under_attack(env, agent, AttackConfig(kind="none", budget=b), 10, make_streams(0, 1))
    s = make_streams(0, 1)
    eps = collect(env, agent.policy, None, b, s, 10, env.horizon, episodes=10,
                  act_stream="eval", env_stream="eval", attack_stream="eval")
    assert np.array_equal(rep.episode_costs, [e.costs.sum() for e in eps])
    assert rep.mean_reward == pytest.approx(np.mean([e.rewards.sum() for e in eps]))


@pytest.mark.parametrize("kind", ["random", "mad", "mc", "worst_tc"])
def test_zero_radius_equals_no_attack(kind):
    env = tiny_grid()
    agent, _ = run(env, TrainerConfig(method="vanilla"), epochs=1)
    b = PerturbationBudget(eps=0.0)
    ref = evaluate_under_attack(env, agent, AttackConfig(kind="none", budget=b), 8, make_streams(0, 1))
    got = evaluate_under_attack(env, agent, AttackConfig(kind=kind, budget=b), 8, make_streams(0, 1))
    assert np.array_equal(ref.episode_rewards, got.episode_rewards)
    assert np.array_equal(ref.episode_costs, got.episode_costs)


def test_config_validation():
    with pytest.raises(ConfigError):
        PpoConfig(clip=1.5)
    with pytest.raises(ConfigError):
        TrainerConfig(method="nope")
    t = TrainerConfig(method="vanilla")
    assert (t.use_worst_cost, t.use_reward_defense, t.train_attacker) == (False, False, "none")
    assert TrainerConfig().train_attacker == "worst_tc"
