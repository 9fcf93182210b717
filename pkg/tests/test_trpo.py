import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import objectives
from figar import trpo
from figar.envs import Corridor, PointMass
from figar.errors import ConfigurationError
from figar.numcore import check_gradient, gaussian_kl
from figar.policy import GREEDY, FactoredPolicy


@pytest.mark.parametrize("continuous", [False, True])
@pytest.mark.parametrize("shared", [None, (5,)])
def test_surrogate_at_old_parameters(continuous, shared):
    pol, batch, _ = objectives.trpo_batch(0, continuous, shared)
    value, _ = trpo.factored_surrogate(pol, batch, 1.28, "product")
    assert value == pytest.approx(np.mean(batch.q) ** 2.28, rel=1e-12)


def test_zero_advantages_give_zero_surrogate_and_gradient():
    pol, batch, theta = objectives.trpo_batch(1)
    batch.q[:] = 0.0
    pol.set_flat(theta)
    for form in ("product", "additive"):
        value, grad = trpo.factored_surrogate(pol, batch, 1.28, form)
        assert value == 0.0 and not np.any(grad)


def test_form_selection():
    pol, batch, _ = objectives.trpo_batch(2, positive=False)
    batch.q[:] = -np.abs(batch.q)
    assert trpo.surrogate_form(pol, batch) == "additive"
    batch.q[:] = np.abs(batch.q) + 0.1
    assert trpo.surrogate_form(pol, batch) == "product"
    assert trpo.surrogate_form(pol, batch, "additive") == "additive"
    single = FactoredPolicy(4, "baseline", n_actions=3, hidden=(6,), seed=0)
    assert trpo.surrogate_form(single, batch) == "single"


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("continuous", [False, True])
@pytest.mark.parametrize("shared", [None, (5,)])
@pytest.mark.parametrize("form", ["product", "additive"])
def test_surrogate_and_kl_gradients(seed, continuous, shared, form):
    assert check_gradient(*objectives.trpo_surrogate_closure(seed, continuous, shared, form=form)) < 1e-4
    assert check_gradient(*objectives.trpo_kl_closure(seed, continuous, shared)) < 1e-4


@pytest.mark.parametrize("continuous", [False, True])
@pytest.mark.parametrize("shared", [None, (5,)])
def test_unit_beta_gradient_is_log_space_policy_gradient(continuous, shared):
    pol, batch, _ = objectives.trpo_batch(3, continuous, shared)
    _, g = trpo.factored_surrogate(pol, batch, 1.0, "product")
    reps = np.array([pol.W[i] for i in batch.rep_idx])
    _, g_log = pol.joint_logprob_grad(batch.obs, batch.actions, reps, batch.q)
    np.testing.assert_allclose(g, np.mean(batch.q) / len(batch) * g_log, rtol=1e-9, atol=1e-13)


def test_kl_examples():
    obs = np.zeros((1, 2))
    old = FactoredPolicy(2, "figar-2", n_actions=2, hidden=(3,), init=False)
    new = old.clone()
    assert trpo.combined_kl(new, old, obs)[0] == 0.0
    new.params["rep.b1"][...] = np.log([0.9, 0.1])
    kl_x = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
    assert kl_x == pytest.approx(0.5108, abs=1e-4)
    assert trpo.combined_kl(new, old, obs, 0.64)[0] == pytest.approx(0.64 * kl_x, rel=1e-12)
    assert 0.64 * kl_x == pytest.approx(0.3269, abs=1e-4)
    z = np.zeros((1, 1))
    assert gaussian_kl(z + 0.3, z, z - 0.4, z)[0] == pytest.approx(0.5 * 0.7 ** 2, rel=1e-12)


def test_kl_reports_max_over_states():
    pol, batch, theta = objectives.trpo_batch(4)
    pol.set_flat(theta)
    mean, _, worst = trpo.combined_kl(pol, batch, batch.obs)
    assert 0.0 < mean <= worst


@pytest.mark.parametrize("continuous", [False, True])
@pytest.mark.parametrize("shared", [None, (5,)])
def test_fisher_vector_product_is_kl_hessian(continuous, shared):
    pol, batch, _ = objectives.trpo_batch(5, continuous, shared)
    theta = pol.get_flat()
    v = np.random.default_rng(0).normal(size=theta.size)
    fv = trpo.fisher_vector_product(pol, batch.obs, v, 0.64)
    h = 1e-5
    grads = []
    for sign in (1, -1):
        pol.set_flat(theta + sign * h * v)
        grads.append(trpo.combined_kl(pol, batch, batch.obs, 0.64)[1])
    pol.set_flat(theta)
    np.testing.assert_allclose(fv, (grads[0] - grads[1]) / (2 * h), rtol=1e-5, atol=1e-9)


def test_conjugate_gradient_matches_direct_solve():
    rng = np.random.default_rng(0)
    d = rng.uniform(0.5, 3.0, size=10)
    b = rng.normal(size=10)
    x = trpo.conjugate_gradient(lambda v: d * v, b, iters=10, residual_tol=0.0)
    assert np.max(np.abs(x - b / d)) < 1e-6
    # the damped Fisher of a real policy, materialized column by column
    pol, batch, _ = objectives.trpo_batch(6)
    n = pol.params.size
    F = np.stack([trpo.fisher_vector_product(pol, batch.obs, e, 0.64) for e in np.eye(n)], axis=1) + 0.1 * np.eye(n)
    np.testing.assert_allclose(F, F.T, atol=1e-12)
    g = rng.normal(size=n)
    x = trpo.conjugate_gradient(lambda v: F @ v, g, iters=4 * n, residual_tol=1e-30)
    assert np.max(np.abs(x - np.linalg.solve(F, g))) < 1e-6


def test_zero_gradient_gives_zero_step():
    pol, batch, _ = objectives.trpo_batch(7)
    batch.q[:] = 0.0
    theta = pol.get_flat()
    step = trpo.trust_region_update(pol, batch, trpo.TrpoConfig())
    assert not step.accepted and step.kl_after == 0.0 and step.accepted_fraction == 0.0
    assert np.array_equal(pol.get_flat(), theta)


@pytest.mark.parametrize("continuous", [False, True])
@pytest.mark.parametrize("shared", [None, (5,)])
def test_accepted_steps_respect_trust_region(continuous, shared):
    cfg = trpo.TrpoConfig()
    accepted = 0
    for seed in range(25):
        pol, batch, _ = objectives.trpo_batch(seed, continuous, shared, positive=seed % 3 != 0)
        theta_old = pol.get_flat()
        step = trpo.trust_region_update(pol, batch, cfg)
        if step.accepted:
            accepted += 1
            kl, _, _ = trpo.combined_kl(pol, batch, batch.obs, cfg.beta_kl)
            s_after, _ = trpo.factored_surrogate(pol, batch, cfg.beta_ar, step.form)
            assert kl <= cfg.delta and step.kl_after <= cfg.delta
            assert s_after > step.surrogate_before and s_after == step.surrogate_after
        else:
            assert np.array_equal(pol.get_flat(), theta_old)
    assert accepted >= 20


def test_singleton_set_reduces_to_single_factor():
    pol = FactoredPolicy(4, "baseline", n_actions=3, hidden=(6,), seed=0, final_scale=1.0)
    rng = np.random.default_rng(0)
    batch = trpo.freeze_batch(pol, rng.normal(size=(12, 4)), rng.integers(3, size=12), np.zeros(12, int),
                              rng.uniform(0.5, 2.0, size=12))
    rep = pol.params.values[pol.rep_slice].copy()
    step = trpo.trust_region_update(pol, batch, trpo.TrpoConfig())
    assert step.accepted and step.form == "single"
    assert np.array_equal(pol.params.values[pol.rep_slice], rep)
    assert np.all(pol.forward(batch.obs).rep_probs == 1.0)
    value, _ = trpo.factored_surrogate(pol, batch, 1.28)
    out = pol.forward(batch.obs)
    ratio = np.exp(pol.action_logprob(out, batch.actions) - batch.old_logp_a)
    assert value == pytest.approx(np.mean(ratio * batch.q), rel=1e-12)


def test_returns_to_go_last_decision_is_macro_reward():
    q = trpo.returns_to_go([1.0, 2.0, 3.0], [2, 1, 3], 0.5)
    assert q[-1] == 3.0 and q[1] == 2.0 + 0.5 * 3.0 and q[0] == 1.0 + 0.25 * q[1]


def test_gather_batch_on_corridor():
    pol = FactoredPolicy(11, "figar-5", n_actions=2, seed=0)
    env = Corridor(10)
    batch = trpo.gather_batch(pol, env, 3, 0.99, np.random.default_rng(0))
    assert len(batch.episode_returns) == 3
    assert len(batch.obs) == len(batch.q) == len(batch.rep_idx) == len(batch.repetitions)
    again = trpo.gather_batch(pol, Corridor(10), 3, 0.99, np.random.default_rng(0))
    assert np.array_equal(batch.q, again.q) and np.array_equal(batch.obs, again.obs)


def test_greedy_rollouts_are_identical():
    pol = FactoredPolicy(11, "figar-5", n_actions=2, seed=1)
    a = trpo.rollout_episode(pol, Corridor(10), np.random.default_rng(0), 0.99, GREEDY)
    b = trpo.rollout_episode(pol, Corridor(10), np.random.default_rng(1), 0.99, GREEDY)
    assert a[1:] == b[1:]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20), st.floats(-2e3, 2e3), st.floats(-2e3, 2e3))
def test_k_schedule_is_monotone(observed, r1, r2):
    s = trpo.KSchedule(5, 50)
    for r in observed:
        s.observe(r)
    lo, hi = sorted((r1, r2))
    assert s.k_for(lo) >= s.k_for(hi)
    assert 5 <= s.k_for(r1) <= 50
    if max(observed) > min(observed):
        assert s.k_for(max(observed)) == 5 and s.k_for(min(observed)) == 50


def test_k_schedule_starts_at_max():
    assert trpo.KSchedule(5, 50).k_for(None) == 50
    s = trpo.KSchedule(5, 50)
    s.observe(0.0), s.observe(10.0)
    assert s.k_for(5.0) == 28


def test_track_best_policy():
    assert trpo.track_best_policy([(3, "a"), (7, "b"), (5, "c")]) == "b"
    assert trpo.track_best_policy([(1, "a"), (2, "b"), (3, "c")]) == "c"
    assert trpo.track_best_policy([(1, "only")]) == "only"
    assert trpo.track_best_policy([(2, "first"), (2, "second")]) == "first"
    with pytest.raises(ConfigurationError):
        trpo.track_best_policy([])


def test_config_validation():
    for bad in (dict(beta_ar=0.0), dict(delta=0.0), dict(k_min=10, k_max=5), dict(surrogate="max")):
        with pytest.raises(ConfigurationError):
            trpo.TrpoConfig(**bad)


@pytest.mark.parametrize("env_cls,kw", [(Corridor, dict(n_actions=2)),
                                        (PointMass, dict(action_bounds=((-1.0,), (1.0,))))])
def test_short_training_is_deterministic_and_safe(env_cls, kw, tmp_path):
    def run():
        cfg = trpo.TrpoConfig(improvement_steps=5)
        obs_dim = env_cls().reset().size
        pol = FactoredPolicy(obs_dim, "figar-5", hidden=(16,), seed=3, **kw)
        return trpo.train(cfg, lambda s: env_cls(seed=s), pol, seed=3), pol
    (l1, p1), (l2, p2) = run(), run()
    l1.write_csv(tmp_path / "a.csv")
    l2.write_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert np.array_equal(p1.get_flat(), p2.get_flat())
    assert len(l1.history) == 5 and all(s.kl_after <= 0.01 for s in l1.steps)
