import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from figar import oracle
from figar.envs import ChainSwitch, Corridor, execute_macro
from figar.errors import ConfigurationError, NumericError
from figar.policy import GREEDY, Decision, FactoredPolicy, SamplingMode, make_repetition_set

# frozen solver output for Corridor(10) at gamma 0.99 (see the closed form below)
CORRIDOR_V_START = -0.42662002428314


def test_corridor_value_matches_closed_form_and_fixture():
    g = 0.99
    closed = -(1 - g ** 10) / (1 - g) + 10 * g ** 9
    for W in ("figar-10", (1,)):
        sol = oracle.solve(Corridor(10), W, g)
        assert sol.V[0] == pytest.approx(closed, abs=1e-10)
        assert sol.V[0] == pytest.approx(CORRIDOR_V_START, abs=1e-12)
        assert sol.residual < 1e-10


def test_start_state_prefers_longest_repetition():
    sol = oracle.solve(Corridor(10), "figar-10", 0.99)
    assert sol.best_action[0] == Corridor.RIGHT and sol.best_repetition[0] == 10
    assert np.allclose(sol.V[:-1], sol.Q[:-1].reshape(10, -1).max(axis=1), atol=0)


def test_bellman_residual_and_value_definition():
    env = ChainSwitch(8, 0.2, gamma=0.95)
    model = oracle.expand_smdp(env, "figar-6")
    sol = oracle.smdp_value_iteration(model)
    nS, nA, nW = sol.Q.shape
    backup = np.zeros_like(sol.Q)
    for s in range(nS):
        for a in range(nA):
            for wi in range(nW):
                backup[s, a, wi] = sum(p * (r + (0.0 if model.terminal[n] else model.gamma ** e * sol.V[n]))
                                       for p, n, r, e in model.outcomes[s][a][wi])
    assert np.max(np.abs(backup.reshape(nS, -1).max(axis=1)[~model.terminal] - sol.V[~model.terminal])) < 1e-9


def test_expansion_examples():
    model = oracle.expand_smdp(Corridor(10), (1,))
    model.check()
    for s in range(10):
        assert len(model.outcomes[s][Corridor.RIGHT][0]) == 1
        assert model.outcomes[s][Corridor.RIGHT][0][0][1] == s + 1
    model = oracle.expand_smdp(Corridor(10, gamma=1.0), "figar-10", gamma=1.0)
    (p, nxt, r, e), = model.outcomes[0][Corridor.RIGHT][9]
    assert (p, nxt, r, e) == (1.0, 10, 0.0, 10)
    env = Corridor(10, gamma=1.0)
    env.reset()
    tr = execute_macro(env, Corridor.RIGHT, 10, 1.0)
    assert (tr.macro_reward, tr.terminal) == (r, True)


def test_no_slip_chain_expands_like_corridor():
    a = oracle.expand_smdp(Corridor(6), "figar-4")
    b = oracle.expand_smdp(ChainSwitch(6, 0.0), "figar-4")
    assert a.outcomes == b.outcomes


@pytest.mark.parametrize("p_slip", [0.0, 0.1, 0.3])
def test_stochastic_expansion_is_normalized(p_slip):
    oracle.expand_smdp(ChainSwitch(10, p_slip), "figar-12").check()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), s=st.integers(0, 5), a=st.integers(0, 1), x=st.integers(1, 6))
def test_expansion_matches_monte_carlo(seed, s, a, x):
    env = ChainSwitch(6, 0.25, gamma=0.9, seed=seed)
    outcomes = oracle._expand_macro(env, s, a, x, 0.9)
    assert sum(o[0] for o in outcomes) == pytest.approx(1.0, abs=1e-12)
    exp_r = sum(p * r for p, _, r, _ in outcomes)
    n = 2000
    total = 0.0
    for _ in range(n):
        env.reset()
        env.state = s
        total += execute_macro(env, a, x, 0.9).macro_reward
    spread = max(abs(r - exp_r) for _, _, r, _ in outcomes) + 1e-12
    assert abs(total / n - exp_r) < 5 * spread / np.sqrt(n) + 1e-12


def test_single_absorbing_state_has_zero_value():
    model = oracle.TabularSmdp(1, 1, make_repetition_set((1,)), 0.9, np.array([True]), [[[[(1.0, 0, 0.0, 1)]]]])
    assert oracle.smdp_value_iteration(model).V.tolist() == [0.0]


def test_non_convergence_raises():
    model = oracle.TabularSmdp(2, 1, make_repetition_set((1,)), 1.0, np.array([False, True]),
                               [[[[(1.0, 0, 1.0, 1)]]], [[[(1.0, 1, 0.0, 1)]]]])
    with pytest.raises(NumericError):
        oracle.smdp_value_iteration(model, max_iterations=200)
    with pytest.raises(ConfigurationError):
        oracle.smdp_value_iteration(model, tol=0.0)


@pytest.mark.parametrize("env", [Corridor(10), ChainSwitch(10, 0.1), ChainSwitch(7, 0.3, gamma=0.9)])
def test_singleton_set_equals_plain_value_iteration(env):
    np.testing.assert_allclose(oracle.solve(env, (1,)).V, oracle.mdp_value_iteration(env), atol=1e-9)


@pytest.mark.parametrize("small,large", [((1,), "figar-10"), ((1, 3), (1, 2, 3, 7)), ((4,), "figar-5"),
                                         ("figar-p", "figar-50")])
def test_enlarging_the_set_never_lowers_values(small, large):
    env = ChainSwitch(10, 0.15)
    v_small, v_large = oracle.solve(env, small).V, oracle.solve(env, large).V
    assert np.all(v_large >= v_small - 1e-9)


def test_caps():
    with pytest.raises(ConfigurationError):
        oracle.expand_smdp(Corridor(10_000), (1,))
    with pytest.raises(ConfigurationError):
        oracle.expand_smdp(Corridor(10), (1, 51))


def test_solution_csv(tmp_path):
    sol = oracle.solve(Corridor(4), "figar-4", 0.99)
    sol.to_csv(tmp_path / "o.csv")
    lines = (tmp_path / "o.csv").read_text().splitlines()
    assert lines[0] == "state,action,repetition,value" and len(lines) == 6
    assert lines[1].startswith("0,1,4,")


def test_oracle_policy_monte_carlo_matches_value():
    env = ChainSwitch(10, 0.1, seed=0)
    sol = oracle.solve(env, "figar-10")
    ev = oracle.evaluate_policy(oracle.OraclePolicy(sol), env, episodes=10_000, seed=0)
    se = ev.discounted_returns.std(ddof=1) / np.sqrt(len(ev.discounted_returns))
    assert abs(ev.mean_discounted_return - sol.V[0]) < 3 * se


def test_oracle_policy_exact_on_corridor():
    sol = oracle.solve(Corridor(10), "figar-10", 0.99)
    ev = oracle.evaluate_policy(oracle.OraclePolicy(sol), Corridor(10), episodes=5)
    assert ev.std_return == 0.0 and ev.mean_discounted_return == pytest.approx(sol.V[0], abs=1e-12)
    sol1 = oracle.solve(Corridor(10, gamma=1.0), "figar-10", 1.0)
    ev1 = oracle.evaluate_policy(oracle.OraclePolicy(sol1), Corridor(10), episodes=3, gamma=1.0)
    assert ev1.mean_return == sol1.V[0] == 0.0 and ev1.mean_repetition == 10.0


class FixedRepetition:
    W = make_repetition_set("figar-5")

    def decide(self, obs, mode=GREEDY, rng=None):
        return Decision(action=Corridor.RIGHT, repetition=5, rep_index=4, logprob_a=0.0, logprob_x=0.0)


def test_evaluate_policy_examples():
    ev = oracle.evaluate_policy(FixedRepetition(), Corridor(10), episodes=4)
    assert ev.mean_repetition == 5.0 and ev.std_return == 0.0 and ev.success_rate == 1.0
    assert ev.histogram[1].sum() == pytest.approx(1.0)
    forced = oracle.evaluate_policy(FixedRepetition(), Corridor(10), episodes=4, force_repetition=1)
    assert forced.mean_repetition == 1.0 and forced.mean_return == ev.mean_return
    with pytest.raises(ConfigurationError):
        oracle.evaluate_policy(FixedRepetition(), Corridor(10), episodes=0)


def test_evaluation_step_cap():
    pol = FactoredPolicy(11, "figar-5", n_actions=2, seed=0)
    ev = oracle.evaluate_policy(pol, Corridor(10), episodes=100, mode=SamplingMode.eps_greedy(0.1),
                                max_total_steps=300)
    assert len(ev.returns) < 100 and ev.primitive_steps >= 300
