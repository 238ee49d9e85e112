import numpy as np
import pytest

from oppo.agent import (
    ActorStreams,
    Agent,
    AgentConfig,
    NonFiniteLossError,
    TrajectoryBatch,
    bonus_ratio,
    clipped_loss,
    collect,
    eta2_estimate,
    gae,
    gae_two_head,
    optimistic_advantage,
    policy_objective,
    softmax,
)
from oppo.mdp import BanditTileConfig, TabularMDP, build_bandit_tile, enumerate_dag_layers, random_layered_mdp
from oppo.ube import UbeModel, solve


def chain_env(H=5):
    # 0 -> 1 -> 2 (terminal), single action
    T = np.zeros((3, 1, 3))
    T[0, 0, 1] = T[1, 0, 2] = T[2, 0, 2] = 1.0
    return TabularMDP(T, np.array([[1.0], [2.0], [0.0]]), np.zeros((3, 1)), np.eye(3)[0], H,
                      np.array([False, False, True]))


def two_arm_bandit():
    T = np.zeros((2, 2, 2))
    T[:, :, 1] = 1.0
    return TabularMDP(T, np.array([[1.0, 0.0], [0.0, 0.0]]), np.full((2, 2), 0.5), np.eye(2)[0], 1,
                      np.array([False, True]))


def small_grid():
    return build_bandit_tile(BanditTileConfig(width=4, height=4, goal_tiles=((0, 3), (3, 3)),
                                              start_tiles=((1, 0), (2, 0)), max_steps=12))


def make_batch(rng, N=4, T=12, S=5, p_done=0.2, episodic=True):
    dones = rng.random((N, T)) < p_done
    if episodic:
        dones[:, -1] = True
    start = np.zeros((N, T), dtype=bool)
    start[:, 0] = True
    start[:, 1:] = dones[:, :-1]
    states = rng.integers(S, size=(N, T))
    next_states = rng.integers(S, size=(N, T))
    # within an episode the next state is the following step's state
    chained = ~dones[:, :-1]
    next_states[:, :-1][chained] = states[:, 1:][chained]
    return TrajectoryBatch(states=states, actions=rng.integers(2, size=(N, T)), rewards=rng.normal(size=(N, T)),
                           bonus=rng.random((N, T)), next_states=next_states, dones=dones,
                           logp=np.full((N, T), np.log(0.5)), episode_start=start,
                           count_bonus=np.ones((N, T)))


def mc_return_to_go(rewards, dones):
    """Direct sum of rewards to the end of each episode (no bootstrap)."""
    N, T = rewards.shape
    out = np.zeros((N, T))
    for n in range(N):
        for l in range(T):
            total = 0.0
            for h in range(l, T):
                total += rewards[n, h]
                if dones[n, h]:
                    break
            out[n, l] = total
    return out


class TestConfig:
    def test_defaults_valid(self):
        cfg = AgentConfig()
        assert cfg.batch_size == 32 * 64
        assert cfg.bonus_source == "count"

    @pytest.mark.parametrize("kw", [{"variant": "dqn"}, {"clip": 1.0}, {"clip": 0.0}, {"gamma": 0.0},
                                    {"lam": 1.5}, {"beta": -1.0}, {"num_actors": 0},
                                    {"eta2_aggregate": "median"}])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            AgentConfig(**kw)

    def test_bonus_sources(self):
        assert [AgentConfig(variant=v).bonus_source for v in ("ppo", "oppo_exact", "oppo_rnd", "rnd")] == \
            ["zero", "count", "rnd", "rnd"]


class TestCollect:
    def test_hand_simulated_trace(self):
        env = chain_env()
        rng = np.random.default_rng(0)
        streams = ActorStreams.start(env, 1, rng)
        counts = np.zeros(3, dtype=np.int64)
        b = collect(np.ones((3, 1)), env, streams, 1, 3, rng, counts, "count")
        np.testing.assert_array_equal(b.states, [[0, 1, 0]])
        np.testing.assert_array_equal(b.next_states, [[1, 2, 1]])
        np.testing.assert_array_equal(b.rewards, [[1.0, 2.0, 1.0]])
        np.testing.assert_array_equal(b.dones, [[False, True, False]])
        np.testing.assert_array_equal(b.episode_start, [[True, False, True]])
        np.testing.assert_array_equal(b.logp, 0.0)
        np.testing.assert_array_equal(b.bonus, [[1.0, 1.0, 0.5]])
        assert b.episode_returns == [3.0]
        np.testing.assert_array_equal(counts, [0, 2, 1])
        # the stream resumes mid-episode
        assert streams.state[0] == 1 and streams.step[0] == 1

    def test_horizon_truncation(self):
        env = chain_env(H=1)
        rng = np.random.default_rng(0)
        b = collect(np.ones((3, 1)), env, ActorStreams.start(env, 2, rng), 2, 2, rng,
                    np.zeros(3, dtype=np.int64), "zero")
        assert b.dones.all()
        assert np.all(b.bonus == 0)

    def test_counts_replay_in_visitation_order(self):
        env = small_grid()
        rng = np.random.default_rng(1)
        counts = np.zeros(env.num_states, dtype=np.int64)
        probs = softmax(rng.normal(size=(env.num_states, 4)))
        streams = ActorStreams.start(env, 5, rng)
        for _ in range(3):
            before = counts.copy()
            b = collect(probs, env, streams, 5, 20, rng, counts, "count")
            replay = before.copy()
            expected = np.zeros((5, 20))
            for h in range(20):
                for n in range(5):
                    replay[b.next_states[n, h]] += 1
                    expected[n, h] = 1.0 / replay[b.next_states[n, h]]
            np.testing.assert_array_equal(b.bonus, expected)
            np.testing.assert_array_equal(counts, replay)

    def test_unknown_bonus_source(self):
        env = chain_env()
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            collect(np.ones((3, 1)), env, ActorStreams.start(env, 1, rng), 1, 1, rng, np.zeros(3), "oracle")
        with pytest.raises(ValueError):
            collect(np.ones((3, 1)), env, ActorStreams.start(env, 1, rng), 1, 1, rng, np.zeros(3), "rnd")

    def test_same_seed_same_batch(self):
        env = small_grid()
        b1 = Agent(AgentConfig(num_actors=4, steps_per_actor=16), env, seed=3).collect()
        b2 = Agent(AgentConfig(num_actors=4, steps_per_actor=16), env, seed=3).collect()
        np.testing.assert_array_equal(b1.states, b2.states)
        np.testing.assert_array_equal(b1.rewards, b2.rewards)


class TestGae:
    def test_single_step_termination(self):
        r = np.array([[0.7]])
        adv = gae(r, np.array([[0.2]]), np.array([[5.0]]), np.array([[True]]), 0.9, 0.95)
        assert adv[0, 0] == pytest.approx(0.5)

    @pytest.mark.parametrize("seed", range(100))
    def test_monte_carlo_oracle(self, seed):
        rng = np.random.default_rng(seed)
        b = make_batch(rng)
        v1, v2 = rng.normal(size=5), rng.random(5)
        a1, a2, ret1, ret2 = gae_two_head(b, v1, v2, 1.0, 1.0)
        np.testing.assert_allclose(a1, mc_return_to_go(b.rewards, b.dones) - v1[b.states], atol=1e-9)
        np.testing.assert_allclose(a2, mc_return_to_go(b.bonus, b.dones) - v2[b.states], atol=1e-9)
        np.testing.assert_allclose(ret1, mc_return_to_go(b.rewards, b.dones), atol=1e-9)

    def test_lambda_zero_is_td_error(self):
        rng = np.random.default_rng(1)
        b = make_batch(rng, episodic=False)
        v1, v2 = rng.normal(size=5), rng.random(5)
        g = 0.9
        a1, a2, _, _ = gae_two_head(b, v1, v2, g, 0.0)
        nd = ~b.dones
        np.testing.assert_allclose(a1, b.rewards + g * v1[b.next_states] * nd - v1[b.states], atol=1e-12)
        np.testing.assert_allclose(a2, b.bonus + g ** 2 * v2[b.next_states] * nd - v2[b.states], atol=1e-12)

    def test_bootstrap_at_batch_end(self):
        b = make_batch(np.random.default_rng(2), N=1, T=3, p_done=0.0, episodic=False)
        v = np.arange(5, dtype=float)
        a1, _, _, _ = gae_two_head(b, v, np.zeros(5), 1.0, 1.0)
        expected = b.rewards[0].sum() + v[b.next_states[0, -1]] - v[b.states[0, 0]]
        assert a1[0, 0] == pytest.approx(expected)

    def test_two_head_separation(self):
        rng = np.random.default_rng(3)
        b = make_batch(rng)
        v1, v2 = rng.normal(size=5), rng.random(5)
        a1, a2, ret1, _ = gae_two_head(b, v1, v2, 0.99, 0.95)
        eta = eta2_estimate(b, v2, a2)
        b.bonus = rng.permutation(b.bonus.ravel()).reshape(b.bonus.shape)
        p1, p2, pret1, _ = gae_two_head(b, v1, v2, 0.99, 0.95)
        np.testing.assert_array_equal(a1, p1)
        np.testing.assert_array_equal(ret1, pret1)
        assert not np.allclose(a2, p2)
        assert eta2_estimate(b, v2, p2) != eta


class TestEta2:
    def blank(self, N=2, T=3):
        z = np.zeros((N, T))
        return TrajectoryBatch(np.zeros((N, T), int), np.zeros((N, T), int), z, z, np.zeros((N, T), int),
                               z.astype(bool), z, np.zeros((N, T), bool), z)

    def test_zero(self):
        b = self.blank()
        assert eta2_estimate(b, np.zeros(1), np.zeros((2, 3))) == 0.0

    def test_mean_and_sum(self):
        b = self.blank()
        b.episode_start[:, 1] = True
        a2 = np.zeros((2, 3))
        a2[0, 1], a2[1, 1] = 0.4, 0.8
        assert eta2_estimate(b, np.zeros(1), a2) == pytest.approx(0.6)
        assert eta2_estimate(b, np.zeros(1), a2, "sum") == pytest.approx(1.2)

    def test_fallback_and_clamp(self):
        b = self.blank()
        a2 = np.array([[-2.0, 9.0, 9.0], [0.5, 9.0, 9.0]])
        assert eta2_estimate(b, np.zeros(1), a2) == pytest.approx(0.25)

    def test_expectation_matches_solver(self):
        rng = np.random.default_rng(4)
        mdp = random_layered_mdp(rng, max_states=5, max_actions=2, max_horizon=3)
        S, A, H = mdp.num_states, mdp.num_actions, mdp.horizon
        nu = rng.uniform(0.1, 1.0, size=(S, A))
        pi = softmax(rng.normal(size=(S, A)))
        sol = solve(UbeModel.from_mdp(mdp, nu), pi)
        # each non-terminal state lives on one layer, so V2 can be state-indexed
        v2 = np.zeros(S)
        for h, layer in enumerate(enumerate_dag_layers(mdp)[:H]):
            for s in layer:
                if not mdp.terminal[s]:
                    v2[s] = sol.v2[h, s]
        streams = ActorStreams.start(mdp, 64, rng)
        est = []
        for _ in range(150):
            b = collect(pi, mdp, streams, 64, 2 * H, rng, np.zeros(S, dtype=np.int64), "zero")
            b.bonus = nu[b.states, b.actions]
            _, a2, _, _ = gae_two_head(b, np.zeros(S), v2, 1.0, 1.0)
            est.append(eta2_estimate(b, v2, a2))
        se = np.std(est) / np.sqrt(len(est))
        assert abs(np.mean(est) - sol.eta2) <= 3 * se + 1e-12


class TestOptimisticAdvantage:
    def test_beta_zero(self):
        a1 = np.array([1.0, -2.0])
        out = optimistic_advantage(a1, np.array([5.0, 5.0]), 0.0, 0.0, 0.0)
        np.testing.assert_array_equal(out, a1)
        assert out is not a1

    def test_zero_a2(self):
        a1 = np.array([0.3, 0.1])
        np.testing.assert_array_equal(optimistic_advantage(a1, np.zeros(2), 2.0, 0.1, 0.5), a1)

    def test_formula(self):
        out = optimistic_advantage(np.array([1.0]), np.array([2.0]), 3.0, 0.25, 0.75)
        assert out[0] == pytest.approx(7.0)

    def test_rejects_zero_denominator(self):
        with pytest.raises(ValueError):
            optimistic_advantage(np.ones(2), np.ones(2), 1.0, 0.0, 0.0)

    def test_rnd_limit(self):
        rng = np.random.default_rng(5)
        c = 1e6
        for eta2 in (0.0, 0.5, 10.0):
            a1, a2 = rng.normal(size=1000), rng.normal(size=1000)
            out = optimistic_advantage(a1, a2, np.sqrt(c), c, eta2)
            rel = np.abs(out - (a1 + a2)) / (np.abs(a1) + np.abs(a2))
            assert rel.max() <= 5e-6


class TestClippedObjective:
    def test_identity_ratio(self):
        adv = np.array([0.5, -1.0, 2.0])
        lp = np.log(np.array([0.2, 0.5, 0.3]))
        assert clipped_loss(lp, lp, adv, 0.2) == pytest.approx(adv.mean())

    def test_clip_arithmetic(self):
        assert clipped_loss(np.log([1.5]), np.zeros(1), np.array([1.0]), 0.2) == pytest.approx(1.2)
        assert clipped_loss(np.log([0.5]), np.zeros(1), np.array([-1.0]), 0.2) == pytest.approx(-0.8)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        S, A, B = 4, 3, 40
        old = rng.normal(size=(S, A))
        logits = old + rng.normal(scale=0.15, size=(S, A))
        states, actions = rng.integers(S, size=B), rng.integers(A, size=B)
        logp_old = np.log(softmax(old))[states, actions]
        adv = rng.normal(size=B)

        def total(lg):
            surr, ent, _, _ = policy_objective(lg, states, actions, logp_old, adv, 0.2, 0.01)
            return surr + 0.01 * ent

        _, _, _, grad = policy_objective(logits, states, actions, logp_old, adv, 0.2, 0.01)
        fd = np.zeros_like(logits)
        h = 1e-6
        for idx in np.ndindex(logits.shape):
            up, down = logits.copy(), logits.copy()
            up[idx] += h
            down[idx] -= h
            fd[idx] = (total(up) - total(down)) / (2 * h)
        np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-9)

    def test_logit_shift_invariance(self):
        rng = np.random.default_rng(6)
        logits = rng.normal(size=(3, 2))
        states, actions = rng.integers(3, size=10), rng.integers(2, size=10)
        lp_old = np.log(softmax(logits))[states, actions] + rng.normal(scale=0.05, size=10)
        adv = rng.normal(size=10)
        shifted = logits + rng.normal(size=(3, 1)) * 10
        np.testing.assert_allclose(softmax(shifted), softmax(logits), atol=1e-9)
        a = policy_objective(logits, states, actions, lp_old, adv, 0.1, 0.01)
        b = policy_objective(shifted, states, actions, lp_old, adv, 0.1, 0.01)
        for x, y in zip(a[:3], b[:3]):
            assert x == pytest.approx(y, abs=1e-9)
        np.testing.assert_allclose(a[3], b[3], atol=1e-9)

    def test_zero_advantage_raises_entropy(self):
        logits = np.array([[2.0, -1.0, 0.0]])
        states = np.zeros(8, dtype=int)
        actions = np.array([0, 1, 2, 0, 0, 1, 0, 2])
        lp = np.log(softmax(logits))[states, actions]
        _, ent0, _, g_plain = policy_objective(logits, states, actions, lp, np.zeros(8), 0.1, 0.0)
        assert np.all(g_plain == 0)
        _, _, _, g = policy_objective(logits, states, actions, lp, np.zeros(8), 0.1, 1.0)
        _, ent1, _, _ = policy_objective(logits + 0.01 * g, states, actions, lp, np.zeros(8), 0.1, 0.0)
        assert ent1 > ent0


class TestAgent:
    def test_learning_rate_zero_freezes(self):
        env = small_grid()
        cfg = AgentConfig(variant="oppo_rnd", policy_lr=0.0, value_lr=0.0, num_actors=4, steps_per_actor=16)
        ag = Agent(cfg, env, seed=0)
        ag.train_step()
        np.testing.assert_array_equal(ag.logits, 0.0)
        np.testing.assert_array_equal(ag.v1, 0.0)
        np.testing.assert_array_equal(ag.v2, 0.0)

    @pytest.mark.parametrize("variant", ["oppo_exact", "oppo_rnd"])
    def test_beta_zero_bitwise_equals_ppo(self, variant):
        env = small_grid()
        kw = dict(beta=0.0, c=5.0, num_actors=4, steps_per_actor=16)
        ppo = Agent(AgentConfig(variant="ppo", **kw), env, seed=11)
        opt = Agent(AgentConfig(variant=variant, **kw), env, seed=11)
        for _ in range(5):
            ppo.train_step()
            opt.train_step()
            np.testing.assert_array_equal(ppo.logits, opt.logits)
            np.testing.assert_array_equal(ppo.v1, opt.v1)

    def test_two_arm_bandit(self):
        ag = Agent(AgentConfig(variant="ppo"), two_arm_bandit(), seed=0)
        for _ in range(200):
            ag.train_step()
        assert ag.probs[0, 0] >= 0.99

    def test_policy_rows_stay_valid(self):
        ag = Agent(AgentConfig(variant="oppo_exact", num_actors=8, steps_per_actor=16), small_grid(), seed=2)
        for _ in range(10):
            _, m = ag.train_step()
            np.testing.assert_allclose(ag.probs.sum(axis=1), 1.0, atol=1e-9)
            assert np.all(ag.probs > 0)
            assert m["eta2"] >= 0 and 0 <= m["clip_fraction"] <= 1
        assert m["timestep"] == 10 * 128

    def test_rnd_variant_metrics(self):
        ag = Agent(AgentConfig(variant="oppo_rnd", num_actors=4, steps_per_actor=16), small_grid(), seed=3)
        digest = ag.rnd.target_digest()
        _, m = ag.train_step()
        assert np.isfinite(m["bonus_ratio"]) and m["bonus_ratio"] > 0
        assert np.isfinite(m["rnd_loss"])
        assert ag.rnd.target_digest() == digest

    def test_rnd_baseline_uses_single_head(self):
        ag = Agent(AgentConfig(variant="rnd", num_actors=4, steps_per_actor=16), small_grid(), seed=4)
        _, m = ag.train_step()
        assert np.isnan(m["eta2"])
        np.testing.assert_array_equal(ag.v2, 0.0)

    def test_nan_aborts(self):
        ag = Agent(AgentConfig(variant="ppo", num_actors=2, steps_per_actor=8), small_grid(), seed=5)
        batch = ag.collect()
        batch.rewards[0, 0] = np.nan
        with pytest.raises(NonFiniteLossError):
            ag.update(batch)

    @pytest.mark.parametrize("variant", ["oppo_exact", "oppo_rnd"])
    def test_checkpoint_round_trip(self, tmp_path, variant):
        env = small_grid()
        cfg = AgentConfig(variant=variant, num_actors=4, steps_per_actor=16)
        ag = Agent(cfg, env, seed=6)
        for _ in range(3):
            ag.train_step()
        ag.save(tmp_path / "ck.npz")
        back = Agent.load(tmp_path / "ck.npz", env)
        for _ in range(3):
            ag.train_step()
            back.train_step()
        np.testing.assert_array_equal(ag.logits, back.logits)
        np.testing.assert_array_equal(ag.v2, back.v2)
        np.testing.assert_array_equal(ag.counts, back.counts)
        assert ag.timesteps == back.timesteps

    def test_checkpoint_version_checked(self, tmp_path):
        env = small_grid()
        ag = Agent(AgentConfig(num_actors=2, steps_per_actor=4), env)
        ag.save(tmp_path / "ck.npz")
        with np.load(tmp_path / "ck.npz") as d:
            d = dict(d)
        d["version"] = np.array(99)
        np.savez(tmp_path / "bad.npz", **d)
        with pytest.raises(ValueError):
            Agent.load(tmp_path / "bad.npz", env)


def test_bonus_ratio():
    n = np.array([[1, 4, 10]])
    assert bonus_ratio(1.0 / n, 1.0 / n) == pytest.approx(1.0)
    assert bonus_ratio(np.full((1, 3), 0.5), np.full((1, 3), 1e-3)) > 100
