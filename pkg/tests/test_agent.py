"""Agent-level tests: shaping math, routing barriers, collection, training step."""

import numpy as np
import pytest

import rmc.autodiff as ad
from rmc.agent import (
    Agent,
    AgentConfig,
    InferredStates,
    RoutingScheme,
    TrainingDiverged,
    _SCHEME_TABLE,
    _flatten_time,
    apply_routing,
    beta_schedule,
    make_buffer,
    polyak_update,
    q_backup,
    total_reward,
)
from rmc.envs import Env


def tiny_config(**kw) -> AgentConfig:
    base = dict(
        obs_dim=3,
        action_dim=1,
        hidden_dim=8,
        policy_trunk=(8,),
        q_trunk=(8,),
        model_trunk=(8,),
        burn_in=2,
        train_len=3,
        batch_size=4,
        seed=7,
    )
    base.update(kw)
    return AgentConfig(**base)


def filled_buffer(agent: Agent, n_steps: int = 40, env_seed: int = 42):
    buf = make_buffer(agent.config)
    env = Env("pendulum", rng=np.random.default_rng(env_seed))
    carry = None
    for i in range(n_steps):
        carry, _ = agent.collect_step(env, buf, carry, random_action=(i < 10))
    return buf


class TestShapingAndTargets:
    def test_beta_schedule_values(self):
        assert beta_schedule(0, 2.0, 100) == 2.0
        assert beta_schedule(50, 2.0, 100) == 1.0
        assert beta_schedule(100, 2.0, 100) == 0.0
        assert beta_schedule(250, 2.0, 100) == 0.0

    def test_total_reward_hand_value(self):
        out = total_reward(0.5, np.array([1.0, 2.0]), np.array([3.0, 4.0]))
        np.testing.assert_allclose(out, [3.5, 5.0])

    def test_total_reward_increasing_in_beta(self):
        intr = np.array([0.3, 0.7])
        ext = np.array([-1.0, 2.0])
        lo = total_reward(0.1, intr, ext)
        hi = total_reward(0.9, intr, ext)
        assert np.all(hi > lo)

    def test_q_backup_hand_value(self):
        # y = 1 + 0.99 * (2.0 - 0.1 * (-1.0)) = 3.079
        y = q_backup(np.array([1.0]), np.array([0.0]), np.array([2.0]), np.array([-1.0]), 0.1, 0.99)
        np.testing.assert_allclose(y, [3.079], atol=1e-12)

    def test_q_backup_terminal_drops_bootstrap(self):
        y = q_backup(np.array([1.0, 1.0]), np.array([1.0, 0.0]), np.array([5.0, 5.0]), np.array([0.0, 0.0]), 0.2, 0.9)
        np.testing.assert_allclose(y, [1.0, 5.5])

    def test_polyak_hand_value(self):
        t = [ad.tensor(np.array([1.0, 2.0]))]
        o = [ad.tensor(np.array([0.0, 0.0]))]
        polyak_update(t, o, 0.995)
        np.testing.assert_allclose(t[0].data, [0.995, 1.99])

    def test_flatten_time_is_time_major(self):
        arr = np.array([[[1.0], [2.0], [3.0]], [[4.0], [5.0], [6.0]]])  # (B=2, T=3, 1)
        np.testing.assert_array_equal(_flatten_time(arr).ravel(), [1, 4, 2, 5, 3, 6])
        flat2d = _flatten_time(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
        np.testing.assert_array_equal(flat2d, [1, 4, 2, 5, 3, 6])


class TestRoutingScheme:
    def test_table_matches_published_grid(self):
        assert _SCHEME_TABLE == {
            1: (True, True, False),
            2: (False, True, False),
            3: (True, False, False),
            4: (True, True, True),
            5: (True, False, True),
            6: (False, True, True),
        }

    @pytest.mark.parametrize("bad", [0, 7, -1, 99])
    def test_unknown_id_rejected(self, bad):
        with pytest.raises(ValueError, match="1..6"):
            RoutingScheme.from_id(bad)

    def test_all_blocked_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            RoutingScheme(False, False, False)

    def test_apply_routing_views(self):
        with ad.Tape():
            states = ad.tensor(np.ones((2, 3)))
            views = apply_routing(states, RoutingScheme.from_id(1))
            assert views["model"] is states
            assert views["value"] is states
            assert views["policy"] is not states
            np.testing.assert_array_equal(views["policy"].data, states.data)


class TestConfigValidation:
    def test_target_entropy_defaults_to_neg_action_dim(self):
        assert tiny_config(action_dim=2).target_entropy == -2.0
        assert tiny_config(target_entropy=-0.5).target_entropy == -0.5

    def test_state_dim_by_encoder(self):
        assert tiny_config().state_dim == 8
        assert tiny_config(encoder="passthrough").state_dim == 3

    def test_beta_horizon_fallback(self):
        assert tiny_config().effective_beta_horizon == 100_000
        assert tiny_config(beta_horizon=5000).effective_beta_horizon == 5000

    @pytest.mark.parametrize(
        "kw",
        [
            dict(scheme=0),
            dict(encoder="lstm"),
            dict(policy_q="max"),
            dict(model_loss="huber"),
            dict(beta0=-0.1),
            dict(beta_horizon=0),
        ],
    )
    def test_bad_fields_rejected(self, kw):
        with pytest.raises(ValueError):
            tiny_config(**kw)


@pytest.fixture(scope="module")
def batch():
    agent = Agent(tiny_config())
    buf = filled_buffer(agent)
    return buf.sample_batch(4, np.random.default_rng(3))


class TestRoutingBarriers:
    """A blocked head must leave exactly zero gradient on the recurrent core."""

    @pytest.mark.parametrize("scheme_id", [1, 2, 3, 4, 5, 6])
    def test_head_gradients_respect_scheme(self, scheme_id, batch):
        agent = Agent(tiny_config(scheme=scheme_id))
        grads = agent.head_gradients(batch)
        flags = dict(zip(("model", "value", "policy"), _SCHEME_TABLE[scheme_id]))
        for head, allowed in flags.items():
            for p in (agent.gru.w_in, agent.gru.w_hid, agent.gru.b):
                g = grads[head].wrt(p)
                if allowed:
                    assert np.any(g != 0.0), f"{head} head should reach the core under scheme {scheme_id}"
                else:
                    assert np.all(g == 0.0), f"{head} head must be blocked under scheme {scheme_id}"

    def test_heads_reach_their_own_networks(self, batch):
        agent = Agent(tiny_config(scheme=2))
        grads = agent.head_gradients(batch)
        # model final layer gets gradient even while the core is blocked
        assert np.any(grads["model"].wrt(agent.model.weights[-1]) != 0.0)
        assert np.any(grads["value"].wrt(agent.q1.weights[0]) != 0.0)
        assert np.any(grads["policy"].wrt(agent.policy.w_mu) != 0.0)

    def test_bootstrap_targets_are_gradient_free(self, batch):
        agent = Agent(tiny_config())
        grads = agent.head_gradients(batch)
        for p in agent.q1_target.tensors() + agent.q2_target.tensors():
            assert np.all(grads["value"].wrt(p) == 0.0)


class TestTemperatureLoss:
    def _inf(self, n=4):
        return InferredStates(
            stacked=ad.tensor(np.zeros((n, 2))),
            next_flat=np.zeros((n, 2)),
            mask_flat=np.array([1.0, 1.0, 0.0, 1.0]),
            model_mask_flat=np.zeros(n),
            count=3.0,
            model_count=1.0,
        )

    def test_gradient_matches_hand_formula(self):
        agent = Agent(tiny_config())  # target entropy -1
        logp = np.array([-1.0, -2.0, -99.0, -3.0])  # masked row must not matter
        with ad.Tape():
            loss = agent._temperature_loss(logp, self._inf())
            g = ad.backward(loss)
        # coeffs -(logp + H) = [2, 3, _, 4]; weighted mean 3; dL/dlog_alpha = alpha * 3
        np.testing.assert_allclose(loss.data, agent.alpha * 3.0, atol=1e-12)
        np.testing.assert_allclose(g.wrt(agent.log_alpha), agent.alpha * 3.0, atol=1e-12)

    def test_zero_at_target_entropy(self):
        agent = Agent(tiny_config())
        logp = np.full(4, 1.0)  # entropy estimate -logp = -1 == target
        with ad.Tape():
            loss = agent._temperature_loss(logp, self._inf())
            g = ad.backward(loss)
        assert loss.data == pytest.approx(0.0, abs=1e-15)
        assert g.wrt(agent.log_alpha) == pytest.approx(0.0, abs=1e-15)


class TestCollection:
    def test_hidden_advances_during_random_warmup(self):
        agent = Agent(tiny_config())
        buf = make_buffer(agent.config)
        env = Env("pendulum", rng=np.random.default_rng(1))
        carry, _ = agent.collect_step(env, buf, None, random_action=True)
        carry, _ = agent.collect_step(env, buf, carry, random_action=True)
        ep = buf.episodes[-1]
        h0 = agent._advance_state(ep.obs[0], np.zeros(1), np.zeros(8))
        np.testing.assert_allclose(ep.hidden[0], h0, atol=1e-12)
        h1 = agent._advance_state(ep.obs[1], ep.action[0], h0)
        np.testing.assert_allclose(ep.hidden[1], h1, atol=1e-12)
        assert np.any(ep.hidden[1] != ep.hidden[0])

    def test_record_chain_fields(self):
        agent = Agent(tiny_config())
        buf = make_buffer(agent.config)
        env = Env("pendulum", rng=np.random.default_rng(2))
        carry = None
        for _ in range(5):
            carry, _ = agent.collect_step(env, buf, carry)
        ep = buf.episodes[-1]
        np.testing.assert_array_equal(ep.prev_action[0], np.zeros(1))
        for i in range(1, ep.n):
            np.testing.assert_array_equal(ep.prev_action[i], ep.action[i - 1])
        assert agent.env_steps == 5

    def test_episode_end_returns_total_and_resets(self):
        agent = Agent(tiny_config())
        buf = make_buffer(agent.config)
        env = Env("pendulum", rng=np.random.default_rng(3))
        carry = None
        finished = None
        for _ in range(200):
            carry, finished = agent.collect_step(env, buf, carry, random_action=True)
        assert finished is not None
        ep = buf.episodes[0]
        assert finished == pytest.approx(float(ep.reward[: ep.n].sum()))
        assert buf.episodes[0].terminated
        assert carry.episode_return == 0.0 and carry.episode_len == 0

    def test_select_action_bounded(self):
        agent = Agent(tiny_config())
        s = np.random.default_rng(0).standard_normal(8)
        for det in (True, False):
            a = agent.select_action(s, deterministic=det)
            assert a.shape == (1,) and np.all(np.abs(a) <= 1.0)


class TestTrainStep:
    def test_report_finite_and_counted(self):
        agent = Agent(tiny_config())
        buf = filled_buffer(agent)
        rng = np.random.default_rng(5)
        rep = agent.train_step(buf, rng)
        for name in ("model_loss", "q1_loss", "q2_loss", "policy_loss", "temp_loss", "alpha", "beta", "intrinsic_reward_mean", "entropy_estimate"):
            assert np.isfinite(getattr(rep, name)), name
        assert agent.train_steps == 1
        assert rep.intrinsic_reward_mean >= 0.0

    def test_polyak_applied_after_q_update(self):
        agent = Agent(tiny_config())
        buf = filled_buffer(agent)
        batch = buf.sample_batch(4, np.random.default_rng(6))
        before = agent.q1_target.weights[0].data.copy()
        agent.update_from_batch(batch)
        after_online = agent.q1.weights[0].data
        expected = 0.995 * before + 0.005 * after_online
        np.testing.assert_allclose(agent.q1_target.weights[0].data, expected, atol=1e-15)

    def test_beta_follows_env_steps(self):
        agent = Agent(tiny_config(beta0=2.0, beta_horizon=80))
        buf = filled_buffer(agent)  # 40 collect steps
        rep = agent.train_step(buf, np.random.default_rng(0))
        assert rep.beta == pytest.approx(2.0 * (1 - 40 / 80))

    def test_divergence_named_per_loss(self):
        agent = Agent(tiny_config())
        buf = filled_buffer(agent)
        batch = buf.sample_batch(4, np.random.default_rng(1))
        agent.q1.weights[0].data = np.full_like(agent.q1.weights[0].data, np.nan)
        with pytest.raises(TrainingDiverged, match="q1_loss"):
            agent.update_from_batch(batch)

        agent2 = Agent(tiny_config())
        agent2.model.weights[0].data = np.full_like(agent2.model.weights[0].data, np.nan)
        with pytest.raises(TrainingDiverged, match="model_loss"):
            agent2.update_from_batch(batch)

    def test_deterministic_given_seeds(self):
        def rollout():
            agent = Agent(tiny_config())
            buf = make_buffer(agent.config)
            env = Env("pendulum", rng=np.random.default_rng(42))
            carry = None
            for i in range(40):
                carry, _ = agent.collect_step(env, buf, carry, random_action=(i < 10))
            rng = np.random.default_rng(9)
            reps = [agent.train_step(buf, rng) for _ in range(3)]
            return reps, agent.named_tensors()

        reps_a, tens_a = rollout()
        reps_b, tens_b = rollout()
        for ra, rb in zip(reps_a, reps_b):
            assert ra == rb
        for name in tens_a:
            np.testing.assert_array_equal(tens_a[name].data, tens_b[name].data)


class TestPassthroughEncoder:
    def test_state_is_observation(self):
        agent = Agent(tiny_config(encoder="passthrough"))
        obs = np.array([0.1, -0.2, 0.3])
        carry = agent.initial_carry(obs)
        np.testing.assert_array_equal(carry.hidden, obs)
        np.testing.assert_array_equal(agent._advance_state(obs, np.zeros(1), carry.hidden), obs)
        x = np.random.default_rng(0).standard_normal((5, 4))
        np.testing.assert_array_equal(agent.step_fn_raw(x, np.zeros((5, 3))), x[:, :3])

    def test_trains_without_recurrent_core(self):
        agent = Agent(tiny_config(encoder="passthrough"))
        assert agent.gru is None and agent.adam_rnn is None
        buf = filled_buffer(agent)
        rep = agent.train_step(buf, np.random.default_rng(2))
        assert np.isfinite(rep.q1_loss)


class TestCheckpointing:
    def test_round_trip_is_float32_exact(self, tmp_path):
        agent = Agent(tiny_config())
        buf = filled_buffer(agent)
        rng = np.random.default_rng(11)
        for _ in range(3):
            agent.train_step(buf, rng)
        agent.save(tmp_path / "ckpt", extra={"note": 1})

        loaded = Agent.load(tmp_path / "ckpt")
        orig = agent.named_tensors()
        for name, t in loaded.named_tensors().items():
            expected = orig[name].data.astype("<f4").astype(np.float64)
            np.testing.assert_array_equal(t.data, expected)
        assert loaded.env_steps == agent.env_steps
        assert loaded.train_steps == agent.train_steps
        assert Agent.manifest_of(tmp_path / "ckpt")["extra"] == {"note": 1}

    def test_actions_match_after_reload(self, tmp_path):
        agent = Agent(tiny_config())
        agent.save(tmp_path / "ckpt")
        loaded = Agent.load(tmp_path / "ckpt")
        s = np.random.default_rng(4).standard_normal(8)
        a = agent.select_action(s, deterministic=True)
        b = loaded.select_action(s, deterministic=True)
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_unknown_tensor_rejected(self, tmp_path):
        agent = Agent(tiny_config())
        agent.save(tmp_path / "ckpt")
        manifest_path = tmp_path / "ckpt" / "manifest.json"
        import json

        manifest = json.loads(manifest_path.read_text())
        manifest["tensors"]["bogus.w"] = {"file": "log_alpha.f32", "shape": []}
        manifest_path.write_text(json.dumps(manifest))
        with pytest.raises(KeyError, match="bogus"):
            Agent.load(tmp_path / "ckpt")
