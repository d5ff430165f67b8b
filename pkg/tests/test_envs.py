"""Environment dynamics against hand-stepped values, plus invariant properties."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rmc.envs import (
    GOAL_RADIUS,
    PENDULUM_HORIZON,
    POINTMASS_HORIZON,
    SPARSE_GOAL_REWARD,
    SPARSE_SEPARATION_RANGE,
    Env,
    PendulumState,
    PointmassState,
    flicker_apply,
    normalized_score,
    pendulum_obs,
    pendulum_reset,
    pendulum_step,
    pointmass_obs,
    pointmass_reset,
    pointmass_step,
    wrap_angle,
)


class TestWrapAngle:
    def test_fixed_points(self):
        assert wrap_angle(0.0) == 0.0
        assert wrap_angle(np.pi) == pytest.approx(-np.pi)
        assert wrap_angle(-np.pi) == pytest.approx(-np.pi)
        assert wrap_angle(2 * np.pi) == pytest.approx(0.0, abs=1e-12)
        assert wrap_angle(3 * np.pi / 2) == pytest.approx(-np.pi / 2)

    @given(st.floats(-1000.0, 1000.0))
    def test_range_and_periodicity(self, theta):
        w = wrap_angle(theta)
        assert -np.pi <= w <= np.pi
        assert wrap_angle(theta + 2 * np.pi) == pytest.approx(w, abs=1e-9)


class TestPendulum:
    def test_hanging_still_no_torque(self):
        # theta = pi (hanging down), zero velocity, zero torque: nothing moves,
        # cost is exactly pi^2 from the angle term
        state = PendulumState(theta=np.pi, theta_dot=0.0, t=0)
        new, obs, reward, done = pendulum_step(state, np.array([0.0]))
        assert reward == pytest.approx(-np.pi ** 2)
        assert new.theta == pytest.approx(np.pi)
        assert new.theta_dot == pytest.approx(0.0, abs=1e-15)
        assert not done

    def test_upright_full_torque_hand_value(self):
        # theta = 0: gravity term vanishes, velocity = 3u dt = 0.3,
        # angle advances by 0.015, cost = 0.1 * 0.3^2 + 0.001 * 2^2
        state = PendulumState(theta=0.0, theta_dot=0.0, t=0)
        new, obs, reward, done = pendulum_step(state, np.array([1.0]))
        assert new.theta_dot == pytest.approx(0.3)
        assert new.theta == pytest.approx(0.015)
        assert reward == pytest.approx(-(0.1 * 0.09 + 0.001 * 4.0))

    def test_action_clipped(self):
        state = PendulumState(theta=0.0, theta_dot=0.0, t=0)
        big, _, r_big, _ = pendulum_step(state, np.array([10.0]))
        one, _, r_one, _ = pendulum_step(state, np.array([1.0]))
        assert big.theta_dot == one.theta_dot
        assert r_big == r_one

    def test_velocity_clipped_to_eight(self):
        state = PendulumState(theta=np.pi / 2, theta_dot=7.9, t=0)
        for _ in range(50):
            state, _, _, _ = pendulum_step(state, np.array([1.0]))
            assert abs(state.theta_dot) <= 8.0

    def test_horizon_termination(self):
        state = PendulumState(theta=1.0, theta_dot=0.0, t=PENDULUM_HORIZON - 1)
        _, _, _, done = pendulum_step(state, np.array([0.0]))
        assert done

    def test_obs_structure(self):
        state = PendulumState(theta=0.7, theta_dot=-3.0, t=5)
        obs = pendulum_obs(state)
        np.testing.assert_allclose(obs, [np.cos(0.7), np.sin(0.7), -3.0 / 8.0])

    def test_reset_ranges(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            s = pendulum_reset(rng)
            assert -np.pi <= s.theta <= np.pi
            assert -1.0 <= s.theta_dot <= 1.0
            assert s.t == 0

    @given(
        st.floats(-np.pi, np.pi),
        st.floats(-8.0, 8.0),
        st.floats(-1.0, 1.0),
    )
    @settings(max_examples=200)
    def test_reward_bounded(self, theta, theta_dot, action):
        state = PendulumState(theta=theta, theta_dot=theta_dot, t=0)
        _, _, reward, _ = pendulum_step(state, np.array([action]))
        # worst case: pi^2 + 0.1 * 64 + 0.001 * 4
        assert -(np.pi ** 2 + 6.4 + 0.004) <= reward <= 0.0


class TestPointmass:
    def test_dense_hand_value(self):
        state = PointmassState(pos=np.zeros(2), vel=np.zeros(2), goal=np.array([0.6, 0.0]), t=0)
        new, obs, reward, done = pointmass_step(state, np.array([1.0, 0.0]))
        np.testing.assert_allclose(new.vel, [0.1, 0.0])
        np.testing.assert_allclose(new.pos, [0.005, 0.0])
        assert reward == pytest.approx(-0.595 - 0.01)
        assert not done

    def test_sparse_reward_at_goal(self):
        state = PointmassState(pos=np.array([0.595, 0.0]), vel=np.zeros(2), goal=np.array([0.6, 0.0]), t=0)
        new, _, reward, done = pointmass_step(state, np.zeros(2), sparse=True)
        assert reward == SPARSE_GOAL_REWARD
        assert done

    def test_sparse_reward_zero_away_from_goal(self):
        state = PointmassState(pos=np.zeros(2), vel=np.zeros(2), goal=np.array([0.6, 0.0]), t=0)
        _, _, reward, done = pointmass_step(state, np.array([1.0, 0.0]), sparse=True)
        assert reward == 0.0
        assert not done

    def test_position_clipped_to_box(self):
        state = PointmassState(pos=np.array([0.999, 0.0]), vel=np.array([1.0, 0.0]), goal=np.array([-0.5, 0.0]), t=0)
        for _ in range(10):
            state, _, _, _ = pointmass_step(state, np.array([1.0, 0.0]))
        assert state.pos[0] == 1.0

    def test_horizon_termination(self):
        state = PointmassState(pos=np.zeros(2), vel=np.zeros(2), goal=np.array([0.9, 0.9]), t=POINTMASS_HORIZON - 1)
        _, _, _, done = pointmass_step(state, np.zeros(2))
        assert done

    def test_obs_structure(self):
        state = PointmassState(pos=np.array([0.1, 0.2]), vel=np.array([-0.3, 0.4]), goal=np.array([0.5, -0.6]), t=0)
        np.testing.assert_allclose(pointmass_obs(state), [0.1, 0.2, -0.3, 0.4, 0.4, -0.8])

    def test_reset_separation(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            s = pointmass_reset(rng)
            assert np.linalg.norm(s.goal - s.pos) >= 0.3
            np.testing.assert_array_equal(s.vel, np.zeros(2))

    def test_sparse_env_separation_spans_range(self):
        lo, hi = SPARSE_SEPARATION_RANGE
        hard = Env("pointmass-sparse", rng=np.random.default_rng(4))
        gaps = []
        for _ in range(300):
            hard.reset()
            gaps.append(np.linalg.norm(hard._state.goal - hard._state.pos))
            assert np.all(np.abs(hard._state.goal) <= 0.9)
        gaps = np.array(gaps)
        assert gaps.min() >= lo - 1e-12 and gaps.max() <= hi + 1e-12
        # graded difficulty: both halves of the range actually occur
        assert (gaps < (lo + hi) / 2).mean() > 0.2
        assert (gaps > (lo + hi) / 2).mean() > 0.2

    @given(st.floats(-1.0, 1.0), st.floats(-1.0, 1.0))
    @settings(max_examples=100)
    def test_velocity_damping_contracts(self, vx, vy):
        state = PointmassState(pos=np.zeros(2), vel=np.array([vx, vy]), goal=np.array([0.9, 0.9]), t=0)
        new, _, _, _ = pointmass_step(state, np.zeros(2))
        assert np.all(np.abs(new.vel) <= np.abs(state.vel) + 1e-12)


class TestFlicker:
    def test_p_zero_never_obscures(self):
        rng = np.random.default_rng(2)
        obs = np.array([1.0, 2.0])
        for _ in range(100):
            out, obscured = flicker_apply(obs, 0.0, rng)
            assert not obscured
            np.testing.assert_array_equal(out, obs)

    def test_p_one_always_obscures(self):
        rng = np.random.default_rng(3)
        obs = np.array([1.0, 2.0])
        for _ in range(100):
            out, obscured = flicker_apply(obs, 1.0, rng)
            assert obscured
            np.testing.assert_array_equal(out, np.zeros(2))

    def test_monte_carlo_rate(self):
        rng = np.random.default_rng(4)
        hits = sum(flicker_apply(np.ones(3), 0.5, rng)[1] for _ in range(10_000))
        assert 0.48 <= hits / 10_000 <= 0.52

    def test_does_not_mutate_input(self):
        rng = np.random.default_rng(5)
        obs = np.array([1.0, 2.0])
        flicker_apply(obs, 1.0, rng)
        np.testing.assert_array_equal(obs, [1.0, 2.0])


class TestEnvWrapper:
    def test_episode_lengths(self):
        env = Env("pendulum", rng=np.random.default_rng(6))
        env.reset()
        steps = 0
        done = False
        while not done:
            _, _, done = env.step(np.array([0.0]))
            steps += 1
        assert steps == PENDULUM_HORIZON

    def test_unknown_name_rejected(self):
        with pytest.raises(ValueError, match="unknown environment"):
            Env("cartpole")

    def test_bad_flicker_probability_rejected(self):
        with pytest.raises(ValueError, match="flicker"):
            Env("pendulum", flicker_p=1.5)

    def test_step_before_reset_rejected(self):
        env = Env("pendulum")
        with pytest.raises(RuntimeError):
            env.step(np.array([0.0]))

    def test_flickered_obs_is_all_zero_when_flagged(self):
        env = Env("pendulum", flicker_p=0.7, rng=np.random.default_rng(7))
        env.reset()
        seen_obscured = 0
        for _ in range(100):
            obs, _, done = env.step(np.array([0.0]))
            if env.last_obscured:
                seen_obscured += 1
                np.testing.assert_array_equal(obs, np.zeros(3))
            if done:
                env.reset()
        assert seen_obscured > 30

    def test_sparse_env_terminates_at_goal(self):
        env = Env("pointmass-sparse", rng=np.random.default_rng(8))
        env.reset()
        # drive straight at the goal using the observation's goal-delta slice
        for _ in range(POINTMASS_HORIZON):
            delta = env._state.goal - env._state.pos
            a = np.clip(delta * 50.0, -1.0, 1.0)
            _, reward, done = env.step(a)
            if done:
                assert reward == SPARSE_GOAL_REWARD
                return
        raise AssertionError("never reached the goal")

    def test_dims(self):
        assert (Env("pendulum").obs_dim, Env("pendulum").action_dim) == (3, 1)
        assert (Env("pointmass").obs_dim, Env("pointmass").action_dim) == (6, 2)
        assert (Env("pointmass-sparse").obs_dim, Env("pointmass-sparse").action_dim) == (6, 2)


class TestNormalizedScore:
    def test_anchors(self):
        assert normalized_score(-150.0, -1200.0, -150.0) == pytest.approx(1.0)
        assert normalized_score(-1200.0, -1200.0, -150.0) == pytest.approx(0.0)
        assert normalized_score(-675.0, -1200.0, -150.0) == pytest.approx(0.5)

    def test_degenerate_gap_rejected(self):
        with pytest.raises(ValueError):
            normalized_score(1.0, 5.0, 5.0)
