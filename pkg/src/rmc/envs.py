"""Small fully specified control environments and the flicker observation wrapper.

Both tasks use float64 throughout, actions in [-1, 1]^d, and bounded episode
horizons.  The functional step routines carry the full environment state so
they can be unit-tested without an environment object; ``Env`` wraps them with
rng handling and horizon bookkeeping for the training loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray

PENDULUM_HORIZON = 200
POINTMASS_HORIZON = 300
GOAL_RADIUS = 0.05
# Sparse variant: the one-shot goal payoff has to dominate the value of just
# wandering forever (including any shaped bonus a learner might add).  The
# start/goal gap is drawn from a graded range rather than a hard floor: the
# near end keeps payoff rows flowing into the buffer from the first episodes,
# the far end is out of reach for undirected noise, so progress on the
# success fraction tracks how far the learned homing range extends.
SPARSE_GOAL_REWARD = 10.0
SPARSE_SEPARATION_RANGE = (0.1, 0.8)
DENSE_MIN_SEPARATION = 0.3


def wrap_angle(theta: float) -> float:
    """Map an angle to [-pi, pi]."""
    return float((theta + np.pi) % (2.0 * np.pi) - np.pi)


@dataclass
class PendulumState:
    theta: float
    theta_dot: float
    t: int


def pendulum_obs(state: PendulumState) -> Array:
    return np.array([np.cos(state.theta), np.sin(state.theta), state.theta_dot / 8.0])


def pendulum_reset(rng: np.random.Generator) -> PendulumState:
    return PendulumState(
        theta=float(rng.uniform(-np.pi, np.pi)),
        theta_dot=float(rng.uniform(-1.0, 1.0)),
        t=0,
    )


def pendulum_step(state: PendulumState, action: Array) -> tuple[PendulumState, Array, float, bool]:
    """Underactuated swing-up dynamics.

    Torque is 2 * action with action clipped to [-1, 1]; dt = 0.05, g = 10,
    m = l = 1.  The angle cost uses the pre-step angle, the velocity cost the
    post-update velocity.
    """
    g, m, l, dt = 10.0, 1.0, 1.0, 0.05
    u = 2.0 * float(np.clip(np.asarray(action).reshape(-1)[0], -1.0, 1.0))
    theta, theta_dot = state.theta, state.theta_dot
    theta_dot_new = theta_dot + (-3.0 * g / (2.0 * l) * np.sin(theta + np.pi) + 3.0 * u / (m * l * l)) * dt
    theta_dot_new = float(np.clip(theta_dot_new, -8.0, 8.0))
    theta_new = theta + theta_dot_new * dt
    reward = -(wrap_angle(theta) ** 2 + 0.1 * theta_dot_new ** 2 + 0.001 * u * u)
    new = PendulumState(theta=theta_new, theta_dot=theta_dot_new, t=state.t + 1)
    done = new.t >= PENDULUM_HORIZON
    return new, pendulum_obs(new), float(reward), done


@dataclass
class PointmassState:
    pos: Array
    vel: Array
    goal: Array
    t: int


def pointmass_obs(state: PointmassState) -> Array:
    return np.concatenate([state.pos, state.vel, state.goal - state.pos])


def pointmass_reset(
    rng: np.random.Generator,
    min_separation: float = DENSE_MIN_SEPARATION,
    separation_range: tuple[float, float] | None = None,
) -> PointmassState:
    """Uniform start with either rejection-sampled or annulus-drawn goal.

    With ``separation_range`` the goal sits at an exact separation drawn
    uniformly from the range (direction uniform, redrawn while off-arena),
    which pins the episode difficulty distribution independently of arena
    geometry.
    """
    while True:
        pos = rng.uniform(-0.9, 0.9, size=2)
        if separation_range is None:
            goal = rng.uniform(-0.9, 0.9, size=2)
            if np.linalg.norm(goal - pos) >= min_separation:
                return PointmassState(pos=pos, vel=np.zeros(2), goal=goal, t=0)
            continue
        sep = rng.uniform(*separation_range)
        theta = rng.uniform(0.0, 2.0 * np.pi)
        goal = pos + sep * np.array([np.cos(theta), np.sin(theta)])
        if np.all(np.abs(goal) <= 0.9):
            return PointmassState(pos=pos, vel=np.zeros(2), goal=goal, t=0)


def pointmass_step(
    state: PointmassState, action: Array, sparse: bool = False
) -> tuple[PointmassState, Array, float, bool]:
    """Velocity-damped point mass on [-1, 1]^2.

    vel' = 0.9 vel + 0.1 a with each component clipped to [-1, 1];
    pos' = clip(pos + 0.05 vel').  Dense reward is -dist(goal, pos') minus a
    small action penalty; the sparse variant pays SPARSE_GOAL_REWARD exactly
    when the goal is reached and 0 otherwise.
    """
    a = np.clip(np.asarray(action, dtype=np.float64).reshape(2), -1.0, 1.0)
    vel = np.clip(0.9 * state.vel + 0.1 * a, -1.0, 1.0)
    pos = np.clip(state.pos + 0.05 * vel, -1.0, 1.0)
    dist = float(np.linalg.norm(state.goal - pos))
    reached = dist < GOAL_RADIUS
    if sparse:
        reward = SPARSE_GOAL_REWARD if reached else 0.0
    else:
        reward = -dist - 0.01 * float(np.sum(a * a))
    new = PointmassState(pos=pos, vel=vel, goal=state.goal, t=state.t + 1)
    done = reached or new.t >= POINTMASS_HORIZON
    return new, pointmass_obs(new), float(reward), done


def flicker_apply(obs: Array, p: float, rng: np.random.Generator) -> tuple[Array, bool]:
    """Zero the whole observation with probability p; the flag is diagnostic only."""
    if p > 0.0 and rng.random() < p:
        return np.zeros_like(obs), True
    return obs, False


class Env:
    """Stateful wrapper over the functional cores with optional flicker.

    The flicker draw happens after the physics step and touches only the
    emitted observation, never the reward or the underlying state.
    """

    def __init__(self, name: str, flicker_p: float = 0.0, rng: np.random.Generator | None = None) -> None:
        if name not in ("pendulum", "pointmass", "pointmass-sparse"):
            raise ValueError(f"unknown environment '{name}'")
        if not 0.0 <= flicker_p <= 1.0:
            raise ValueError(f"flicker probability must be in [0, 1], got {flicker_p}")
        self.name = name
        self.flicker_p = float(flicker_p)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._state = None
        self.last_obscured = False

    @property
    def obs_dim(self) -> int:
        return 3 if self.name == "pendulum" else 6

    @property
    def action_dim(self) -> int:
        return 1 if self.name == "pendulum" else 2

    @property
    def horizon(self) -> int:
        return PENDULUM_HORIZON if self.name == "pendulum" else POINTMASS_HORIZON

    def reset(self) -> Array:
        if self.name == "pendulum":
            self._state = pendulum_reset(self.rng)
            obs = pendulum_obs(self._state)
        else:
            if self.name == "pointmass-sparse":
                self._state = pointmass_reset(self.rng, separation_range=SPARSE_SEPARATION_RANGE)
            else:
                self._state = pointmass_reset(self.rng, min_separation=DENSE_MIN_SEPARATION)
            obs = pointmass_obs(self._state)
        obs, self.last_obscured = flicker_apply(obs, self.flicker_p, self.rng)
        return obs

    def step(self, action: Array) -> tuple[Array, float, bool]:
        if self._state is None:
            raise RuntimeError("step before reset")
        if self.name == "pendulum":
            self._state, obs, reward, done = pendulum_step(self._state, action)
        else:
            self._state, obs, reward, done = pointmass_step(
                self._state, action, sparse=self.name == "pointmass-sparse"
            )
        obs, self.last_obscured = flicker_apply(obs, self.flicker_p, self.rng)
        return obs, reward, done


def normalized_score(mean_return: float, random_return: float, reference_return: float) -> float:
    """(mean - random) / (reference - random); errors on a degenerate gap."""
    gap = reference_return - random_return
    if abs(gap) < 1e-9:
        raise ValueError("normalized_score: reference and random returns coincide")
    return (mean_return - random_return) / gap
