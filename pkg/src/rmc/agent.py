"""Off-policy recurrent actor-critic with a jointly trained latent world model.

One training step, in order: sample a segment batch, re-infer hidden states
(warmup without gradients, train window on the tape), then model loss, twin-Q
loss, policy loss and temperature loss, each followed immediately by its Adam
update.  The routing scheme decides which head losses are allowed to
backpropagate into the recurrent core; blocked heads consume stop-gradient
copies of the states.  The world model's prediction error doubles as a
curiosity bonus with a linearly decaying coefficient.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nets
from .autodiff import Gradients, Tape, Tensor
from .optim import Adam
from .replay import ReplayBuffer, SegmentBatch, StepRecord

Array = np.ndarray


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns non-finite."""


_SCHEME_TABLE = {
    1: (True, True, False),
    2: (False, True, False),
    3: (True, False, False),
    4: (True, True, True),
    5: (True, False, True),
    6: (False, True, True),
}


@dataclass(frozen=True)
class RoutingScheme:
    """Which head losses may backpropagate into the recurrent core."""

    model_into_rnn: bool
    value_into_rnn: bool
    policy_into_rnn: bool

    def __post_init__(self) -> None:
        if not (self.model_into_rnn or self.value_into_rnn or self.policy_into_rnn):
            raise ValueError("routing scheme must let at least one head train the recurrent core")

    @classmethod
    def from_id(cls, scheme_id: int) -> "RoutingScheme":
        if scheme_id not in _SCHEME_TABLE:
            raise ValueError(f"unknown routing scheme {scheme_id}; expected 1..6")
        return cls(*_SCHEME_TABLE[scheme_id])


@dataclass
class AgentConfig:
    obs_dim: int
    action_dim: int
    hidden_dim: int = 48
    policy_trunk: tuple = (64, 64)
    q_trunk: tuple = (64, 64)
    model_trunk: tuple = (64, 64)
    encoder: str = "gru"            # "gru" or "passthrough" (memoryless baseline)
    scheme: int = 1
    gamma: float = 0.99
    polyak: float = 0.995
    lr: float = 3e-4
    alpha_init: float = 0.2
    target_entropy: float | None = None   # default -action_dim
    beta0: float = 1.0
    beta_horizon: int | None = None  # None = auto: runner uses half the run's total steps
    burn_in: int = 10
    train_len: int = 15
    batch_size: int = 16
    replay_capacity: int = 1_000_000
    replay_strategy: str = "burn-in"
    policy_q: str = "min"           # "min" or "first"
    model_loss: str = "l2norm"      # "l2norm" or "l1"
    seed: int = 0

    def __post_init__(self) -> None:
        self.policy_trunk = tuple(self.policy_trunk)
        self.q_trunk = tuple(self.q_trunk)
        self.model_trunk = tuple(self.model_trunk)
        RoutingScheme.from_id(self.scheme)
        if self.encoder not in ("gru", "passthrough"):
            raise ValueError(f"unknown encoder '{self.encoder}'")
        if self.policy_q not in ("min", "first"):
            raise ValueError(f"policy_q must be 'min' or 'first', got '{self.policy_q}'")
        if self.model_loss not in ("l2norm", "l1"):
            raise ValueError(f"model_loss must be 'l2norm' or 'l1', got '{self.model_loss}'")
        if self.beta0 < 0:
            raise ValueError("beta0 must be non-negative")
        if self.beta_horizon is not None and self.beta_horizon <= 0:
            raise ValueError("beta_horizon must be positive")
        if self.target_entropy is None:
            self.target_entropy = -float(self.action_dim)

    @property
    def state_dim(self) -> int:
        return self.hidden_dim if self.encoder == "gru" else self.obs_dim

    @property
    def effective_beta_horizon(self) -> int:
        """Standalone agents fall back to 100k when the horizon is auto."""
        return self.beta_horizon if self.beta_horizon is not None else 100_000


@dataclass
class LossReport:
    model_loss: float
    q1_loss: float
    q2_loss: float
    policy_loss: float
    temp_loss: float
    alpha: float
    beta: float
    intrinsic_reward_mean: float
    entropy_estimate: float


@dataclass
class CollectCarry:
    """Rolling collection state between environment steps."""

    obs: Array
    a_prev: Array
    hidden: Array
    episode_return: float
    episode_len: int


def beta_schedule(env_step: int, beta0: float, horizon: int) -> float:
    """Linearly decaying curiosity coefficient, zero from ``horizon`` onward."""
    return beta0 * max(0.0, 1.0 - env_step / horizon)


def total_reward(beta: float, intrinsic: Array, extrinsic: Array) -> Array:
    """Curiosity-shaped reward beta * r_int + r_ext."""
    return beta * intrinsic + extrinsic


def q_backup(reward: Array, done: Array, q_next_min: Array, logp_next: Array, alpha: float, gamma: float) -> Array:
    """Soft Bellman target r + gamma (1 - d) (min_i Q_i(s', a') - alpha log pi(a'|s'))."""
    return reward + gamma * (1.0 - done) * (q_next_min - alpha * logp_next)


def apply_routing(states: Tensor, scheme: RoutingScheme) -> dict[str, Tensor]:
    """Per-head state views; blocked heads get a stop-gradient copy."""
    return {
        "model": states if scheme.model_into_rnn else ad.stop_gradient(states),
        "value": states if scheme.value_into_rnn else ad.stop_gradient(states),
        "policy": states if scheme.policy_into_rnn else ad.stop_gradient(states),
    }


def polyak_update(target: list[Tensor], online: list[Tensor], rho: float) -> None:
    """target <- rho * target + (1 - rho) * online, elementwise."""
    for t, o in zip(target, online):
        t.data = rho * t.data + (1.0 - rho) * o.data


def _flatten_time(arr: Array) -> Array:
    """(B, T, ...) -> (T*B, ...) matching the time-major state stacking."""
    if arr.ndim == 2:
        return arr.T.reshape(-1)
    return arr.transpose(1, 0, 2).reshape(arr.shape[0] * arr.shape[1], arr.shape[2])


def _weighted_mean(values: Tensor, weights: Array, count: float) -> Tensor:
    return ad.mul(ad.sum_all(ad.mul(values, ad.tensor(weights))), 1.0 / count)


@dataclass
class InferredStates:
    """Train-window states on the tape plus raw successor states."""

    stacked: Tensor        # (T*B, D) time-major
    next_flat: Array       # (T*B, D) raw successors (stop-gradient by construction)
    mask_flat: Array       # (T*B,) float train-position validity
    model_mask_flat: Array # (T*B,) float successor validity
    count: float
    model_count: float


class Agent:
    """Holds parameters, optimizer state and rng streams for one training run."""

    def __init__(self, config: AgentConfig) -> None:
        self.config = config
        self.scheme = RoutingScheme.from_id(config.scheme)
        ss = np.random.SeedSequence([config.seed, 0x5EED])
        init_ss, act_ss, train_ss = ss.spawn(3)
        init_rng = np.random.default_rng(init_ss)
        self.act_rng = np.random.default_rng(act_ss)
        self.train_rng = np.random.default_rng(train_ss)

        d = config.state_dim
        a = config.action_dim
        self.gru = (
            nets.init_gru(init_rng, config.obs_dim + a, config.hidden_dim)
            if config.encoder == "gru"
            else None
        )
        self.policy = nets.init_policy(init_rng, d, a, config.policy_trunk)
        self.q1 = nets.init_mlp(init_rng, [d + a, *config.q_trunk, 1])
        self.q2 = nets.init_mlp(init_rng, [d + a, *config.q_trunk, 1])
        self.q1_target = _clone_mlp(self.q1)
        self.q2_target = _clone_mlp(self.q2)
        self.model = nets.init_mlp(init_rng, [d + a, *config.model_trunk, d], zero_final=True)
        self.log_alpha = ad.tensor(np.asarray(np.log(config.alpha_init)))

        lr = config.lr
        self.adam_model = Adam("model", self.model.tensors(), lr)
        self.adam_q = Adam("q", self.q1.tensors() + self.q2.tensors(), lr)
        self.adam_policy = Adam("policy", self.policy.tensors(), lr)
        self.adam_alpha = Adam("alpha", [self.log_alpha], lr)
        self.adam_rnn = Adam("rnn", self.gru.tensors(), lr) if self.gru is not None else None

        self.env_steps = 0
        self.train_steps = 0

    # -- acting ------------------------------------------------------------

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.data))

    def initial_carry(self, obs: Array) -> CollectCarry:
        a_prev = np.zeros(self.config.action_dim)
        if self.gru is None:
            hidden = obs.copy()
        else:
            hidden = np.zeros(self.config.hidden_dim)
        return CollectCarry(obs=obs, a_prev=a_prev, hidden=hidden, episode_return=0.0, episode_len=0)

    def _advance_state(self, obs: Array, a_prev: Array, hidden: Array) -> Array:
        """Raw recurrent update h_t = f(o_t, a_{t-1}, h_{t-1}); no recording."""
        if self.gru is None:
            return obs
        h = nets.gru_step(
            ad.tensor(obs[None, :]), ad.tensor(a_prev[None, :]), ad.tensor(hidden[None, :]), self.gru
        )
        return h.data[0]

    def step_fn_raw(self, x: Array, h: Array) -> Array:
        """Batched raw recurrent step on concatenated (obs, a_prev) inputs."""
        if self.gru is None:
            return x[:, : self.config.obs_dim]
        return ad.gru_cell(ad.tensor(x), ad.tensor(h), self.gru.w_in, self.gru.w_hid, self.gru.b).data

    def select_action(self, state: Array, deterministic: bool) -> Array:
        st = ad.tensor(state[None, :])
        if deterministic:
            return nets.policy_mean_action(st, self.policy).data[0]
        xi = self.act_rng.standard_normal((1, self.config.action_dim))
        action, _ = nets.policy_sample(st, self.policy, xi)
        return action.data[0]

    def collect_step(
        self,
        env,
        buffer: ReplayBuffer,
        carry: CollectCarry | None,
        random_action: bool = False,
    ) -> tuple[CollectCarry, float | None]:
        """Advance one environment step, append the record, handle resets.

        Returns the new carry and the finished episode's return when the step
        ended an episode.  The recurrent state updates even while actions are
        random so stored hidden states always reflect the full history.
        """
        if carry is None:
            carry = self.initial_carry(env.reset())
        hidden = self._advance_state(carry.obs, carry.a_prev, carry.hidden)
        if random_action:
            action = self.act_rng.uniform(-1.0, 1.0, self.config.action_dim)
        else:
            action = self.select_action(hidden, deterministic=False)
        next_obs, reward, done = env.step(action)
        buffer.append(
            StepRecord(
                obs=carry.obs,
                prev_action=carry.a_prev,
                action=action,
                reward=reward,
                done=done,
                hidden=hidden,
            )
        )
        self.env_steps += 1
        ep_return = carry.episode_return + reward
        if done:
            new_carry = self.initial_carry(env.reset())
            return new_carry, ep_return
        return (
            CollectCarry(
                obs=next_obs,
                a_prev=action,
                hidden=hidden,
                episode_return=ep_return,
                episode_len=carry.episode_len + 1,
            ),
            None,
        )

    def run_episode(self, env, deterministic: bool = True, rng: np.random.Generator | None = None) -> float:
        """Roll one full episode without touching the buffer; returns the return."""
        obs = env.reset()
        a_prev = np.zeros(self.config.action_dim)
        hidden = obs.copy() if self.gru is None else np.zeros(self.config.hidden_dim)
        total = 0.0
        while True:
            hidden = self._advance_state(obs, a_prev, hidden)
            if deterministic:
                action = self.select_action(hidden, deterministic=True)
            else:
                gen = rng if rng is not None else self.act_rng
                xi = gen.standard_normal((1, self.config.action_dim))
                action, _ = nets.policy_sample(ad.tensor(hidden[None, :]), self.policy, xi)
                action = action.data[0]
            obs, reward, done = env.step(action)
            total += reward
            a_prev = action
            if done:
                return total

    # -- state inference ----------------------------------------------------

    def infer_states(self, batch: SegmentBatch) -> InferredStates:
        """Re-unroll the train window on the active tape.

        Warmup records run without gradients; the lookahead successor state is
        computed raw since targets are stop-gradient.  Rows are stacked
        time-major: row t * B + b is position t of segment b.
        """
        bsz, t_len = batch.x_train.shape[:2]
        cfg = self.config
        if self.gru is None:
            do = cfg.obs_dim
            stacked_data = _flatten_time(batch.x_train[:, :, :do])
            stacked = ad.tensor(stacked_data)
            look_states = batch.x_look[:, :do]
            next_flat = np.concatenate([stacked_data[bsz:], look_states], axis=0)
        else:
            with ad.pause():
                h = batch.h_init
                for t in range(batch.pre_x.shape[1]):
                    h_new = self.step_fn_raw(batch.pre_x[:, t], h)
                    h = np.where(batch.pre_mask[:, t][:, None], h_new, h)
            states: list[Tensor] = []
            h_t = ad.tensor(h)
            start = 0
            if batch.first_state_given:
                h_t = ad.tensor(batch.h_init)
                states.append(h_t)
                start = 1
            for t in range(start, t_len):
                h_t = ad.gru_cell(
                    ad.tensor(batch.x_train[:, t]), h_t, self.gru.w_in, self.gru.w_hid, self.gru.b
                )
                states.append(h_t)
            stacked = ad.stack_rows(states)
            with ad.pause():
                look = self.step_fn_raw(batch.x_look, states[-1].data)
            next_flat = np.concatenate([stacked.data[bsz:], look], axis=0)

        mask_flat = _flatten_time(batch.t_mask.astype(np.float64))
        model_mask_flat = _flatten_time(batch.model_mask.astype(np.float64))
        return InferredStates(
            stacked=stacked,
            next_flat=next_flat,
            mask_flat=mask_flat,
            model_mask_flat=model_mask_flat,
            count=max(float(mask_flat.sum()), 1.0),
            model_count=max(float(model_mask_flat.sum()), 1.0),
        )

    # -- losses --------------------------------------------------------------

    def _model_loss(self, s_view: Tensor, a_flat: Array, inf: InferredStates) -> tuple[Tensor, Array]:
        pred = nets.model_predict(s_view, ad.tensor(a_flat), self.model)
        diff = ad.sub(pred, ad.tensor(inf.next_flat))
        if self.config.model_loss == "l2norm":
            per = ad.norm_last(diff)
        else:
            per = ad.row_sum(ad.absolute(diff))
        loss = _weighted_mean(per, inf.model_mask_flat, inf.model_count)
        intrinsic = np.linalg.norm(pred.data - inf.next_flat, axis=1)
        return loss, intrinsic

    def _q_losses(self, s_view: Tensor, a_flat: Array, y: Array, inf: InferredStates) -> tuple[Tensor, Tensor]:
        yt = ad.tensor(y)
        q1 = nets.q_value(s_view, ad.tensor(a_flat), self.q1)
        q2 = nets.q_value(s_view, ad.tensor(a_flat), self.q2)
        l1 = _weighted_mean(ad.square(ad.sub(q1, yt)), inf.mask_flat, inf.count)
        l2 = _weighted_mean(ad.square(ad.sub(q2, yt)), inf.mask_flat, inf.count)
        return l1, l2

    def _policy_loss(self, s_view: Tensor, inf: InferredStates) -> tuple[Tensor, Array]:
        n = s_view.shape[0]
        xi = self.train_rng.standard_normal((n, self.config.action_dim))
        action, logp = nets.policy_sample(s_view, self.policy, xi)
        qp1 = nets.q_value(s_view, action, self.q1)
        if self.config.policy_q == "min":
            qp = ad.minimum(qp1, nets.q_value(s_view, action, self.q2))
        else:
            qp = qp1
        term = ad.sub(ad.mul(logp, self.alpha), qp)
        return _weighted_mean(term, inf.mask_flat, inf.count), logp.data

    def _temperature_loss(self, logp_data: Array, inf: InferredStates) -> Tensor:
        alpha_t = ad.exp(self.log_alpha)
        coeff = -(logp_data + self.config.target_entropy)
        return _weighted_mean(ad.mul(alpha_t, ad.tensor(coeff)), inf.mask_flat, inf.count)

    def _targets(self, inf: InferredStates) -> tuple[Array, Array]:
        """Fresh next-action bootstrap values; fully stop-gradient."""
        with ad.pause():
            n = inf.next_flat.shape[0]
            xi = self.train_rng.standard_normal((n, self.config.action_dim))
            next_t = ad.tensor(inf.next_flat)
            a_next, logp_next = nets.policy_sample(next_t, self.policy, xi)
            qn1 = nets.q_value(next_t, a_next, self.q1_target).data
            qn2 = nets.q_value(next_t, a_next, self.q2_target).data
        return np.minimum(qn1, qn2), logp_next.data

    # -- the training step ----------------------------------------------------

    def train_step(self, buffer: ReplayBuffer, replay_rng: np.random.Generator) -> LossReport:
        batch = buffer.sample_batch(self.config.batch_size, replay_rng)
        return self.update_from_batch(batch)

    def update_from_batch(self, batch: SegmentBatch) -> LossReport:
        cfg = self.config
        scheme = self.scheme
        beta = beta_schedule(self.env_steps, cfg.beta0, cfg.effective_beta_horizon)
        a_flat = _flatten_time(batch.a_train)
        reward_flat = _flatten_time(batch.reward)
        done_flat = _flatten_time(batch.done.astype(np.float64))

        with Tape():
            inf = self.infer_states(batch)
            views = apply_routing(inf.stacked, scheme)

            model_loss, intrinsic = self._model_loss(views["model"], a_flat, inf)
            self._check_finite(model_loss, "model_loss")
            g = ad.backward(model_loss)
            self.adam_model.step(g)
            if scheme.model_into_rnn and self.adam_rnn is not None:
                self.adam_rnn.step(g)

            q_next_min, logp_next = self._targets(inf)
            shaped = total_reward(beta, intrinsic, reward_flat)
            y = q_backup(shaped, done_flat, q_next_min, logp_next, self.alpha, cfg.gamma)
            q1_loss, q2_loss = self._q_losses(views["value"], a_flat, y, inf)
            self._check_finite(q1_loss, "q1_loss")
            self._check_finite(q2_loss, "q2_loss")
            g = ad.backward(ad.add(q1_loss, q2_loss))
            self.adam_q.step(g)
            if scheme.value_into_rnn and self.adam_rnn is not None:
                self.adam_rnn.step(g)

            policy_loss, logp_data = self._policy_loss(views["policy"], inf)
            self._check_finite(policy_loss, "policy_loss")
            g = ad.backward(policy_loss)
            self.adam_policy.step(g)
            if scheme.policy_into_rnn and self.adam_rnn is not None:
                self.adam_rnn.step(g)

            temp_loss = self._temperature_loss(logp_data, inf)
            self._check_finite(temp_loss, "temp_loss")
            g = ad.backward(temp_loss)
            self.adam_alpha.step(g)

        polyak_update(self.q1_target.tensors(), self.q1.tensors(), cfg.polyak)
        polyak_update(self.q2_target.tensors(), self.q2.tensors(), cfg.polyak)
        self.train_steps += 1

        w = inf.mask_flat
        wm = inf.model_mask_flat
        return LossReport(
            model_loss=model_loss.item(),
            q1_loss=q1_loss.item(),
            q2_loss=q2_loss.item(),
            policy_loss=policy_loss.item(),
            temp_loss=temp_loss.item(),
            alpha=self.alpha,
            beta=beta,
            intrinsic_reward_mean=float((intrinsic * wm).sum() / inf.model_count),
            entropy_estimate=float(-(logp_data * w).sum() / inf.count),
        )

    def head_gradients(self, batch: SegmentBatch) -> dict[str, Gradients]:
        """Per-head gradients through the shared state inference; no updates.

        Diagnostic used to verify the routing barriers: a blocked head must
        produce exactly zero gradient on every recurrent-core parameter.
        """
        cfg = self.config
        a_flat = _flatten_time(batch.a_train)
        reward_flat = _flatten_time(batch.reward)
        done_flat = _flatten_time(batch.done.astype(np.float64))
        with Tape():
            inf = self.infer_states(batch)
            views = apply_routing(inf.stacked, self.scheme)
            model_loss, intrinsic = self._model_loss(views["model"], a_flat, inf)
            q_next_min, logp_next = self._targets(inf)
            shaped = total_reward(beta_schedule(self.env_steps, cfg.beta0, cfg.effective_beta_horizon), intrinsic, reward_flat)
            y = q_backup(shaped, done_flat, q_next_min, logp_next, self.alpha, cfg.gamma)
            q1_loss, q2_loss = self._q_losses(views["value"], a_flat, y, inf)
            policy_loss, _ = self._policy_loss(views["policy"], inf)
            return {
                "model": ad.backward(model_loss),
                "value": ad.backward(ad.add(q1_loss, q2_loss)),
                "policy": ad.backward(policy_loss),
            }

    @staticmethod
    def _check_finite(loss: Tensor, name: str) -> None:
        if not np.isfinite(loss.data):
            raise TrainingDiverged(f"{name} is non-finite")

    # -- checkpointing ---------------------------------------------------------

    def named_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.gru is not None:
            out.update({"rnn.w_in": self.gru.w_in, "rnn.w_hid": self.gru.w_hid, "rnn.b": self.gru.b})
        for i, (w, b) in enumerate(zip(self.policy.trunk.weights, self.policy.trunk.biases)):
            out[f"policy.trunk.w{i}"] = w
            out[f"policy.trunk.b{i}"] = b
        out["policy.w_mu"] = self.policy.w_mu
        out["policy.b_mu"] = self.policy.b_mu
        out["policy.w_logstd"] = self.policy.w_logstd
        out["policy.b_logstd"] = self.policy.b_logstd
        for prefix, mlp in (
            ("q1", self.q1),
            ("q2", self.q2),
            ("q1_target", self.q1_target),
            ("q2_target", self.q2_target),
            ("model", self.model),
        ):
            for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
                out[f"{prefix}.w{i}"] = w
                out[f"{prefix}.b{i}"] = b
        out["log_alpha"] = self.log_alpha
        return out

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        """Checkpoint directory: manifest.json plus one little-endian float32
        file per tensor.  Optimizer state is not part of a checkpoint."""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        tensors = self.named_tensors()
        manifest = {
            "format_version": 1,
            "config": asdict(self.config),
            "env_steps": self.env_steps,
            "train_steps": self.train_steps,
            "tensors": {},
            "extra": extra or {},
        }
        for name, t in tensors.items():
            fname = f"{name}.f32"
            np.ascontiguousarray(t.data, dtype="<f4").tofile(path / fname)
            manifest["tensors"][name] = {"file": fname, "shape": list(t.data.shape)}
        (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "Agent":
        path = Path(path)
        manifest = json.loads((path / "manifest.json").read_text())
        cfg = AgentConfig(**manifest["config"])
        agent = cls(cfg)
        tensors = agent.named_tensors()
        for name, meta in manifest["tensors"].items():
            if name not in tensors:
                raise KeyError(f"checkpoint tensor '{name}' has no matching parameter")
            data = np.fromfile(path / meta["file"], dtype="<f4").astype(np.float64)
            tensors[name].data = data.reshape(meta["shape"])
        agent.env_steps = manifest["env_steps"]
        agent.train_steps = manifest.get("train_steps", 0)
        return agent

    @staticmethod
    def manifest_of(path: str | Path) -> dict:
        return json.loads((Path(path) / "manifest.json").read_text())


def _clone_mlp(src: nets.MlpParams) -> nets.MlpParams:
    return nets.MlpParams(
        weights=[ad.tensor(w.data.copy()) for w in src.weights],
        biases=[ad.tensor(b.data.copy()) for b in src.biases],
    )


def make_buffer(cfg: AgentConfig) -> ReplayBuffer:
    """Replay buffer matching the agent's dimensions and segment config."""
    return ReplayBuffer(
        obs_dim=cfg.obs_dim,
        action_dim=cfg.action_dim,
        hidden_dim=cfg.state_dim,
        capacity=cfg.replay_capacity,
        burn_in=cfg.burn_in,
        train_len=cfg.train_len,
        strategy=cfg.replay_strategy,
    )
