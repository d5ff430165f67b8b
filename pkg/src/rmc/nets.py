"""Network heads: GRU state encoder, squashed-Gaussian policy, twin Q, world model.

All parameters are float64 tensors; the forward functions work both on and off
a recording tape.  Batch dimension is always explicit (2-D inputs).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOGSTD_MIN = -20.0
LOGSTD_MAX = 2.0
_LOG_SQRT_2PI = 0.5 * float(np.log(2.0 * np.pi))


@dataclass
class GruParams:
    """Fused GRU weights; gate columns ordered update|reset|candidate."""

    w_in: Tensor   # (in_dim, 3*hidden)
    w_hid: Tensor  # (hidden, 3*hidden)
    b: Tensor      # (3*hidden,)

    @property
    def hidden_dim(self) -> int:
        return self.w_hid.shape[0]

    def tensors(self) -> list[Tensor]:
        return [self.w_in, self.w_hid, self.b]


@dataclass
class MlpParams:
    """Feed-forward stack, relu on every layer except the last."""

    weights: list[Tensor]
    biases: list[Tensor]

    def tensors(self) -> list[Tensor]:
        out: list[Tensor] = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out


@dataclass
class PolicyParams:
    trunk: MlpParams
    w_mu: Tensor
    b_mu: Tensor
    w_logstd: Tensor
    b_logstd: Tensor

    def tensors(self) -> list[Tensor]:
        return self.trunk.tensors() + [self.w_mu, self.b_mu, self.w_logstd, self.b_logstd]


def init_gru(rng: np.random.Generator, in_dim: int, hidden: int) -> GruParams:
    k = 1.0 / np.sqrt(hidden)
    return GruParams(
        w_in=ad.tensor(rng.uniform(-k, k, size=(in_dim, 3 * hidden))),
        w_hid=ad.tensor(rng.uniform(-k, k, size=(hidden, 3 * hidden))),
        b=ad.tensor(np.zeros(3 * hidden)),
    )


def init_mlp(rng: np.random.Generator, sizes: list[int], zero_final: bool = False) -> MlpParams:
    """He-uniform hidden layers, Glorot-uniform final layer (or zeros)."""
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        if last and zero_final:
            w = np.zeros((fan_in, fan_out))
        elif last:
            k = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-k, k, size=(fan_in, fan_out))
        else:
            k = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-k, k, size=(fan_in, fan_out))
        weights.append(ad.tensor(w))
        biases.append(ad.tensor(np.zeros(fan_out)))
    return MlpParams(weights, biases)


def init_policy(rng: np.random.Generator, state_dim: int, action_dim: int, trunk: tuple) -> PolicyParams:
    sizes = [state_dim, *trunk]
    trunk_params = init_mlp(rng, sizes)
    width = sizes[-1]
    k = np.sqrt(6.0 / (width + action_dim))
    return PolicyParams(
        trunk=trunk_params,
        w_mu=ad.tensor(rng.uniform(-k, k, size=(width, action_dim))),
        b_mu=ad.tensor(np.zeros(action_dim)),
        w_logstd=ad.tensor(rng.uniform(-k, k, size=(width, action_dim))),
        b_logstd=ad.tensor(np.zeros(action_dim)),
    )


def mlp_apply(x: Tensor, p: MlpParams) -> Tensor:
    return ad.mlp_chain(x, p.weights, p.biases, final_relu=False)


def gru_step(obs: Tensor, a_prev: Tensor, h: Tensor, p: GruParams) -> Tensor:
    """Advance the recurrent state one step on (o_t, a_{t-1})."""
    x = ad.concat_last([obs, a_prev])
    return ad.gru_cell(x, h, p.w_in, p.w_hid, p.b)


def policy_heads(state: Tensor, p: PolicyParams) -> tuple[Tensor, Tensor]:
    t = mlp_apply_trunk(state, p.trunk)
    mu = ad.affine(t, p.w_mu, p.b_mu)
    logstd = ad.clip(ad.affine(t, p.w_logstd, p.b_logstd), LOGSTD_MIN, LOGSTD_MAX)
    return mu, logstd


def mlp_apply_trunk(x: Tensor, p: MlpParams) -> Tensor:
    return ad.mlp_chain(x, p.weights, p.biases, final_relu=True)


def policy_sample(state: Tensor, p: PolicyParams, xi: np.ndarray) -> tuple[Tensor, Tensor]:
    """Reparameterized squashed-Gaussian sample and its log-probability.

    xi is the fixed standard-normal draw, shape (batch, action_dim).  The
    Gaussian term reduces to -0.5 xi^2 - logstd - log sqrt(2 pi) because the
    mean dependence cancels along u = mu + sigma * xi; the squash correction
    keeps the full dependence through u.
    """
    mu, logstd = policy_heads(state, p)
    std = ad.exp(logstd)
    u = ad.add(mu, ad.mul(std, ad.tensor(xi)))
    action = ad.tanh(u)
    gauss_const = -0.5 * xi * xi - _LOG_SQRT_2PI
    gauss = ad.row_sum(ad.sub(ad.tensor(gauss_const), logstd))
    logp = ad.sub(gauss, ad.squash_correction(u))
    return action, logp


def policy_mean_action(state: Tensor, p: PolicyParams) -> Tensor:
    """Deterministic action tanh(mu), used for evaluation."""
    mu, _ = policy_heads(state, p)
    return ad.tanh(mu)


def q_value(state: Tensor, action: Tensor, q: MlpParams) -> Tensor:
    """Scalar action value per row, shape (batch,)."""
    out = mlp_apply(ad.concat_last([state, action]), q)
    return ad.row_sum(out)


def model_predict(state: Tensor, action: Tensor, m: MlpParams) -> Tensor:
    """Next-state prediction s + delta(s, a); the residual form is load-bearing."""
    delta = mlp_apply(ad.concat_last([state, action]), m)
    return ad.add(state, delta)
