"""Request/response models for the HTTP service."""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, Field

from ..configio import RunConfig


class AgentOptions(BaseModel, extra="forbid"):
    hidden_dim: int = Field(default=48, ge=1)
    policy_trunk: list[int] = [64, 64]
    q_trunk: list[int] = [64, 64]
    model_trunk: list[int] = [64, 64]
    encoder: Literal["gru", "passthrough"] = "gru"
    scheme: int = Field(default=1, ge=1, le=6)
    gamma: float = Field(default=0.99, gt=0, le=1)
    polyak: float = Field(default=0.995, ge=0, lt=1)
    lr: float = Field(default=3e-4, gt=0)
    alpha_init: float = Field(default=0.2, gt=0)
    target_entropy: float | None = None
    beta0: float = Field(default=1.0, ge=0)
    beta_horizon: int | None = Field(default=None, ge=1)
    burn_in: int = Field(default=10, ge=0)
    train_len: int = Field(default=15, ge=1)
    batch_size: int = Field(default=16, ge=1)
    replay_capacity: int = Field(default=1_000_000, ge=1)
    replay_strategy: Literal["burn-in", "zero-start", "stored-state", "episode"] = "burn-in"
    policy_q: Literal["min", "first"] = "min"
    model_loss: Literal["l2norm", "l1"] = "l2norm"


class RunOptions(BaseModel, extra="forbid"):
    env: Literal["pendulum", "pointmass", "pointmass-sparse"] = "pendulum"
    flicker_p: float = Field(default=0.0, ge=0.0, le=1.0)
    total_steps: int = Field(default=10_000, ge=1)
    seed: int = 0
    eval_every: int = Field(default=2000, ge=1)
    eval_episodes: int = Field(default=20, ge=1)
    checkpoint_every: int = Field(default=50_000, ge=0)
    warmup_steps: int = Field(default=1000, ge=0)
    updates_per_step: float = Field(default=0.5, gt=0)
    agent: AgentOptions = AgentOptions()


class RunRequest(BaseModel, extra="forbid"):
    name: str | None = None
    config: RunOptions = RunOptions()


class RunCreated(BaseModel):
    run_id: str
    status: str


class RunState(BaseModel):
    run_id: str
    name: str
    status: Literal["queued", "running", "done", "failed"]
    run_dir: str
    result: dict | None = None
    error: str | None = None


class EvalRequest(BaseModel, extra="forbid"):
    checkpoint: str
    env: str | None = None
    flicker_p: float = Field(default=0.0, ge=0.0, le=1.0)
    episodes: int = Field(default=20, ge=1)
    seed: int = 0


class EvalResponse(BaseModel):
    env: str
    flicker_p: float
    episodes: int
    mean: float
    std: float
    returns: list[float]
    normalized_score: float | None


class SweepRequest(BaseModel, extra="forbid"):
    checkpoint: str
    probs: list[float] = [0.0, 0.25, 0.5, 0.75]
    episodes: int = Field(default=20, ge=1)
    seed: int = 0


class SweepRow(BaseModel):
    flicker_p: float
    mean: float
    std: float
    normalized_score: float | None


class SweepResponse(BaseModel):
    env: str
    rows: list[SweepRow]


class Health(BaseModel):
    status: str
    version: str


def run_config_to_payload(cfg: RunConfig) -> dict:
    """Flatten a RunConfig into the RunOptions JSON shape."""
    agent = {name: getattr(cfg.agent, name) for name in AgentOptions.model_fields}
    agent = {k: list(v) if isinstance(v, tuple) else v for k, v in agent.items()}
    run = {name: getattr(cfg, name) for name in RunOptions.model_fields if name != "agent"}
    run["agent"] = agent
    return run


def payload_to_overrides(options: RunOptions) -> dict:
    """Flat override dict consumed by configio.build_run_config."""
    out = options.model_dump(exclude={"agent"})
    out.update(options.agent.model_dump())
    return out
