"""Training loop and run artifacts.

A run directory is self-describing: config.ini (effective config echo),
metrics.csv (one row per eval point), result.json (deterministic summary),
timing.csv (wall-clock sidecar; kept out of metrics.csv so reruns of the same
seed and config produce byte-identical metrics), and checkpoint directories.

All randomness flows from the run seed through named SeedSequence streams, so
(seed, config) is a complete reproduction key.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .agent import Agent, LossReport, make_buffer
from .configio import RunConfig, write_config
from .envs import Env

METRICS_HEADER = (
    "env_step,episode_return,model_loss,q1_loss,q2_loss,policy_loss,temp_loss,"
    "alpha,beta,intrinsic_reward_mean,entropy_estimate,staleness_mean"
)

# SeedSequence stream tags; every generator in a run derives from (seed, tag).
_STREAM_ENV = 1
_STREAM_REPLAY = 2
_STREAM_EVAL = 3
_STREAM_DIAG = 4


def _fmt(x: float) -> str:
    return repr(float(x))


@dataclass
class EvalResult:
    mean: float
    std: float
    returns: list[float]


def evaluate(agent: Agent, env_name: str, flicker_p: float, episodes: int, rng: np.random.Generator) -> EvalResult:
    """Deterministic-mode policy rollouts on a freshly seeded environment."""
    env = Env(env_name, flicker_p, rng=rng)
    returns = [agent.run_episode(env, deterministic=True) for _ in range(episodes)]
    arr = np.asarray(returns)
    return EvalResult(mean=float(arr.mean()), std=float(arr.std()), returns=[float(r) for r in returns])


def eval_rng(seed: int, eval_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _STREAM_EVAL, eval_index]))


class _LossAverager:
    """Running means of LossReport fields between metrics rows."""

    def __init__(self) -> None:
        self.n = 0
        self.sums = {}

    def add(self, report: LossReport) -> None:
        self.n += 1
        for k, v in vars(report).items():
            self.sums[k] = self.sums.get(k, 0.0) + v

    def mean(self, key: str) -> float:
        if self.n == 0:
            return math.nan
        return self.sums[key] / self.n

    def reset(self) -> None:
        self.n = 0
        self.sums = {}


def train(cfg: RunConfig, run_dir: str | Path, progress: bool = False) -> dict:
    """Run the full loop; returns the result summary dict.

    Collection and training interleave at ``updates_per_step`` gradient steps
    per environment step once the random warmup phase has filled the buffer.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    # auto curiosity horizon: decay to zero over the first half of the run
    horizon = cfg.agent.beta_horizon if cfg.agent.beta_horizon is not None else max(1, cfg.total_steps // 2)
    agent_cfg = replace(cfg.agent, seed=cfg.seed, beta_horizon=horizon)
    cfg = replace(cfg, agent=agent_cfg)
    write_config(cfg, run_dir / "config.ini")

    agent = Agent(agent_cfg)
    buffer = make_buffer(agent_cfg)
    env = Env(cfg.env, cfg.flicker_p, rng=np.random.default_rng(np.random.SeedSequence([cfg.seed, _STREAM_ENV])))
    replay_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _STREAM_REPLAY]))
    diag_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _STREAM_DIAG]))

    metrics_path = run_dir / "metrics.csv"
    timing_path = run_dir / "timing.csv"
    metrics_path.write_text(METRICS_HEADER + "\n")
    timing_path.write_text("env_step,wall_seconds\n")

    t0 = time.monotonic()
    averager = _LossAverager()
    carry = None
    update_debt = 0.0
    eval_index = 0
    last_logged_step = 0
    last_eval: EvalResult | None = None
    train_episode_returns: list[float] = []

    def log_point(step: int) -> None:
        nonlocal eval_index, last_logged_step, last_eval
        ev = evaluate(agent, cfg.env, cfg.flicker_p, cfg.eval_episodes, eval_rng(cfg.seed, eval_index))
        last_eval = ev
        eval_index += 1
        staleness = _staleness_mean(agent, buffer, diag_rng)
        row = [
            str(step),
            _fmt(ev.mean),
            _fmt(averager.mean("model_loss")),
            _fmt(averager.mean("q1_loss")),
            _fmt(averager.mean("q2_loss")),
            _fmt(averager.mean("policy_loss")),
            _fmt(averager.mean("temp_loss")),
            _fmt(agent.alpha),
            _fmt(averager.mean("beta") if averager.n else math.nan),
            _fmt(averager.mean("intrinsic_reward_mean")),
            _fmt(averager.mean("entropy_estimate")),
            _fmt(staleness),
        ]
        with open(metrics_path, "a") as fh:
            fh.write(",".join(row) + "\n")
        with open(timing_path, "a") as fh:
            fh.write(f"{step},{time.monotonic() - t0:.3f}\n")
        averager.reset()
        last_logged_step = step
        if progress:
            print(f"[{run_dir.name}] step {step}: eval return {ev.mean:.1f}", flush=True)

    step = 0
    while step < cfg.total_steps:
        step += 1
        carry, finished = agent.collect_step(env, buffer, carry, random_action=(step <= cfg.warmup_steps))
        if finished is not None:
            train_episode_returns.append(finished)
        if step > cfg.warmup_steps:
            update_debt += cfg.updates_per_step
            while update_debt >= 1.0 and buffer.n_valid_starts() > 0:
                averager.add(agent.train_step(buffer, replay_rng))
                update_debt -= 1.0
        if step % cfg.eval_every == 0:
            log_point(step)
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step < cfg.total_steps:
            _save_checkpoint(agent, run_dir / f"checkpoint-{step:08d}", last_eval, step)

    if last_logged_step < cfg.total_steps:
        log_point(cfg.total_steps)
    _save_checkpoint(agent, run_dir / "checkpoint-final", last_eval, cfg.total_steps)

    result = {
        "env": cfg.env,
        "flicker_p": cfg.flicker_p,
        "seed": cfg.seed,
        "total_steps": cfg.total_steps,
        "final_eval_mean": last_eval.mean,
        "final_eval_std": last_eval.std,
        "final_eval_returns": last_eval.returns,
        "train_steps": agent.train_steps,
        "train_episodes": len(train_episode_returns),
    }
    (run_dir / "result.json").write_text(json.dumps(result, indent=1, sort_keys=True))
    return result


def _staleness_mean(agent: Agent, buffer, diag_rng: np.random.Generator) -> float:
    if buffer.n_valid_starts() == 0:
        return math.nan
    batch = buffer.sample_batch(agent.config.batch_size, diag_rng)
    vals = buffer.staleness(batch, agent.step_fn_raw)
    return float(np.mean(vals))


def _save_checkpoint(agent: Agent, path: Path, last_eval: EvalResult | None, step: int) -> None:
    extra = {"env_step": step}
    if last_eval is not None:
        extra["eval_mean"] = last_eval.mean
        extra["eval_std"] = last_eval.std
    agent.save(path, extra=extra)


def read_metrics(path: str | Path) -> dict[str, np.ndarray]:
    """Parse a metrics.csv into column arrays keyed by header names."""
    path = Path(path)
    lines = path.read_text().strip().splitlines()
    if len(lines) < 1:
        raise ValueError(f"{path} is empty")
    header = lines[0].split(",")
    rows = [line.split(",") for line in lines[1:]]
    cols = {name: np.array([float(r[i]) for r in rows]) for i, name in enumerate(header)}
    return cols
