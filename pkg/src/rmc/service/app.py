"""FastAPI application: training jobs run on background threads.

Each submitted run trains into its own directory under the output root
(RMC_OUT or ./runs).  Training is sequential and deterministic inside a job;
jobs are independent processes' worth of state, so concurrent jobs only
contend for CPU.
"""

from __future__ import annotations

import itertools
import os
import threading
from dataclasses import dataclass
from pathlib import Path

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..agent import Agent
from ..configio import ConfigError, build_run_config
from ..envs import Env
from ..experiments import normalized_score_for
from ..runner import eval_rng, evaluate, train
from . import schemas


@dataclass
class Job:
    run_id: str
    name: str
    run_dir: Path
    status: str = "queued"
    result: dict | None = None
    error: str | None = None
    thread: threading.Thread | None = None


class JobRegistry:
    def __init__(self, out_root: Path) -> None:
        self.out_root = out_root
        self.jobs: dict[str, Job] = {}
        self._ids = itertools.count(1)
        self._lock = threading.Lock()

    def submit(self, name: str | None, cfg) -> Job:
        with self._lock:
            run_id = f"r{next(self._ids):04d}"
            job = Job(run_id=run_id, name=name or run_id, run_dir=self.out_root / (name or run_id))
            self.jobs[run_id] = job

        def work() -> None:
            job.status = "running"
            try:
                job.result = train(cfg, job.run_dir)
                job.status = "done"
            except Exception as exc:
                job.error = str(exc)
                job.status = "failed"

        job.thread = threading.Thread(target=work, daemon=True)
        job.thread.start()
        return job

    def get(self, run_id: str) -> Job:
        job = self.jobs.get(run_id)
        if job is None:
            raise HTTPException(status_code=404, detail=f"no run {run_id}")
        return job


def _load_checkpoint(path: str, env_name: str | None) -> tuple[Agent, str]:
    ckpt = Path(path)
    if not (ckpt / "manifest.json").exists():
        raise HTTPException(status_code=404, detail=f"no checkpoint at {path}")
    agent = Agent.load(ckpt)
    cfg = agent.config
    name = env_name or ("pendulum" if cfg.obs_dim == 3 else "pointmass")
    try:
        probe = Env(name)
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc
    if probe.obs_dim != cfg.obs_dim or probe.action_dim != cfg.action_dim:
        raise HTTPException(
            status_code=409,
            detail=(
                f"checkpoint dims (obs {cfg.obs_dim}, action {cfg.action_dim}) do not match "
                f"environment '{name}' (obs {probe.obs_dim}, action {probe.action_dim})"
            ),
        )
    return agent, name


def create_app(out_root: str | Path | None = None) -> FastAPI:
    root = Path(out_root) if out_root else Path(os.environ.get("RMC_OUT", "runs"))
    app = FastAPI(title="rmc", version=__version__)
    registry = JobRegistry(root)
    app.state.registry = registry

    @app.get("/health", response_model=schemas.Health)
    def health() -> schemas.Health:
        return schemas.Health(status="ok", version=__version__)

    @app.post("/runs", response_model=schemas.RunCreated, status_code=201)
    def submit_run(req: schemas.RunRequest) -> schemas.RunCreated:
        try:
            cfg = build_run_config(overrides=schemas.payload_to_overrides(req.config))
        except ConfigError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        job = registry.submit(req.name, cfg)
        return schemas.RunCreated(run_id=job.run_id, status=job.status)

    @app.get("/runs/{run_id}", response_model=schemas.RunState)
    def run_state(run_id: str) -> schemas.RunState:
        job = registry.get(run_id)
        return schemas.RunState(
            run_id=job.run_id,
            name=job.name,
            status=job.status,
            run_dir=str(job.run_dir),
            result=job.result,
            error=job.error,
        )

    @app.get("/runs", response_model=list[schemas.RunState])
    def run_list() -> list[schemas.RunState]:
        return [run_state(rid) for rid in sorted(registry.jobs)]

    @app.post("/eval", response_model=schemas.EvalResponse)
    def eval_checkpoint(req: schemas.EvalRequest) -> schemas.EvalResponse:
        agent, env_name = _load_checkpoint(req.checkpoint, req.env)
        res = evaluate(agent, env_name, req.flicker_p, req.episodes, eval_rng(req.seed, 0))
        return schemas.EvalResponse(
            env=env_name,
            flicker_p=req.flicker_p,
            episodes=req.episodes,
            mean=res.mean,
            std=res.std,
            returns=res.returns,
            normalized_score=normalized_score_for(env_name, res.mean),
        )

    @app.post("/sweep", response_model=schemas.SweepResponse)
    def sweep(req: schemas.SweepRequest) -> schemas.SweepResponse:
        if not req.probs or any(not 0.0 <= p <= 1.0 for p in req.probs):
            raise HTTPException(status_code=422, detail="probs must be a nonempty list within [0, 1]")
        agent, env_name = _load_checkpoint(req.checkpoint, None)
        rows = []
        for i, p in enumerate(req.probs):
            res = evaluate(agent, env_name, p, req.episodes, eval_rng(req.seed, i))
            rows.append(
                schemas.SweepRow(
                    flicker_p=p, mean=res.mean, std=res.std,
                    normalized_score=normalized_score_for(env_name, res.mean),
                )
            )
        return schemas.SweepResponse(env=env_name, rows=rows)

    return app
