"""Command-line interface.

Subcommands: train, eval, sweep-pomdp, ablation, plot, serve.  Every command
runs in-process by default; passing --server URL turns the data-plane commands
(train, eval, sweep-pomdp) into thin clients of a running service instance.
The RMC_OUT environment variable sets the default output root.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import experiments
from .agent import Agent, TrainingDiverged
from .configio import ConfigError, build_run_config
from .envs import Env, normalized_score
from .runner import eval_rng, evaluate, read_metrics, train
from .svgplot import Series, line_chart


def _out_root(args) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get("RMC_OUT", "runs"))


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file; flags override its values")
    p.add_argument("--env", choices=("pendulum", "pointmass", "pointmass-sparse"))
    p.add_argument("--scheme", type=int, help="routing scheme 1..6")
    p.add_argument("--flicker-p", type=float, dest="flicker_p")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, dest="total_steps")
    p.add_argument("--beta0", type=float)
    p.add_argument("--encoder", choices=("gru", "passthrough"))
    p.add_argument("--out", help="output directory (default $RMC_OUT or ./runs)")


def _run_config_from_args(args):
    overrides = {
        k: getattr(args, k, None)
        for k in ("env", "scheme", "flicker_p", "seed", "total_steps", "beta0", "encoder")
    }
    return build_run_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rmc", description="Recurrent actor-critic with model-based curiosity.")
    parser.add_argument("--server", help="base URL of a running service; data commands become thin clients")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training loop into a run directory")
    _add_run_flags(p_train)
    p_train.add_argument("--name", help="run directory name (default derived from config)")
    p_train.add_argument("--quiet", action="store_true")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("checkpoint", help="checkpoint directory")
    p_eval.add_argument("--env")
    p_eval.add_argument("--flicker-p", type=float, dest="flicker_p", default=0.0)
    p_eval.add_argument("--episodes", type=int, default=20)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--out", help="write eval.json here")

    p_sweep = sub.add_parser("sweep-pomdp", help="evaluate a checkpoint across flicker probabilities")
    p_sweep.add_argument("checkpoint")
    p_sweep.add_argument("--probs", default="0,0.25,0.5,0.75", help="comma-separated flicker probabilities")
    p_sweep.add_argument("--episodes", type=int, default=20)
    p_sweep.add_argument("--seed", type=int, default=0)
    p_sweep.add_argument("--out", help="directory for sweep.csv and sweep.svg")

    p_abl = sub.add_parser("ablation", help="run a preset grid of training runs")
    p_abl.add_argument("preset", choices=("schemes", "curiosity"))
    _add_run_flags(p_abl)
    p_abl.add_argument("--seeds", help="comma-separated seed list (default: the single --seed)")
    p_abl.add_argument("--quiet", action="store_true")

    p_plot = sub.add_parser("plot", help="learning curves from run directories")
    p_plot.add_argument("runs", nargs="+", help="run directories containing metrics.csv")
    p_plot.add_argument("--out", help="output SVG path (default plot.svg)")
    p_plot.add_argument("--group-by", default="scheme", choices=("scheme", "beta0", "encoder", "env", "none"))

    p_serve = sub.add_parser("serve", help="start the HTTP service")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8321)

    return parser


def cmd_train(args) -> int:
    cfg = _run_config_from_args(args)
    name = args.name or f"{cfg.env}-s{cfg.agent.scheme}-{cfg.agent.encoder}-seed{cfg.seed}"
    run_dir = _out_root(args) / name
    if args.server:
        return _remote_train(args.server, cfg, name)
    try:
        result = train(cfg, run_dir, progress=not args.quiet)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3
    print(f"run directory: {run_dir}")
    print(f"final eval mean: {result['final_eval_mean']!r} (std {result['final_eval_std']!r})")
    return 0


def _load_for_eval(checkpoint: str, env_name: str | None) -> tuple[Agent, str]:
    agent = Agent.load(checkpoint)
    manifest = Agent.manifest_of(checkpoint)
    cfg = manifest["config"]
    name = env_name or _guess_env(cfg)
    probe = Env(name)
    if probe.obs_dim != cfg["obs_dim"] or probe.action_dim != cfg["action_dim"]:
        raise SystemExit(
            f"error: checkpoint dims (obs {cfg['obs_dim']}, action {cfg['action_dim']}) do not match "
            f"environment '{name}' (obs {probe.obs_dim}, action {probe.action_dim})"
        )
    return agent, name


def _guess_env(cfg: dict) -> str:
    return "pendulum" if cfg["obs_dim"] == 3 else "pointmass"


def cmd_eval(args) -> int:
    if args.episodes < 1:
        print("error: --episodes must be >= 1", file=sys.stderr)
        return 2
    if args.server:
        return _remote_eval(args)
    agent, env_name = _load_for_eval(args.checkpoint, args.env)
    res = evaluate(agent, env_name, args.flicker_p, args.episodes, eval_rng(args.seed, 0))
    score = experiments.normalized_score_for(env_name, res.mean)
    score_txt = repr(score) if score is not None else "n/a"
    print(f"env={env_name} flicker_p={args.flicker_p!r} episodes={args.episodes}")
    print(f"mean={res.mean!r} std={res.std!r} normalized_score={score_txt}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        payload = {
            "checkpoint": str(args.checkpoint),
            "env": env_name,
            "flicker_p": args.flicker_p,
            "episodes": args.episodes,
            "mean": res.mean,
            "std": res.std,
            "returns": res.returns,
            "normalized_score": score,
        }
        (out / "eval.json").write_text(json.dumps(payload, indent=1, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    try:
        probs = [float(p) for p in args.probs.split(",") if p.strip() != ""]
    except ValueError:
        print(f"error: bad --probs list {args.probs!r}", file=sys.stderr)
        return 2
    if not probs or any(not 0.0 <= p <= 1.0 for p in probs):
        print("error: --probs must be a nonempty list within [0, 1]", file=sys.stderr)
        return 2
    if args.server:
        return _remote_sweep(args, probs)
    agent, env_name = _load_for_eval(args.checkpoint, None)
    rows = []
    for i, p in enumerate(probs):
        res = evaluate(agent, env_name, p, args.episodes, eval_rng(args.seed, i))
        score = experiments.normalized_score_for(env_name, res.mean)
        rows.append((p, res.mean, res.std, score))
        score_txt = repr(score) if score is not None else "n/a"
        print(f"p={p!r} mean={res.mean!r} std={res.std!r} normalized_score={score_txt}")
    out = Path(args.out) if args.out else _out_root(args) / "sweep"
    out.mkdir(parents=True, exist_ok=True)
    lines = ["flicker_p,mean,std,normalized_score"]
    for p, mean, std, score in rows:
        lines.append(f"{p!r},{mean!r},{std!r},{repr(score) if score is not None else ''}")
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    ys = [r[3] if r[3] is not None else r[1] for r in rows]
    ylabel = "normalized score" if rows[0][3] is not None else "eval return"
    line_chart(
        [Series(label=env_name, xs=[r[0] for r in rows], ys=ys)],
        out / "sweep.svg",
        title="score vs flicker probability",
        xlabel="flicker probability",
        ylabel=ylabel,
    )
    print(f"wrote {out / 'sweep.csv'} and {out / 'sweep.svg'}")
    return 0


def cmd_ablation(args) -> int:
    base = _run_config_from_args(args)
    seeds = [base.seed]
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    root = _out_root(args)
    grid = experiments.ablation_grid(args.preset, base, seeds)
    summary = []
    for name, cfg in grid:
        run_dir = root / name
        try:
            result = train(cfg, run_dir, progress=not args.quiet)
            summary.append({"run": name, "status": "ok", "final_eval_mean": result["final_eval_mean"]})
        except Exception as exc:  # partial failure: remaining runs continue
            summary.append({"run": name, "status": "failed", "error": str(exc)})
            print(f"run {name} failed: {exc}", file=sys.stderr)
    (root / f"ablation-{args.preset}.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    ok_dirs = [root / s["run"] for s in summary if s["status"] == "ok"]
    if ok_dirs:
        group_by = "scheme" if args.preset == "schemes" else "beta0"
        _plot_runs(ok_dirs, root / f"ablation-{args.preset}.svg", group_by)
    n_ok = sum(1 for s in summary if s["status"] == "ok")
    print(f"{n_ok}/{len(summary)} runs succeeded; summary in {root / f'ablation-{args.preset}.json'}")
    return 0 if n_ok == len(summary) else 4


def _group_key(run_dir: Path, group_by: str) -> str:
    if group_by == "none":
        return "runs"
    import configparser

    parser = configparser.ConfigParser()
    parser.read(run_dir / "config.ini")
    if group_by == "env":
        return f"env={parser['run']['env']}"
    return f"{group_by}={parser['agent'][group_by]}"


def _plot_runs(run_dirs: list[Path], out_path: Path, group_by: str) -> None:
    groups: dict[str, list[dict]] = {}
    for rd in run_dirs:
        cols = read_metrics(rd / "metrics.csv")
        if cols["env_step"].size == 0:
            raise ValueError(f"{rd}/metrics.csv has no rows")
        groups.setdefault(_group_key(rd, group_by), []).append(cols)
    series = []
    for label in sorted(groups):
        runs = groups[label]
        steps = runs[0]["env_step"]
        n = min(len(r["env_step"]) for r in runs)
        steps = steps[:n]
        returns = np.stack([r["episode_return"][:n] for r in runs])
        mean = returns.mean(axis=0)
        band_lo = returns.min(axis=0).tolist() if len(runs) > 1 else None
        band_hi = returns.max(axis=0).tolist() if len(runs) > 1 else None
        series.append(Series(label=label, xs=steps.tolist(), ys=mean.tolist(), band_lo=band_lo, band_hi=band_hi))
    line_chart(series, out_path, title="learning curves", xlabel="env_step", ylabel="eval return")


def cmd_plot(args) -> int:
    run_dirs = [Path(r) for r in args.runs]
    for rd in run_dirs:
        if not (rd / "metrics.csv").exists():
            print(f"error: {rd} has no metrics.csv", file=sys.stderr)
            return 2
    out_path = Path(args.out) if args.out else Path("plot.svg")
    try:
        _plot_runs(run_dirs, out_path, args.group_by)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {out_path}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service.app import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port, log_level="warning")
    return 0


# -- thin-client mode ---------------------------------------------------------


def _client(server: str):
    import httpx

    return httpx.Client(base_url=server.rstrip("/"), timeout=None)


def _remote_train(server: str, cfg, name: str) -> int:
    from .service.schemas import run_config_to_payload

    with _client(server) as client:
        resp = client.post("/runs", json={"name": name, "config": run_config_to_payload(cfg)})
        if resp.status_code != 201:
            print(f"error: server rejected run: {resp.status_code} {resp.text}", file=sys.stderr)
            return 5
        run_id = resp.json()["run_id"]
        print(f"submitted run {run_id}; polling")
        import time

        while True:
            state = client.get(f"/runs/{run_id}").json()
            if state["status"] in ("done", "failed"):
                break
            time.sleep(1.0)
    if state["status"] == "failed":
        print(f"error: remote run failed: {state.get('error')}", file=sys.stderr)
        return 3
    print(f"run directory: {state['run_dir']}")
    print(f"final eval mean: {state['result']['final_eval_mean']!r}")
    return 0


def _remote_eval(args) -> int:
    with _client(args.server) as client:
        resp = client.post(
            "/eval",
            json={
                "checkpoint": str(Path(args.checkpoint).resolve()),
                "env": args.env,
                "flicker_p": args.flicker_p,
                "episodes": args.episodes,
                "seed": args.seed,
            },
        )
    if resp.status_code != 200:
        print(f"error: {resp.status_code} {resp.text}", file=sys.stderr)
        return 5
    body = resp.json()
    score_txt = repr(body["normalized_score"]) if body["normalized_score"] is not None else "n/a"
    print(f"mean={body['mean']!r} std={body['std']!r} normalized_score={score_txt}")
    return 0


def _remote_sweep(args, probs: list[float]) -> int:
    with _client(args.server) as client:
        resp = client.post(
            "/sweep",
            json={
                "checkpoint": str(Path(args.checkpoint).resolve()),
                "probs": probs,
                "episodes": args.episodes,
                "seed": args.seed,
            },
        )
    if resp.status_code != 200:
        print(f"error: {resp.status_code} {resp.text}", file=sys.stderr)
        return 5
    for row in resp.json()["rows"]:
        score_txt = repr(row["normalized_score"]) if row["normalized_score"] is not None else "n/a"
        print(f"p={row['flicker_p']!r} mean={row['mean']!r} std={row['std']!r} normalized_score={score_txt}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "sweep-pomdp":
            return cmd_sweep(args)
        if args.command == "ablation":
            return cmd_ablation(args)
        if args.command == "plot":
            return cmd_plot(args)
        if args.command == "serve":
            return cmd_serve(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
