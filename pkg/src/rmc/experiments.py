"""Experiment grids, cached run execution, and normalized-score anchors.

The acceptance grid covers the learning-behavior checks: plain and flickering
pendulum with recurrent and memoryless encoders, the routing-scheme ablation,
and the curiosity sweep on the sparse point-mass task.  Runs are cached under
an output root keyed by (config, core-source hash), so re-running the heavy
suite is free when nothing behavioral changed.

``python3 -m rmc.experiments`` executes the whole grid sequentially.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .configio import RunConfig, build_run_config
from .envs import normalized_score
from .runner import train

# Uniform-random-policy mean returns, Monte Carlo over 2000 episodes (frozen).
RANDOM_RETURN = {
    "pendulum": -1231.739,
    "pointmass": -304.130,
    "pointmass-sparse": 0.110,
}

# Good-policy anchors: pendulum from converged training runs at p=0;
# sparse point-mass is the goal payoff (goal reached every episode).
REFERENCE_RETURN = {
    "pendulum": -150.0,
    "pointmass-sparse": 10.0,
}


def normalized_score_for(env_name: str, mean_return: float) -> float | None:
    """0 = random policy, 1 = reference; None when the env has no anchors."""
    if env_name not in RANDOM_RETURN or env_name not in REFERENCE_RETURN:
        return None
    return normalized_score(mean_return, RANDOM_RETURN[env_name], REFERENCE_RETURN[env_name])


_CORE_MODULES = ("autodiff.py", "optim.py", "nets.py", "envs.py", "replay.py", "agent.py", "runner.py")


def semantics_hash() -> str:
    """Hash of the modules that determine run outcomes; cache invalidation key."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for name in _CORE_MODULES:
        h.update((root / name).read_bytes())
    return h.hexdigest()[:16]


def default_root() -> Path:
    return Path(os.environ.get("RMC_ACCEPT_DIR", ".acceptance-runs"))


def ensure_run(tag: str, cfg: RunConfig, root: Path | None = None, progress: bool = False) -> dict:
    """Train once per (tag, config, core hash); reuse the cached result after.

    The run lands in ``root/tag`` atomically (trained under a .partial name,
    renamed on completion), so an interrupted farm resumes cleanly.
    """
    root = Path(root) if root is not None else default_root()
    root.mkdir(parents=True, exist_ok=True)
    final = root / tag
    key = {"config": asdict(cfg), "code": semantics_hash()}
    key_path = final / "key.json"
    result_path = final / "result.json"
    if result_path.exists() and key_path.exists():
        if json.loads(key_path.read_text()) == key:
            result = json.loads(result_path.read_text())
            result["run_dir"] = str(final)
            return result
        shutil.rmtree(final)
    elif final.exists():
        shutil.rmtree(final)

    partial = root / (tag + ".partial")
    if partial.exists():
        shutil.rmtree(partial)
    result = train(cfg, partial, progress=progress)
    (partial / "key.json").write_text(json.dumps(key, indent=1, sort_keys=True))
    partial.rename(final)
    result["run_dir"] = str(final)
    return result


def _run(env: str, **overrides) -> RunConfig:
    return build_run_config(overrides={"env": env, **overrides})


def acceptance_grid() -> list[tuple[str, RunConfig]]:
    """Every training run the acceptance suite consumes, in priority order."""
    seeds = range(5)
    grid: list[tuple[str, RunConfig]] = []
    # plain pendulum: recurrent agent (MDP learning) and memoryless twin
    for s in seeds:
        grid.append((f"c4-gru-seed{s}", _run("pendulum", seed=s, total_steps=150_000)))
    for s in seeds:
        grid.append((f"c6-pass-seed{s}", _run("pendulum", seed=s, total_steps=150_000, encoder="passthrough")))
    # flickering pendulum at p=0.5: recurrent vs memoryless
    for s in seeds:
        grid.append((f"c5-gru-seed{s}", _run("pendulum", seed=s, total_steps=200_000, flicker_p=0.5)))
    for s in seeds:
        grid.append(
            (f"c5-pass-seed{s}", _run("pendulum", seed=s, total_steps=200_000, flicker_p=0.5, encoder="passthrough"))
        )
    # routing-scheme ablation on flickering pendulum
    for scheme in (1, 4, 5, 6):
        for s in seeds:
            grid.append(
                (f"c8-s{scheme}-seed{s}", _run("pendulum", seed=s, total_steps=100_000, flicker_p=0.5, scheme=scheme))
            )
    # curiosity sweep on sparse point-mass; denser updates since the reward
    # signal only exists after rare goal hits, and a slow bonus decay so an
    # oversized beta0 keeps drowning the goal payoff deep into the run
    for beta0 in (0.0, 1.0, 10.0):
        for s in seeds:
            grid.append(
                (
                    f"c7-b{beta0:g}-seed{s}",
                    _run(
                        "pointmass-sparse",
                        seed=s,
                        total_steps=80_000,
                        beta0=beta0,
                        beta_horizon=60_000,
                        updates_per_step=1.0,
                    ),
                )
            )
    return grid


def ablation_grid(preset: str, base: RunConfig, seeds: list[int]) -> list[tuple[str, RunConfig]]:
    """Run grids for the CLI ablation command; all runs share the seed list."""
    runs: list[tuple[str, RunConfig]] = []
    if preset == "schemes":
        for scheme in range(1, 7):
            for seed in seeds:
                cfg = replace(base, seed=seed, agent=replace(base.agent, scheme=scheme, seed=seed))
                runs.append((f"{base.env}-scheme{scheme}-seed{seed}", cfg))
    elif preset == "curiosity":
        default_beta = base.agent.beta0 if base.agent.beta0 > 0 else 1.0
        for beta0 in (0.0, default_beta / 10.0, default_beta, 10.0 * default_beta):
            for seed in seeds:
                cfg = replace(base, seed=seed, agent=replace(base.agent, beta0=beta0, seed=seed))
                runs.append((f"{base.env}-beta{beta0:g}-seed{seed}", cfg))
    else:
        raise ValueError(f"unknown ablation preset '{preset}'")
    return runs


def main(argv: list[str] | None = None) -> int:
    import argparse

    parser = argparse.ArgumentParser(description="Run the acceptance experiment grid (cached).")
    parser.add_argument("--only", help="run only tags starting with this prefix")
    parser.add_argument("--root", help="cache root (default $RMC_ACCEPT_DIR or .acceptance-runs)")
    parser.add_argument("--list", action="store_true", help="list tags and exit")
    args = parser.parse_args(argv)

    grid = acceptance_grid()
    if args.only:
        grid = [(t, c) for t, c in grid if t.startswith(args.only)]
    if args.list:
        for tag, cfg in grid:
            print(f"{tag}: env={cfg.env} p={cfg.flicker_p} steps={cfg.total_steps} "
                  f"scheme={cfg.agent.scheme} encoder={cfg.agent.encoder} beta0={cfg.agent.beta0}")
        return 0
    root = Path(args.root) if args.root else default_root()
    for i, (tag, cfg) in enumerate(grid):
        result = ensure_run(tag, cfg, root=root)
        print(f"[{i + 1}/{len(grid)}] {tag}: final eval mean {result['final_eval_mean']:.1f}", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
