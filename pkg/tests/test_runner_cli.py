"""Training-loop artifacts and the command-line interface."""

import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from rmc import cli
from rmc.agent import Agent, AgentConfig
from rmc.configio import ConfigError, RunConfig, build_run_config
from rmc.runner import METRICS_HEADER, eval_rng, evaluate, read_metrics, train


def tiny_agent_kw():
    return dict(
        hidden_dim=8,
        policy_trunk=(8,),
        q_trunk=(8,),
        model_trunk=(8,),
        burn_in=2,
        train_len=3,
        batch_size=4,
    )


def tiny_run_config(seed=0, total=500):
    agent = AgentConfig(obs_dim=3, action_dim=1, **tiny_agent_kw())
    return RunConfig(
        agent=agent,
        env="pendulum",
        total_steps=total,
        seed=seed,
        eval_every=250,
        eval_episodes=2,
        warmup_steps=60,
        updates_per_step=0.25,
    )


TINY_INI = """\
[run]
env = pendulum
total_steps = 500
warmup_steps = 60
eval_every = 250
eval_episodes = 2
updates_per_step = 0.25

[agent]
hidden_dim = 8
policy_trunk = 8
q_trunk = 8
model_trunk = 8
burn_in = 2
train_len = 3
batch_size = 4
"""


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tinyrun")
    result = train(tiny_run_config(), root / "r0")
    return root / "r0", result


class TestRunner:
    def test_artifacts_and_header(self, tiny_run):
        run_dir, result = tiny_run
        text = (run_dir / "metrics.csv").read_text().splitlines()
        assert text[0] == METRICS_HEADER
        assert len(text) >= 3  # header + eval rows at 250 and 500
        assert (run_dir / "timing.csv").read_text().splitlines()[0] == "env_step,wall_seconds"
        assert (run_dir / "checkpoint-final" / "manifest.json").exists()
        assert (run_dir / "config.ini").exists()
        for key in ("final_eval_mean", "final_eval_std", "final_eval_returns", "train_steps", "train_episodes"):
            assert key in result
        saved = json.loads((run_dir / "result.json").read_text())
        assert saved["final_eval_mean"] == result["final_eval_mean"]

    def test_config_echo_resolves_auto_horizon(self, tiny_run):
        run_dir, _ = tiny_run
        echoed = build_run_config(config_file=run_dir / "config.ini", overrides={})
        assert echoed.agent.beta_horizon == 250  # half the 500-step run
        assert echoed.total_steps == 500

    def test_read_metrics_columns(self, tiny_run):
        run_dir, _ = tiny_run
        cols = read_metrics(run_dir / "metrics.csv")
        assert set(METRICS_HEADER.split(",")) == set(cols)
        assert cols["env_step"][-1] == 500
        assert np.isfinite(cols["episode_return"]).all()

    def test_final_checkpoint_records_step(self, tiny_run):
        run_dir, _ = tiny_run
        manifest = Agent.manifest_of(run_dir / "checkpoint-final")
        assert manifest["extra"]["env_step"] == 500

    def test_metrics_rerun_byte_identical(self, tmp_path):
        train(tiny_run_config(seed=3), tmp_path / "a")
        train(tiny_run_config(seed=3), tmp_path / "b")
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_evaluate_deterministic_per_seed(self):
        agent = Agent(AgentConfig(obs_dim=3, action_dim=1, **tiny_agent_kw()))
        a = evaluate(agent, "pendulum", 0.0, 3, eval_rng(5, 0))
        b = evaluate(agent, "pendulum", 0.0, 3, eval_rng(5, 0))
        c = evaluate(agent, "pendulum", 0.5, 3, eval_rng(5, 1))
        assert a.mean == b.mean and a.returns == b.returns
        assert c.mean != a.mean
        assert a.std == pytest.approx(float(np.std(a.returns)))


@pytest.fixture()
def ini_file(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_INI)
    return path


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "agent"
    Agent(AgentConfig(obs_dim=3, action_dim=1, **tiny_agent_kw())).save(path)
    return path


class TestCliTrain:
    def test_train_with_config_and_override(self, ini_file, tmp_path, capsys):
        rc = cli.main(
            ["train", "--config", str(ini_file), "--steps", "300", "--out", str(tmp_path), "--name", "t1", "--quiet"]
        )
        assert rc == 0
        assert "final eval mean" in capsys.readouterr().out
        echoed = build_run_config(config_file=tmp_path / "t1" / "config.ini", overrides={})
        assert echoed.total_steps == 300  # flag boats the file value
        assert echoed.agent.hidden_dim == 8

    def test_bad_scheme_rejected_before_output(self, tmp_path, capsys):
        rc = cli.main(["train", "--env", "pendulum", "--scheme", "7", "--out", str(tmp_path), "--name", "bad"])
        assert rc == 2
        assert not (tmp_path / "bad").exists()
        assert "scheme" in capsys.readouterr().err

    def test_unknown_config_key_reports_line(self, tmp_path, capsys):
        path = tmp_path / "bad.ini"
        path.write_text("[agent]\nhidden_dim = 8\nbogus_knob = 1\n")
        rc = cli.main(["train", "--config", str(path), "--out", str(tmp_path)])
        assert rc == 2
        err = capsys.readouterr().err
        assert "bogus_knob" in err and ".ini:3:" in err

    def test_rmc_out_env_var(self, ini_file, tmp_path, monkeypatch):
        monkeypatch.setenv("RMC_OUT", str(tmp_path / "envroot"))
        rc = cli.main(["train", "--config", str(ini_file), "--steps", "300", "--name", "er", "--quiet"])
        assert rc == 0
        assert (tmp_path / "envroot" / "er" / "metrics.csv").exists()


class TestCliEval:
    def test_eval_writes_json_and_is_deterministic(self, checkpoint, tmp_path, capsys):
        argv = ["eval", str(checkpoint), "--episodes", "2", "--seed", "3"]
        assert cli.main(argv + ["--out", str(tmp_path / "e1")]) == 0
        assert cli.main(argv + ["--out", str(tmp_path / "e2")]) == 0
        out = capsys.readouterr().out
        assert "env=pendulum" in out
        a = json.loads((tmp_path / "e1" / "eval.json").read_text())
        b = json.loads((tmp_path / "e2" / "eval.json").read_text())
        assert a["mean"] == b["mean"]
        assert a["mean"] < 0.0  # pendulum returns are nonpositive
        assert len(a["returns"]) == 2
        assert a["normalized_score"] is not None

    def test_eval_env_mismatch_fails_loudly(self, checkpoint):
        with pytest.raises(SystemExit) as exc:
            cli.main(["eval", str(checkpoint), "--env", "pointmass", "--episodes", "1"])
        msg = str(exc.value)
        assert "pointmass" in msg and "obs" in msg

    def test_eval_needs_episodes(self, checkpoint, capsys):
        assert cli.main(["eval", str(checkpoint), "--episodes", "0"]) == 2
        assert "episodes" in capsys.readouterr().err


class TestCliSweep:
    def test_sweep_outputs_and_matches_eval(self, checkpoint, tmp_path, capsys):
        rc = cli.main(
            ["sweep-pomdp", str(checkpoint), "--probs", "0,1", "--episodes", "2", "--seed", "3", "--out", str(tmp_path / "sw")]
        )
        assert rc == 0
        capsys.readouterr()
        lines = (tmp_path / "sw" / "sweep.csv").read_text().splitlines()
        assert lines[0] == "flicker_p,mean,std,normalized_score"
        assert len(lines) == 3
        ET.parse(tmp_path / "sw" / "sweep.svg")

        cli.main(["eval", str(checkpoint), "--episodes", "2", "--seed", "3", "--out", str(tmp_path / "ev")])
        eval_mean = json.loads((tmp_path / "ev" / "eval.json").read_text())["mean"]
        assert float(lines[1].split(",")[1]) == eval_mean

    @pytest.mark.parametrize("probs", ["0,2", "a,b", ""])
    def test_bad_probs_rejected(self, checkpoint, probs, capsys):
        assert cli.main(["sweep-pomdp", str(checkpoint), "--probs", probs]) == 2
        assert "probs" in capsys.readouterr().err


class TestCliPlot:
    def test_plot_two_runs_with_band(self, tmp_path, capsys):
        train(tiny_run_config(seed=0), tmp_path / "p0")
        train(tiny_run_config(seed=1), tmp_path / "p1")
        out = tmp_path / "curves.svg"
        rc = cli.main(["plot", str(tmp_path / "p0"), str(tmp_path / "p1"), "--out", str(out), "--group-by", "scheme"])
        assert rc == 0
        capsys.readouterr()
        root = ET.parse(out).getroot()
        assert root.tag.endswith("svg")
        body = out.read_text()
        assert "polyline" in body and "fill-opacity" in body  # curve plus min/max band

    def test_missing_metrics_rejected(self, tmp_path, capsys):
        assert cli.main(["plot", str(tmp_path / "nope")]) == 2
        assert "metrics.csv" in capsys.readouterr().err


class TestConfigIo:
    def test_auto_tokens_and_tuples(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[agent]\nbeta_horizon = auto\npolicy_trunk = 32,16\n")
        cfg = build_run_config(config_file=path, overrides={"env": "pointmass"})
        assert cfg.agent.beta_horizon is None
        assert cfg.agent.policy_trunk == (32, 16)
        assert cfg.agent.obs_dim == 6 and cfg.agent.action_dim == 2

    def test_bad_value_type_reports_location(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[run]\ntotal_steps = soon\n")
        with pytest.raises(ConfigError, match="total_steps"):
            build_run_config(config_file=path, overrides={})

    def test_overrides_skip_none(self):
        cfg = build_run_config(config_file=None, overrides={"env": "pendulum", "seed": None, "scheme": 4})
        assert cfg.env == "pendulum" and cfg.seed == 0 and cfg.agent.scheme == 4
