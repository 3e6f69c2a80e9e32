import csv
import io
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from apo.bench import METRICS, format_table, normalized_score, rows_to_csv, run_bench, winners
from apo.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from apo.config import format_run_config, load_bench_config, load_run_config
from apo.errors import ConfigError, DivisionByZero, UnsupportedSignCase
from apo.nets import forward, load_checkpoint
from apo.train import CSV_COLUMNS, TrainRecord, read_csv, records_to_csv

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

CHAIN_1 = """\
env = chain
env.max_episode_len = 50
algorithm = apo
epochs = 1
steps_per_epoch = 200
seeds = 3
agent.k = 2.5
agent.gamma = 0.9
agent.hidden = 8
record_wallclock = false
"""


def run_cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = main(list(argv), out=out, err=err)
    return code, out.getvalue(), err.getvalue()


class TestConfig:
    def test_round_trip(self):
        cfg = load_run_config(CHAIN_1)
        assert cfg.agent.k == 2.5 and cfg.agent.surrogate.k == 2.5
        assert cfg.env_params == {"max_episode_len": 50}
        assert load_run_config(format_run_config(cfg)) == cfg

    @pytest.mark.parametrize("text,line", [
        ("env = chain\nbogus = 1\n", 2),
        ("env = chain\n\n# c\nagent.nope = 3\n", 4),
        ("epochs = ten\n", 1),
        ("env = chain\nenv.width = 3\n", 2),
        ("just words\n", 1),
        ("epochs = 1\nepochs = 2\n", 2),
        ("extra.k = 1\n", 1),
    ])
    def test_errors_carry_line(self, text, line):
        with pytest.raises(ConfigError) as exc:
            load_run_config(text)
        assert exc.value.line == line
        assert f"line {line}" in str(exc.value)

    def test_semantic_errors(self):
        for text in ("env = atari\n", "algorithm = sac\n", "epochs = 0\n", "surrogate.mu_inf_norm = -1\n"):
            with pytest.raises(ConfigError):
                load_run_config(text)

    def test_comments_and_options(self):
        cfg = load_run_config("surrogate.h_max = computed  # derive it\nsurrogate.kl_slack = off\n")
        assert cfg.agent.surrogate.h_max is None and not cfg.agent.surrogate.kl_slack

    @pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("point_goal_*.cfg")) + ["chain_apo.cfg"])
    def test_shipped_configs_parse(self, name):
        cfg = load_run_config((CONFIGS / name).read_text())
        assert cfg.epochs >= 1

    def test_shipped_bench_config(self):
        b = load_bench_config((CONFIGS / "bench_desk.cfg").read_text())
        assert b.algorithms == ("apo", "trpo", "ppo", "papo")
        assert b.env_params["grid"] == {"max_episode_len": 100}


class TestTrain:
    def test_one_epoch_chain_and_checkpoint(self, tmp_path):
        cfg_path = tmp_path / "run.cfg"
        cfg_path.write_text(CHAIN_1)
        code, out, _ = run_cli("train", "--config", str(cfg_path), "--out", str(tmp_path / "o"), "--quiet")
        assert code == EXIT_OK
        rows = list(csv.reader(open(tmp_path / "o" / "seed3.csv")))
        assert tuple(rows[0]) == CSV_COLUMNS
        assert len(rows) == 2
        records = read_csv(tmp_path / "o" / "seed3.csv")
        assert records[0].epoch == 1 and records[0].env_steps == 200
        assert all(np.isfinite(v) for v in records[0].row())
        spec, params = load_checkpoint(tmp_path / "o" / "seed3.ckpt")
        assert spec.input_dim == 5 and params.size == spec.n_params
        summary = json.loads((tmp_path / "o" / "seed3.json").read_text())
        assert summary["k"] == 2.5 and summary["epochs"] == 1
        code, out, _ = run_cli("eval", "--ckpt", str(tmp_path / "o" / "seed3.ckpt"), "--env", "chain",
                               "--episodes", "3", "--param", "max_episode_len=20")
        assert code == EXIT_OK and out.startswith("episodes 3")

    def test_same_seed_identical_csv(self, tmp_path):
        cfg_path = tmp_path / "run.cfg"
        cfg_path.write_text(CHAIN_1.replace("epochs = 1", "epochs = 3"))
        for d in ("a", "b"):
            assert run_cli("train", "--config", str(cfg_path), "--out", str(tmp_path / d), "--quiet")[0] == 0
        assert (tmp_path / "a" / "seed3.csv").read_bytes() == (tmp_path / "b" / "seed3.csv").read_bytes()
        assert (tmp_path / "a" / "seed3.ckpt").read_bytes() == (tmp_path / "b" / "seed3.ckpt").read_bytes()

    def test_est_bound_uses_agent_k(self):
        from apo.train import train_run

        # epoch 1 is rolled out before any update, so only the logged k differs
        first = {}
        for k in (0.0, 2.5, 5.0):
            cfg = load_run_config(CHAIN_1.replace("agent.k = 2.5", f"agent.k = {k}"))
            first[k] = train_run(cfg, 0).records[0]
        assert first[0.0].mean_return == first[5.0].mean_return
        var = (first[0.0].est_bound - first[5.0].est_bound) / 5.0
        assert var >= 0.0
        assert first[2.5].est_bound == pytest.approx(first[0.0].est_bound - 2.5 * var, rel=1e-12, abs=1e-12)

    def test_checkpoint_round_trip_evaluates_identically(self, tmp_path):
        from apo.nets import save_checkpoint
        from apo.train import train_run

        result = train_run(load_run_config(CHAIN_1), 1)
        path = tmp_path / "p.ckpt"
        save_checkpoint(path, result.policy_spec, result.policy_params)
        spec, params = load_checkpoint(path)
        obs = np.eye(5)
        assert np.array_equal(forward(params, spec, obs).logits, forward(result.policy_params, result.policy_spec, obs).logits)

    def test_csv_round_trip(self, tmp_path):
        rec = TrainRecord(1, 10, 0.1, -0.2, 0.3, 4, 0.5, 0.01, -1.0, -0.5, 3, 0.25, 1.5)
        text = records_to_csv([rec, replace(rec, epoch=2)])
        path = tmp_path / "log.csv"
        path.write_text(text)
        assert read_csv(path) == [rec, replace(rec, epoch=2)]

    def test_exit_codes(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("epochs = 1\nwhat = 2\n")
        code, _, err = run_cli("train", "--config", str(bad))
        assert code == EXIT_CONFIG and "line 2" in err
        assert run_cli("train", "--config", str(tmp_path / "missing.cfg"))[0] == EXIT_CONFIG
        assert run_cli("eval", "--ckpt", str(tmp_path / "nope.ckpt"), "--env", "chain")[0] == EXIT_RUNTIME
        assert run_cli("eval", "--ckpt", "x", "--env", "atari")[0] == EXIT_CONFIG
        assert run_cli("frobnicate")[0] == EXIT_CONFIG


class TestVerify:
    def test_gradients_pass(self):
        code, out, _ = run_cli("verify", "gradients", "--seed", "1")
        assert code == EXIT_OK
        assert "FAIL" not in out and out.count("PASS") == 4

    def test_monotonic_prints_trace(self):
        code, out, _ = run_cli("verify", "monotonic")
        assert code == EXIT_OK
        assert "B_k:" in out and "steps accepted" in out

    def test_failure_exit_code(self, monkeypatch):
        from apo import verify

        monkeypatch.setitem(verify.SUITES, "bounds", lambda seed: [verify.Check("x", 0, 1)])
        assert run_cli("verify", "bounds")[0] == 1


class TestNormalizedScore:
    def test_self_normalization(self):
        assert normalized_score(3.0, 3.0, 1.0) == 1.0

    def test_both_below_random(self):
        assert normalized_score(-2.0, -4.0, 0.0) == 2.0

    def test_mixed_signs(self):
        assert normalized_score(-1.0, 1.0, 0.0) == -1.0

    def test_unsupported(self):
        with pytest.raises(UnsupportedSignCase):
            normalized_score(1.0, -1.0, 0.0)

    def test_zero_denominator(self):
        with pytest.raises(DivisionByZero):
            normalized_score(1.0, 0.0, 0.0)
        with pytest.raises(ZeroDivisionError):
            normalized_score(1.0, 0.0, 0.0)


class TestBench:
    def stub_runner(self, values):
        def runner(rc, seed):
            v = values[rc.agent.algorithm]
            return [TrainRecord(e + 1, 0, v, v, 0.0, 1, 0.0, 0.0, 0.0, 0.0, 0, 0.0, 0.0) for e in range(5)]

        return runner

    def config(self, algos):
        text = f"algorithms = {', '.join(algos)}\nenvs = chain\nseeds = 0, 1\nepochs = 5\n"
        return load_bench_config(text)

    def test_stub_winner_takes_all(self):
        cfg = self.config(["apo", "trpo"])
        baseline = lambda env, params, n: dict.fromkeys(METRICS, 0.0)
        rows = run_bench(cfg, self.stub_runner({"apo": 2.0, "trpo": 1.0}), baseline)
        assert len(rows) == 8
        for r in rows:
            assert r.winner == (r.algorithm == "apo") and not r.tie
            assert r.normalized == (2.0 if r.algorithm == "apo" else 1.0)
        assert rows_to_csv(rows).splitlines()[0] == "env,algorithm,metric,value,normalized,winner,tie"
        assert "apo" in format_table(rows)

    def test_self_comparison_ties(self):
        cfg = self.config(["trpo", "ppo"])
        baseline = lambda env, params, n: dict.fromkeys(METRICS, 0.0)
        rows = run_bench(cfg, self.stub_runner({"trpo": 1.0, "ppo": 1.005}), baseline)
        assert all(r.tie and r.winner for r in rows)

    def test_winners_rule(self):
        assert winners({"a": 100.0, "b": 99.5, "c": 90.0}) == ["a", "b"]
        assert winners({"a": -1.0, "b": -1.2}) == ["a"]

    def test_bench_needs_two_algorithms(self):
        with pytest.raises(ConfigError):
            load_bench_config("algorithms = apo\nenvs = chain\n")

    def test_cli_bench_small(self, tmp_path):
        cfg = tmp_path / "b.cfg"
        cfg.write_text("algorithms = trpo, ppo\nenvs = chain\nenv.chain.max_episode_len = 30\nseeds = 0\n"
                       "epochs = 2\nsteps_per_epoch = 120\nrandom_episodes = 3\nagent.hidden = 8\n"
                       "agent.policy_iters = 3\nagent.value_iters = 3\n")
        code, out, _ = run_cli("bench", "--config", str(cfg), "--out", str(tmp_path / "o"))
        assert code == EXIT_OK
        rows = list(csv.reader(open(tmp_path / "o" / "bench.csv")))
        assert len(rows) == 1 + 2 * 4
        assert "mean_last" in out
