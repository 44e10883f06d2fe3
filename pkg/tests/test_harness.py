import json
import math
import os

import numpy as np
import pytest

from commopt import cli, harness
from commopt.harness import ConfigError, ExperimentConfig
from commopt.trace import Trace, TraceSchemaError, read_trace, write_trace

EFBV_TOML = """
[experiment]
algorithm = "efbv"
seeds = [1, 2, 3]
rounds = 25
output = "{out}"

[problem]
kind = "quadratic"
n = 8
dim = 4
gen_seed = 3

[compressor]
spec = "comp:k=1,kp=2"
"""

SPPM_TOML = """
[experiment]
algorithm = "sppm_as"
seeds = [1]
rounds = 12
output = "{out}"
target_dist_sq = 1e-10

[problem]
kind = "quadratic"
n = 6
dim = 3

[sampling]
kind = "nice"
tau = 2

[sppm]
gamma = 5.0
solver = "closed_form_quadratic"

[cost]
c1 = 1.0
c2 = 0.5
"""

SCAFFLIX_TOML = """
[experiment]
algorithm = "scafflix"
seeds = [1, 2]
rounds = 400
output = "{out}"
target_gap = 1e-6

[problem]
kind = "l2_logistic"
count = 48
dim = 3
clients = 4
partition = "iid"
mu = 0.1

[scafflix]
alpha = 0.5
p = 0.3
"""


def write_config(tmp_path, text, name="exp.toml"):
    path = tmp_path / name
    path.write_text(text.replace("{out}", str(tmp_path / "traces")))
    return path


class TestTraceIO:
    def make_trace(self):
        trace = Trace(meta={"seed": 1, "algorithm": "t"})
        rng = np.random.default_rng(0)
        cost = 0.0
        for t in range(6):
            cost += float(rng.random())
            trace.add(round=t, f_gap=float(rng.normal()) * 1e-7,
                      dist_sq=float(rng.random()), lyapunov=math.nan,
                      scalars_sent=float(t), K_used=t % 3, cost_cum=cost,
                      comm_rounds=t)
        return trace

    def test_roundtrip_lossless(self, tmp_path):
        trace = self.make_trace()
        path = tmp_path / "t.csv"
        write_trace(trace, path)
        again = read_trace(path)
        assert again.meta["seed"] == 1
        assert len(again.rows) == len(trace.rows)
        for a, b in zip(trace.rows, again.rows):
            for name in ("round", "f_gap", "dist_sq", "lyapunov", "scalars_sent",
                         "K_used", "cost_cum", "comm_rounds"):
                va, vb = getattr(a, name), getattr(b, name)
                assert va == vb or (math.isnan(va) and math.isnan(vb))

    def test_missing_column_named(self, tmp_path):
        path = tmp_path / "bad.csv"
        write_trace(self.make_trace(), path)
        lines = path.read_text().splitlines()
        lines[1] = lines[1].replace("dist_sq,", "")
        lines[2:] = [",".join(v for i, v in enumerate(l.split(",")) if i != 2)
                     for l in lines[2:]]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(TraceSchemaError, match="dist_sq"):
            read_trace(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "v.csv"
        write_trace(self.make_trace(), path)
        lines = path.read_text().splitlines()
        meta = json.loads(lines[0][len("#meta "):])
        meta["trace_version"] = 99
        lines[0] = "#meta " + json.dumps(meta, sort_keys=True)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(TraceSchemaError, match="version"):
            read_trace(path)

    def test_truncated_row(self, tmp_path):
        path = tmp_path / "tr.csv"
        write_trace(self.make_trace(), path)
        lines = path.read_text().splitlines()
        lines[3] = lines[3].rsplit(",", 2)[0]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(TraceSchemaError, match="fields"):
            read_trace(path)

    def test_invariants_enforced(self):
        trace = Trace()
        trace.add(round=1)
        trace.add(round=1)
        with pytest.raises(TraceSchemaError, match="increasing"):
            trace.validate()
        trace = Trace()
        trace.add(round=0, cost_cum=2.0)
        trace.add(round=1, cost_cum=1.0)
        with pytest.raises(TraceSchemaError, match="cost"):
            trace.validate()


class TestConfig:
    def test_unknown_algorithm(self, tmp_path):
        path = write_config(tmp_path, EFBV_TOML.replace('"efbv"', '"sgd9000"'))
        with pytest.raises(ConfigError, match="experiment.algorithm"):
            ExperimentConfig.load(path)

    def test_empty_seeds(self, tmp_path):
        path = write_config(tmp_path, EFBV_TOML.replace("[1, 2, 3]", "[]"))
        with pytest.raises(ConfigError, match="experiment.seeds"):
            ExperimentConfig.load(path)

    def test_missing_source_file(self, tmp_path):
        text = SCAFFLIX_TOML + '\n[problem2]\n'
        text = text.replace('kind = "l2_logistic"',
                            'kind = "l2_logistic"\nsource = "nope.libsvm"')
        path = write_config(tmp_path, text)
        with pytest.raises(ConfigError, match="problem.source"):
            ExperimentConfig.load(path)

    def test_override_creates_new_config(self, tmp_path):
        cfg = ExperimentConfig.load(write_config(tmp_path, SPPM_TOML))
        cfg2 = cfg.override("sppm.gamma", 9.0)
        assert cfg.get("sppm.gamma") == 5.0
        assert cfg2.get("sppm.gamma") == 9.0
        assert cfg.config_hash() != cfg2.config_hash()


class TestRunExperiment:
    def test_one_trace_per_seed_with_metadata(self, tmp_path):
        cfg = ExperimentConfig.load(write_config(tmp_path, EFBV_TOML))
        paths = harness.run_experiment(cfg)
        assert len(paths) == 3
        seeds = set()
        for path in paths:
            trace = read_trace(path)
            assert trace.meta["config_hash"] == cfg.config_hash()
            seeds.add(trace.meta["seed"])
        assert seeds == {1, 2, 3}

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = ExperimentConfig.load(write_config(tmp_path, EFBV_TOML))
        first = {p: open(p, "rb").read() for p in harness.run_experiment(cfg)}
        second = {p: open(p, "rb").read() for p in harness.run_experiment(cfg)}
        assert first == second

    def test_sppm_cost_columns(self, tmp_path):
        cfg = ExperimentConfig.load(write_config(tmp_path, SPPM_TOML))
        (path,) = harness.run_experiment(cfg)
        trace = read_trace(path)
        # exact prox: K_used stays 0, cost is c2 per round
        assert trace.final.cost_cum == pytest.approx(0.5 * trace.final.round)

    def test_mbgd_is_single_step_local_gd(self, tmp_path):
        text = SPPM_TOML.replace('"sppm_as"', '"mbgd"')
        cfg = ExperimentConfig.load(write_config(tmp_path, text))
        (path,) = harness.run_experiment(cfg)
        trace = read_trace(path)
        assert trace.final.K_used == 1

    def test_scafflix_runs_to_target(self, tmp_path):
        cfg = ExperimentConfig.load(write_config(tmp_path, SCAFFLIX_TOML))
        paths = harness.run_experiment(cfg)
        trace = read_trace(paths[0])
        gaps = trace.column("f_gap")
        assert np.nanmin(gaps) <= 1e-6


class TestSweep:
    def test_grid_rows(self, tmp_path):
        cfg = ExperimentConfig.load(write_config(tmp_path, SPPM_TOML))
        rows = harness.sweep(cfg, {"sppm.K": [1, 2, 4],
                                   "sppm.solver": ["gradient_descent"]})
        assert len(rows) == 3
        for row in rows:
            assert row.n_seeds == 1
            assert row.cost_mean > 0

    def test_scafflix_alpha_grid_monotone(self, tmp_path):
        cfg = ExperimentConfig.load(write_config(tmp_path, SCAFFLIX_TOML))
        rows = harness.sweep(cfg, {"scafflix.alpha": [0.1, 0.5, 0.9]})
        rounds = [row.rounds_to_target_mean for row in rows]
        assert rounds[0] <= rounds[1] <= rounds[2]

    def test_empty_grid_rejected(self, tmp_path):
        cfg = ExperimentConfig.load(write_config(tmp_path, SPPM_TOML))
        with pytest.raises(ConfigError):
            harness.sweep(cfg, {})
        with pytest.raises(ConfigError):
            harness.sweep(cfg, {"sppm.K": []})

    def test_error_carries_grid_point(self, tmp_path):
        cfg = ExperimentConfig.load(write_config(tmp_path, SPPM_TOML))
        with pytest.raises(RuntimeError, match="sppm.gamma"):
            harness.sweep(cfg, {"sppm.gamma": [-1.0]})


class TestCli:
    def test_run_and_exit_codes(self, tmp_path, capsys):
        path = write_config(tmp_path, SPPM_TOML)
        assert cli.main(["run-sppm", "--config", str(path)]) == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert len(out) == 1 and os.path.exists(out[0])

    def test_wrong_family_is_validation_error(self, tmp_path):
        path = write_config(tmp_path, SPPM_TOML)
        assert cli.main(["run-efbv", "--config", str(path)]) == 2

    def test_bad_config_returns_2(self, tmp_path):
        path = write_config(tmp_path, EFBV_TOML.replace('"efbv"', '"zzz"'))
        assert cli.main(["run-efbv", "--config", str(path)]) == 2

    def test_certify_compressor(self, capsys):
        assert cli.main(["certify-compressor", "--spec", "comp:k=1,kp=56",
                         "--dim", "112", "--trials", "2000"]) == 0
        out = capsys.readouterr().out
        assert "eta=0.707" in out and "omega=55" in out

    def test_stats(self, tmp_path, capsys):
        path = write_config(tmp_path, SPPM_TOML)
        assert cli.main(["stats", "--config", str(path)]) == 0
        out = capsys.readouterr().out
        assert "mu_AS" in out and "sigma_star^2" in out

    def test_sweep_param_parsing(self, tmp_path, capsys):
        path = write_config(tmp_path, SPPM_TOML)
        code = cli.main(["sweep", "--config", str(path), "--param", "K=1..3"])
        assert code == 0
        table = capsys.readouterr().out
        assert table.count("\n") >= 3

    def test_divergent_run_returns_3(self, tmp_path):
        text = EFBV_TOML + "\n[efbv]\nparams = \"manual\"\nlambda = 1.0\nnu = 1.0\ngamma = 1e6\n"
        text = text.replace('spec = "comp:k=1,kp=2"', 'spec = "identity"')
        path = write_config(tmp_path, text)
        assert cli.main(["run-efbv", "--config", str(path)]) == 3
