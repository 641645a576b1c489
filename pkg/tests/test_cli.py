"""End-to-end tests of the experiment harness and its file outputs."""

import json

import numpy as np
import pytest

from nsmc.cli import ConfigError, load_config, main, parse_config, run_experiment


def _base_config(tmp_path, **overrides):
    cfg = {
        "name": "unit",
        "model": {
            "kind": "stssm",
            "n_x": 2,
            "T": 3,
            "tau": 1.0,
            "lambda": 1.0,
            "obs_var": 0.25,
            "a_coef": 0.5,
        },
        "data": {"seed": 5},
        "methods": [
            {"name": "kalman", "kind": "kalman"},
            {"name": "fapf", "kind": "fapf", "N": 30},
            {"name": "nsmc", "kind": "nsmc", "N": 30, "M": 3, "inner": "smc+bs"},
        ],
        "replicates": 2,
        "budget_matching": False,
        "output_dir": str(tmp_path / "out"),
    }
    cfg.update(overrides)
    return cfg


def _write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


class TestConfigValidation:
    def test_unknown_method_kind(self, tmp_path):
        cfg = _base_config(tmp_path, methods=[{"name": "x", "kind": "magic", "N": 5}])
        with pytest.raises(ConfigError, match=r"methods\[0\].kind"):
            parse_config(cfg)

    def test_missing_model_field(self, tmp_path):
        cfg = _base_config(tmp_path)
        del cfg["model"]["tau"]
        with pytest.raises(ConfigError, match="model.tau"):
            parse_config(cfg)

    def test_self_nested_needs_two_inner_particles(self, tmp_path):
        cfg = _base_config(
            tmp_path,
            methods=[
                {"name": "sn", "kind": "nsmc", "N": 5, "M": 1, "inner": "self-nested"}
            ],
        )
        with pytest.raises(ConfigError, match="self-nested"):
            parse_config(cfg)

    def test_bad_json_reports_line(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{\n  "name": "x",\n  bad\n}')
        with pytest.raises(ConfigError, match="line 3"):
            load_config(path)

    def test_usage_error_exit_code(self, capsys):
        assert main(["run", "--config", "/nonexistent/c.json"]) == 2

    def test_unknown_subcommand_exit_code(self):
        with pytest.raises(SystemExit) as err:
            main(["frobnicate"])
        assert err.value.code == 2


class TestRunExperiment:
    def test_kalman_only_has_zero_variance(self, tmp_path):
        cfg = _base_config(
            tmp_path, methods=[{"name": "kalman", "kind": "kalman"}], replicates=3
        )
        config = parse_config(cfg)
        assert run_experiment(config) == 0
        summary = (tmp_path / "out" / "summary.csv").read_text()
        rows = [r.split(",") for r in summary.splitlines()[1:]]
        stderr_rows = [r for r in rows if r[1] == "kalman:logZ" and r[2] == "stderr"]
        assert float(stderr_rows[0][3]) == 0.0

    def test_rerun_is_byte_identical(self, tmp_path):
        config = parse_config(_base_config(tmp_path))
        run_experiment(config)
        first = (tmp_path / "out" / "results.csv").read_bytes()
        run_experiment(config)
        assert (tmp_path / "out" / "results.csv").read_bytes() == first

    def test_parallel_equals_serial(self, tmp_path):
        config = parse_config(_base_config(tmp_path))
        run_experiment(config, workers=1)
        serial = (tmp_path / "out" / "results.csv").read_bytes()
        run_experiment(config, workers=2)
        assert (tmp_path / "out" / "results.csv").read_bytes() == serial

    def test_config_echo_round_trips(self, tmp_path):
        config = parse_config(_base_config(tmp_path))
        run_experiment(config)
        with open(tmp_path / "out" / "config.echo.json") as fh:
            echoed = json.load(fh)
        assert parse_config(echoed).echo_dict() == config.echo_dict()

    def test_simulate_then_run_equals_inline_seed(self, tmp_path):
        cfg = _base_config(tmp_path)
        path = _write(tmp_path, cfg)
        assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "data")]) == 0
        run_experiment(parse_config(cfg))
        inline = (tmp_path / "out" / "results.csv").read_bytes()

        cfg2 = _base_config(
            tmp_path,
            data={"path": str(tmp_path / "data" / "dataset.csv"), "seed": 5},
            output_dir=str(tmp_path / "out2"),
        )
        run_experiment(parse_config(cfg2))
        assert (tmp_path / "out2" / "results.csv").read_bytes() == inline

    def test_collapsed_replicate_flags_partial_failure(self, tmp_path):
        from nsmc.model import Dataset, StssmSpec, save_dataset, simulate

        spec = StssmSpec.chain(n_x=1, tau=1.0, lam=0.0, obs_var=1e-12)
        data = Dataset(T=2, observations=np.full((2, 1), 1e200), seed=0)
        save_dataset(data, spec, tmp_path / "bad.csv")
        cfg = _base_config(
            tmp_path,
            model={
                "kind": "stssm",
                "n_x": 1,
                "T": 2,
                "tau": 1.0,
                "lambda": 0.0,
                "obs_var": 1e-12,
            },
            data={"path": str(tmp_path / "bad.csv"), "seed": 1},
            methods=[
                {"name": "bpf", "kind": "bpf", "N": 10},
                {"name": "kalman", "kind": "kalman"},
            ],
            replicates=2,
        )
        status = run_experiment(parse_config(cfg))
        assert status == 1
        results = (tmp_path / "out" / "results.csv").read_text()
        assert "failed" in results

    def test_nsmc_general_method_runs(self, tmp_path):
        cfg = _base_config(
            tmp_path,
            methods=[{"name": "gen", "kind": "nsmc-general", "N": 20}],
        )
        assert run_experiment(parse_config(cfg)) == 0

    def test_budget_matching_multiplies_bootstrap_size(self, tmp_path):
        cfg = _base_config(
            tmp_path,
            methods=[{"name": "bpf", "kind": "bpf", "N": 10, "M": 7}],
            budget_matching=True,
        )
        config = parse_config(cfg)
        from nsmc.cli import _run_method
        from nsmc.model import make_model, simulate as sim

        data = sim(config.model, config.T, seed=config.data_seed)
        out = _run_method(
            config.methods[0], config, make_model(config.model), data,
            np.random.default_rng(0),
        )
        # ESS can only reach 70 if 70 particles were actually used.
        assert np.any(out.ess_trace > 10)


class TestAsymptoticsCommand:
    def test_curve_csv(self, tmp_path):
        cfg = {
            "asymptotics": {
                "a_coef": 0.5,
                "obs_var": 1.0,
                "t": 2,
                "n_x": 2,
                "m_grid": [2, 5, 10, 100, 10**9],
            },
            "output_dir": str(tmp_path / "asym"),
        }
        path = _write(tmp_path, cfg)
        assert main(["asymptotics", "--config", str(path)]) == 0
        rows = (tmp_path / "asym" / "variance_curve.csv").read_text().splitlines()
        assert rows[0] == "M,sigma_nsmc,sigma_fa"
        last = rows[-1].split(",")
        assert abs(float(last[1]) - float(last[2])) <= 1e-6 * float(last[2])
