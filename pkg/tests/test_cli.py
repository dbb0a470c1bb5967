import json

import pytest

from poisson_polymer import cli
from poisson_polymer.errors import ConfigError
from poisson_polymer.experiments import EXPERIMENTS, Param, Row, resolve_config


def write_cfg(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_list(capsys):
    assert cli.main(["list"]) == 0
    out = capsys.readouterr().out
    for name in ("env-check", "wt-mean", "p2p-mean", "convergence", "field-marginal", "moment-bound"):
        assert name in out


def test_pass_writes_artifacts(tmp_path, capsys):
    out = tmp_path / "o"
    assert cli.main(["run", "scaling-audit", "--out", str(out), "--seed", "7"]) == 0
    for f in ("results.csv", "summary.txt", "manifest.json"):
        assert (out / f).exists()
    man = json.loads((out / "manifest.json").read_text())
    assert man["exit_code"] == 0 and man["seed"] == 7
    assert man["csv_columns"] == ["experiment", "t", "statistic", "value", "stderr", "n"]
    assert man["verdicts"]["scaling-audit"]["passed"] is True
    assert "library_version" in man and "wall_clock_seconds" in man
    assert "[scaling-audit] PASS" in (out / "summary.txt").read_text()
    assert (out / "results.csv").read_text().startswith("experiment,t,statistic,value,stderr,n\n")


def test_failed_check_exits_1(tmp_path):
    cfg = write_cfg(tmp_path, "[fock-norms]\ntail_tol = 0\nn_qmc = 256\n")
    res = cli.run(["fock-norms"], cfg, out=tmp_path / "o")
    assert res.exit_code == 1
    assert not all(c.passed for c in res.verdicts["fock-norms"])


@pytest.mark.parametrize("text, args", [
    ("", ["run", "no-such-experiment"]),
    ("[env-check]\nbogus = 1\n", ["run", "env-check"]),
    ("[nonsense]\nx = 1\n", ["run", "env-check"]),
    ("[run]\nthreadz = 2\n", ["run", "env-check"]),
    ("[env-check]\nn_envs = 10\n", ["run", "env-check"]),
    ("[env-check]\nn_envs = 1.5e3x\n", ["run", "env-check"]),
    ("", ["run", "fock-norms", "--t-grid", "1,2,3"]),
    ("", ["run", "convergence", "--t-grid", "100,10,1000"]),
    ("[moment-bound]\nT_grid = 0.5, 2\n", ["run", "moment-bound"]),
])
def test_usage_errors_exit_2(tmp_path, capsys, text, args):
    cfg = write_cfg(tmp_path, text or "[run]\n")
    assert cli.main(args + ["--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "poisson-polymer:" in capsys.readouterr().err


def test_missing_config_file_exits_2(tmp_path):
    assert cli.main(["run", "env-check", "--config", str(tmp_path / "absent.ini")]) == 2


def test_budget_exceeded_exits_3_with_partial_results(tmp_path):
    cfg = write_cfg(tmp_path, "[run]\nbudget_seconds = 0\n[env-check]\nn_envs = 3000\n")
    res = cli.run(["env-check"], cfg, out=tmp_path / "o")
    assert res.exit_code == 3 and res.budget_exceeded
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["budget_exceeded"] is True and man["exit_code"] == 3
    assert "BUDGET EXCEEDED" in (tmp_path / "o" / "summary.txt").read_text()


def test_env_var_sets_default_output(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "fromenv"))
    res = cli.run(["scaling-audit"])
    assert res.out_dir == tmp_path / "fromenv"
    assert (tmp_path / "fromenv" / "results.csv").exists()


def test_default_output_directory(tmp_path, monkeypatch):
    monkeypatch.delenv(cli.OUT_ENV, raising=False)
    monkeypatch.chdir(tmp_path)
    res = cli.run(["scaling-audit"])
    assert (tmp_path / res.out_dir / "results.csv").exists()
    assert res.out_dir.name == "scaling-audit"


def test_config_run_section_and_cli_precedence(tmp_path):
    cfg = write_cfg(tmp_path, f"[run]\nexperiment = scaling-audit\nseed = 5\nout = {tmp_path / 'cfgout'}\n")
    res = cli.run([], cfg)
    assert res.out_dir == tmp_path / "cfgout"
    assert json.loads((res.out_dir / "manifest.json").read_text())["seed"] == 5
    res = cli.run([], cfg, seed=9, out=tmp_path / "cliout")
    assert res.out_dir == tmp_path / "cliout"
    assert json.loads((res.out_dir / "manifest.json").read_text())["seed"] == 9


def test_csv_round_trip_is_exact():
    rows = [Row("e", 0.1, "a", 1 / 3, 2 ** -40, 7), Row("e", None, "b[x=1]", -1e-300, 0.0, 0),
            Row("e", 1e6, "c,d", 123456789.12345678, 1e300, 3)]
    path_text = cli.rows_to_csv(rows)
    import io
    import tempfile
    with tempfile.NamedTemporaryFile("w", suffix=".csv", delete=False) as fh:
        fh.write(path_text)
    back = cli.read_results(fh.name)
    assert back == rows
    assert io.StringIO(path_text).readline().strip() == "experiment,t,statistic,value,stderr,n"


def test_verdicts_rederived_from_csv(tmp_path):
    cfg = write_cfg(tmp_path, "[env-check]\nn_envs = 2000\n")
    res = cli.run(["env-check"], cfg, seed=7, out=tmp_path / "o")
    rows = cli.read_results(tmp_path / "o" / "results.csv")
    again = cli.verdicts_from_rows(res.configs, rows)
    assert again == res.verdicts
    names = {r.statistic for r in rows}
    assert {"energy_mean", "energy_var", "chi2_pvalue"} <= names
    # dropping a row turns into a failed completeness check
    broken = cli.verdicts_from_rows(res.configs, [r for r in rows if r.statistic != "energy_var"])
    assert not all(c.passed for c in broken["env-check"])


def test_shared_computation_serves_both_experiments(tmp_path):
    cfg = write_cfg(tmp_path, "[wt-mean]\nn_envs = 200\nbetas = 0.5\nnus = 1\n"
                              "[zt-mean]\nn_envs = 200\nbetas = 0.5\nnus = 1\n")
    res = cli.run(["wt-mean", "zt-mean"], cfg, out=tmp_path / "o")
    exps = {r.experiment for r in res.rows}
    assert exps == {"wt-mean", "zt-mean"}
    w = [r for r in res.rows if r.statistic.startswith("W_mean")][0]
    z = [r for r in res.rows if r.statistic.startswith("Z_mean")][0]
    # same environments and paths: Z = W exp(lambda nu r t) up to rounding
    import math
    assert z.value == pytest.approx(w.value * math.exp(math.expm1(0.5) * 0.5), rel=1e-12)


def test_t_grid_override(tmp_path):
    res = cli.run(["scaling-audit"], seed=1, out=tmp_path / "o", t_grid="10,1000")
    assert sorted({r.t for r in res.rows}) == [10.0, 1000.0]


@pytest.mark.parametrize("exp, text", [
    ("env-check", "[env-check]\nn_envs = 2500\n"),
    ("p2p-mean", "[p2p-mean]\nn_envs = 600\nbetas = 0.5\nxs = 0, 1\nn_paths = 16\n"),
])
def test_results_identical_across_worker_counts(tmp_path, exp, text):
    cfg = write_cfg(tmp_path, text)
    blobs = []
    for threads in (1, 2):
        out = tmp_path / f"t{threads}"
        cli.run([exp], cfg, seed=11, out=out, threads=threads)
        blobs.append((out / "results.csv").read_bytes())
    assert blobs[0] == blobs[1]


def test_param_parsing():
    assert Param("int", 0).parse("k", "1e3") == 1000
    with pytest.raises(ConfigError):
        Param("int", 0).parse("k", "1.5")
    assert Param("floats", ()).parse("k", "1, 2;3") == (1.0, 2.0, 3.0)
    with pytest.raises(ConfigError):
        Param("str", "a", choices=("a", "b")).parse("k", "c")
    with pytest.raises(ConfigError):
        Param("float", 1.0, 0.0).parse("k", "-1")


def test_every_experiment_resolves_with_defaults():
    for name in EXPERIMENTS:
        cfg = resolve_config(name, {}, 0)
        assert cfg["seed"] == 0
