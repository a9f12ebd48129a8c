import csv
import json
import math

import numpy as np
import pytest

from vamlab import cli, harness
from vamlab.errors import ConfigurationError
from vamlab.harness import (ExperimentConfig, Job, ResultRow, config_from_mapping, load_config,
                            parse_list, read_rows, run_job, run_sweep, summarize,
                            summarize_rows, write_rows)
from vamlab.valuelearn import TrainSchedule

TINY_SCHEDULE = TrainSchedule(outer_iterations=2, model_steps_per_outer=20,
                              value_sweeps_per_outer=20, target_refresh_period=10)


def tiny(out, **kw):
    base = dict(rhos=(0.5, 1.0), ranks=(1, 3), seeds=2, samples=2000, n_states=8, branching=3,
                schedule=TINY_SCHEDULE, out=str(out))
    base.update(kw)
    return ExperimentConfig(**base)


def strip_wall_time(text):
    lines = text.splitlines()
    return [",".join(line.split(",")[:-1]) if not line.startswith("#") else line for line in lines]


def row(alg, seed, mae, rho=0.5, k=1, status="ok"):
    return ResultRow(rho, k, alg, seed, mae, mae, mae, status != "ok", status, 0.0)


# --- configuration ---------------------------------------------------------------------------

def test_default_job_count():
    cfg = ExperimentConfig()
    assert len(cfg.jobs()) == 3 * 11 * 4 * 16 == 2112
    assert cfg.ranks == (1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 50)
    assert len({j.key for j in cfg.jobs()}) == 2112


def test_parse_list():
    assert parse_list("1-3,50", int) == (1, 2, 3, 50)
    assert parse_list("0.5, 1.0") == (0.5, 1.0)
    assert parse_list("mle,itervaml", str) == ("mle", "itervaml")
    with pytest.raises(ConfigurationError):
        parse_list(",", int)


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "sweep.cfg"
    path.write_text("# tiny sweep\nrho = 0.5,1.0\nranks = 1-3  # inline comment\nseeds = 4\n"
                    "outer_iterations = 7\nmodel_lr = 0.05\n")
    cfg = load_config(path)
    assert cfg.rhos == (0.5, 1.0) and cfg.ranks == (1, 2, 3) and cfg.seeds == 4
    assert cfg.schedule.outer_iterations == 7 and cfg.schedule.model_lr == 0.05
    over = config_from_mapping({"seeds": 2, "rho": None, "ranks": "5"}, cfg)
    assert over.seeds == 2 and over.rhos == (0.5, 1.0) and over.ranks == (5,)


@pytest.mark.parametrize("bad", [{"seeds": 0}, {"algorithms": "td"}, {"ranks": "60"},
                                 {"colour": "blue"}, {"rho": "1.5"}])
def test_invalid_config_rejected(bad):
    with pytest.raises(ConfigurationError):
        config_from_mapping(bad)


# --- rows and CSV --------------------------------------------------------------------------------

def test_csv_round_trip_is_exact(tmp_path):
    rows = [row("mle", 1, 0.1 + 0.2), row("itervaml", 0, 1 / 3)]
    write_rows(tmp_path / "r.csv", rows)
    back = read_rows(tmp_path / "r.csv")
    assert [r.key for r in back] == sorted(r.key for r in rows)
    assert {r.key: r.mae for r in back} == {r.key: r.mae for r in rows}
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "# vamlab.results/1"


def test_unknown_csv_version_rejected(tmp_path):
    (tmp_path / "r.csv").write_text("# vamlab.results/99\n")
    with pytest.raises(ConfigurationError):
        read_rows(tmp_path / "r.csv")


def test_failing_job_becomes_failed_row(monkeypatch, tmp_path):
    def boom(*a, **k):
        raise RuntimeError("injected")
    monkeypatch.setitem(harness.ALGORITHMS, "mle", boom)
    r = run_job(Job(0.5, 1, "mle", 0), tiny(tmp_path))
    assert r.status == "failed" and r.diverged and math.isnan(r.mae)
    assert "injected" in r.message


# --- sweep -------------------------------------------------------------------------------------------

def test_sweep_outputs(tmp_path):
    cfg = tiny(tmp_path / "a")
    outcome = run_sweep(cfg)
    assert len(outcome.rows) == len(cfg.jobs()) == 2 * 2 * 4 * 2
    assert outcome.ran == 32 and outcome.skipped == 0 and not outcome.failed
    for name in ("results.csv", "results.json", "summary.md", "summary.csv"):
        assert (tmp_path / "a" / name).exists()
    payload = json.loads((tmp_path / "a" / "results.json").read_text())
    assert payload["format"] == harness.CSV_VERSION and len(payload["rows"]) == 32
    assert all(r.mae >= 0 and r.rmse >= r.mae - 1e-12 and r.max_error >= r.rmse - 1e-12
               for r in outcome.rows)


def test_sweep_is_resumable(tmp_path):
    cfg = tiny(tmp_path)
    full = run_sweep(cfg)
    csv_path = tmp_path / "results.csv"
    reference = csv_path.read_text()
    lines = reference.splitlines()
    csv_path.write_text("\n".join(lines[:2 + 10]) + "\n")   # header plus 10 rows survive a crash
    calls = []
    resumed = run_sweep(cfg, progress=lambda done, total, r: calls.append(r.key))
    assert resumed.skipped == 10 and resumed.ran == 22 and len(calls) == 22
    assert strip_wall_time(csv_path.read_text()) == strip_wall_time(reference)
    again = run_sweep(cfg)
    assert again.ran == 0 and again.skipped == len(full.rows)


def test_failed_rows_are_retried(tmp_path):
    cfg = tiny(tmp_path, rhos=(0.5,), ranks=(1,), algorithms=("mle",), seeds=1)
    write_rows(tmp_path / "results.csv", [row("mle", 0, math.nan, status="failed")])
    out = run_sweep(cfg)
    assert out.ran == 1 and out.rows[0].status == "ok"


def test_worker_count_does_not_change_results(tmp_path):
    a = run_sweep(tiny(tmp_path / "one", workers=1))
    b = run_sweep(tiny(tmp_path / "two", workers=2))
    assert a.rows == b.rows
    ta = (tmp_path / "one" / "results.csv").read_text()
    tb = (tmp_path / "two" / "results.csv").read_text()
    assert strip_wall_time(ta) == strip_wall_time(tb)


def test_aggregates_match_raw_rows(tmp_path):
    outcome = run_sweep(tiny(tmp_path))
    with open(tmp_path / "summary.csv") as fh:
        agg = list(csv.DictReader(fh))
    for rec in agg:
        maes = np.array([r.mae for r in outcome.rows
                         if r.rho == float(rec["rho"]) and r.k == int(rec["k"])
                         and r.algorithm == rec["algorithm"]])
        assert int(rec["n"]) == maes.size
        assert abs(float(rec["mean"]) - maes.mean()) <= 1e-12
        assert abs(float(rec["std"]) - maes.std(ddof=1)) <= 1e-12
        assert abs(float(rec["stderr"]) - maes.std(ddof=1) / np.sqrt(maes.size)) <= 1e-12


# --- summaries --------------------------------------------------------------------------------------

def test_identical_rows_have_zero_stderr():
    s = summarize_rows([row("mle", i, 0.25) for i in range(16)])
    c = s.cell(0.5, 1, "mle")
    assert c.n == 16 and c.mean == 0.25 and c.std == 0.0 and c.stderr == 0.0


def test_disjoint_ranges_win_every_seed():
    rng = np.random.default_rng(0)
    rows = [row("itervaml", i, rng.uniform(0, 1)) for i in range(16)]
    rows += [row("mle", i, rng.uniform(2, 3)) for i in range(16)]
    s = summarize_rows(rows)
    assert s.winner(0.5, 1) == "itervaml" and s.cell(0.5, 1, "itervaml").is_min
    assert s.wins[(0.5, 1)] == {"itervaml": 16}
    md = s.to_markdown()
    assert "itervaml wins 16/16 seeds" in md and "Minimum value highlighted in bold" in md


def test_diverged_rows_are_counted_and_listed():
    rows = [row("mle", 0, 1.0), row("mle", 1, 500.0, status="diverged")]
    s = summarize_rows(rows)
    assert s.cell(0.5, 1, "mle").mean == 250.5 and s.cell(0.5, 1, "mle").n_diverged == 1
    assert "## Diverged or failed runs" in s.to_markdown()


def test_empty_input_is_an_error(tmp_path):
    with pytest.raises(ConfigurationError):
        summarize_rows([])
    write_rows(tmp_path / "results.csv", [])
    with pytest.raises(ConfigurationError):
        summarize(tmp_path)


# --- command line -------------------------------------------------------------------------------------

def test_cli_sweep_and_summarize(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("n_states = 8\nbranching = 3\nsamples = 1000\nouter_iterations = 1\n"
                   "model_steps_per_outer = 5\nseeds = 3\n")
    out = tmp_path / "o"
    rc = cli.main(["sweep", "--config", str(cfg), "--rho", "0.5", "--ranks", "2",
                   "--algorithms", "mle,itervaml", "--seeds", "1", "--out", str(out)])
    assert rc == 0
    assert len(read_rows(out / "results.csv")) == 2     # --seeds beats the file's 3
    capsys.readouterr()
    assert cli.main(["summarize", str(out / "results.csv")]) == 0
    assert "| rho | k |" in capsys.readouterr().out


def test_cli_usage_errors(tmp_path, capsys):
    assert cli.main(["summarize", str(tmp_path / "missing.csv")]) == 1
    write_rows(tmp_path / "results.csv", [])
    assert cli.main(["summarize", str(tmp_path)]) == 1
    assert cli.main(["sweep", "--seeds", "0", "--out", str(tmp_path)]) == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["sweep", "--no-such-flag"])
    assert exc.value.code == 1


def test_cli_partial_failure_exit_code(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("injected")
    monkeypatch.setitem(harness.ALGORITHMS, "mle", boom)
    rc = cli.main(["sweep", "--rho", "0.5", "--ranks", "1", "--algorithms", "mle", "--seeds", "1",
                   "--samples", "500", "--out", str(tmp_path)])
    assert rc == 3


def test_cli_verify(tmp_path, capsys):
    assert cli.main(["verify", "--out", str(tmp_path)]) == 0
    payload = json.loads((tmp_path / "verify.json").read_text())
    assert payload["passed"] and not payload["inject_fault"]
    det = [c for c in payload["checks"] if c["name"] == "prop2.deterministic_kernel_no_bias"]
    assert det and det[0]["measured"] < 1e-9
    assert "checks passed" in capsys.readouterr().out


def test_cli_garnet(tmp_path, capsys):
    assert cli.main(["garnet", "--n", "6", "--m", "2", "--rho", "1.0", "--seed", "3"]) == 0
    d = json.loads(capsys.readouterr().out)
    P = np.array(d["transition"])
    assert P.shape == (6, 6) and np.all(P.max(axis=1) == 1.0)
    assert cli.main(["garnet", "--n", "6", "--m", "2", "--out", str(tmp_path / "g.json")]) == 0
    assert json.loads((tmp_path / "g.json").read_text())["transition"]


def test_cli_train_prints_curve(capsys):
    assert cli.main(["train", "--algorithm", "muzero_td", "--k", "3", "--samples", "2000",
                     "--record-every", "500"]) == 0
    out = capsys.readouterr().out
    assert "step    500" in out and "mae=" in out
