import csv
import io
import json

import pytest

from tltradeoff import cli
from tltradeoff import orchestrator as orch
from tltradeoff.errors import ReportError
from tltradeoff.report import render_report

from test_orchestrator import fake_record, null_executor, plan_with, planted_executor

PLAN = """\
sources:
  IN: {arch: toy, seed: 1, n_classes: 3}
tasks:
  shapes: {synthetic: {n_classes: 3, n_train: 12, n_val: 4, n_test: 4, seed: 3}}
ft_grid: [{frozen_fraction: 0.5, learning_rate: 0.01, min_epochs: 1, max_epochs: 2}]
fe_grid: [{extract_fraction: 0.5}, {extract_fraction: 1.0}]
ledger: ledger.jsonl
fewshot: {ic_grid: [1, 2], n_subsets: 2}
reselect: {task: shapes, ic_values: [4]}
"""


@pytest.fixture
def searched():
    plan = plan_with(sources=("IN", "P2"))
    ledger = orch.run_search(plan, orch.SearchLedger(), executor=planted_executor)
    orch.run_fewshot_protocol(plan, [1, 2], ledger=ledger, executor=null_executor, n_subsets=2)
    return ledger


def test_summary_table(searched):
    bundle = render_report(searched)
    rows = {r["approach"]: r for r in bundle.summary_table}
    assert rows["FT"]["n_EXP"] == 48 + 4 and rows["FE"]["n_EXP"] == 8 + 4
    assert rows["FT"]["V_ACC"] == 90.0 and rows["FE"]["V_ACC"] == 85.0
    assert rows["FT"]["T_h"] == pytest.approx(searched.total_hours("FT"))
    assert rows["FE"]["E_CO2_kg"] == pytest.approx(searched.total_co2("FE"))
    assert rows["FT"]["P_AVG_W"] == 100.0


def test_per_task_and_best_config(searched):
    bundle = render_report(searched)
    ft_v = next(r for r in bundle.per_task_table if r["approach"] == "FT" and r["metric"] == "V_ACC")
    assert ft_v["t0"] == 90.0 and ft_v["MEAN"] == 90.0
    best = {r["approach"]: r for r in bundle.best_config_table}
    assert best["FT"]["layers"] == "50%" and best["FT"]["LR"] == "0.01" and best["FT"]["Mom"] == "0.75"
    assert best["FE"]["layers"] == "75%" and best["FE"]["LR"] is None


def test_fewshot_and_timing_csv(searched):
    bundle = render_report(searched)
    rows = list(csv.DictReader(io.StringIO(bundle.fewshot_csv["t0"])))
    assert [r["ic"] for r in rows] == ["1", "2"]
    assert all(float(r["min"]) <= float(r["mean"]) <= float(r["max"]) for r in rows)
    timing = list(csv.DictReader(io.StringIO(bundle.timing_csv["t0_FT"])))
    assert list(timing[0]) == ["ic", "time_mean_h", "time_min_h", "time_max_h"]


def test_analyst_hours_column(tmp_path):
    ledger = orch.SearchLedger(tmp_path / "l.jsonl")
    plan = plan_with()
    orch.run_search(plan, ledger, executor=planted_executor)
    ledger.annotate(12.5, "FT")
    rows = {r["approach"]: r for r in render_report(ledger).summary_table}
    assert rows["FT"]["A_h"] == 12.5 and rows["FE"]["A_h"] is None


def test_empty_ledger():
    with pytest.raises(ReportError):
        render_report(orch.SearchLedger())


def test_bundle_write(tmp_path, searched):
    names = render_report(searched).write(tmp_path / "out")
    assert "summary.csv" in names and "fewshot_t0.csv" in names
    assert (tmp_path / "out" / "summary.txt").read_text().startswith("approach")


def test_cli_full_cycle(tmp_path, capsys):
    plan = tmp_path / "plan.yaml"
    plan.write_text(PLAN)
    assert cli.main(["search", str(plan)]) == 0
    ledger = tmp_path / "ledger.jsonl"
    assert len(ledger.read_text().splitlines()) == 3
    assert cli.main(["search", str(plan)]) == 0
    assert "executed 0 new" in capsys.readouterr().out
    assert cli.main(["fewshot", str(plan)]) == 0
    assert len(ledger.read_text().splitlines()) == 3 + 8
    assert cli.main(["reselect", str(plan)]) == 0
    assert cli.main(["annotate", str(ledger), "--analyst-hours", "2"]) == 0
    assert cli.main(["report", str(ledger), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "fewshot_shapes.csv").exists()
    assert json.loads((tmp_path / "ledger.jsonl.annotations.json").read_text())["analyst_hours"] == {"all": 2.0}


def test_cli_ledger_override_and_seed(tmp_path, monkeypatch):
    plan = tmp_path / "plan.yaml"
    plan.write_text(PLAN)
    other = tmp_path / "elsewhere.jsonl"
    assert cli.main(["search", str(plan), "--ledger", str(other), "--seed", "4"]) == 0
    recs = [json.loads(line) for line in other.read_text().splitlines()]
    assert {r["seed"] for r in recs} == {4}
    env_ledger = tmp_path / "env.jsonl"
    monkeypatch.setenv("TLTRADEOFF_LEDGER", str(env_ledger))
    assert cli.main(["search", str(plan)]) == 0
    assert env_ledger.exists()


def test_cli_recommend(capsys):
    assert cli.main(["recommend", "--overlap", "subset", "--ic", "50"]) == 0
    out = capsys.readouterr().out
    assert "recommendation: FT" in out and "-> yes" in out
    assert cli.main(["recommend", "--overlap", "disjoint", "--ic", "150",
                     "--measured-ft", "70", "--measured-fe", "72"]) == 0
    out = capsys.readouterr().out
    assert "probe_both" in out and "measured accuracies: FE" in out
    assert cli.main(["recommend", "--overlap", "subset", "--ic", "50", "--no-pretrained"]) == 0
    assert "recommendation: probe_both" in capsys.readouterr().out


def test_cli_exit_codes(tmp_path, capsys):
    assert cli.main(["recommend", "--overlap", "sideways", "--ic", "3"]) == 1
    assert cli.main([]) == 1
    assert cli.main(["report", str(tmp_path / "none.jsonl"), "--out", str(tmp_path)]) == 2
    assert "ReportError" in capsys.readouterr().err
    assert cli.main(["search", str(tmp_path / "none.yaml")]) == 2
    assert "ConfigError" in capsys.readouterr().err
    assert cli.main(["--help"]) == 0


def test_fake_record_helper_is_valid():
    planned = orch.plan_experiments(plan_with())[0]
    assert fake_record(planned, 1.0).approach == "FE"
