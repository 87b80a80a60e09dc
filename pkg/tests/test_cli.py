from __future__ import annotations

import csv
import json

import pytest

from promptstab.cli import fmt_mean_std, main
from promptstab.domain import EvalSummary


def cli(ws, *args) -> int:
    return main([str(a) for a in args])


def data_args(ws):
    return ["--task", ws / "task.json", "--data", ws / "data.jsonl", "--prompt", ws / "prompt.txt"]


def read(path):
    return json.loads(path.read_text())


def test_eval_writes_summary_and_provenance(workspace):
    out = workspace / "ev"
    assert cli(workspace, "eval", *data_args(workspace), "--seed", 1, "--out", out) == 0
    doc = read(out / "summary.json")
    summary = EvalSummary.from_dict(doc["summary"])
    assert summary.n_examples == 60 and summary.k == 3
    assert len(doc["dataset_sha256"]) == 64 and doc["tool_version"]
    assert len(doc["reliability_bins"]) == 10
    run = read(out / "run.json")
    assert run["config"]["seed"] == 1 and run["config"]["backend"] == "mock"


def test_label_only_eval_has_explicit_nulls(workspace):
    out = workspace / "ev"
    assert cli(workspace, "eval", *data_args(workspace), "--label-only", "--out", out) == 0
    s = read(out / "summary.json")["summary"]
    for key in ("ece", "mce", "brier", "log_loss", "mean_jsd"):
        assert key in s and s[key] is None
    assert cli(workspace, "conformal", "--summary", out / "summary.json", "--out", workspace / "cf") == 1


def test_missing_dataset_reports_path(workspace, capsys):
    code = cli(workspace, "eval", "--task", workspace / "task.json", "--data", workspace / "nope.jsonl",
               "--prompt", workspace / "prompt.txt", "--out", workspace / "o")
    assert code == 1
    assert "nope.jsonl" in capsys.readouterr().err


def test_prompt_placeholder_mismatch_is_config_error(workspace):
    (workspace / "bad.txt").write_text("Classify {body}")
    code = cli(workspace, "eval", "--task", workspace / "task.json", "--data", workspace / "data.jsonl",
               "--prompt", workspace / "bad.txt", "--out", workspace / "o")
    assert code == 1


def test_http_backend_failure_exit_code(workspace):
    code = cli(workspace, "eval", *data_args(workspace), "--backend", "http", "--endpoint", "http://127.0.0.1:9/x",
               "--max-retries", 0, "--timeout", 0.5, "--label-only", "--out", workspace / "o")
    assert code == 2


def test_config_file_precedence(workspace):
    (workspace / "cfg.json").write_text(json.dumps({"seed": 7, "k": 2}))
    out = workspace / "ev"
    assert cli(workspace, "eval", *data_args(workspace), "--config", workspace / "cfg.json", "--k", 1,
               "--out", out) == 0
    config = read(out / "run.json")["config"]
    assert config["seed"] == 7 and config["k"] == 1
    assert read(out / "summary.json")["summary"]["k"] == 1
    (workspace / "bad.json").write_text(json.dumps({"sed": 7}))
    assert cli(workspace, "eval", *data_args(workspace), "--config", workspace / "bad.json", "--out", out) == 1


def test_eval_with_variant_file(workspace):
    vfile = workspace / "v.json"
    assert cli(workspace, "paraphrase", "--prompt", workspace / "prompt.txt", "--k", 2, "--out", vfile) == 0
    assert len(read(vfile)["variants"]) == 2
    out = workspace / "ev"
    assert cli(workspace, "eval", *data_args(workspace), "--variants", vfile, "--out", out) == 0
    assert read(out / "summary.json")["summary"]["k"] == 2


def test_conformal_alpha_nesting(workspace):
    ev = workspace / "ev"
    cli(workspace, "eval", *data_args(workspace), "--out", ev)
    for alpha in ("0.05", "0.2"):
        assert cli(workspace, "conformal", "--summary", ev / "summary.json", "--alpha", alpha,
                   "--out", workspace / f"cf{alpha}") == 0
    tight, loose = read(workspace / "cf0.05" / "conformal.json"), read(workspace / "cf0.2" / "conformal.json")
    assert tight["calibration_ids"] == loose["calibration_ids"]
    for a, b in zip(tight["records"], loose["records"]):
        assert set(b["conformal_set"]) <= set(a["conformal_set"])
    assert tight["coverage"] >= loose["coverage"]
    assert {"alpha", "threshold", "n_cal", "coverage", "mean_set_size", "curve"} <= set(tight)


def test_analyze_with_and_without_conformal(workspace):
    ev, cf = workspace / "ev", workspace / "cf"
    cli(workspace, "eval", *data_args(workspace), "--out", ev)
    cli(workspace, "conformal", "--summary", ev / "summary.json", "--out", cf)
    assert cli(workspace, "analyze", "--summary", ev / "summary.json", "--conformal", cf / "conformal.json",
               "--out", workspace / "an") == 0
    full = read(workspace / "an" / "analysis.json")["stratified"]
    assert full["n_with_sets"] == 30 and full["spearman_flip_setsize"]["n"] == 30
    assert full["mean_margin_stable"] is not None or full["mean_margin_unstable"] is not None
    assert cli(workspace, "analyze", "--summary", ev / "summary.json", "--out", workspace / "an2") == 0
    part = read(workspace / "an2" / "analysis.json")["stratified"]
    assert part["mean_set_size_stable"] is None and part["spearman_flip_setsize"]["status"] == "absent"
    assert part["spearman_margin_fliprate"]["status"] == "ok"
    rows = list(csv.DictReader((workspace / "an2" / "margin_by_flip.csv").open()))
    assert 1 <= len(rows) <= 4


def test_analyze_rejects_empty_and_missing(workspace):
    empty = {"summary": EvalSummary("p", 0, 0.0, 0.0, 0.0, ()).to_dict()}
    (workspace / "empty.json").write_text(json.dumps(empty))
    assert cli(workspace, "analyze", "--summary", workspace / "empty.json", "--out", workspace / "a") == 1
    assert cli(workspace, "analyze", "--summary", workspace / "none.json", "--out", workspace / "a") == 1


def test_optimize_and_resume(workspace):
    args = [*data_args(workspace), "--subset", 30, "--k", 2, "--candidates", 2, "--patience", 10]
    assert cli(workspace, "optimize", *args, "--iters", 3, "--out", workspace / "full") == 0
    assert cli(workspace, "optimize", *args, "--iters", 1, "--out", workspace / "part") == 0
    assert cli(workspace, "optimize", "--resume", workspace / "part", "--iters", 3) == 0
    for name in ("trajectory.jsonl", "result.json", "run.json"):
        assert (workspace / "part" / name).read_bytes() == (workspace / "full" / name).read_bytes()
    assert cli(workspace, "optimize", "--resume", workspace / "missing") == 1


def test_sweep_outputs(workspace):
    out = workspace / "sw"
    assert cli(workspace, "sweep", *data_args(workspace), "--subset", 30, "--seeds", 1, 2, "--iters", 2,
               "--candidates", 2, "--out", out) == 0
    rows = list(csv.DictReader((out / "sweep.csv").open()))
    assert len(rows) == 4
    assert set(rows[0]) == {"task", "model", "setting", "seed", "acc_start", "acc_end", "flip_start", "flip_end",
                            "flip_end_fresh", "status"}
    assert all(r["status"] == "ok" for r in rows)
    agg = list(csv.DictReader((out / "sweep_summary.csv").open()))
    assert [a["setting"] for a in agg] == ["acc-only", "joint"]
    assert " ± " in agg[0]["flip_end"]


def test_sweep_all_failed_exits_nonzero(workspace):
    code = cli(workspace, "sweep", *data_args(workspace), "--backend", "http", "--endpoint", "http://127.0.0.1:9/x",
               "--max-retries", 0, "--timeout", 0.5, "--label-only", "--seeds", 1, "--iters", 1,
               "--out", workspace / "sw")
    assert code == 2
    rows = list(csv.DictReader((workspace / "sw" / "sweep.csv").open()))
    assert len(rows) == 2 and all(r["status"].startswith("error") for r in rows)


def test_report_merges(workspace):
    ev, opt = workspace / "ev", workspace / "opt"
    cli(workspace, "eval", *data_args(workspace), "--out", ev)
    cli(workspace, "optimize", *data_args(workspace), "--subset", 30, "--iters", 1, "--k", 1, "--out", opt)
    assert cli(workspace, "report", "--inputs", ev, opt, "--out", workspace / "rep") == 0
    rep = read(workspace / "rep" / "report.json")
    assert set(rep["sources"]) == {str(ev), str(opt)}
    assert "records" not in rep["sources"][str(ev)]["summary"]
    rows = list(csv.DictReader((workspace / "rep" / "trajectory.csv").open()))
    assert rows and rows[0]["kind"] == "incumbent"
    assert cli(workspace, "report", "--inputs", workspace / "nothing", "--out", workspace / "rep") == 1


def test_fmt_mean_std_uses_population_std():
    assert fmt_mean_std([0.76, 0.86, 0.86]) == "0.827 ± 0.047"
    assert fmt_mean_std([0.5]) == "0.500 ± 0.000"
    assert fmt_mean_std([]) == ""


def test_parser_rejects_unknown_command(capsys):
    with pytest.raises(SystemExit):
        main(["frobnicate"])
