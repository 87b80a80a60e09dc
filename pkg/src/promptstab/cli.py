"""``promptstab`` command-line interface.

Subcommands: paraphrase, eval, conformal, analyze, optimize, sweep, report.
Settings resolve as command-line flag > ``--config`` JSON file > built-in
default, and the resolved settings are written to each output directory.
Exit status is 0 on success, 1 for configuration/input errors and 2 for
backend failures.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__, analysis, conformal, metrics
from .backend import Backend, BackendConfig, MockParams
from .domain import (Dataset, EvalSummary, ObjectiveConfig, Prompt, Task, load_dataset, load_prompt, load_task,
                     stratified_subset, validate_dataset)
from .errors import (BackendError, CandidateGenerationError, ConfigError, PlaceholderError, PromptStabError,
                     VariantGenerationError)
from .optimizer import OptimizerConfig, evaluate_prompt, objective, run
from .paraphrase import generate_variants, load_variants, save_variants

log = logging.getLogger("promptstab")

DEFAULTS: dict[str, Any] = {
    "backend": "mock",
    "model": None,
    "endpoint": None,
    "concurrency": 4,
    "cache_dir": None,
    "seed": 0,
    "label_only": False,
    "temperature": 0.0,
    "max_retries": 3,
    "timeout": 60.0,
    "api_key_env": "PROMPTSTAB_API_KEY",
    "mock_a": 4.0,
    "mock_b": 2.0,
    "mock_c": 0.8,
    "good_tokens": None,
    "stable_tokens": None,
    "k": 3,
    "n_bins": metrics.DEFAULT_N_BINS,
    "subset": None,
    "subset_seed": 0,
    "alpha": conformal.DEFAULT_ALPHA,
    "split_seed": None,
    "lambda_perf": 0.5,
    "lambda_stab": 0.5,
    "candidates": 4,
    "iters": 10,
    "patience": 3,
    "failures": 5,
    "seeds": [1, 2, 3],
    "settings": ["acc-only", "joint"],
    "fresh_eval": True,
}

SWEEP_SETTINGS = {"acc-only": (1.0, 0.0), "joint": (0.5, 0.5)}

# keys that describe where files live rather than what was computed
_PATH_KEYS = {"config", "out", "resume", "cache_dir", "task", "data", "prompt", "variants", "summary",
              "conformal", "scatter", "inputs", "command", "verbose"}


class CliError(Exception):
    def __init__(self, message: str, code: int = 1) -> None:
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _csv_list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _backend_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    g = p.add_argument_group("backend")
    g.add_argument("--config", help="JSON file of settings (flags override it)")
    g.add_argument("--backend", choices=["mock", "http"])
    g.add_argument("--model")
    g.add_argument("--endpoint", help="chat-completions URL for --backend http")
    g.add_argument("--concurrency", type=int)
    g.add_argument("--cache-dir", dest="cache_dir")
    g.add_argument("--seed", type=int,
                   help="seed for the mock model, paraphrasing and the optimiser (sweep uses --seeds for the optimiser)")
    g.add_argument("--label-only", dest="label_only", action="store_true",
                   help="request labels only, no probabilities")
    g.add_argument("--temperature", type=float)
    g.add_argument("--max-retries", dest="max_retries", type=int)
    g.add_argument("--timeout", type=float)
    g.add_argument("--api-key-env", dest="api_key_env")
    g.add_argument("--mock-a", dest="mock_a", type=float)
    g.add_argument("--mock-b", dest="mock_b", type=float)
    g.add_argument("--mock-c", dest="mock_c", type=float)
    g.add_argument("--good-tokens", dest="good_tokens", type=_csv_list)
    g.add_argument("--stable-tokens", dest="stable_tokens", type=_csv_list)
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def _data_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--task", required=required)
    p.add_argument("--data", required=required)
    p.add_argument("--prompt", required=required)
    p.add_argument("--subset", type=int, help="stratified subset size")
    p.add_argument("--subset-seed", dest="subset_seed", type=int)
    p.add_argument("--k", type=int, help="paraphrase variants per prompt")
    p.add_argument("--n-bins", dest="n_bins", type=int)


def _optimizer_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--candidates", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--failures", type=int, help="failure examples shown to the generator")
    p.add_argument("--no-fresh-eval", dest="fresh_eval", action="store_false")


def build_parser() -> argparse.ArgumentParser:
    parent = _backend_parent()
    parser = argparse.ArgumentParser(prog="promptstab", description="Prompt sensitivity, calibration and stability-aware prompt optimisation.")
    parser.add_argument("--version", action="version", version=f"promptstab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    kw = dict(parents=[parent], argument_default=argparse.SUPPRESS)

    p = sub.add_parser("paraphrase", help="generate K paraphrases of a prompt", **kw)
    p.add_argument("--prompt", required=True)
    p.add_argument("--task")
    p.add_argument("--k", type=int)
    p.add_argument("--out", required=True, help="variant file to write")

    p = sub.add_parser("eval", help="evaluate one prompt: accuracy, flips, calibration", **kw)
    _data_args(p)
    p.add_argument("--variants", help="variant file to use instead of generating paraphrases")
    p.add_argument("--out", required=True)

    p = sub.add_parser("conformal", help="split conformal sets over an eval summary", **kw)
    p.add_argument("--summary", required=True, help="summary.json written by eval")
    p.add_argument("--alpha", type=float)
    p.add_argument("--split-seed", dest="split_seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("analyze", help="stability-stratified analysis", **kw)
    p.add_argument("--summary", required=True)
    p.add_argument("--conformal")
    p.add_argument("--scatter", nargs="*", help="extra summary.json files for the accuracy/flip scatter")
    p.add_argument("--out", required=True)

    p = sub.add_parser("optimize", help="run the accuracy/stability prompt optimiser", **kw)
    _data_args(p, required=False)
    _optimizer_args(p)
    p.add_argument("--lambda-perf", dest="lambda_perf", type=float)
    p.add_argument("--lambda-stab", dest="lambda_stab", type=float)
    p.add_argument("--out")
    p.add_argument("--resume", help="run directory to continue")

    p = sub.add_parser("sweep", help="accuracy-only vs joint optimisation over seeds", **kw)
    _data_args(p)
    _optimizer_args(p)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--settings", nargs="+", choices=sorted(SWEEP_SETTINGS))
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="merge run artifacts into one JSON plus CSVs", **kw)
    p.add_argument("--inputs", nargs="+", required=True, help="output directories of other commands")
    p.add_argument("--out", required=True)
    return parser


def resolve_settings(args: argparse.Namespace) -> dict[str, Any]:
    settings = dict(DEFAULTS)
    given = vars(args)
    if given.get("config"):
        path = Path(given["config"])
        if not path.exists():
            raise CliError(f"config file not found: {path}")
        try:
            file_settings = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}: {exc}") from exc
        unknown = set(file_settings) - set(DEFAULTS) - _PATH_KEYS
        if unknown:
            raise CliError(f"{path}: unknown settings {sorted(unknown)}")
        settings.update(file_settings)
    settings.update(given)
    return settings


def effective_config(settings: dict[str, Any]) -> dict[str, Any]:
    return {k: settings[k] for k in sorted(settings)
            if not k.startswith("_") and k not in ("config", "verbose", "out", "resume")}


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _dump(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _read_json(path: str | Path, what: str) -> Any:
    path = Path(path)
    if not path.exists():
        raise CliError(f"{what} not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: {exc}") from exc


def _require_file(path: str | None, what: str) -> Path:
    if not path:
        raise CliError(f"missing {what}")
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}")
    return p


def make_backend(settings: dict[str, Any]) -> Backend:
    kind = settings["backend"]
    mock_params = None
    if kind == "mock":
        mp: dict[str, Any] = {"a": settings["mock_a"], "b": settings["mock_b"], "c": settings["mock_c"]}
        if settings.get("good_tokens"):
            mp["good_tokens"] = tuple(settings["good_tokens"])
        if settings.get("stable_tokens"):
            mp["stable_tokens"] = tuple(settings["stable_tokens"])
        mock_params = MockParams(**mp)
    config = BackendConfig(
        kind=kind,
        model_name=settings["model"] or ("mock" if kind == "mock" else ""),
        endpoint_url=settings["endpoint"],
        wants_probs=not settings["label_only"],
        temperature=settings["temperature"],
        max_retries=settings["max_retries"],
        timeout=settings["timeout"],
        seed=settings["seed"],
        mock_params=mock_params,
        concurrency=settings["concurrency"],
        api_key_env=settings["api_key_env"],
        cache_dir=settings["cache_dir"],
    )
    return Backend(config)


def load_inputs(settings: dict[str, Any], need_prompt: bool = True) -> tuple[Task, Dataset, Prompt | None]:
    task = load_task(_require_file(settings.get("task"), "task file"))
    dataset = load_dataset(_require_file(settings.get("data"), "dataset file"))
    violations = validate_dataset(dataset, task)
    if violations:
        shown = ", ".join(str(v) for v in violations[:10])
        raise CliError(f"dataset has {len(violations)} violation(s): {shown}")
    if settings.get("subset"):
        dataset = stratified_subset(dataset, settings["subset"], settings["subset_seed"])
    prompt = None
    if need_prompt:
        prompt = load_prompt(_require_file(settings.get("prompt"), "prompt file"))
        prompt.check_task(task)
    return task, dataset, prompt


def _provenance(task: Task, dataset: Dataset, backend: Backend) -> dict[str, Any]:
    return {
        "tool_version": __version__,
        "task": task.to_dict(),
        "dataset_sha256": dataset.content_hash(),
        "n_examples_in": len(dataset),
        "backend": {"kind": backend.config.kind, "model": backend.config.model_name,
                    "wants_probs": backend.config.wants_probs},
    }


def _records_from_summary_doc(doc: dict[str, Any]) -> EvalSummary:
    try:
        return EvalSummary.from_dict(doc["summary"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"malformed summary file: {exc}") from exc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_paraphrase(settings: dict[str, Any]) -> int:
    prompt = load_prompt(_require_file(settings.get("prompt"), "prompt file"))
    if settings.get("task"):
        prompt.check_task(load_task(_require_file(settings["task"], "task file")))
    with make_backend(settings) as backend:
        vs = generate_variants(backend, prompt, settings["k"], settings["seed"])
    save_variants(vs, Path(settings["out"]))
    return 0


def cmd_eval(settings: dict[str, Any]) -> int:
    task, dataset, prompt = load_inputs(settings)
    out = Path(settings["out"])
    with make_backend(settings) as backend:
        variants = None
        if settings.get("variants"):
            variants = load_variants(_require_file(settings["variants"], "variant file"))
            if variants.base.text != prompt.text:
                raise CliError("variant file's base prompt differs from --prompt")
        summary = evaluate_prompt(backend, task, prompt, dataset, settings["k"], settings["seed"],
                                  variants=variants, n_bins=settings["n_bins"])
        if variants is None:
            variants = generate_variants(backend, prompt, settings["k"], settings["seed"])
        doc = _provenance(task, dataset, backend)
    bins = None
    if summary.ece is not None:
        _, _, rb = metrics.ece_mce(summary.records, settings["n_bins"])
        bins = [b.to_dict() for b in rb]
    doc.update(summary=summary.to_dict(), reliability_bins=bins, variants=variants.to_dict())
    write_atomic(out / "summary.json", _dump(doc))
    write_atomic(out / "run.json", _dump({"command": "eval", "config": effective_config(settings)}))
    print(f"accuracy={summary.accuracy:.3f} flip_rate={summary.mean_flip_rate:.3f} "
          f"ece={'n/a' if summary.ece is None else f'{summary.ece:.3f}'} -> {out / 'summary.json'}")
    return 0


def cmd_conformal(settings: dict[str, Any]) -> int:
    doc = _read_json(settings["summary"], "summary file")
    summary = _records_from_summary_doc(doc)
    records = list(summary.records)
    if not records or any(r.base_prediction.probs is None for r in records):
        raise CliError("conformal prediction requires output probabilities; this summary comes from a "
                       "label-only backend (rerun eval without --label-only)")
    split_seed = settings["split_seed"] if settings.get("split_seed") is not None else settings["seed"]
    cal, ev = conformal.split_calibration(records, split_seed)
    model = conformal.fit(cal, settings["alpha"])
    ev_sets = conformal.attach_sets(model, ev)
    coverage, mean_size = conformal.coverage_stats(model, ev)
    result = {
        "tool_version": __version__,
        **model.to_dict(),
        "split_seed": split_seed,
        "n_eval": len(ev),
        "coverage": coverage,
        "mean_set_size": mean_size,
        "curve": [list(p) for p in conformal.coverage_accuracy_curve(ev, "confidence")],
        "curve_set_size": [list(p) for p in conformal.coverage_accuracy_curve(ev_sets, "set-size")],
        "calibration_ids": [r.example_id for r in cal],
        "records": [{"example_id": r.example_id, "conformal_set": list(r.conformal_set), "covered": r.covered}
                    for r in ev_sets],
    }
    out = Path(settings["out"])
    write_atomic(out / "conformal.json", _dump(result))
    write_atomic(out / "run.json", _dump({"command": "conformal", "config": effective_config(settings)}))
    print(f"alpha={model.alpha} coverage={coverage:.3f} mean_set_size={mean_size:.3f} -> {out / 'conformal.json'}")
    return 0


def join_conformal(summary: EvalSummary, conformal_doc: dict[str, Any] | None) -> list:
    """Records with conformal sets from ``conformal_doc`` attached where available."""
    from dataclasses import replace

    records = list(summary.records)
    if conformal_doc is None:
        return records
    sets = {r["example_id"]: r for r in conformal_doc.get("records", [])}
    return [replace(r, conformal_set=tuple(sets[r.example_id]["conformal_set"]),
                    covered=bool(sets[r.example_id]["covered"])) if r.example_id in sets else r
            for r in records]


def cmd_analyze(settings: dict[str, Any]) -> int:
    doc = _read_json(settings["summary"], "summary file")
    summary = _records_from_summary_doc(doc)
    if not summary.records:
        raise CliError("summary contains no records")
    conf_doc = _read_json(settings["conformal"], "conformal file") if settings.get("conformal") else None
    records = join_conformal(summary, conf_doc)
    report = analysis.stratify(records)
    scatter_summaries = [summary]
    for path in settings.get("scatter") or []:
        scatter_summaries.append(_records_from_summary_doc(_read_json(path, "summary file")))
    scatter = analysis.prompt_scatter(scatter_summaries)
    out = Path(settings["out"])
    write_atomic(out / "analysis.json", _dump({
        "tool_version": __version__,
        "prompt_id": summary.prompt_id,
        "has_conformal": conf_doc is not None,
        "stratified": report.to_dict(),
        "prompt_scatter": [r.to_dict() for r in scatter],
    }))
    write_atomic(out / "margin_by_flip.csv",
                 analysis.rows_to_csv(report.margin_by_fliprate_bins, analysis.MarginRow.FIELDS))
    write_atomic(out / "prompt_scatter.csv", analysis.rows_to_csv(scatter, analysis.ScatterRow.FIELDS))
    write_atomic(out / "run.json", _dump({"command": "analyze", "config": effective_config(settings)}))
    print(f"stable={report.n_stable} unstable={report.n_unstable} -> {out / 'analysis.json'}")
    return 0


def _optimizer_config(settings: dict[str, Any], lambda_perf: float, lambda_stab: float, seed: int) -> OptimizerConfig:
    return OptimizerConfig(
        objective=ObjectiveConfig(lambda_perf, lambda_stab),
        k_variants=settings["k"],
        n_candidates=settings["candidates"],
        max_iterations=settings["iters"],
        patience=settings["patience"],
        n_failure_examples=settings["failures"],
        seed=seed,
        n_bins=settings["n_bins"],
    )


def _run_optimizer(settings, backend, task, dataset, prompt, cfg, out: Path, resume: bool) -> dict[str, Any]:
    result = run(cfg, backend, task, prompt, dataset, run_dir=out, resume=resume,
                 fresh_eval=settings["fresh_eval"], extra_meta={"cli": effective_config(settings),
                                                                "tool_version": __version__})
    summary = {
        "tool_version": __version__,
        "final_prompt": result.final_prompt.to_dict(),
        "n_iterations": len(result.trajectory),
        "n_accepted": sum(r.accepted for r in result.trajectory),
        "acc_start": result.start_summary.accuracy,
        "flip_start": result.start_summary.mean_flip_rate,
        "J_start": objective(result.start_summary, cfg.objective),
        "acc_end": result.final_summary.accuracy,
        "flip_end": result.final_summary.mean_flip_rate,
        "flip_end_insample": result.final_summary.mean_flip_rate,
        "flip_end_fresh": result.fresh_summary.mean_flip_rate if result.fresh_summary else None,
        "J_end": objective(result.final_summary, cfg.objective),
    }
    write_atomic(out / "result.json", _dump(summary))
    return summary


def cmd_optimize(settings: dict[str, Any]) -> int:
    resume = bool(settings.get("resume"))
    out = settings.get("resume") or settings.get("out")
    if not out:
        raise CliError("optimize needs --out or --resume")
    out = Path(out)
    if resume:
        if not (out / "run.json").exists():
            raise CliError(f"nothing to resume in {out}")
        prior = json.loads((out / "run.json").read_text(encoding="utf-8")).get("cli", {})
        # the original run's settings fill anything not given on this command line
        settings = {**settings, **{k: v for k, v in prior.items() if k not in settings["_given"]}}
    task, dataset, prompt = load_inputs(settings)
    cfg = _optimizer_config(settings, settings["lambda_perf"], settings["lambda_stab"], settings["seed"])
    with make_backend(settings) as backend:
        summary = _run_optimizer(settings, backend, task, dataset, prompt, cfg, out, resume)
    print(f"acc {summary['acc_start']:.3f} -> {summary['acc_end']:.3f}, "
          f"flip {summary['flip_start']:.3f} -> {summary['flip_end']:.3f} ({out})")
    return 0


def fmt_mean_std(values: Sequence[float]) -> str:
    """``mean ± std`` with 3 decimals; std is the population value over seeds."""
    if not values:
        return ""
    arr = np.asarray(values, dtype=float)
    return f"{arr.mean():.3f} ± {arr.std(ddof=0):.3f}"


SWEEP_COLUMNS = ("task", "model", "setting", "seed", "acc_start", "acc_end", "flip_start", "flip_end",
                 "flip_end_fresh", "status")
AGGREGATE_COLUMNS = ("task", "model", "setting", "n_runs", "acc_end", "flip_end", "acc_start", "flip_start")


def cmd_sweep(settings: dict[str, Any]) -> int:
    if settings.get("subset") is None:
        settings = {**settings, "subset": 50}
    task, dataset, prompt = load_inputs(settings)
    out = Path(settings["out"])
    rows: list[dict[str, Any]] = []
    with make_backend(settings) as backend:
        model = backend.config.model_name
        for setting in settings["settings"]:
            lp, ls = SWEEP_SETTINGS[setting]
            for seed in settings["seeds"]:
                cfg = _optimizer_config(settings, lp, ls, seed)
                run_dir = out / "runs" / f"{setting}-seed{seed}"
                row: dict[str, Any] = {"task": task.id, "model": model, "setting": setting, "seed": seed}
                try:
                    res = _run_optimizer(settings, backend, task, dataset, prompt, cfg, run_dir, False)
                except (BackendError, VariantGenerationError, CandidateGenerationError) as exc:
                    log.error("sweep run %s/%s failed: %s", setting, seed, exc)
                    row.update(status=f"error: {exc}")
                else:
                    row.update({k: res[k] for k in ("acc_start", "acc_end", "flip_start", "flip_end",
                                                     "flip_end_fresh")}, status="ok")
                rows.append(row)
    agg = aggregate_sweep(rows)
    write_atomic(out / "sweep.csv", _to_csv(rows, SWEEP_COLUMNS))
    write_atomic(out / "sweep_summary.csv", _to_csv(agg, AGGREGATE_COLUMNS))
    write_atomic(out / "run.json", _dump({"command": "sweep", "config": effective_config(settings),
                                          **_provenance(task, dataset, backend)}))
    for a in agg:
        print(f"{a['task']} {a['model']} {a['setting']:>8}: acc_end {a['acc_end']}  flip_end {a['flip_end']}")
    if rows and all(r["status"] != "ok" for r in rows):
        raise CliError("every sweep run failed", code=2)
    return 0


def aggregate_sweep(rows: Sequence[dict[str, Any]]) -> list[dict[str, Any]]:
    groups: dict[tuple, list[dict[str, Any]]] = {}
    for r in rows:
        groups.setdefault((r["task"], r["model"], r["setting"]), []).append(r)
    out = []
    for (task, model, setting), rs in groups.items():
        ok = [r for r in rs if r["status"] == "ok"]
        out.append({
            "task": task, "model": model, "setting": setting, "n_runs": len(ok),
            **{col: fmt_mean_std([r[col] for r in ok]) for col in ("acc_end", "flip_end", "acc_start", "flip_start")},
        })
    return out


def _to_csv(rows: Sequence[dict[str, Any]], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({c: ("" if r.get(c) is None else r.get(c)) for c in columns})
    return buf.getvalue()


def cmd_report(settings: dict[str, Any]) -> int:
    sources: dict[str, Any] = {}
    trajectory_rows: list[dict[str, Any]] = []
    scatter_rows: list[dict[str, Any]] = []
    for d in settings["inputs"]:
        root = Path(d)
        if not root.is_dir():
            raise CliError(f"input directory not found: {root}")
        entry: dict[str, Any] = {}
        summary_path = root / "summary.json"
        if summary_path.exists():
            doc = _read_json(summary_path, "summary file")
            entry["summary"] = {k: v for k, v in doc["summary"].items() if k != "records"}
            scatter_rows.append({"source": d, "prompt_id": doc["summary"]["prompt_id"],
                                 "accuracy": doc["summary"]["accuracy"],
                                 "mean_flip_rate": doc["summary"]["mean_flip_rate"]})
        for name in ("conformal", "analysis", "result"):
            path = root / f"{name}.json"
            if path.exists():
                data = _read_json(path, f"{name} file")
                if name == "conformal":
                    data = {k: v for k, v in data.items() if k not in ("records", "calibration_ids")}
                entry[name] = data
        for path in sorted([root / "trajectory.jsonl", *sorted(root.glob("runs/*/trajectory.jsonl"))]):
            if not path.exists():
                continue
            run_name = str(path.parent.relative_to(root)) if path.parent != root else "."
            for line in path.read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                rec = json.loads(line)
                trajectory_rows.append({"source": d, "run": run_name, "iteration": rec["iteration"],
                                        "kind": "incumbent", "prompt_id": rec["incumbent_prompt_id"],
                                        "accuracy": rec["incumbent_accuracy"],
                                        "flip_rate": rec["incumbent_flip_rate"], "J": rec["incumbent_J"],
                                        "accepted": ""})
                for i, c in enumerate(rec["candidates"]):
                    trajectory_rows.append({"source": d, "run": run_name, "iteration": rec["iteration"],
                                            "kind": "candidate", "prompt_id": c["prompt_id"],
                                            "accuracy": c["accuracy"], "flip_rate": c["flip_rate"], "J": c["J"],
                                            "accepted": rec["accepted"] and i == rec["best_index"]})
        sweep_path = root / "sweep_summary.csv"
        if sweep_path.exists():
            entry["sweep_summary"] = list(csv.DictReader(io.StringIO(sweep_path.read_text(encoding="utf-8"))))
        if not entry and not any(r["source"] == d for r in trajectory_rows):
            raise CliError(f"no recognised artifacts in {root}")
        sources[d] = entry
    out = Path(settings["out"])
    write_atomic(out / "report.json", _dump({"tool_version": __version__, "sources": sources}))
    write_atomic(out / "trajectory.csv", _to_csv(trajectory_rows, (
        "source", "run", "iteration", "kind", "prompt_id", "accuracy", "flip_rate", "J", "accepted")))
    write_atomic(out / "prompt_scatter.csv", _to_csv(scatter_rows, ("source", "prompt_id", "accuracy",
                                                                    "mean_flip_rate")))
    print(f"merged {len(sources)} source(s) -> {out / 'report.json'}")
    return 0


COMMANDS = {
    "paraphrase": cmd_paraphrase,
    "eval": cmd_eval,
    "conformal": cmd_conformal,
    "analyze": cmd_analyze,
    "optimize": cmd_optimize,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        settings = resolve_settings(args)
        settings["_given"] = frozenset(vars(args))
        code = COMMANDS[args.command](settings)
    except CliError as exc:
        print(f"promptstab {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"promptstab {args.command}: file not found: {exc.filename}", file=sys.stderr)
        return 1
    except (ConfigError, PlaceholderError) as exc:
        print(f"promptstab {args.command}: configuration error: {exc}", file=sys.stderr)
        return 1
    except (BackendError, VariantGenerationError, CandidateGenerationError) as exc:
        print(f"promptstab {args.command}: backend failure: {exc}", file=sys.stderr)
        return 2
    except PromptStabError as exc:
        print(f"promptstab {args.command}: {exc}", file=sys.stderr)
        return 1
    return code


if __name__ == "__main__":
    sys.exit(main())
