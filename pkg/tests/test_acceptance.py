"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line."""

from __future__ import annotations

import csv
import itertools
import json
import shutil
import time
from dataclasses import replace
from fractions import Fraction

import numpy as np

from promptstab import analysis, conformal, metrics
from promptstab.backend import Backend, BackendConfig, MockParams
from promptstab.cli import main
from promptstab.domain import Dataset, EvalRecord, EvalSummary, Example, ObjectiveConfig, Prediction, Prompt, Task
from promptstab.optimizer import OptimizerConfig, evaluate_prompt, objective_exact, run, select_candidate
from promptstab.paraphrase import generate_variants

from conftest import ACCEPTANCE_LINES, BASE_TEXT, make_dataset, make_task

PLANTED = dict(a=4.0, b=2.0, c=0.8)


def report(n: int, name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} C{n}: {name} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def prob_record(gold: str, probs: dict[str, float], example_id: str, flip_rate: float = 0.0) -> EvalRecord:
    base = Prediction.from_probs(probs, list(probs))
    return EvalRecord(example_id, gold, base, (base,), flip_rate > 0, flip_rate, metrics.margin(base),
                      base.label == gold)


# -- C1 -------------------------------------------------------------------------


def brute_flip(base: list, variants: list[list]) -> list[tuple[bool, float]]:
    """Count disagreements by enumerating every (example, variant) pair."""
    out = []
    for i in range(len(base)):
        k_total, k_diff = 0, 0
        for k in range(len(variants)):
            k_total += 1
            if variants[k][i] != base[i]:
                k_diff += 1
        out.append((k_diff > 0, Fraction(k_diff, k_total)))
    return out


FULL_ENUMERATION_CAP = 2**14


def test_c1_flip_rate_oracle_equivalence():
    start = time.perf_counter()
    n_instances = 0
    mismatches = 0
    for n_labels in (1, 2, 3):
        labels = "ABC"[:n_labels]
        for n in range(1, 7):
            for k in range(1, 4):
                cells = n * (k + 1)
                if n_labels**cells <= FULL_ENUMERATION_CAP:
                    # every label assignment to every (prompt, example) cell
                    instances = itertools.product(labels, repeat=cells)
                else:
                    # every possible per-example column at every position; other
                    # positions cycle through the column space so they vary too
                    columns = list(itertools.product(labels, repeat=k + 1))
                    instances = (
                        tuple(itertools.chain.from_iterable(zip(*[
                            col if pos == j else columns[(c + 7 * j + 1) % len(columns)] for j in range(n)])))
                        for pos in range(n) for c, col in enumerate(columns))
                for flat in instances:
                    grid = [list(flat[r * n:(r + 1) * n]) for r in range(k + 1)]
                    base, variants = grid[0], grid[1:]
                    got = metrics.flip_stats(base, variants)
                    want = brute_flip(base, variants)
                    n_instances += 1
                    if [(f, Fraction(r).limit_denominator(3)) for f, r in got] != want:
                        mismatches += 1
                    elif any(r != float(w[1]) for (_, r), w in zip(got, want)):
                        mismatches += 1
    elapsed = time.perf_counter() - start
    report(1, "flip-rate oracle equivalence", mismatches == 0 and elapsed < 10,
           f"{n_instances} instances, {mismatches} mismatches, {elapsed:.2f}s (limit 10s)")


# -- C2 -------------------------------------------------------------------------


def calibrated_binary(n: int, rng: np.random.Generator) -> list[EvalRecord]:
    p_yes = rng.uniform(0.0, 1.0, size=n)
    gold_yes = rng.uniform(size=n) < p_yes
    return [prob_record("Yes" if g else "No", {"Yes": float(p), "No": float(1 - p)}, str(i))
            for i, (p, g) in enumerate(zip(p_yes, gold_yes))]


def test_c2_conformal_coverage():
    start = time.perf_counter()
    coverages = []
    for seed in range(20):
        recs = calibrated_binary(2000, np.random.default_rng(1000 + seed))
        cal, ev = conformal.split_calibration(recs, seed)
        model = conformal.fit(cal, 0.1)
        coverages.append(conformal.coverage_stats(model, ev)[0])
    inside = sum(0.88 <= c <= 0.94 for c in coverages)
    elapsed = time.perf_counter() - start
    report(2, "conformal coverage", inside >= 18 and elapsed < 30,
           f"{inside}/20 seeds in [0.88, 0.94], range {min(coverages):.3f}-{max(coverages):.3f}, "
           f"{elapsed:.2f}s (limit 30s)")


# -- C3 -------------------------------------------------------------------------


def test_c3_conformal_monotonicity_and_nesting():
    rng = np.random.default_rng(3)
    alphas = (0.05, 0.1, 0.15, 0.2)
    violations = 0
    for inst in range(100):
        n_labels = int(rng.integers(2, 5))
        labels = [f"L{j}" for j in range(n_labels)]
        n = int(rng.integers(10, 80))
        recs = []
        for i in range(n):
            w = rng.dirichlet(np.ones(n_labels) * float(rng.uniform(0.3, 3.0)))
            gold = labels[int(rng.integers(n_labels))]
            recs.append(prob_record(gold, dict(zip(labels, map(float, w))), str(i)))
        cal, ev = conformal.split_calibration(recs, inst)
        models = {a: conformal.fit(cal, a) for a in alphas}
        for r in ev:
            if not set(conformal.predict_set(models[0.2], r.base_prediction)) <= set(
                    conformal.predict_set(models[0.05], r.base_prediction)):
                violations += 1
        covs = [conformal.coverage_stats(models[a], ev)[0] for a in alphas]
        if any(later > earlier for earlier, later in zip(covs, covs[1:])):
            violations += 1
    report(3, "conformal monotonicity/nestedness", violations == 0,
           f"100 instances, alphas {alphas}, {violations} violations")


# -- C4 -------------------------------------------------------------------------


def simulated(n: int, rng: np.random.Generator, conf_low: float, gap: float) -> list[EvalRecord]:
    conf = rng.uniform(conf_low, 1.0, size=n)
    correct = rng.uniform(size=n) < (conf - gap)
    return [prob_record("Yes" if ok else "No", {"Yes": float(c), "No": float(1 - c)}, str(i))
            for i, (c, ok) in enumerate(zip(conf, correct))]


def test_c4_calibration_sanity():
    rng = np.random.default_rng(4)
    ece_cal, _, _ = metrics.ece_mce(simulated(10_000, rng, 0.5, 0.0), 10)
    ece_over, _, _ = metrics.ece_mce(simulated(10_000, rng, 0.7, 0.2), 10)
    ok = ece_cal < 0.02 and 0.17 <= ece_over <= 0.23
    report(4, "calibration sanity", ok,
           f"calibrated ECE {ece_cal:.4f} (< 0.02), overconfident ECE {ece_over:.4f} (in [0.17, 0.23])")


# -- C5 -------------------------------------------------------------------------


def random_pool(rng: np.random.Generator) -> list[EvalSummary]:
    n = int(rng.integers(5, 60))
    k = int(rng.integers(1, 4))
    pool = []
    for j in range(int(rng.integers(2, 9))):
        # few distinct values so ties are common
        acc = int(rng.integers(0, 4)) * n // 3 / n
        flip = int(rng.integers(0, n * k + 1)) // 4 * 4 / (n * k) if n * k >= 4 else 0.0
        pool.append(EvalSummary(prompt_id=f"c{j}", n_examples=n, accuracy=acc, macro_f1=acc,
                                mean_flip_rate=min(flip, 1.0), records=()))
    return pool


def ranking(keys: list) -> list[int]:
    return sorted(range(len(keys)), key=lambda i: (-keys[i], i))


def test_c5_objective_mode_equivalence():
    rng = np.random.default_rng(5)
    acc_only_mismatch = 0
    for _ in range(50):
        pool = random_pool(rng)
        chosen = select_candidate(pool, ObjectiveConfig(1.0, 0.0))
        best_acc = max(s.accuracy for s in pool)
        by_accuracy = next(i for i, s in enumerate(pool) if s.accuracy == best_acc)
        acc_only_mismatch += chosen != by_accuracy
    rank_mismatch = 0
    for _ in range(500):
        pool = random_pool(rng)
        lp, ls = Fraction(int(rng.integers(0, 5)), 4), Fraction(int(rng.integers(0, 5)), 4)
        if lp + ls == 0:
            ls = Fraction(1)
        cfg = ObjectiveConfig(float(lp), float(ls))
        bounded = [objective_exact(s.accuracy, s.mean_flip_rate, cfg) for s in pool]
        negative = [lp * Fraction(s.accuracy).limit_denominator(10**6)
                    - ls * Fraction(s.mean_flip_rate).limit_denominator(10**6) for s in pool]
        rank_mismatch += ranking(bounded) != ranking(negative)
        rank_mismatch += select_candidate(pool, cfg) != ranking(negative)[0]
    report(5, "objective-mode equivalence", acc_only_mismatch == 0 and rank_mismatch == 0,
           f"acc-only selection mismatches {acc_only_mismatch}/50, ranking mismatches {rank_mismatch}/500 pools")


# -- C6 -------------------------------------------------------------------------


def write_workspace(root, n_examples: int):
    task = make_task()
    (root / "task.json").write_text(json.dumps(task.to_dict()))
    with (root / "data.jsonl").open("w") as fh:
        for ex in make_dataset(n_examples):
            fh.write(json.dumps(ex.to_dict()) + "\n")
    (root / "prompt.txt").write_text(BASE_TEXT + "\n")


def test_c6_e3_direction_on_mock(tmp_path):
    params = MockParams(**PLANTED)
    assert not set(params.good_tokens) & set(params.stable_tokens)
    write_workspace(tmp_path, 150)
    start = time.perf_counter()
    code = main(["sweep", "--task", str(tmp_path / "task.json"), "--data", str(tmp_path / "data.jsonl"),
                 "--prompt", str(tmp_path / "prompt.txt"), "--subset", "50", "--k", "3", "--candidates", "4",
                 "--iters", "10", "--seeds", "1", "2", "3", "--mock-a", "4", "--mock-b", "2", "--mock-c", "0.8",
                 "--out", str(tmp_path / "sweep")])
    elapsed = time.perf_counter() - start
    rows = list(csv.DictReader((tmp_path / "sweep" / "sweep.csv").open()))
    flips = {(r["setting"], int(r["seed"])): float(r["flip_end"]) for r in rows if r["status"] == "ok"}
    fresh = {(r["setting"], int(r["seed"])): float(r["flip_end_fresh"]) for r in rows if r["status"] == "ok"}
    seeds = (1, 2, 3)
    wins = sum(flips[("joint", s)] < flips[("acc-only", s)] for s in seeds)
    acc_mean = np.mean([flips[("acc-only", s)] for s in seeds])
    joint_mean = np.mean([flips[("joint", s)] for s in seeds])
    gap = acc_mean - joint_mean
    fresh_gap = np.mean([fresh[("acc-only", s)] - fresh[("joint", s)] for s in seeds])
    ok = code == 0 and wins >= 2 and gap >= 0.05 and elapsed < 300
    report(6, "E3 direction on mock", ok,
           f"joint < acc-only in {wins}/3 seeds, mean flip_end acc-only {acc_mean:.3f} vs joint {joint_mean:.3f} "
           f"(gap {gap:.3f}, fresh-paraphrase gap {fresh_gap:.3f}), {elapsed:.1f}s (limit 300s)")


# -- C7 -------------------------------------------------------------------------


def test_c7_e1_direction_on_mock():
    be = Backend(BackendConfig(kind="mock", seed=0, mock_params=MockParams(**PLANTED)))
    s = evaluate_prompt(be, make_task(), Prompt("base", BASE_TEXT), make_dataset(500), k=3, seed=0)
    rows = analysis.margin_flip_table(s.records)
    medians = [r.median for r in rows]
    non_increasing = all(b <= a for a, b in zip(medians, medians[1:]))
    rho, p = metrics.spearman([r.margin for r in s.records], [r.flip_rate for r in s.records])
    table = ", ".join(f"{r.flip_rate:.2f}:{r.median:.3f}(n={r.count})" for r in rows)
    report(7, "E1 direction on mock", non_increasing and rho < 0,
           f"median margin by flip rate [{table}], Spearman(margin, flip_rate) = {rho:.3f} (p={p:.2g})")


# -- C8 -------------------------------------------------------------------------


def test_c8_planted_setsize_correlation():
    rng = np.random.default_rng(8)
    labels = ["A", "B", "C", "D"]
    recs = []
    for i in range(200):
        flip_rate = int(rng.integers(0, 4)) / 3
        noise = int(rng.choice([-1, 0, 1], p=[0.15, 0.7, 0.15]))
        size = int(np.clip(1 + round(2 * flip_rate) + noise, 1, 4))
        rec = prob_record("A", {"A": 0.55, "B": 0.25, "C": 0.15, "D": 0.05}, f"e{i}", flip_rate)
        rec = replace(rec, variant_predictions=(Prediction("B"),) if flip_rate else (Prediction("A"),))
        recs.append(replace(rec, conformal_set=tuple(labels[:size]), covered=True))
    rep = analysis.stratify(recs)
    rho = rep.spearman_flip_setsize.rho
    report(8, "stratified planted correlation", rho is not None and rho > 0.5,
           f"n=200, spearman_flip_setsize rho = {rho:.3f} (p={rep.spearman_flip_setsize.p_value:.2g})")


# -- C9 -------------------------------------------------------------------------


def test_c9_pss_flip_correlation():
    task = make_task()
    ds = make_dataset(300)
    rhos = []
    for seed in (0, 1, 2):
        be = Backend(BackendConfig(kind="mock", seed=seed, mock_params=MockParams(**PLANTED)))
        base = Prompt("base", BASE_TEXT)
        variants = generate_variants(be, base, k=4, seed=seed).variants
        base_preds = [be.predict(task, base, ex) for ex in ds]
        var_preds = [[be.predict(task, v, ex, base=base) for ex in ds] for v in variants]
        flip = [rate for _, rate in metrics.flip_stats(base_preds, var_preds)]
        pss = metrics.pss([base_preds, *var_preds])
        rhos.append(metrics.spearman(flip, pss)[0])
    ok = all(r > 0.8 for r in rhos)
    report(9, "PSS-flip correlation", ok,
           "5 prompts (base + 4 paraphrases), n=300, per-run Spearman " + ", ".join(f"{r:.3f}" for r in rhos))


# -- C10 ------------------------------------------------------------------------


def run_every_command(ws) -> dict[str, bytes]:
    d = ["--task", str(ws / "task.json"), "--data", str(ws / "data.jsonl"), "--prompt", str(ws / "prompt.txt")]
    out = ws / "out"
    commands = [
        ["paraphrase", "--prompt", str(ws / "prompt.txt"), "--k", "3", "--seed", "1", "--out", str(out / "v.json")],
        ["eval", *d, "--seed", "1", "--out", str(out / "eval")],
        ["conformal", "--summary", str(out / "eval" / "summary.json"), "--seed", "1", "--out", str(out / "conf")],
        ["analyze", "--summary", str(out / "eval" / "summary.json"), "--conformal",
         str(out / "conf" / "conformal.json"), "--out", str(out / "an")],
        ["optimize", *d, "--seed", "1", "--subset", "30", "--iters", "3", "--out", str(out / "opt")],
        ["sweep", *d, "--subset", "30", "--iters", "2", "--seeds", "1", "2", "--out", str(out / "sweep")],
        ["report", "--inputs", str(out / "eval"), str(out / "conf"), str(out / "an"), str(out / "opt"),
         str(out / "sweep"), "--out", str(out / "report")],
    ]
    for cmd in commands:
        assert main(cmd) == 0, cmd
    files = {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}
    shutil.rmtree(out)
    return files


def test_c10_cli_determinism(tmp_path):
    write_workspace(tmp_path, 60)
    first = run_every_command(tmp_path)
    second = run_every_command(tmp_path)
    differing = sorted(name for name in first.keys() | second.keys() if first.get(name) != second.get(name))
    report(10, "CLI determinism", not differing and len(first) > 0,
           f"7 commands, {len(first)} output files compared byte-for-byte, {len(differing)} differ"
           + (f": {differing[:5]}" if differing else ""))


# -- C11 ------------------------------------------------------------------------


def test_c11_incumbent_monotonicity_and_budget():
    rng = np.random.default_rng(11)
    task = Task("t", ("yes", "no", "maybe"), ("text",))
    not_increasing = 0
    over_budget = 0
    accepted_total = 0
    iterations = 0
    for r in range(100):
        params = MockParams(a=float(rng.uniform(1, 6)), b=float(rng.uniform(0.5, 3)), c=float(rng.uniform(0, 1)))
        be = Backend(BackendConfig(kind="mock", seed=int(rng.integers(1 << 30)), mock_params=params))
        n = int(rng.integers(4, 16))
        ds = Dataset(tuple(Example(f"r{r}e{i}", {"text": f"item {i}"}, task.label_set[int(rng.integers(3))])
                           for i in range(n)))
        lp = float(rng.integers(0, 5)) / 4
        ls = float(rng.integers(1 if lp == 0 else 0, 5)) / 4
        cfg = OptimizerConfig(ObjectiveConfig(lp, ls), k_variants=int(rng.integers(1, 4)),
                              n_candidates=int(rng.integers(1, 5)), max_iterations=int(rng.integers(1, 5)),
                              patience=int(rng.integers(1, 4)), seed=int(rng.integers(1000)))
        result = run(cfg, be, task, Prompt("p", "Label this: {text}"), ds)
        js = [Fraction(result.trajectory[0].incumbent_J)] if result.trajectory else []
        for rec in result.trajectory:
            iterations += 1
            if rec.n_calls > (1 + cfg.n_candidates) * (1 + cfg.k_variants) * n:
                over_budget += 1
            if rec.accepted:
                accepted_total += 1
                js.append(Fraction(rec.best.J))
        not_increasing += any(b <= a for a, b in zip(js, js[1:]))
    report(11, "incumbent monotonicity and budget", not_increasing == 0 and over_budget == 0,
           f"100 runs, {iterations} iterations, {accepted_total} acceptances, "
           f"{not_increasing} non-increasing sequences, {over_budget} iterations over budget")
