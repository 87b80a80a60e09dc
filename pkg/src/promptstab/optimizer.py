"""Accuracy/stability prompt optimisation loop.

Each iteration evaluates the incumbent prompt on accuracy and on flip rate
across paraphrases, collects high-flip and misclassified examples, asks a
generator for candidate rewrites conditioned on those failures, scores every
candidate on the joint objective and accepts the best one only if it strictly
beats the incumbent.
"""

from __future__ import annotations

import json
import logging
import os
import random
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Sequence

from . import metrics
from .backend import Backend
from .domain import (INVALID_LABEL, Dataset, EvalRecord, EvalSummary, ObjectiveConfig, Prediction, Prompt,
                     PromptVariantSet, Provenance, Task, placeholders, validate_dataset)
from .errors import BackendError, CandidateGenerationError, ConfigError, InvalidOutput
from .paraphrase import DEFAULT_K, generate_variants
from .textgen import load_template, parse_string_list, stable_seed

log = logging.getLogger(__name__)

EXCERPT_CHARS = 500
CANDIDATE_META_PROMPT = "candidates_v1.txt"
MAX_GENERATION_ROUNDS = 4
FRESH_SEED_OFFSET = 7919


@dataclass(frozen=True)
class OptimizerConfig:
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    k_variants: int = DEFAULT_K
    n_candidates: int = 4
    max_iterations: int = 10
    patience: int = 3
    n_failure_examples: int = 5
    seed: int = 0
    n_bins: int = metrics.DEFAULT_N_BINS

    def __post_init__(self) -> None:
        if self.n_candidates < 1:
            raise ConfigError("n_candidates must be >= 1")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.k_variants < 1:
            raise ConfigError("k_variants must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        return {
            "objective": self.objective.to_dict(),
            "k_variants": self.k_variants,
            "n_candidates": self.n_candidates,
            "max_iterations": self.max_iterations,
            "patience": self.patience,
            "n_failure_examples": self.n_failure_examples,
            "seed": self.seed,
            "n_bins": self.n_bins,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> OptimizerConfig:
        d = dict(d)
        d["objective"] = ObjectiveConfig.from_dict(d["objective"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------


def objective_exact(accuracy: float, flip_rate: float, cfg: ObjectiveConfig) -> Fraction:
    """J in exact rational arithmetic.

    Stability is ``1 - flip_rate``. Against the unbounded ``-flip_rate`` form
    this shifts every score by exactly ``lambda_stab``, and exact arithmetic
    keeps that shift from perturbing rankings through rounding. Accuracy and
    flip rate are ratios of counts, so they are first recovered as the
    nearest fraction with denominator at most ``RATIO_DENOMINATOR``.
    """
    lp, ls = _ratio(cfg.lambda_perf), _ratio(cfg.lambda_stab)
    return lp * _ratio(accuracy) + ls * (1 - _ratio(flip_rate))


RATIO_DENOMINATOR = 10**6


def _ratio(x: float) -> Fraction:
    return Fraction(x).limit_denominator(RATIO_DENOMINATOR)


def objective(summary: EvalSummary, cfg: ObjectiveConfig) -> float:
    return float(objective_exact(summary.accuracy, summary.mean_flip_rate, cfg))


def select_candidate(summaries: Sequence[EvalSummary], cfg: ObjectiveConfig) -> int:
    """Index of the highest-J summary; the lowest index wins ties."""
    if not summaries:
        raise ValueError("no candidates")
    scores = [objective_exact(s.accuracy, s.mean_flip_rate, cfg) for s in summaries]
    best = max(scores)
    return scores.index(best)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _raise_transport(preds: list) -> None:
    for p in preds:
        if isinstance(p, BackendError) and not isinstance(p, InvalidOutput):
            raise p


def evaluate_prompt(backend: Backend, task: Task, prompt: Prompt, dataset: Dataset, k: int = DEFAULT_K,
                    seed: int = 0, *, variants: PromptVariantSet | None = None,
                    n_bins: int = metrics.DEFAULT_N_BINS) -> EvalSummary:
    """Run the base prompt and its ``k`` paraphrases on every example.

    Examples whose base output cannot be mapped to a label are left out of
    every metric and listed in ``invalid_example_ids``. An unmappable variant
    output becomes the invalid-output sentinel and counts as a flip.
    Probability metrics are filled only when every base prediction has probs.
    """
    prompt.check_task(task)
    vs = variants if variants is not None else generate_variants(backend, prompt, k, seed)
    examples = list(dataset)
    base_preds = backend.predict_batch(task, prompt, examples)
    _raise_transport(base_preds)
    per_variant = []
    for v in vs.variants:
        preds = backend.predict_batch(task, v, examples, base=prompt)
        _raise_transport(preds)
        per_variant.append([p if isinstance(p, Prediction) else Prediction(INVALID_LABEL, None, p.raw_output)
                            for p in preds])

    keep = [i for i, p in enumerate(base_preds) if isinstance(p, Prediction)]
    invalid_ids = tuple(examples[i].id for i, p in enumerate(base_preds) if not isinstance(p, Prediction))
    if not keep:
        raise BackendError(f"no valid base predictions for prompt {prompt.id!r}")
    kept_base = [base_preds[i] for i in keep]
    kept_variants = [[preds[i] for i in keep] for preds in per_variant]
    flips = metrics.flip_stats(kept_base, kept_variants)

    records = []
    for j, i in enumerate(keep):
        ex, bp = examples[i], base_preds[i]
        gold = ex.gold_label.strip()
        records.append(EvalRecord(
            example_id=ex.id,
            gold_label=gold,
            base_prediction=bp,
            variant_predictions=tuple(preds[j] for preds in kept_variants),
            flip=flips[j][0],
            flip_rate=flips[j][1],
            margin=metrics.margin(bp) if bp.probs is not None else None,
            correct=bp.label == gold,
        ))

    f1_scores, absent = metrics.per_label_f1(records, task.label_set)
    prob_metrics: dict[str, float | None] = dict(log_loss=None, brier=None, ece=None, mce=None, mean_jsd=None)
    if all(r.base_prediction.probs is not None for r in records):
        ece, mce, _ = metrics.ece_mce(records, n_bins)
        divs = [metrics.jsd(r.base_prediction.probs, vp.probs)
                for r in records for vp in r.variant_predictions if vp.probs is not None]
        prob_metrics.update(log_loss=metrics.log_loss(records), brier=metrics.brier(records), ece=ece, mce=mce,
                            mean_jsd=sum(divs) / len(divs) if divs else None)
    return EvalSummary(
        prompt_id=prompt.id,
        prompt_text=prompt.text,
        n_examples=len(records),
        k=vs.k,
        accuracy=metrics.accuracy(records),
        macro_f1=sum(f1_scores.values()) / len(f1_scores),
        mean_flip_rate=sum(r.flip_rate for r in records) / len(records),
        records=tuple(records),
        n_invalid=len(invalid_ids),
        invalid_example_ids=invalid_ids,
        f1_absent_labels=tuple(absent),
        n_bins=n_bins,
        **prob_metrics,
    )


# ---------------------------------------------------------------------------
# Failure identification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FailureExcerpt:
    example_id: str
    snippet: str
    gold_label: str
    base_label: str
    variant_labels: tuple[str, ...]
    flip_rate: float

    def render(self) -> str:
        return (f"- [{self.example_id}] gold={self.gold_label} base={self.base_label} "
                f"variants={list(self.variant_labels)} flip_rate={self.flip_rate:.2f}\n  {self.snippet}")


@dataclass(frozen=True)
class Failures:
    high_flip: tuple[FailureExcerpt, ...]
    misclassified: tuple[FailureExcerpt, ...]


def _excerpt(record: EvalRecord, example, max_chars: int) -> FailureExcerpt:
    text = " | ".join(f"{k}: {v}" for k, v in example.inputs.items()) if example is not None else ""
    text = re.sub(r"\s+", " ", text).strip()
    if len(text) > max_chars:
        text = text[: max_chars - 3] + "..."
    return FailureExcerpt(record.example_id, text, record.gold_label, record.base_prediction.label,
                          tuple(p.label for p in record.variant_predictions), record.flip_rate)


def identify_failures(summary: EvalSummary, dataset: Dataset, n_failure_examples: int,
                      max_chars: int = EXCERPT_CHARS) -> Failures:
    """Top high-flip examples (by flip rate, then id) and misclassified ones, each truncated."""
    by_id = dataset.by_id()
    flipped = sorted((r for r in summary.records if r.flip_rate > 0), key=lambda r: (-r.flip_rate, r.example_id))
    wrong = [r for r in summary.records if not r.correct]
    n = max(0, n_failure_examples)
    return Failures(
        high_flip=tuple(_excerpt(r, by_id.get(r.example_id), max_chars) for r in flipped[:n]),
        misclassified=tuple(_excerpt(r, by_id.get(r.example_id), max_chars) for r in wrong[:n]),
    )


# ---------------------------------------------------------------------------
# Candidate generation
# ---------------------------------------------------------------------------

_CLARIFY = (
    "Base the decision on the information given in the input.",
    "Consider the whole input before deciding.",
    "If the information is incomplete, choose the closest label.",
    "Focus on what is documented rather than what is implied.",
    "Ignore details that do not bear on the question.",
)
_FORMAT = (
    "Respond with a single label and nothing else.",
    "Output one of the allowed labels verbatim.",
    "Do not add any explanation to the label.",
    "Write the label on one line.",
)


def _words(text: str) -> set[str]:
    return {w.casefold() for w in re.findall(r"\w+", text)}


def _mock_candidates(backend: Backend, current: Prompt, failures: Failures, n: int, seed: int) -> list[str]:
    """Rule-based stand-in for an LLM proposer.

    Appends one or two instruction fragments per candidate: a clarifying
    sentence, an output-format constraint, or a sentence carrying one of the
    mock model's stability or quality tokens. Failures tilt the choice: high
    flip examples favour stability tokens, misclassifications quality tokens.
    """
    params = backend.config.mock_params
    scenario = _words(" ".join(params.good_tokens + params.stable_tokens))
    clarify = [s for s in _CLARIFY if not (_words(s) & scenario)]
    fmt = [s for s in _FORMAT if not (_words(s) & scenario)]
    stable = [f"Keep the answer {t} tied to the label definitions." for t in params.stable_tokens]
    good = [f"Weigh the input with attention to: {t}." for t in params.good_tokens]
    pools = [("clarify", clarify), ("format", fmt), ("stable", stable), ("good", good)]
    weights = {"clarify": 1.0, "format": 1.0,
               "stable": 1.0 + (1.0 if failures.high_flip else 0.0),
               "good": 1.0 + (1.0 if failures.misclassified else 0.0)}
    pools = [(name, pool) for name, pool in pools if pool]
    rng = random.Random(seed)
    out: list[str] = []
    for _ in range(50 * n):
        if len(out) == n:
            break
        text = current.text
        for _ in range(rng.choice((1, 1, 2))):
            name, pool = rng.choices(pools, weights=[weights[p[0]] for p in pools])[0]
            fragment = rng.choice(pool)
            if fragment not in text:
                text = text.rstrip() + " " + fragment
        if text != current.text and text not in out:
            out.append(text)
    return out


def _llm_candidates(backend: Backend, task: Task, current: Prompt, summary: EvalSummary, failures: Failures,
                    n: int, seed: int) -> list[str]:
    template = load_template(CANDIDATE_META_PROMPT)
    want = current.placeholders
    accepted: list[str] = []
    for attempt in range(MAX_GENERATION_ROUNDS):
        content = template.substitute(
            prompt=current.text,
            accuracy=f"{summary.accuracy:.3f}",
            flip_rate=f"{summary.mean_flip_rate:.3f}",
            high_flip="\n".join(f.render() for f in failures.high_flip) or "(none)",
            misclassified="\n".join(f.render() for f in failures.misclassified) or "(none)",
            n=n - len(accepted),
            labels=", ".join(task.label_set),
        )
        raw = backend.complete([{"role": "user", "content": content}], temperature=0.7, seed=seed + attempt)
        for cand in parse_string_list(raw):
            if placeholders(cand) != want:
                log.info("rejecting candidate that changes placeholders")
                continue
            if cand == current.text or cand in accepted:
                continue
            accepted.append(cand)
            if len(accepted) == n:
                return accepted
    return accepted


def candidate_id(current: Prompt, iteration: int, index: int) -> str:
    root = current.id.split("@", 1)[0]
    return f"{root}@i{iteration}c{index}"


def generate_candidates(backend: Backend, task: Task, current: Prompt, summary: EvalSummary, failures: Failures,
                        n: int, seed: int, iteration: int = 1) -> list[Prompt]:
    """``n`` distinct placeholder-preserving rewrites of ``current``.

    Raises:
        CandidateGenerationError: fewer than ``n`` valid candidates after
            bounded retries.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    if backend.is_mock:
        texts = _mock_candidates(backend, current, failures, n, seed)
    else:
        texts = _llm_candidates(backend, task, current, summary, failures, n, seed)
    texts = [t for t in texts if placeholders(t) == current.placeholders]
    if len(texts) < n:
        raise CandidateGenerationError(f"only {len(texts)} of {n} valid candidates at iteration {iteration}")
    prov = Provenance.candidate(iteration, current.id)
    return [Prompt(candidate_id(current, iteration, j), t, prov) for j, t in enumerate(texts[:n])]


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CandidateScore:
    prompt_id: str
    J: float
    accuracy: float
    flip_rate: float

    def to_dict(self) -> dict[str, Any]:
        return {"prompt_id": self.prompt_id, "J": self.J, "accuracy": self.accuracy, "flip_rate": self.flip_rate}


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    incumbent_prompt_id: str
    incumbent_J: float
    incumbent_accuracy: float
    incumbent_flip_rate: float
    candidates: tuple[CandidateScore, ...]
    accepted: bool
    best_index: int
    n_calls: int = 0

    @property
    def best(self) -> CandidateScore:
        return self.candidates[self.best_index]

    def to_dict(self) -> dict[str, Any]:
        return {
            "iteration": self.iteration,
            "incumbent_prompt_id": self.incumbent_prompt_id,
            "incumbent_J": self.incumbent_J,
            "incumbent_accuracy": self.incumbent_accuracy,
            "incumbent_flip_rate": self.incumbent_flip_rate,
            "candidates": [c.to_dict() for c in self.candidates],
            "accepted": self.accepted,
            "best_index": self.best_index,
            "n_calls": self.n_calls,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> IterationRecord:
        return cls(
            iteration=int(d["iteration"]),
            incumbent_prompt_id=d["incumbent_prompt_id"],
            incumbent_J=float(d["incumbent_J"]),
            incumbent_accuracy=float(d["incumbent_accuracy"]),
            incumbent_flip_rate=float(d["incumbent_flip_rate"]),
            candidates=tuple(CandidateScore(**c) for c in d["candidates"]),
            accepted=bool(d["accepted"]),
            best_index=int(d["best_index"]),
            n_calls=int(d.get("n_calls", 0)),
        )


@dataclass
class OptimizationResult:
    final_prompt: Prompt
    trajectory: list[IterationRecord]
    start_summary: EvalSummary
    final_summary: EvalSummary
    fresh_summary: EvalSummary | None = None

    def __iter__(self):
        # allows ``final_prompt, trajectory = run(...)``
        return iter((self.final_prompt, self.trajectory))

    @property
    def final_J_trace(self) -> list[float]:
        return [rec.incumbent_J for rec in self.trajectory]


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _dump(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


class _RunDir:
    def __init__(self, root: Path) -> None:
        self.root = root
        (root / "prompts").mkdir(parents=True, exist_ok=True)
        (root / "summaries").mkdir(parents=True, exist_ok=True)
        self.trajectory_path = root / "trajectory.jsonl"

    def save_prompt(self, prompt: Prompt) -> None:
        _atomic_write(self.root / "prompts" / f"{prompt.id}.json", _dump(prompt.to_dict()))

    def load_prompt(self, prompt_id: str) -> Prompt:
        return Prompt.from_dict(json.loads((self.root / "prompts" / f"{prompt_id}.json").read_text(encoding="utf-8")))

    def save_summary(self, summary: EvalSummary) -> None:
        _atomic_write(self.root / "summaries" / f"{summary.prompt_id}.json", _dump(summary.to_dict()))

    def append(self, record: IterationRecord) -> None:
        with self.trajectory_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def read_trajectory(self) -> list[IterationRecord]:
        if not self.trajectory_path.exists():
            return []
        out = []
        for line in self.trajectory_path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            try:
                out.append(IterationRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError):
                break  # torn last line from a crash
        return out


def run(config: OptimizerConfig, backend: Backend, task: Task, initial_prompt: Prompt, dataset: Dataset,
        run_dir: str | Path | None = None, resume: bool = False, fresh_eval: bool = False,
        extra_meta: dict[str, Any] | None = None) -> OptimizationResult:
    """Optimise ``initial_prompt`` for the joint objective.

    With ``run_dir`` the loop writes ``run.json``, every prompt and summary,
    and appends one line per iteration to ``trajectory.jsonl``; ``resume``
    continues from the last complete iteration found there. With
    ``fresh_eval`` the final prompt is re-scored on a freshly seeded
    paraphrase set.
    """
    violations = validate_dataset(dataset, task)
    if violations:
        raise ConfigError(f"dataset fails validation: {[str(v) for v in violations[:5]]}")
    initial_prompt.check_task(task)
    cfg = config
    k, seed = cfg.k_variants, cfg.seed

    def evaluate(p: Prompt) -> EvalSummary:
        return evaluate_prompt(backend, task, p, dataset, k, seed, n_bins=cfg.n_bins)

    store = _RunDir(Path(run_dir)) if run_dir is not None else None
    trajectory: list[IterationRecord] = []
    incumbent = initial_prompt
    stall = 0
    if store is not None:
        run_meta = {"optimizer": cfg.to_dict(), "backend": backend.config.to_dict(), "task": task.to_dict(),
                    "initial_prompt": initial_prompt.to_dict(), "dataset_sha256": dataset.content_hash(),
                    "n_examples": len(dataset), **(extra_meta or {})}
        meta_path = store.root / "run.json"
        if resume and meta_path.exists():
            previous = json.loads(meta_path.read_text(encoding="utf-8"))
            # the iteration budget may grow on resume; nothing else may change
            same = ({**previous.get("optimizer", {}), "max_iterations": None}
                    == {**run_meta["optimizer"], "max_iterations": None})
            if not same or previous.get("dataset_sha256") != run_meta["dataset_sha256"]:
                raise ConfigError(f"{meta_path}: existing run has a different configuration or dataset")
            trajectory = store.read_trajectory()
            _atomic_write(store.trajectory_path, "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in trajectory))
            for rec in trajectory:
                if rec.accepted:
                    incumbent = store.load_prompt(rec.best.prompt_id)
                    stall = 0
                else:
                    stall += 1
        elif store.trajectory_path.exists():
            store.trajectory_path.unlink()
        _atomic_write(meta_path, _dump(run_meta))
        store.save_prompt(initial_prompt)

    start_summary = evaluate(initial_prompt)
    inc_summary = start_summary if incumbent is initial_prompt else evaluate(incumbent)
    if store is not None:
        store.save_summary(start_summary)
        store.save_summary(inc_summary)
    inc_J = objective_exact(inc_summary.accuracy, inc_summary.mean_flip_rate, cfg.objective)

    first = trajectory[-1].iteration + 1 if trajectory else 1
    done = stall >= cfg.patience
    for it in range(first, cfg.max_iterations + 1):
        if done:
            break
        calls_before = backend.requests
        failures = identify_failures(inc_summary, dataset, cfg.n_failure_examples)
        gen_seed = stable_seed("candidates", seed, it, incumbent.text)
        cands = generate_candidates(backend, task, incumbent, inc_summary, failures, cfg.n_candidates, gen_seed, it)
        summaries = [evaluate(c) for c in cands]
        best = select_candidate(summaries, cfg.objective)
        best_J = objective_exact(summaries[best].accuracy, summaries[best].mean_flip_rate, cfg.objective)
        accepted = best_J > inc_J
        record = IterationRecord(
            iteration=it,
            incumbent_prompt_id=incumbent.id,
            incumbent_J=float(inc_J),
            incumbent_accuracy=inc_summary.accuracy,
            incumbent_flip_rate=inc_summary.mean_flip_rate,
            candidates=tuple(CandidateScore(c.id, objective(s, cfg.objective), s.accuracy, s.mean_flip_rate)
                             for c, s in zip(cands, summaries)),
            accepted=accepted,
            best_index=best,
            n_calls=backend.requests - calls_before,
        )
        trajectory.append(record)
        if store is not None:
            for c, s in zip(cands, summaries):
                store.save_prompt(c)
                store.save_summary(s)
            store.append(record)
        log.info("iteration %d: incumbent J=%.4f best candidate J=%.4f accepted=%s",
                 it, float(inc_J), float(best_J), accepted)
        if accepted:
            incumbent, inc_summary, inc_J = cands[best], summaries[best], best_J
            stall = 0
        else:
            stall += 1
            done = stall >= cfg.patience

    fresh = None
    if fresh_eval:
        fresh = evaluate_prompt(backend, task, incumbent, dataset, k, seed + FRESH_SEED_OFFSET, n_bins=cfg.n_bins)
    return OptimizationResult(incumbent, trajectory, start_summary, inc_summary, fresh)
