"""Core value types: tasks, examples, prompts, predictions and evaluation records.

Every type here is a frozen dataclass with ``to_dict``/``from_dict`` helpers
that define its JSON representation. Labels are compared by exact string
equality after trimming surrounding whitespace.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .errors import ConfigError, ParseError, PlaceholderError, PlaceholderMismatch

PROB_TOLERANCE = 1e-6

# Reserved label for model output that could not be mapped onto the label set.
INVALID_LABEL = "<invalid-output>"

_PLACEHOLDER_RE = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


def normalize_label(label: str) -> str:
    return label.strip()


def argmax_label(probs: Mapping[str, float], label_order: Sequence[str] | None = None) -> str:
    """Return the most probable label; ties go to the earliest label in ``label_order``."""
    order = list(label_order) if label_order is not None else list(probs)
    best, best_p = None, -math.inf
    for lab in order:
        p = probs[lab]
        if p > best_p:
            best, best_p = lab, p
    if best is None:
        raise ValueError("argmax over empty distribution")
    return best


# ---------------------------------------------------------------------------
# Task / Example / Dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Task:
    id: str
    label_set: tuple[str, ...]
    input_fields: tuple[str, ...]

    def __post_init__(self) -> None:
        labels = tuple(normalize_label(x) for x in self.label_set)
        object.__setattr__(self, "label_set", labels)
        object.__setattr__(self, "input_fields", tuple(self.input_fields))
        if len(labels) < 2:
            raise ConfigError(f"task {self.id!r}: label_set needs at least 2 labels")
        if len(set(labels)) != len(labels):
            raise ConfigError(f"task {self.id!r}: label_set contains duplicates")
        if not self.input_fields:
            raise ConfigError(f"task {self.id!r}: input_fields is empty")

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "label_set": list(self.label_set), "input_fields": list(self.input_fields)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Task:
        try:
            return cls(id=str(d["id"]), label_set=tuple(d["label_set"]), input_fields=tuple(d["input_fields"]))
        except (KeyError, TypeError) as exc:
            raise ParseError(f"malformed task: {exc}") from exc


@dataclass(frozen=True)
class Example:
    id: str
    inputs: dict[str, str]
    gold_label: str
    metadata: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "inputs": dict(self.inputs), "gold_label": self.gold_label,
                "metadata": dict(self.metadata)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Example:
        try:
            return cls(
                id=str(d["id"]),
                inputs={str(k): str(v) for k, v in d["inputs"].items()},
                gold_label=str(d["gold_label"]),
                metadata={str(k): str(v) for k, v in (d.get("metadata") or {}).items()},
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise ParseError(f"malformed example: {exc}") from exc


@dataclass(frozen=True)
class Dataset:
    examples: tuple[Example, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "examples", tuple(self.examples))

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def by_id(self) -> dict[str, Example]:
        return {ex.id: ex for ex in self.examples}

    def content_hash(self) -> str:
        """SHA-256 over the canonical JSON-lines form."""
        h = hashlib.sha256()
        for ex in self.examples:
            h.update(json.dumps(ex.to_dict(), sort_keys=True, ensure_ascii=False).encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()

    def subset(self, n: int) -> Dataset:
        return Dataset(self.examples[:n])


@dataclass(frozen=True)
class Violation:
    rule: str
    example_id: str
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.rule}({self.example_id!r})"


def validate_dataset(dataset: Dataset | Iterable[Example], task: Task) -> list[Violation]:
    """Check example invariants against ``task``.

    Returns one violation per failing record and rule; an empty list means the
    dataset is clean. Violations are returned, never raised.
    """
    violations: list[Violation] = []
    seen: set[str] = set()
    for ex in dataset:
        if ex.id in seen:
            violations.append(Violation("duplicate-id", ex.id))
        seen.add(ex.id)
        if normalize_label(ex.gold_label) not in task.label_set:
            violations.append(Violation("label-out-of-set", ex.id, ex.gold_label))
        missing = [f for f in task.input_fields if f not in ex.inputs]
        if missing:
            violations.append(Violation("missing-input", ex.id, ",".join(missing)))
    return violations


def load_task(path: str | Path) -> Task:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return Task.from_dict(data)


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    examples = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                examples.append(Example.from_dict(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    return Dataset(tuple(examples))


def dump_dataset(dataset: Dataset, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for ex in dataset:
            fh.write(json.dumps(ex.to_dict(), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# Prompts
# ---------------------------------------------------------------------------


def placeholders(text: str) -> frozenset[str]:
    """Named ``{field}`` slots in a prompt template."""
    return frozenset(_PLACEHOLDER_RE.findall(text))


@dataclass(frozen=True)
class Provenance:
    kind: str = "manual"  # manual | paraphrase-of | optimizer-candidate
    parent_id: str | None = None
    iteration: int | None = None

    KINDS = ("manual", "paraphrase-of", "optimizer-candidate")

    def __post_init__(self) -> None:
        if self.kind not in self.KINDS:
            raise ConfigError(f"unknown provenance kind {self.kind!r}")
        if self.kind != "manual" and self.parent_id is None:
            raise ConfigError(f"provenance {self.kind!r} requires parent_id")
        if self.kind == "optimizer-candidate" and self.iteration is None:
            raise ConfigError("optimizer-candidate provenance requires iteration")

    @classmethod
    def paraphrase_of(cls, parent_id: str) -> Provenance:
        return cls("paraphrase-of", parent_id)

    @classmethod
    def candidate(cls, iteration: int, parent_id: str) -> Provenance:
        return cls("optimizer-candidate", parent_id, iteration)

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind}
        if self.parent_id is not None:
            d["parent_id"] = self.parent_id
        if self.iteration is not None:
            d["iteration"] = self.iteration
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any] | None) -> Provenance:
        if not d:
            return cls()
        return cls(d.get("kind", "manual"), d.get("parent_id"), d.get("iteration"))


@dataclass(frozen=True)
class Prompt:
    id: str
    text: str
    provenance: Provenance = field(default_factory=Provenance)

    @property
    def placeholders(self) -> frozenset[str]:
        return placeholders(self.text)

    def check_task(self, task: Task) -> None:
        """Raise PlaceholderError unless placeholders equal the task's input fields."""
        have = self.placeholders
        want = set(task.input_fields)
        unknown = sorted(have - want)
        missing = sorted(want - have)
        if unknown or missing:
            raise PlaceholderError(
                f"prompt {self.id!r}: unknown placeholders {unknown}, missing {missing}")

    def render(self, inputs: Mapping[str, str]) -> str:
        def sub(m: re.Match) -> str:
            name = m.group(1)
            return inputs[name] if name in inputs else m.group(0)
        return _PLACEHOLDER_RE.sub(sub, self.text)

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "text": self.text, "provenance": self.provenance.to_dict()}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Prompt:
        try:
            return cls(str(d["id"]), str(d["text"]), Provenance.from_dict(d.get("provenance")))
        except (KeyError, TypeError) as exc:
            raise ParseError(f"malformed prompt: {exc}") from exc


def load_prompt(path: str | Path, prompt_id: str | None = None) -> Prompt:
    """Load a prompt from ``.json`` (Prompt dict) or any other file as raw template text."""
    path = Path(path)
    raw = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        try:
            return Prompt.from_dict(json.loads(raw))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from exc
    return Prompt(prompt_id or path.stem, raw.strip("\n"))


@dataclass(frozen=True)
class PromptVariantSet:
    base: Prompt
    variants: tuple[Prompt, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "variants", tuple(self.variants))
        if not self.variants:
            raise ConfigError("variant set needs at least one variant (K >= 1)")
        base_ph = self.base.placeholders
        texts = {self.base.text}
        for i, v in enumerate(self.variants):
            if v.placeholders != base_ph:
                raise PlaceholderMismatch(i)
            if v.text in texts:
                raise ConfigError(f"variant {i} duplicates the text of another prompt in the set")
            texts.add(v.text)

    @property
    def k(self) -> int:
        return len(self.variants)

    def to_dict(self) -> dict[str, Any]:
        return {"base": self.base.to_dict(), "variants": [v.to_dict() for v in self.variants]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> PromptVariantSet:
        try:
            base = Prompt.from_dict(d["base"])
            variants = tuple(Prompt.from_dict(v) for v in d["variants"])
        except (KeyError, TypeError) as exc:
            raise ParseError(f"malformed variant set: {exc}") from exc
        return cls(base, variants)


# ---------------------------------------------------------------------------
# Predictions and evaluation records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Prediction:
    """A predicted label, optionally with a distribution over the label set.

    When ``probs`` is given it must be non-negative, sum to one within 1e-6,
    and ``label`` must attain its maximum. ``from_probs`` breaks ties by
    label-set order; a stored prediction keeps whichever tied label it had.
    ``INVALID_LABEL`` marks output that could not be mapped to any label.
    """

    label: str
    probs: dict[str, float] | None = None
    raw_output: str = ""

    def __post_init__(self) -> None:
        if self.probs is None:
            return
        if not self.probs:
            raise ValueError("probs must not be empty")
        if any(p < 0 or not math.isfinite(p) for p in self.probs.values()):
            raise ValueError(f"probs must be finite and non-negative: {self.probs}")
        total = math.fsum(self.probs.values())
        if abs(total - 1.0) > PROB_TOLERANCE:
            raise ValueError(f"probs sum to {total!r}, not 1")
        if self.probs.get(self.label, -1.0) != max(self.probs.values()):
            raise ValueError(f"label {self.label!r} is not the argmax of probs")

    @classmethod
    def from_probs(cls, probs: Mapping[str, float], label_set: Sequence[str], raw_output: str = "") -> Prediction:
        ordered = {lab: float(probs[lab]) for lab in label_set}
        return cls(argmax_label(ordered), ordered, raw_output)

    @property
    def is_invalid(self) -> bool:
        return self.label == INVALID_LABEL

    def check_labels(self, label_set: Sequence[str]) -> None:
        if self.label not in label_set and not self.is_invalid:
            raise ValueError(f"label {self.label!r} not in label set")
        if self.probs is not None and list(self.probs) != list(label_set):
            raise ValueError("probs must cover the label set in order")

    def to_dict(self) -> dict[str, Any]:
        return {"label": self.label, "probs": dict(self.probs) if self.probs is not None else None,
                "raw_output": self.raw_output}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Prediction:
        probs = d.get("probs")
        return cls(str(d["label"]), {str(k): float(v) for k, v in probs.items()} if probs is not None else None,
                   str(d.get("raw_output", "")))


@dataclass(frozen=True)
class EvalRecord:
    example_id: str
    gold_label: str
    base_prediction: Prediction
    variant_predictions: tuple[Prediction, ...]
    flip: bool
    flip_rate: float
    margin: float | None
    correct: bool
    conformal_set: tuple[str, ...] | None = None
    covered: bool | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "variant_predictions", tuple(self.variant_predictions))
        if self.conformal_set is not None:
            object.__setattr__(self, "conformal_set", tuple(self.conformal_set))
        if self.flip != (self.flip_rate > 0):
            raise ValueError("flip must equal flip_rate > 0")
        if (self.margin is None) != (self.base_prediction.probs is None):
            raise ValueError("margin present iff base prediction has probs")

    @property
    def k(self) -> int:
        return len(self.variant_predictions)

    def to_dict(self) -> dict[str, Any]:
        return {
            "example_id": self.example_id,
            "gold_label": self.gold_label,
            "base_prediction": self.base_prediction.to_dict(),
            "variant_predictions": [p.to_dict() for p in self.variant_predictions],
            "flip": self.flip,
            "flip_rate": self.flip_rate,
            "margin": self.margin,
            "correct": self.correct,
            "conformal_set": list(self.conformal_set) if self.conformal_set is not None else None,
            "covered": self.covered,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> EvalRecord:
        cs = d.get("conformal_set")
        return cls(
            example_id=str(d["example_id"]),
            gold_label=str(d["gold_label"]),
            base_prediction=Prediction.from_dict(d["base_prediction"]),
            variant_predictions=tuple(Prediction.from_dict(p) for p in d["variant_predictions"]),
            flip=bool(d["flip"]),
            flip_rate=float(d["flip_rate"]),
            margin=None if d.get("margin") is None else float(d["margin"]),
            correct=bool(d["correct"]),
            conformal_set=tuple(cs) if cs is not None else None,
            covered=d.get("covered"),
        )


@dataclass(frozen=True)
class EvalSummary:
    prompt_id: str
    n_examples: int
    accuracy: float
    macro_f1: float
    mean_flip_rate: float
    records: tuple[EvalRecord, ...]
    log_loss: float | None = None
    brier: float | None = None
    ece: float | None = None
    mce: float | None = None
    mean_jsd: float | None = None
    k: int = 0
    n_invalid: int = 0
    invalid_example_ids: tuple[str, ...] = ()
    f1_absent_labels: tuple[str, ...] = ()
    n_bins: int = 10
    prompt_text: str = ""

    def __post_init__(self) -> None:
        for name in ("records", "invalid_example_ids", "f1_absent_labels"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    _SCALARS = ("prompt_id", "prompt_text", "n_examples", "k", "accuracy", "macro_f1", "mean_flip_rate",
                "log_loss", "brier", "ece", "mce", "mean_jsd", "n_bins", "n_invalid")

    def to_dict(self, include_records: bool = True) -> dict[str, Any]:
        d: dict[str, Any] = {name: getattr(self, name) for name in self._SCALARS}
        d["invalid_example_ids"] = list(self.invalid_example_ids)
        d["f1_absent_labels"] = list(self.f1_absent_labels)
        if include_records:
            d["records"] = [r.to_dict() for r in self.records]
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> EvalSummary:
        kwargs = {name: d[name] for name in cls._SCALARS if name in d}
        return cls(
            records=tuple(EvalRecord.from_dict(r) for r in d.get("records", [])),
            invalid_example_ids=tuple(d.get("invalid_example_ids", ())),
            f1_absent_labels=tuple(d.get("f1_absent_labels", ())),
            **kwargs,
        )


@dataclass(frozen=True)
class ObjectiveConfig:
    """Weights of the joint accuracy/stability objective."""

    lambda_perf: float = 0.5
    lambda_stab: float = 0.5

    def __post_init__(self) -> None:
        if self.lambda_perf < 0 or self.lambda_stab < 0:
            raise ConfigError("objective weights must be non-negative")
        if self.lambda_perf + self.lambda_stab <= 0:
            raise ConfigError("lambda_perf + lambda_stab must be positive")

    def to_dict(self) -> dict[str, float]:
        return {"lambda_perf": self.lambda_perf, "lambda_stab": self.lambda_stab}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ObjectiveConfig:
        return cls(float(d["lambda_perf"]), float(d["lambda_stab"]))


def stratified_subset(dataset: Dataset, n: int, seed: int = 0) -> Dataset:
    """Deterministic subset of ``n`` examples keeping gold-label proportions.

    Per-label quotas use largest-remainder rounding; within a label, examples
    are drawn by a seeded shuffle and the result keeps dataset order.
    """
    if n >= len(dataset):
        return dataset
    groups: dict[str, list[int]] = {}
    for i, ex in enumerate(dataset.examples):
        groups.setdefault(normalize_label(ex.gold_label), []).append(i)
    total = len(dataset)
    exact = {lab: n * len(idx) / total for lab, idx in groups.items()}
    quota = {lab: int(v) for lab, v in exact.items()}
    short = n - sum(quota.values())
    for lab in sorted(groups, key=lambda lab: (-(exact[lab] - quota[lab]), lab))[:short]:
        quota[lab] += 1
    rng = random.Random(seed)
    chosen: list[int] = []
    for lab in sorted(groups):
        idx = list(groups[lab])
        rng.shuffle(idx)
        chosen.extend(idx[:quota[lab]])
    return Dataset(tuple(dataset.examples[i] for i in sorted(chosen)))
