from __future__ import annotations

import json
from pathlib import Path

import pytest

from promptstab.backend import Backend, BackendConfig, MockParams
from promptstab.domain import Dataset, EvalRecord, Example, Prediction, Prompt, Task
from promptstab.metrics import margin

LABELS = ("positive", "negative", "neutral")
BASE_TEXT = "Classify the sentiment of the following text. Answer with one label.\nText: {text}"


def make_task(labels=LABELS) -> Task:
    return Task("sent", tuple(labels), ("text",))


def make_dataset(n: int, labels=LABELS, prefix: str = "ex") -> Dataset:
    return Dataset(tuple(
        Example(f"{prefix}{i:04d}", {"text": f"sample text number {i}"}, labels[i % len(labels)])
        for i in range(n)
    ))


def mock_backend(seed: int = 0, **params) -> Backend:
    return Backend(BackendConfig(kind="mock", seed=seed, mock_params=MockParams(**params)))


def record(gold: str, probs: dict[str, float] | None, variants=(), example_id: str = "x",
           label: str | None = None) -> EvalRecord:
    """EvalRecord built from a base distribution and variant labels."""
    if probs is not None:
        base = Prediction.from_probs(probs, list(probs))
    else:
        base = Prediction(label or gold)
    var = tuple(Prediction(v) for v in variants) or (Prediction(base.label),)
    n_diff = sum(v.label != base.label for v in var)
    rate = n_diff / len(var)
    return EvalRecord(example_id, gold, base, var, rate > 0, rate,
                      margin(base) if probs is not None else None, base.label == gold)


@pytest.fixture
def task() -> Task:
    return make_task()


@pytest.fixture
def dataset() -> Dataset:
    return make_dataset(30)


@pytest.fixture
def base_prompt() -> Prompt:
    return Prompt("base", BASE_TEXT)


@pytest.fixture
def backend() -> Backend:
    return mock_backend()


@pytest.fixture
def workspace(tmp_path: Path) -> Path:
    """Task, dataset and prompt files for CLI runs."""
    (tmp_path / "task.json").write_text(json.dumps(make_task().to_dict()))
    with (tmp_path / "data.jsonl").open("w") as fh:
        for ex in make_dataset(60):
            fh.write(json.dumps(ex.to_dict()) + "\n")
    (tmp_path / "prompt.txt").write_text(BASE_TEXT + "\n")
    return tmp_path


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":")[1:])):
            terminalreporter.write_line(line)
