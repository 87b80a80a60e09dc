"""Split conformal prediction sets and selective-prediction curves.

Nonconformity of a label is one minus its predicted probability. The cutoff
is the ceil((n+1)(1-alpha))-th smallest calibration score, or +inf when that
index exceeds n, in which case every label is always included.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Any, Sequence

import numpy as np

from .domain import EvalRecord, Prediction
from .errors import ConfigError, EmptyInputError, MissingProbsError

DEFAULT_ALPHA = 0.1


@dataclass(frozen=True)
class ConformalModel:
    alpha: float
    threshold: float
    n_calibration: int

    def to_dict(self) -> dict[str, Any]:
        # JSON has no infinity literal
        thr = None if math.isinf(self.threshold) else self.threshold
        return {"alpha": self.alpha, "threshold": thr, "n_cal": self.n_calibration}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ConformalModel:
        thr = d.get("threshold")
        return cls(float(d["alpha"]), math.inf if thr is None else float(thr), int(d["n_cal"]))


def _check_probs(records: Sequence[EvalRecord]) -> None:
    if any(r.base_prediction.probs is None for r in records):
        raise MissingProbsError("conformal prediction needs probabilities")


def split_calibration(records: Sequence[EvalRecord], seed: int) -> tuple[list[EvalRecord], list[EvalRecord]]:
    """Seeded shuffle; the first ceil(n/2) records calibrate, the rest evaluate."""
    if len(records) < 2:
        raise EmptyInputError("too-few-records: need at least 2 records to split")
    _check_probs(records)
    order = np.random.default_rng(seed).permutation(len(records))
    n_cal = math.ceil(len(records) / 2)
    cal = [records[i] for i in order[:n_cal]]
    ev = [records[i] for i in order[n_cal:]]
    return cal, ev


def conformal_quantile(scores: Sequence[float], alpha: float) -> float:
    if not 0.0 < alpha < 1.0:
        raise ConfigError("alpha must lie in (0, 1)")
    n = len(scores)
    if n == 0:
        raise EmptyInputError("no calibration scores")
    # guard against (n+1)(1-alpha) landing a hair above an integer
    k = math.ceil(round((n + 1) * (1 - alpha), 9))
    k = max(k, 1)
    if k > n:
        return math.inf
    return float(np.sort(np.asarray(scores, dtype=float))[k - 1])


def fit(calibration_records: Sequence[EvalRecord], alpha: float = DEFAULT_ALPHA) -> ConformalModel:
    _check_probs(calibration_records)
    scores = [1.0 - r.base_prediction.probs[r.gold_label] for r in calibration_records]
    return ConformalModel(alpha, conformal_quantile(scores, alpha), len(scores))


def predict_set(model: ConformalModel, prediction: Prediction) -> list[str]:
    """Labels whose score 1 - p(label) is at most the threshold, in label-set order.

    May be empty when the threshold is below 1 - max p.
    """
    if prediction.probs is None:
        raise MissingProbsError("conformal set needs probabilities")
    return [lab for lab, p in prediction.probs.items() if 1.0 - p <= model.threshold]


def attach_sets(model: ConformalModel, records: Sequence[EvalRecord]) -> list[EvalRecord]:
    """Copies of ``records`` with ``conformal_set`` and ``covered`` filled in."""
    out = []
    for r in records:
        cs = predict_set(model, r.base_prediction)
        out.append(replace(r, conformal_set=tuple(cs), covered=r.gold_label in cs))
    return out


def coverage_stats(model: ConformalModel, eval_records: Sequence[EvalRecord]) -> tuple[float, float]:
    """(empirical coverage, mean set size); empty sets count as misses of size 0."""
    if not eval_records:
        raise EmptyInputError("no evaluation records")
    sets = [predict_set(model, r.base_prediction) for r in eval_records]
    covered = sum(r.gold_label in s for r, s in zip(eval_records, sets))
    return covered / len(eval_records), sum(len(s) for s in sets) / len(eval_records)


def coverage_accuracy_curve(records: Sequence[EvalRecord], policy: str = "confidence") -> list[tuple[float, float]]:
    """Selective-prediction points (fraction answered, accuracy among answered).

    ``policy="confidence"`` sweeps a threshold over each distinct base
    confidence, answering records at or above it; points run from
    answer-all downward. ``policy="set-size"`` answers only records whose
    conformal set is a singleton and scores the set's label. Points that
    answer nothing are omitted.
    """
    if not records:
        raise EmptyInputError("no records")
    n = len(records)
    if policy == "confidence":
        _check_probs(records)
        conf = np.array([max(r.base_prediction.probs.values()) for r in records])
        corr = np.array([r.correct for r in records], dtype=float)
        points = []
        for t in np.unique(conf):  # ascending threshold = descending coverage
            mask = conf >= t
            points.append((float(mask.sum() / n), float(corr[mask].mean())))
        return points
    if policy == "set-size":
        if any(r.conformal_set is None for r in records):
            raise ConfigError("set-size policy needs conformal sets on every record")
        answered = [r for r in records if len(r.conformal_set) == 1]
        if not answered:
            return []
        acc = sum(r.conformal_set[0] == r.gold_label for r in answered) / len(answered)
        return [(len(answered) / n, acc)]
    raise ConfigError(f"unknown selective policy {policy!r}")
