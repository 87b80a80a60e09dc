"""Performance, calibration and prompt-sensitivity statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Any, Mapping, Sequence

import numpy as np
from scipy import stats

from .domain import EvalRecord, Prediction
from .errors import DegenerateInputError, EmptyInputError, LengthMismatchError, MetricError, MissingProbsError

PROB_CLAMP = 1e-12
DEFAULT_N_BINS = 10


def _require(records: Sequence[EvalRecord]) -> None:
    if not records:
        raise EmptyInputError("metric over empty record list")


def _require_probs(records: Sequence[EvalRecord]) -> None:
    _require(records)
    if any(r.base_prediction.probs is None for r in records):
        raise MissingProbsError("records lack probabilities")


# ---------------------------------------------------------------------------
# Performance
# ---------------------------------------------------------------------------


def accuracy(records: Sequence[EvalRecord]) -> float:
    _require(records)
    return sum(r.correct for r in records) / len(records)


def per_label_f1(records: Sequence[EvalRecord], label_set: Sequence[str]) -> tuple[dict[str, float], list[str]]:
    """F1 per label, plus labels with no gold instances and no predictions.

    Such labels score 0 and are reported so the caller can flag them.
    """
    _require(records)
    scores: dict[str, float] = {}
    absent: list[str] = []
    for lab in label_set:
        tp = sum(1 for r in records if r.base_prediction.label == lab and r.gold_label == lab)
        fp = sum(1 for r in records if r.base_prediction.label == lab and r.gold_label != lab)
        fn = sum(1 for r in records if r.base_prediction.label != lab and r.gold_label == lab)
        if tp + fp + fn == 0:
            absent.append(lab)
            scores[lab] = 0.0
            continue
        scores[lab] = 2 * tp / (2 * tp + fp + fn)
    return scores, absent


def macro_f1(records: Sequence[EvalRecord], label_set: Sequence[str]) -> float:
    scores, _ = per_label_f1(records, label_set)
    return sum(scores.values()) / len(scores)


def _gold_probs(records: Sequence[EvalRecord]) -> np.ndarray:
    return np.array([r.base_prediction.probs[r.gold_label] for r in records], dtype=float)


def log_loss(records: Sequence[EvalRecord]) -> float:
    _require_probs(records)
    p = np.clip(_gold_probs(records), PROB_CLAMP, 1 - PROB_CLAMP)
    return float(-np.mean(np.log(p)))


def brier(records: Sequence[EvalRecord]) -> float:
    """Multi-class Brier score: mean over records of the squared error summed over labels."""
    _require_probs(records)
    total = 0.0
    for r in records:
        total += sum((p - (lab == r.gold_label)) ** 2 for lab, p in r.base_prediction.probs.items())
    return total / len(records)


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReliabilityBin:
    lower: float
    upper: float
    count: int
    mean_confidence: float | None
    empirical_accuracy: float | None

    def to_dict(self) -> dict[str, Any]:
        return {"lower": self.lower, "upper": self.upper, "count": self.count,
                "mean_confidence": self.mean_confidence, "empirical_accuracy": self.empirical_accuracy}


def reliability_bins(confidences: Sequence[float], correct: Sequence[bool],
                     n_bins: int = DEFAULT_N_BINS) -> list[ReliabilityBin]:
    """Equal-width bins over [0, 1]; bin i is [i/n, (i+1)/n) and the last is closed."""
    if n_bins < 1:
        raise MetricError("n_bins must be >= 1")
    conf = np.asarray(confidences, dtype=float)
    corr = np.asarray(correct, dtype=float)
    if conf.shape != corr.shape:
        raise LengthMismatchError("confidences and correctness differ in length")
    idx = np.minimum((conf * n_bins).astype(int), n_bins - 1)
    bins = []
    for i in range(n_bins):
        mask = idx == i
        n = int(mask.sum())
        bins.append(ReliabilityBin(
            lower=i / n_bins,
            upper=(i + 1) / n_bins,
            count=n,
            mean_confidence=float(conf[mask].mean()) if n else None,
            empirical_accuracy=float(corr[mask].mean()) if n else None,
        ))
    return bins


def calibration_errors(confidences: Sequence[float], correct: Sequence[bool],
                       n_bins: int = DEFAULT_N_BINS) -> tuple[float, float, list[ReliabilityBin]]:
    """ECE and MCE over equal-width bins; empty bins are skipped."""
    bins = reliability_bins(confidences, correct, n_bins)
    n = sum(b.count for b in bins)
    if n == 0:
        raise EmptyInputError("no confidences")
    gaps = [(b.count, abs(b.empirical_accuracy - b.mean_confidence)) for b in bins if b.count]
    ece = sum(c * g for c, g in gaps) / n
    mce = max(g for _, g in gaps)
    return ece, mce, bins


def ece_mce(records: Sequence[EvalRecord], n_bins: int = DEFAULT_N_BINS) -> tuple[float, float, list[ReliabilityBin]]:
    _require_probs(records)
    conf = [max(r.base_prediction.probs.values()) for r in records]
    return calibration_errors(conf, [r.correct for r in records], n_bins)


# ---------------------------------------------------------------------------
# Sensitivity
# ---------------------------------------------------------------------------


def margin(prediction: Prediction) -> float:
    """Gap between the two largest class probabilities."""
    if prediction.probs is None:
        raise MissingProbsError("margin needs probabilities")
    top = sorted(prediction.probs.values(), reverse=True)
    return float(top[0] - top[1]) if len(top) > 1 else float(top[0])


def _label(x: Prediction | str) -> str:
    return x.label if isinstance(x, Prediction) else x


def flip_stats(base_preds: Sequence[Prediction | str],
               variant_preds_per_k: Sequence[Sequence[Prediction | str]]) -> list[tuple[bool, float]]:
    """Per-example (flip indicator, flip rate) against the base prediction.

    ``variant_preds_per_k[k][i]`` is the prediction for example ``i`` under
    variant ``k``. Only labels are compared.
    """
    k = len(variant_preds_per_k)
    if k == 0:
        raise LengthMismatchError("need at least one variant")
    n = len(base_preds)
    for preds in variant_preds_per_k:
        if len(preds) != n:
            raise LengthMismatchError(f"variant list of length {len(preds)} does not match {n} base predictions")
    out = []
    for i in range(n):
        ref = _label(base_preds[i])
        n_diff = sum(1 for preds in variant_preds_per_k if _label(preds[i]) != ref)
        out.append((n_diff > 0, n_diff / k))
    return out


def pss(predictions_per_prompt: Sequence[Sequence[Prediction | str]]) -> list[float]:
    """Symmetric per-example sensitivity: disagreement rate over all prompt pairs."""
    m = len(predictions_per_prompt)
    if m < 2:
        raise LengthMismatchError("PSS needs at least two prompts")
    n = len(predictions_per_prompt[0])
    if any(len(p) != n for p in predictions_per_prompt):
        raise LengthMismatchError("prediction lists are not aligned")
    pairs = list(combinations(range(m), 2))
    out = []
    for i in range(n):
        labels = [_label(p[i]) for p in predictions_per_prompt]
        out.append(sum(labels[a] != labels[b] for a, b in pairs) / len(pairs))
    return out


def jsd(p: Mapping[str, float], q: Mapping[str, float]) -> float:
    """Jensen-Shannon divergence in bits, so the result lies in [0, 1]."""
    if set(p) != set(q):
        raise MetricError("mismatched-support: distributions cover different labels")

    def kl(a: Mapping[str, float], m: Mapping[str, float]) -> float:
        return math.fsum(a[k] * math.log2(a[k] / m[k]) for k in a if a[k] > 0)

    m = {k: (p[k] + q[k]) / 2 for k in p}
    val = (kl(p, m) + kl(q, m)) / 2
    return min(1.0, max(0.0, val))


def spearman(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float]:
    """Spearman rho with average ranks for ties and a two-sided t-approximation p-value.

    Raises:
        DegenerateInputError: either input is constant, so rho is undefined.
    """
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape:
        raise LengthMismatchError("spearman inputs differ in length")
    n = x.size
    if n < 3:
        raise MetricError("spearman needs at least 3 points")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise DegenerateInputError("constant input: rank correlation undefined")
    rx = stats.rankdata(x, method="average")
    ry = stats.rankdata(y, method="average")
    rx -= rx.mean()
    ry -= ry.mean()
    rho = float(np.dot(rx, ry) / math.sqrt(np.dot(rx, rx) * np.dot(ry, ry)))
    rho = max(-1.0, min(1.0, rho))
    if abs(rho) >= 1.0:
        return rho, 0.0
    t = rho * math.sqrt((n - 2) / (1 - rho * rho))
    p = float(2 * stats.t.sf(abs(t), n - 2))
    return rho, p
