"""Stability-conditioned uncertainty analysis over evaluation records."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .domain import EvalRecord, EvalSummary
from .errors import DegenerateInputError, EmptyInputError, MetricError, MissingProbsError
from .metrics import spearman


@dataclass(frozen=True)
class Correlation:
    """A Spearman result, or the reason it could not be computed."""

    rho: float | None
    p_value: float | None
    n: int
    status: str = "ok"  # ok | degenerate | insufficient | absent

    def to_dict(self) -> dict[str, Any]:
        return {"rho": self.rho, "p_value": self.p_value, "n": self.n, "status": self.status}


def _correlate(xs: Sequence[float], ys: Sequence[float]) -> Correlation:
    n = len(xs)
    if n == 0:
        return Correlation(None, None, 0, "absent")
    try:
        rho, p = spearman(xs, ys)
    except DegenerateInputError:
        return Correlation(None, None, n, "degenerate")
    except MetricError:
        return Correlation(None, None, n, "insufficient")
    return Correlation(rho, p, n)


@dataclass(frozen=True)
class MarginRow:
    flip_rate: float
    count: int
    min: float
    q1: float
    median: float
    q3: float
    max: float

    FIELDS = ("flip_rate", "count", "min", "q1", "median", "q3", "max")

    def to_dict(self) -> dict[str, Any]:
        return {f: getattr(self, f) for f in self.FIELDS}


@dataclass(frozen=True)
class ScatterRow:
    prompt_id: str
    accuracy: float
    mean_flip_rate: float

    FIELDS = ("prompt_id", "accuracy", "mean_flip_rate")

    def to_dict(self) -> dict[str, Any]:
        return {f: getattr(self, f) for f in self.FIELDS}


@dataclass(frozen=True)
class StratifiedReport:
    n_stable: int
    n_unstable: int
    mean_set_size_stable: float | None = None
    mean_set_size_unstable: float | None = None
    coverage_stable: float | None = None
    coverage_unstable: float | None = None
    mean_margin_stable: float | None = None
    mean_margin_unstable: float | None = None
    n_with_sets: int = 0
    spearman_flip_setsize: Correlation = field(default_factory=lambda: Correlation(None, None, 0, "absent"))
    spearman_margin_fliprate: Correlation = field(default_factory=lambda: Correlation(None, None, 0, "absent"))
    margin_by_fliprate_bins: tuple[MarginRow, ...] = ()
    degenerate_groups: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_stable": self.n_stable,
            "n_unstable": self.n_unstable,
            "n_with_sets": self.n_with_sets,
            "mean_set_size_stable": self.mean_set_size_stable,
            "mean_set_size_unstable": self.mean_set_size_unstable,
            "coverage_stable": self.coverage_stable,
            "coverage_unstable": self.coverage_unstable,
            "mean_margin_stable": self.mean_margin_stable,
            "mean_margin_unstable": self.mean_margin_unstable,
            "spearman_flip_setsize": self.spearman_flip_setsize.to_dict(),
            "spearman_margin_fliprate": self.spearman_margin_fliprate.to_dict(),
            "margin_by_fliprate_bins": [r.to_dict() for r in self.margin_by_fliprate_bins],
            "degenerate_groups": list(self.degenerate_groups),
        }


def _mean(values: Sequence[float]) -> float | None:
    return float(np.mean(values)) if len(values) else None


def stratify(records: Sequence[EvalRecord]) -> StratifiedReport:
    """Split records into stable (no flips) and unstable groups and compare them.

    Set-size and coverage statistics use only records that carry a conformal
    set (the evaluation half); margin statistics use records with margins.
    A group with no members gets ``None`` statistics and is listed in
    ``degenerate_groups``.
    """
    if not records:
        raise EmptyInputError("no records to stratify")
    stable = [r for r in records if not r.flip]
    unstable = [r for r in records if r.flip]
    degenerate = tuple(name for name, g in (("stable", stable), ("unstable", unstable)) if not g)

    def set_sizes(group):
        return [len(r.conformal_set) for r in group if r.conformal_set is not None]

    def covered(group):
        return [float(r.covered) for r in group if r.conformal_set is not None]

    def margins(group):
        return [r.margin for r in group if r.margin is not None]

    with_sets = [r for r in records if r.conformal_set is not None]
    with_margin = [r for r in records if r.margin is not None]
    return StratifiedReport(
        n_stable=len(stable),
        n_unstable=len(unstable),
        mean_set_size_stable=_mean(set_sizes(stable)),
        mean_set_size_unstable=_mean(set_sizes(unstable)),
        coverage_stable=_mean(covered(stable)),
        coverage_unstable=_mean(covered(unstable)),
        mean_margin_stable=_mean(margins(stable)),
        mean_margin_unstable=_mean(margins(unstable)),
        n_with_sets=len(with_sets),
        spearman_flip_setsize=_correlate([r.flip_rate for r in with_sets],
                                         [len(r.conformal_set) for r in with_sets]),
        spearman_margin_fliprate=_correlate([r.margin for r in with_margin],
                                            [r.flip_rate for r in with_margin]),
        margin_by_fliprate_bins=tuple(margin_flip_table(with_margin)) if with_margin else (),
        degenerate_groups=degenerate,
    )


def margin_flip_table(records: Sequence[EvalRecord]) -> list[MarginRow]:
    """Five-number margin summary per distinct flip rate (linear-interpolation quantiles)."""
    if any(r.margin is None for r in records):
        raise MissingProbsError("missing-margin: every record needs a margin")
    groups: dict[float, list[float]] = {}
    for r in records:
        groups.setdefault(round(r.flip_rate, 12), []).append(r.margin)
    rows = []
    for rate in sorted(groups):
        m = np.asarray(groups[rate], dtype=float)
        q = np.percentile(m, [0, 25, 50, 75, 100], method="linear")
        rows.append(MarginRow(rate, int(m.size), *(float(v) for v in q)))
    return rows


def prompt_scatter(summaries: Sequence[EvalSummary]) -> list[ScatterRow]:
    return [ScatterRow(s.prompt_id, s.accuracy, s.mean_flip_rate) for s in summaries]


def rows_to_csv(rows: Sequence[MarginRow | ScatterRow], fields: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row.to_dict())
    return buf.getvalue()
