"""Mapping raw model output onto a label set."""

from __future__ import annotations

import math
import re
from typing import Mapping, Sequence

from ..errors import InvalidOutput


def extract_label(raw_output: str, label_set: Sequence[str], example_id: str | None = None) -> str:
    """Map free text to a label.

    Rules, first match wins:

    1. exact match after trimming whitespace;
    2. case-insensitive exact match;
    3. exactly one label occurs as a whole word (case-insensitive). A label
       that only matches inside a longer matching label is discarded, so
       "Primary Progressive" does not also count as "Progressive".

    Raises:
        InvalidOutput: empty text, no rule matched, or rule 3 was ambiguous.
    """
    text = raw_output.strip()
    if not text:
        raise InvalidOutput(example_id, raw_output, "empty output")
    if text in label_set:
        return text
    folded = text.casefold()
    ci = [lab for lab in label_set if lab.casefold() == folded]
    if len(ci) == 1:
        return ci[0]

    spans: dict[str, list[tuple[int, int]]] = {}
    for lab in label_set:
        pat = re.compile(r"(?<!\w)" + re.escape(lab) + r"(?!\w)", re.IGNORECASE)
        found = [m.span() for m in pat.finditer(text)]
        if found:
            spans[lab] = found

    def shadowed(lab: str) -> bool:
        # every occurrence lies inside an occurrence of some other, longer label
        return all(
            any(o != lab and s2 <= s and e <= e2 and (e2 - s2) > (e - s) for o in spans for s2, e2 in spans[o])
            for s, e in spans[lab]
        )

    hits = [lab for lab in spans if not shadowed(lab)]
    if len(hits) == 1:
        return hits[0]
    reason = "no label found" if not hits else f"ambiguous: {hits}"
    raise InvalidOutput(example_id, raw_output, reason)


def softmax(scores: Mapping[str, float]) -> dict[str, float]:
    """Numerically stable softmax preserving key order."""
    top = max(scores.values())
    exps = {k: math.exp(v - top) for k, v in scores.items()}
    z = math.fsum(exps.values())
    return {k: e / z for k, e in exps.items()}


def label_scores_from_logprobs(top_logprobs: Sequence[Mapping], label_set: Sequence[str]) -> dict[str, float] | None:
    """Per-label scores from first-token ``top_logprobs`` entries.

    A token is credited to a label when the label starts with it
    (case-insensitive, whitespace trimmed) and no other label does. Returns
    ``None`` unless every label receives a score, so callers never fabricate
    confidence for labels the API did not report.
    """
    scores: dict[str, float] = {}
    for entry in top_logprobs:
        tok = str(entry.get("token", "")).strip().casefold()
        if not tok:
            continue
        owners = [lab for lab in label_set if lab.casefold().startswith(tok)]
        if len(owners) != 1:
            continue
        lab = owners[0]
        lp = float(entry["logprob"])
        scores[lab] = max(scores.get(lab, -math.inf), lp)
    if set(scores) != set(label_set):
        return None
    return {lab: scores[lab] for lab in label_set}
