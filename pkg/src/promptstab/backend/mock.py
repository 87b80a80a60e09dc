"""Deterministic planted-structure model used for offline verification.

Every prompt gets a quality score and a stability score in [0, 1]; every
example gets a difficulty in [0, 1]. The gold label receives probability
``logistic(a*quality - b*difficulty)`` and the rest is spread uniformly.
Paraphrase variants add a hashed Gaussian perturbation to that logit, scaled
by ``c * (1 - stability)`` of the prompt they paraphrase.
"""

from __future__ import annotations

import hashlib
import math
import re
from functools import lru_cache

from ..domain import Example, Prediction, Prompt, Task
from .config import MockParams


def unit_hash(*parts: object) -> float:
    """Map parts to a float in [0, 1), stable across runs and platforms."""
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big") / 2.0**64


def gauss_hash(*parts: object) -> float:
    """Standard normal deviate from two hashed uniforms (Box-Muller)."""
    u1 = unit_hash("g1", *parts)
    u2 = unit_hash("g2", *parts)
    return math.sqrt(-2.0 * math.log1p(-u1)) * math.cos(2.0 * math.pi * u2)


@lru_cache(maxsize=65536)
def _word_set(text: str) -> frozenset[str]:
    return frozenset(w.casefold() for w in re.findall(r"\w+", text))


def _token_score(params: MockParams, seed: int, text: str, tokens: tuple[str, ...], salt: str) -> float:
    words = _word_set(text)
    n_hits = sum(1 for t in set(tokens) if t.casefold() in words)
    raw = params.hash_weight * unit_hash(seed, salt, text) + params.token_bonus * n_hits
    return min(1.0, max(0.0, raw))


def quality(params: MockParams, seed: int, text: str) -> float:
    if text in params.pinned:
        return params.pinned[text][0]
    return _token_score(params, seed, text, params.good_tokens, "quality")


def stability(params: MockParams, seed: int, text: str) -> float:
    if text in params.pinned:
        return params.pinned[text][1]
    return _token_score(params, seed, text, params.stable_tokens, "stability")


def difficulty(seed: int, example_id: str) -> float:
    return unit_hash(seed, "difficulty", example_id)


def gold_logit(params: MockParams, seed: int, prompt_text: str, example_id: str,
               base_text: str | None = None) -> float:
    ref = base_text if base_text is not None else prompt_text
    logit = params.a * quality(params, seed, ref) - params.b * difficulty(seed, example_id)
    if base_text is not None and prompt_text != base_text:
        scale = params.c * (1.0 - stability(params, seed, ref)) * params.noise_gain
        if scale:
            logit += scale * gauss_hash(seed, "noise", prompt_text, example_id)
    return logit


def mock_predict(params: MockParams, seed: int, task: Task, prompt: Prompt, example: Example,
                 base: Prompt | None = None, wants_probs: bool = True) -> Prediction:
    """Planted-model prediction for ``example`` under ``prompt``.

    Pass ``base`` when ``prompt`` is a paraphrase variant; quality and
    stability then come from the base prompt and the variant text only seeds
    the perturbation.
    """
    logit = gold_logit(params, seed, prompt.text, example.id, base.text if base is not None else None)
    p_gold = 1.0 / (1.0 + math.exp(-logit)) if logit > -700 else 0.0
    gold = example.gold_label.strip()
    m = len(task.label_set)
    rest = (1.0 - p_gold) / (m - 1)
    probs = {lab: (p_gold if lab == gold else rest) for lab in task.label_set}
    pred = Prediction.from_probs(probs, task.label_set, raw_output="")
    pred = Prediction(pred.label, pred.probs if wants_probs else None, raw_output=pred.label)
    return pred
