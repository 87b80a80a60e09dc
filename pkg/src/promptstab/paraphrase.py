"""Semantically equivalent prompt variants.

Variants come from an LLM prompted with the shipped meta-prompt, from a
rule-based rewriter when the backend is the mock, or from a file authored
by hand. Every variant must keep the base prompt's placeholder set.
"""

from __future__ import annotations

import itertools
import json
import os
import logging
import random
import re
from pathlib import Path

from .backend import Backend
from .domain import Prompt, PromptVariantSet, Provenance, placeholders
from .errors import ConfigError, ParseError, PlaceholderMismatch, VariantGenerationError
from .textgen import load_template, map_outside_placeholders, parse_string_list, stable_seed, template_version

log = logging.getLogger(__name__)

DEFAULT_K = 3
META_PROMPT = "paraphrase_v1.txt"
MAX_ATTEMPTS = 4
PARAPHRASE_TEMPERATURE = 0.7


# ---------------------------------------------------------------------------
# Rule-based rewriter
# ---------------------------------------------------------------------------

_SYNONYMS = {
    "determine": "decide", "decide": "determine",
    "classify": "categorize", "categorize": "classify",
    "given": "provided", "provided": "given",
    "answer": "reply", "reply": "answer",
    "following": "below", "text": "passage",
    "whether": "if", "choose": "pick", "pick": "choose",
    "read": "review", "review": "read",
}
_DETERMINERS = {"the": "this", "this": "the", "a": "one", "an": "one"}


def _swap_words(text: str, table: dict[str, str]) -> str:
    def sub(m: re.Match) -> str:
        word = m.group(0)
        rep = table.get(word.lower())
        if rep is None:
            return word
        return rep.capitalize() if word[0].isupper() else rep
    return re.sub(r"[A-Za-z]+", sub, text)


def _lower_first(text: str) -> str:
    return text[:1].lower() + text[1:] if text[:1].isalpha() and not text[:2].isupper() else text


def _politeness(text: str) -> str:
    if text.lower().startswith("please"):
        return text
    return "Please " + _lower_first(text)


def _interrogative(text: str) -> str:
    return "Could you handle the following request? " + text


def _clause_reorder(text: str) -> str:
    parts = re.split(r"(?<=[.!?])\s+", text.strip())
    if len(parts) < 2:
        return text
    return " ".join(parts[1:] + parts[:1])


def _synonyms(text: str) -> str:
    return map_outside_placeholders(text, lambda s: _swap_words(s, _SYNONYMS))


def _determiners(text: str) -> str:
    return map_outside_placeholders(text, lambda s: _swap_words(s, _DETERMINERS))


def _header(text: str) -> str:
    return "Instructions:\n" + text


RULES = {
    "clause-reorder": _clause_reorder,
    "synonym-swap": _synonyms,
    "determiner-swap": _determiners,
    "politeness": _politeness,
    "interrogative": _interrogative,
    "header": _header,
}
# wrappers go last so reordering never moves them
_RULE_ORDER = ("clause-reorder", "synonym-swap", "determiner-swap", "interrogative", "politeness", "header")


def rule_paraphrases(text: str, k: int, seed: int) -> list[str]:
    """Up to ``k`` distinct deterministic rewrites of ``text``.

    Rule combinations are tried smallest first, in a seeded order within
    each size, and only rewrites that keep the placeholder set are kept.
    """
    rng = random.Random(stable_seed("paraphrase", seed, text))
    want = placeholders(text)
    seen = {text}
    out: list[str] = []
    for size in range(1, len(_RULE_ORDER) + 1):
        combos = list(itertools.combinations(_RULE_ORDER, size))
        rng.shuffle(combos)
        for combo in combos:
            new = text
            for name in combo:
                new = RULES[name](new)
            if new in seen or placeholders(new) != want:
                continue
            seen.add(new)
            out.append(new)
            if len(out) == k:
                return out
    return out


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------


def _variant_prompts(base: Prompt, texts: list[str]) -> PromptVariantSet:
    variants = tuple(Prompt(f"{base.id}.v{i + 1}", t, Provenance.paraphrase_of(base.id)) for i, t in enumerate(texts))
    return PromptVariantSet(base, variants)


def _llm_paraphrases(backend: Backend, base: Prompt, k: int, seed: int) -> list[str]:
    template = load_template(META_PROMPT)
    want = base.placeholders
    accepted: list[str] = []
    for attempt in range(MAX_ATTEMPTS):
        need = k - len(accepted)
        content = template.substitute(k=need, prompt=base.text)
        raw = backend.complete([{"role": "user", "content": content}],
                               temperature=PARAPHRASE_TEMPERATURE, seed=seed + attempt)
        for cand in parse_string_list(raw):
            if placeholders(cand) != want:
                log.info("rejecting paraphrase with placeholders %s", sorted(placeholders(cand)))
                continue
            if cand == base.text or cand in accepted:
                continue
            accepted.append(cand)
            if len(accepted) == k:
                return accepted
    return accepted


def generate_variants(backend: Backend, base: Prompt, k: int = DEFAULT_K, seed: int = 0) -> PromptVariantSet:
    """``k`` placeholder-preserving paraphrases of ``base``.

    Results are memoised on the backend by (model, base text, k, seed), so a
    repeated call returns the identical variant set.

    Raises:
        VariantGenerationError: fewer than ``k`` valid distinct variants
            after bounded retries.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    key = json.dumps(["variants", backend.config.model_identity, template_version(META_PROMPT), base.text, k, seed])
    hit = backend.memo.get(key)
    if hit is None:
        hit = _disk_lookup(backend, key)
    if hit is not None:
        backend.memo[key] = hit
        return _variant_prompts(base, hit)
    if backend.is_mock:
        texts = rule_paraphrases(base.text, k, seed)
    else:
        texts = _llm_paraphrases(backend, base, k, seed)
    if len(texts) < k:
        raise VariantGenerationError(f"only {len(texts)} of {k} valid paraphrases for prompt {base.id!r}")
    backend.memo[key] = list(texts)
    _disk_store(backend, key, texts)
    return _variant_prompts(base, texts)


VARIANT_CACHE_FILE = "variants.jsonl"


def _disk_lookup(backend: Backend, key: str) -> list[str] | None:
    if not backend.config.cache_dir:
        return None
    path = Path(backend.config.cache_dir) / VARIANT_CACHE_FILE
    if not path.exists():
        return None
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                continue
            if rec.get("key") == key:
                return list(rec["texts"])
    return None


def _disk_store(backend: Backend, key: str, texts: list[str]) -> None:
    if not backend.config.cache_dir:
        return
    path = Path(backend.config.cache_dir)
    path.mkdir(parents=True, exist_ok=True)
    with (path / VARIANT_CACHE_FILE).open("a", encoding="utf-8") as fh:
        fh.write(json.dumps({"key": key, "texts": texts}, ensure_ascii=False) + "\n")


def load_variants(path: str | Path) -> PromptVariantSet:
    """Read a variant file ``{"base": {...}, "variants": [{...}, ...]}``.

    Variants may be given as prompt objects or plain strings.

    Raises:
        ParseError: unreadable JSON or missing keys.
        PlaceholderMismatch: a variant's placeholders differ from the base.
        ConfigError: empty variant list or duplicated text.
    """
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        base = Prompt.from_dict(data["base"]) if isinstance(data["base"], dict) else Prompt("base", str(data["base"]))
        raw_variants = data["variants"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(raw_variants, list):
        raise ParseError(f"{path}: variants must be a list")
    variants = []
    for i, v in enumerate(raw_variants):
        if isinstance(v, str):
            v = {"id": f"{base.id}.v{i + 1}", "text": v, "provenance": Provenance.paraphrase_of(base.id).to_dict()}
        prompt = Prompt.from_dict(v)
        if prompt.placeholders != base.placeholders:
            raise PlaceholderMismatch(i, f"placeholder-mismatch({i}): variant {prompt.id!r}")
        variants.append(prompt)
    return PromptVariantSet(base, tuple(variants))


def save_variants(variant_set: PromptVariantSet, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(variant_set.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    os.replace(tmp, path)


__all__ = ["DEFAULT_K", "generate_variants", "load_variants", "rule_paraphrases", "save_variants"]
