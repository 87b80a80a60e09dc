"""Helpers shared by LLM-driven prompt generation (paraphrases, candidates)."""

from __future__ import annotations

import hashlib
import json
import re
from importlib import resources
from string import Template
from typing import Callable

from .domain import _PLACEHOLDER_RE


def load_template(name: str) -> Template:
    return Template(resources.files("promptstab.resources").joinpath(name).read_text(encoding="utf-8"))


def template_version(name: str) -> str:
    """Short content hash of a shipped meta-prompt, recorded with generated prompts."""
    text = resources.files("promptstab.resources").joinpath(name).read_text(encoding="utf-8")
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def parse_string_list(text: str) -> list[str]:
    """Pull a list of strings out of model output.

    Prefers the outermost JSON array; falls back to non-empty lines with list
    markers stripped.
    """
    start, end = text.find("["), text.rfind("]")
    if 0 <= start < end:
        try:
            data = json.loads(text[start:end + 1])
            if isinstance(data, list):
                return [str(x).strip() for x in data if str(x).strip()]
        except json.JSONDecodeError:
            pass
    items = []
    for line in text.splitlines():
        line = re.sub(r"^\s*(?:[-*]|\d+[.)])\s*", "", line).strip()
        if line:
            items.append(line)
    return items


def map_outside_placeholders(text: str, fn: Callable[[str], str]) -> str:
    """Apply ``fn`` to the text between placeholders, leaving ``{field}`` slots intact."""
    out, pos = [], 0
    for m in _PLACEHOLDER_RE.finditer(text):
        out.append(fn(text[pos:m.start()]))
        out.append(m.group(0))
        pos = m.end()
    out.append(fn(text[pos:]))
    return "".join(out)


def stable_seed(*parts: object) -> int:
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big")
