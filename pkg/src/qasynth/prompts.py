"""Versioned prompt templates shipped under ``qasynth/templates``.

A template file starts with ``# version: <tag>`` and holds named blocks
introduced by ``[[name]]`` lines. Blocks use :class:`string.Template`
placeholders (``$passage``) so JSON examples need no escaping.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from string import Template

_BLOCK_RE = re.compile(r"^\[\[(\w+)\]\]\s*$", re.MULTILINE)
_VERSION_RE = re.compile(r"^#\s*version:\s*(\S+)")

TEMPLATE_NAMES = (
    "generate_qa",
    "regenerate_explicit",
    "adjudicate",
    "backfill_reasoning",
    "distractors",
    "replace_distractor",
    "appraise_distractors",
    "repair_record",
)


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    version: str
    blocks: dict[str, str]

    def render(self, block: str, **values: object) -> str:
        return Template(self.blocks[block]).substitute({k: str(v) for k, v in values.items()})

    def has(self, block: str) -> bool:
        return block in self.blocks


@lru_cache(maxsize=None)
def load_template(name: str) -> PromptTemplate:
    source = resources.files("qasynth").joinpath("templates", f"{name}.txt").read_text("utf-8")
    m = _VERSION_RE.match(source)
    if not m:
        raise ValueError(f"template {name!r} lacks a version header")
    parts = _BLOCK_RE.split(source)
    blocks = {parts[i]: parts[i + 1].strip("\n") for i in range(1, len(parts) - 1, 2)}
    return PromptTemplate(name, m.group(1), blocks)


def template_versions() -> dict[str, str]:
    return {name: load_template(name).version for name in TEMPLATE_NAMES}
