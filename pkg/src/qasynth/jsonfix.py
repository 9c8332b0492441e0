"""Locate and mechanically repair JSON embedded in model output."""

from __future__ import annotations

import json
import re
from typing import Any

_FENCE_RE = re.compile(r"```[A-Za-z0-9_-]*[ \t]*\n?(.*?)(?:```|$)", re.DOTALL)
_BARE_WORD_RE = re.compile(r"[A-Za-z_][\w\-]*")
_PY_LITERALS = {"True": "true", "False": "false", "None": "null"}
_CLOSER = {"{": "}", "[": "]"}

_decoder = json.JSONDecoder()


def find_json(raw: str, kind: type = list) -> Any | None:
    """Return the first JSON value of type ``kind`` embedded in ``raw``.

    Text before and after the value is ignored. Returns ``None`` when no
    opening bracket yields a parseable value of the requested type.
    """
    opener = "[" if kind is list else "{"
    pos = raw.find(opener)
    while pos != -1:
        try:
            value, _ = _decoder.raw_decode(raw, pos)
        except json.JSONDecodeError:
            pass
        else:
            if isinstance(value, kind):
                return value
        pos = raw.find(opener, pos + 1)
    return None


def strip_fences(text: str) -> str:
    m = _FENCE_RE.search(text)
    return m.group(1) if m and m.group(1).strip() else text


def _rstrip_commas(out: list[str]) -> None:
    while out and (out[-1].isspace() or out[-1] == ","):
        out.pop()


def mechanical_fix(text: str) -> str:
    """Rewrite near-JSON into JSON without changing its content.

    Handles code fences, leading chatter, single-quoted strings, bare keys,
    Python literals, trailing commas, raw newlines inside strings,
    unterminated strings and unclosed brackets.
    """
    text = strip_fences(text).strip()
    starts = [i for i in (text.find("{"), text.find("[")) if i != -1]
    if starts:
        text = text[min(starts):]

    out: list[str] = []
    stack: list[str] = []
    quote: str | None = None
    last = ""  # last significant char emitted outside strings
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if quote:
            if c == "\\" and i + 1 < n:
                out.append(text[i : i + 2])
                i += 2
                continue
            if c == quote:
                out.append('"')
                quote, last = None, '"'
            elif c == '"':
                out.append('\\"')
            elif c == "\n":
                out.append("\\n")
            elif c == "\t":
                out.append("\\t")
            else:
                out.append(c)
            i += 1
            continue
        if c in "\"'":
            quote = c
            out.append('"')
            i += 1
            continue
        if c in "{[":
            stack.append(c)
            out.append(c)
            last = c
            i += 1
            continue
        if c in "}]":
            _rstrip_commas(out)
            if stack and _CLOSER[stack[-1]] == c:
                stack.pop()
                out.append(c)
                last = c
            i += 1
            continue
        m = _BARE_WORD_RE.match(text, i)
        if m:
            word = m.group()
            j = m.end()
            while j < n and text[j].isspace():
                j += 1
            if j < n and text[j] == ":" and last in "{,":
                out.append(f'"{word}"')
            else:
                out.append(_PY_LITERALS.get(word, word))
            last = "w"
            i = m.end()
            continue
        out.append(c)
        if not c.isspace():
            last = c
        i += 1

    if quote:
        out.append('"')
    _rstrip_commas(out)
    if out and out[-1] == ":":
        out.append(" null")
    while stack:
        out.append(_CLOSER[stack.pop()])
    return "".join(out)


def _truncations(fixed: str):
    """Yield ``fixed`` cut back at successive commas, rebalanced."""
    cut = len(fixed)
    while True:
        cut = fixed.rfind(",", 0, cut)
        if cut <= 0:
            return
        yield mechanical_fix(fixed[:cut])


def repair_json(text: str) -> Any:
    """Parse ``text`` as JSON, repairing it mechanically when needed.

    Raises :class:`ValueError` when nothing parseable can be recovered.
    The last resort drops trailing members one comma at a time, so a
    truncated record may come back with missing fields; callers validate.
    """
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    fixed = mechanical_fix(text)
    if not fixed or fixed[0] not in "{[":
        raise ValueError("no JSON structure found")
    try:
        return json.loads(fixed)
    except json.JSONDecodeError:
        pass
    for candidate in _truncations(fixed):
        try:
            return json.loads(candidate)
        except json.JSONDecodeError:
            continue
    raise ValueError("JSON could not be repaired mechanically")


def extract_object(raw: str) -> dict | None:
    """First JSON object in ``raw``, falling back to mechanical repair."""
    found = find_json(raw, dict)
    if found is not None:
        return found
    return _repaired(raw, "{", dict)


def _repaired(raw: str, opener: str, kind: type) -> Any | None:
    start = raw.find(opener)
    if start == -1:
        return None
    for candidate in (raw, raw[start:]):
        try:
            value = repair_json(candidate)
        except ValueError:
            continue
        if isinstance(value, kind):
            return value
    return None


def locate_array(raw: str) -> list | None:
    """First JSON array in ``raw``, falling back to mechanical repair."""
    found = find_json(raw, list)
    if found is not None:
        return found
    return _repaired(raw, "[", list)
