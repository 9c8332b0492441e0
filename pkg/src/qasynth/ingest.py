"""Corpus loading and token-budgeted segmentation.

Token counts come from a small regex tokenizer: runs of word characters are
tokens, an apostrophe opens a clitic token (``"don't"`` gives ``don`` and
``'t``), and every other non-space character is a token of its own. The
segment cap is measured in these tokens.
"""

from __future__ import annotations

import bisect
import json
import logging
import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Literal, Sequence

from .records import Segment

log = logging.getLogger(__name__)

TOKENIZER_NAME = "wordpunct-v1"
DEFAULT_MAX_TOKENS = 256
MIN_MAX_TOKENS = 16

_TOKEN_RE = re.compile(r"'\w+|\w+|[^\w\s]")
_SENTENCE_BREAK_RE = re.compile(r"(?<=[.!?])[\"'”’)\]]*(\s+)")

DELIMITERS = {
    "blank_line": r"\n[ \t]*\n",
    "heading_regex": r"(?im)^(?=#{1,6}\s|(?:chapter|section|part)\s+\w)",
}

CorpusFormat = Literal["plain_text", "jsonl_with_text_field"]


class SegmentationError(ValueError):
    pass


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Document:
    doc_id: str
    source_uri: str
    text: str
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.text.strip():
            raise SegmentationError(f"document {self.doc_id!r} is empty after normalization")


@dataclass(frozen=True)
class Diagnostic:
    source: str
    line: int
    message: str


def normalize_text(text: str) -> str:
    """NFC-normalize, unify newlines and strip outer whitespace."""
    text = unicodedata.normalize("NFC", text)
    return text.replace("\r\n", "\n").replace("\r", "\n").strip()


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def token_spans(text: str) -> list[tuple[int, int]]:
    return [m.span() for m in _TOKEN_RE.finditer(text)]


def count_tokens(text: str) -> int:
    """Number of tokens in ``text`` under the default tokenizer."""
    return sum(1 for _ in _TOKEN_RE.finditer(text))


def sentence_breaks(text: str) -> list[int]:
    """Character offsets where a new sentence may start.

    A break follows ``.``, ``!`` or ``?`` (plus closing quotes/brackets) and
    the whitespace after it. Any callable with this signature can replace it,
    e.g. a perplexity-based chunker that returns its own split points.
    """
    return [m.end(1) for m in _SENTENCE_BREAK_RE.finditer(text)]


BoundaryFn = Callable[[str], Sequence[int]]


def _unique_id(base: str, seen: set[str]) -> str:
    doc_id, n = base, 2
    while doc_id in seen:
        doc_id = f"{base}~{n}"
        n += 1
    seen.add(doc_id)
    return doc_id


def load_corpus(
    paths: Iterable[str | Path],
    fmt: CorpusFormat = "plain_text",
    *,
    text_field: str = "text",
    on_error: Literal["abort", "skip"] = "abort",
) -> tuple[list[Document], list[Diagnostic]]:
    """Load documents from plain-text or JSONL files.

    Returns the documents plus one diagnostic per skipped record. With
    ``on_error="abort"`` the first bad record raises :class:`CorpusError`.
    """
    if fmt not in ("plain_text", "jsonl_with_text_field"):
        raise CorpusError(f"unknown corpus format {fmt!r}")
    docs: list[Document] = []
    diagnostics: list[Diagnostic] = []
    seen: set[str] = set()

    def bad(source: str, line: int, message: str) -> None:
        if on_error == "abort":
            raise CorpusError(f"{source}:{line}: {message}")
        diagnostics.append(Diagnostic(source, line, message))
        log.warning("skipping %s:%d: %s", source, line, message)

    for raw_path in paths:
        path = Path(raw_path)
        try:
            content = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise CorpusError(f"cannot read {path}: {exc}") from exc

        if fmt == "plain_text":
            text = normalize_text(content)
            if not text:
                bad(path.name, 0, "empty document")
                continue
            doc_id = _unique_id(path.stem, seen)
            docs.append(Document(doc_id, str(path), text, {"source": path.name}))
            continue

        record_index = 0
        for lineno, line in enumerate(content.splitlines(), 1):
            if not line.strip():
                continue
            index = record_index
            record_index += 1
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                bad(path.name, lineno, f"malformed JSON: {exc.msg}")
                continue
            if not isinstance(record, dict) or not isinstance(record.get(text_field), str):
                bad(path.name, lineno, f"missing string field {text_field!r}")
                continue
            text = normalize_text(record[text_field])
            if not text:
                bad(path.name, lineno, "empty document")
                continue
            base = str(record["id"]) if "id" in record else f"{path.stem}-{index}"
            meta = {"source": path.name, "record_index": str(index)}
            for key in ("title", "domain"):
                if isinstance(record.get(key), str):
                    meta[key] = record[key]
            docs.append(Document(_unique_id(base, seen), str(path), text, meta))
    return docs, diagnostics


def _check_cap(max_tokens: int) -> None:
    if max_tokens < MIN_MAX_TOKENS:
        raise SegmentationError(f"max_tokens must be >= {MIN_MAX_TOKENS}, got {max_tokens}")


def _pack(
    text: str, lo: int, hi: int, max_tokens: int, boundaries: BoundaryFn
) -> list[tuple[int, int]]:
    """Greedy sentence packing of ``text[lo:hi]`` into character spans."""
    piece = text[lo:hi]
    spans = token_spans(piece)
    if not spans:
        return []
    breaks = list(boundaries(piece))
    sentences: list[list[int]] = []  # token index ranges [first, last + 1)
    current_sentence = -1
    for i, (start, _) in enumerate(spans):
        sid = bisect.bisect_right(breaks, start)
        if sid != current_sentence:
            sentences.append([i, i + 1])
            current_sentence = sid
        else:
            sentences[-1][1] = i + 1

    out: list[tuple[int, int]] = []
    cur: list[int] | None = None

    def flush(first: int, last: int) -> None:
        out.append((lo + spans[first][0], lo + spans[last - 1][1]))

    for first, last in sentences:
        n = last - first
        if cur is not None and (cur[1] - cur[0]) + n <= max_tokens:
            cur[1] = last
            continue
        if cur is not None:
            flush(*cur)
            cur = None
        while last - first > max_tokens:
            flush(first, first + max_tokens)
            first += max_tokens
        cur = [first, last]
    if cur is not None:
        flush(*cur)
    return out


def _make_segments(doc: Document, text: str, spans: list[tuple[int, int]]) -> list[Segment]:
    segments = []
    for index, (start, end) in enumerate(spans):
        chunk = text[start:end]
        segments.append(
            Segment(
                segment_id=f"{doc.doc_id}::{index:04d}",
                doc_id=doc.doc_id,
                index=index,
                text=chunk,
                token_count=count_tokens(chunk),
            )
        )
    return segments


def _short_passthrough(doc: Document, text: str) -> list[Segment] | None:
    if count_tokens(text) < MIN_MAX_TOKENS:
        log.warning("document %s has fewer than %d tokens; kept as one segment",
                    doc.doc_id, MIN_MAX_TOKENS)
        return _make_segments(doc, text, [(0, len(text))])
    return None


def segment_by_budget(
    doc: Document,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    boundaries: BoundaryFn = sentence_breaks,
) -> list[Segment]:
    """Pack whole sentences into segments of at most ``max_tokens`` tokens.

    A sentence longer than the cap is cut at token boundaries. Segments are
    contiguous slices of the normalized text, so joining them in order
    (with the whitespace between) gives back the document.
    """
    _check_cap(max_tokens)
    text = normalize_text(doc.text)
    if not text:
        raise SegmentationError(f"document {doc.doc_id!r} is empty after normalization")
    short = _short_passthrough(doc, text)
    if short is not None:
        return short
    return _make_segments(doc, text, _pack(text, 0, len(text), max_tokens, boundaries))


def segment_structural(
    doc: Document,
    delimiter: str = "blank_line",
    max_tokens: int = DEFAULT_MAX_TOKENS,
    *,
    pattern: str | None = None,
    boundaries: BoundaryFn = sentence_breaks,
) -> list[Segment]:
    """Split on structural delimiters, then budget-split oversized parts.

    ``delimiter`` is ``"blank_line"``, ``"heading_regex"`` or
    ``"custom_regex"``; the last needs ``pattern``.
    """
    _check_cap(max_tokens)
    if delimiter == "custom_regex":
        if not pattern:
            raise SegmentationError("custom_regex needs a pattern")
        regex_src = pattern
    elif delimiter in DELIMITERS:
        regex_src = DELIMITERS[delimiter]
    else:
        raise SegmentationError(f"unknown delimiter spec {delimiter!r}")
    try:
        regex = re.compile(regex_src)
    except re.error as exc:
        raise SegmentationError(f"invalid delimiter regex {regex_src!r}: {exc}") from exc

    text = normalize_text(doc.text)
    if not text:
        raise SegmentationError(f"document {doc.doc_id!r} is empty after normalization")
    short = _short_passthrough(doc, text)
    if short is not None:
        return short

    cuts = [0]
    for m in regex.finditer(text):
        if m.start() > cuts[-1] or (m.start() == cuts[-1] and m.end() > m.start()):
            cuts.extend([m.start(), m.end()])
    cuts.append(len(text))
    spans: list[tuple[int, int]] = []
    for lo, hi in zip(cuts[::2], cuts[1::2]):
        if hi > lo:
            spans.extend(_pack(text, lo, hi, max_tokens, boundaries))
    return _make_segments(doc, text, spans)
