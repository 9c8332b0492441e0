"""SFT-ready export: schema validation, dedup, repair and quarantine.

Record layouts (key order is part of the format):

* ``qa_plain`` / ``qa_cot``: ``{"instruction", "input", "output"}``. For
  ``qa_cot`` an implicit pair's output is its reasoning, then
  :data:`ANSWER_DELIMITER`, then the answer; explicit pairs output the
  answer alone.
* ``mcq``: ``{"stem", "options", "answer_letter"}`` with four options and
  a letter in ``A``-``D``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .backend import Backend, BackendError, ChatPrompt
from .jsonfix import extract_object, repair_json
from .ledger import RunLedger
from .prompts import load_template
from .quality_control import normalize_for_match
from .records import MCQItem, QAPair, QType, write_json, write_jsonl

log = logging.getLogger(__name__)

ANSWER_DELIMITER = "\n\nAnswer: "
LETTERS = "ABCD"


class ExportFormat(str, Enum):
    QA_PLAIN = "qa_plain"
    QA_COT = "qa_cot"
    MCQ = "mcq"


FIELDS = {
    ExportFormat.QA_PLAIN: ("instruction", "input", "output"),
    ExportFormat.QA_COT: ("instruction", "input", "output"),
    ExportFormat.MCQ: ("stem", "options", "answer_letter"),
}


class Unrepairable(ValueError):
    def __init__(self, raw: str, reason: str):
        super().__init__(reason)
        self.raw = raw
        self.reason = reason


@dataclass(frozen=True)
class SchemaError:
    """A validation failure: ``path`` names the field, ``reason`` the rule."""

    path: str
    reason: str

    def __str__(self) -> str:
        return f"{self.path}: {self.reason}"


@dataclass
class ExportResult:
    n_input: int = 0
    n_exported: int = 0
    n_deduped: int = 0
    n_quarantined: int = 0
    n_repaired: int = 0

    def to_dict(self) -> dict:
        return {
            "n_input": self.n_input,
            "n_exported": self.n_exported,
            "n_deduped": self.n_deduped,
            "n_quarantined": self.n_quarantined,
            "n_repaired": self.n_repaired,
        }


def qa_record(pair: QAPair, fmt: ExportFormat | str, context: str = "") -> dict:
    fmt = ExportFormat(fmt)
    if fmt is ExportFormat.MCQ:
        raise ValueError("QA pairs cannot be exported as mcq; build MCQ items first")
    output = pair.answer
    if fmt is ExportFormat.QA_COT and pair.qtype is QType.IMPLICIT and pair.reasoning:
        output = f"{pair.reasoning}{ANSWER_DELIMITER}{pair.answer}"
    return {"instruction": pair.question, "input": context, "output": output}


def mcq_record(item: MCQItem) -> dict:
    return {"stem": item.stem, "options": list(item.options), "answer_letter": LETTERS[item.correct_index]}


def _check_record(obj: Any, fmt: ExportFormat) -> SchemaError | None:
    if not isinstance(obj, dict):
        return SchemaError("$", "type: expected an object")
    fields = FIELDS[fmt]
    for key in fields:
        if key not in obj:
            return SchemaError(key, "missing")
    for key in obj:
        if key not in fields:
            return SchemaError(key, "unexpected field")
    if fmt is ExportFormat.MCQ:
        if not isinstance(obj["stem"], str) or not obj["stem"].strip():
            return SchemaError("stem", "type: non-empty string required")
        options = obj["options"]
        if not isinstance(options, list):
            return SchemaError("options", "type: list required")
        if len(options) != 4:
            return SchemaError("options", "cardinality")
        for i, opt in enumerate(options):
            if not isinstance(opt, str) or not opt.strip():
                return SchemaError(f"options[{i}]", "type: non-empty string required")
        if len({normalize_for_match(o) for o in options}) != 4:
            return SchemaError("options", "duplicate options")
        if obj["answer_letter"] not in tuple(LETTERS):
            return SchemaError("answer_letter", "range")
        return None
    for key in ("instruction", "output"):
        if not isinstance(obj[key], str) or not obj[key].strip():
            return SchemaError(key, "type: non-empty string required")
    if not isinstance(obj["input"], str):
        return SchemaError("input", "type: string required")
    return None


def validate_record(line: str, fmt: ExportFormat | str) -> SchemaError | None:
    """Validate one JSONL line; ``None`` means the record is well formed."""
    fmt = ExportFormat(fmt)
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        return SchemaError("$", f"parse: {exc.msg}")
    return _check_record(obj, fmt)


def _ordered(obj: dict, fmt: ExportFormat) -> dict:
    return {k: obj[k] for k in FIELDS[fmt]}


def coerce_record(
    obj: Any,
    fmt: ExportFormat | str,
    *,
    contexts: Mapping[str, str] | None = None,
    include_context: bool = False,
) -> dict | None:
    """Turn a parsed object into an export record of ``fmt`` if possible.

    Accepts records already in export layout, stage-2 QA pair records and
    stage-3 MCQ records. Returns ``None`` when the object fits none.
    """
    fmt = ExportFormat(fmt)
    if not isinstance(obj, dict):
        return None
    if set(obj) == set(FIELDS[fmt]):
        return _ordered(obj, fmt)
    try:
        if fmt is ExportFormat.MCQ and {"stem", "options", "correct_index"} <= set(obj):
            idx = obj["correct_index"]
            if isinstance(idx, bool) or not isinstance(idx, int) or not 0 <= idx < 4:
                return None
            return {"stem": obj["stem"], "options": obj["options"], "answer_letter": LETTERS[idx]}
        if fmt is not ExportFormat.MCQ and {"question", "answer", "qtype"} <= set(obj):
            pair = QAPair.from_dict({"qa_id": "", "segment_id": "", **obj})
            context = (contexts or {}).get(pair.segment_id, "") if include_context else ""
            return qa_record(pair, fmt, context)
    except (ValueError, KeyError, TypeError):
        return None
    return None


def _accept(obj: Any, fmt: ExportFormat, **kw) -> dict | None:
    record = coerce_record(obj, fmt, **kw)
    if record is not None and _check_record(record, fmt) is None:
        return record
    return None


def repair_record(
    malformed: str,
    fmt: ExportFormat | str,
    backend: Backend | None = None,
    *,
    contexts: Mapping[str, str] | None = None,
    include_context: bool = False,
) -> dict:
    """Recover a valid export record from a broken line.

    Tier 1 applies deterministic fixes (fences, trailing commas, bare keys,
    unbalanced brackets). Tier 2, when a backend is given, makes one model
    call with the raw text. Raises :class:`Unrepairable` if both fail.
    """
    fmt = ExportFormat(fmt)
    kw = {"contexts": contexts, "include_context": include_context}
    try:
        record = _accept(repair_json(malformed), fmt, **kw)
    except ValueError:
        record = None
    if record is not None:
        return record
    if backend is None:
        raise Unrepairable(malformed, "mechanical repair failed")
    tpl = load_template("repair_record")
    prompt = ChatPrompt(
        user=tpl.render("user", format=fmt.value, fields=", ".join(FIELDS[fmt]), raw=malformed),
        system=tpl.render("system"),
        temperature=0.0,
        max_output_tokens=1024,
        task="repair_record",
    )
    try:
        reply = backend.complete(prompt)
    except BackendError as exc:
        raise Unrepairable(malformed, f"reconstitution call failed: {exc}") from exc
    if reply.strip().upper().startswith("UNREPAIRABLE"):
        raise Unrepairable(malformed, "model declined to reconstitute")
    obj = extract_object(reply)
    record = _accept(obj, fmt, **kw) if obj is not None else None
    if record is None:
        raise Unrepairable(malformed, "reconstituted record is still invalid")
    return record


def _dedup_key(question: str, answer: str) -> tuple[str, str]:
    return normalize_for_match(question), normalize_for_match(answer)


def dedup(pairs: Sequence[QAPair], ledger: RunLedger | None = None) -> list[QAPair]:
    """Drop pairs repeating an earlier (question, answer); first one wins."""
    seen: set[tuple[str, str]] = set()
    kept = []
    for pair in pairs:
        key = _dedup_key(pair.question, pair.answer)
        if key in seen:
            if ledger is not None:
                ledger.record("dedup_removed", qa_id=pair.qa_id)
            continue
        seen.add(key)
        kept.append(pair)
    return kept


def _record_key(record: dict, fmt: ExportFormat) -> tuple[str, str]:
    if fmt is ExportFormat.MCQ:
        return _dedup_key(record["stem"], record["options"][LETTERS.index(record["answer_letter"])])
    answer = record["output"].rsplit(ANSWER_DELIMITER, 1)[-1]
    return _dedup_key(record["instruction"], answer)


def _write_manifest(path: str | Path | None, fmt: ExportFormat, result: ExportResult,
                    extra: Mapping[str, Any] | None) -> None:
    if path is None:
        return
    write_json(path, {"format": fmt.value, **result.to_dict(), **(extra or {})})


def export_dataset(
    items: Sequence[QAPair | MCQItem],
    fmt: ExportFormat | str,
    out_path: str | Path,
    *,
    include_context: bool = False,
    contexts: Mapping[str, str] | None = None,
    manifest_path: str | Path | None = None,
    manifest_extra: Mapping[str, Any] | None = None,
    ledger: RunLedger | None = None,
) -> ExportResult:
    """Write ``items`` as JSONL in ``fmt`` plus an optional sidecar manifest.

    ``contexts`` maps segment ids to segment text for ``include_context``.
    """
    fmt = ExportFormat(fmt)
    want = MCQItem if fmt is ExportFormat.MCQ else QAPair
    for item in items:
        if not isinstance(item, want):
            raise TypeError(f"format {fmt.value} needs {want.__name__} items, got {type(item).__name__}")
    result = ExportResult(n_input=len(items))
    if fmt is ExportFormat.MCQ:
        records = [mcq_record(item) for item in items]
    else:
        kept = dedup(items, ledger)
        result.n_deduped = len(items) - len(kept)
        records = [
            qa_record(p, fmt, (contexts or {}).get(p.segment_id, "") if include_context else "")
            for p in kept
        ]
    good = []
    for record in records:
        problem = _check_record(record, fmt)
        if problem is not None:
            result.n_quarantined += 1
            if ledger is not None:
                ledger.record("export_invalid", reason=str(problem))
            continue
        good.append(record)
    result.n_exported = write_jsonl(out_path, good)
    _write_manifest(manifest_path, fmt, result, manifest_extra)
    return result


def export_lines(
    lines: Iterable[str],
    fmt: ExportFormat | str,
    out_path: str | Path,
    *,
    quarantine_path: str | Path | None = None,
    backend: Backend | None = None,
    include_context: bool = False,
    contexts: Mapping[str, str] | None = None,
    manifest_path: str | Path | None = None,
    manifest_extra: Mapping[str, Any] | None = None,
    ledger: RunLedger | None = None,
) -> ExportResult:
    """Export raw JSONL lines, repairing or quarantining broken ones.

    Every input line ends up exported, deduplicated or quarantined, so
    ``n_exported + n_deduped + n_quarantined == n_input``. Quarantined
    lines keep their original text in the ``raw`` field.
    """
    fmt = ExportFormat(fmt)
    kw = {"contexts": contexts, "include_context": include_context}
    result = ExportResult()
    good: list[dict] = []
    bad: list[dict] = []
    seen: set[tuple[str, str]] = set()
    for line_no, raw in enumerate(lines, 1):
        raw = raw.rstrip("\n")
        if not raw.strip():
            continue
        result.n_input += 1
        try:
            record = _accept(json.loads(raw), fmt, **kw)
        except json.JSONDecodeError:
            record = None
        if record is None:
            try:
                record = repair_record(raw, fmt, backend, **kw)
                result.n_repaired += 1
            except Unrepairable as exc:
                result.n_quarantined += 1
                bad.append({"line_no": line_no, "reason": exc.reason, "raw": raw})
                if ledger is not None:
                    ledger.record("quarantined", line_no=line_no, reason=exc.reason)
                continue
        key = _record_key(record, fmt)
        if key in seen:
            result.n_deduped += 1
            if ledger is not None:
                ledger.record("dedup_removed", line_no=line_no)
            continue
        seen.add(key)
        good.append(record)
    result.n_exported = write_jsonl(out_path, good)
    if quarantine_path is not None:
        write_jsonl(quarantine_path, bad)
    _write_manifest(manifest_path, fmt, result, manifest_extra)
    return result
