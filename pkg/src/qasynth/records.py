"""Record types shared across pipeline stages, plus JSONL helpers."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator


class QType(str, Enum):
    EXPLICIT = "Explicit"
    IMPLICIT = "Implicit"

    @classmethod
    def parse(cls, value: Any) -> "QType":
        if isinstance(value, QType):
            return value
        text = str(value).strip().lower()
        for member in cls:
            if member.value.lower() == text:
                return member
        raise ValueError(f"unknown question type: {value!r}")


class Provenance(str, Enum):
    GENERATED = "Generated"
    REGENERATED_IN_QC = "RegeneratedInQC"


@dataclass(frozen=True)
class Segment:
    segment_id: str
    doc_id: str
    index: int
    text: str
    token_count: int

    def to_dict(self) -> dict:
        return {
            "segment_id": self.segment_id,
            "doc_id": self.doc_id,
            "index": self.index,
            "text": self.text,
            "token_count": self.token_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Segment":
        return cls(
            segment_id=str(d["segment_id"]),
            doc_id=str(d["doc_id"]),
            index=int(d["index"]),
            text=str(d["text"]),
            token_count=int(d["token_count"]),
        )


@dataclass(frozen=True)
class QAPair:
    qa_id: str
    segment_id: str
    question: str
    answer: str
    qtype: QType
    reasoning: str | None = None
    provenance: Provenance = Provenance.GENERATED

    def __post_init__(self):
        if not self.question.strip() or not self.answer.strip():
            raise ValueError(f"{self.qa_id}: question and answer must be non-empty")
        if self.qtype is QType.IMPLICIT and not (self.reasoning or "").strip():
            raise ValueError(f"{self.qa_id}: implicit pairs need a reasoning trace")

    @property
    def is_explicit(self) -> bool:
        return self.qtype is QType.EXPLICIT

    def to_dict(self) -> dict:
        return {
            "qa_id": self.qa_id,
            "segment_id": self.segment_id,
            "question": self.question,
            "answer": self.answer,
            "qtype": self.qtype.value,
            "reasoning": self.reasoning,
            "provenance": self.provenance.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QAPair":
        return cls(
            qa_id=str(d["qa_id"]),
            segment_id=str(d["segment_id"]),
            question=str(d["question"]),
            answer=str(d["answer"]),
            qtype=QType.parse(d["qtype"]),
            reasoning=d.get("reasoning"),
            provenance=Provenance(d.get("provenance", Provenance.GENERATED.value)),
        )


@dataclass(frozen=True)
class MCQItem:
    """A QA pair rendered as a four-option question.

    ``nuanced_index`` points at the distractor the model flagged as the
    subtle near-miss. ``rng_seed_used`` is the generator key that fixed
    the option order.
    """

    qa_id: str
    stem: str
    options: tuple[str, str, str, str]
    correct_index: int
    nuanced_index: int
    rng_seed_used: int = 0

    def __post_init__(self):
        if len(self.options) != 4:
            raise ValueError("an MCQ item has exactly 4 options")
        if not 0 <= self.correct_index < 4 or not 0 <= self.nuanced_index < 4:
            raise ValueError("option index out of range")
        if self.nuanced_index == self.correct_index:
            raise ValueError("the nuanced distractor cannot be the correct option")

    @property
    def answer(self) -> str:
        return self.options[self.correct_index]

    def to_dict(self) -> dict:
        return {
            "qa_id": self.qa_id,
            "stem": self.stem,
            "options": list(self.options),
            "correct_index": self.correct_index,
            "nuanced_index": self.nuanced_index,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MCQItem":
        return cls(
            qa_id=str(d["qa_id"]),
            stem=str(d["stem"]),
            options=tuple(str(o) for o in d["options"]),
            correct_index=int(d["correct_index"]),
            nuanced_index=int(d["nuanced_index"]),
            rng_seed_used=int(d.get("rng_seed_used", 0)),
        )


def dumps(obj: Any) -> str:
    """Serialize one JSONL line. Key order is insertion order, never sorted."""
    return json.dumps(obj, ensure_ascii=False, separators=(", ", ": "))


def read_jsonl(path: str | os.PathLike) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc


def write_jsonl(path: str | os.PathLike, records: Iterable[dict]) -> int:
    """Atomically write ``records`` as JSONL, returning the line count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            for rec in records:
                fh.write(dumps(rec) + "\n")
                n += 1
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return n


def write_json(path: str | os.PathLike, obj: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(obj, fh, ensure_ascii=False, indent=2)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
