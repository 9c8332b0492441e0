"""Stage 2: fidelity and type adjudication with a per-segment explicit floor."""

from __future__ import annotations

import logging
import string
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Mapping, Sequence

from .backend import Backend, BackendError, ChatPrompt, map_bounded
from .generation import ParseFailure, parse_generation_output, with_retry_note
from .jsonfix import extract_object
from .prompts import load_template
from .records import Provenance, QAPair, QType, Segment

log = logging.getLogger(__name__)

QC_TEMPERATURE = 0.0
_EDGE_PUNCT = string.punctuation + "“”‘’«»…\u2014\u2013"


class MatchKind(str, Enum):
    EXACT_SUBSTRING = "ExactSubstring"
    NORMALIZED_SUBSTRING = "NormalizedSubstring"
    NOT_FOUND = "NotFound"
    NOT_APPLICABLE = "NotApplicable"


class Directive(str, Enum):
    KEEP = "KEEP"
    DELETE = "DELETE"
    TYPEFIX = "TYPEFIX"


class FloorUnsatisfied(RuntimeError):
    def __init__(self, segment_id: str, attempts: int):
        super().__init__(f"segment {segment_id}: no validated explicit pair after {attempts} regeneration attempts")
        self.segment_id = segment_id


class VerdictMismatch(ValueError):
    pass


@dataclass(frozen=True)
class GroundingReport:
    qa_id: str
    answer_found: bool
    match_kind: MatchKind
    matched_span: tuple[int, int] | None = None

    def describe(self) -> str:
        if self.match_kind is MatchKind.EXACT_SUBSTRING:
            return "ExactSubstring: the answer appears verbatim in the passage."
        if self.match_kind is MatchKind.NORMALIZED_SUBSTRING:
            return "NormalizedSubstring: the answer appears in the passage up to case, spacing or end punctuation."
        if self.match_kind is MatchKind.NOT_FOUND:
            return ("NotFound: WARNING, the answer does not occur in the passage; "
                    "check carefully for hallucinated content.")
        return "NotApplicable: implicit pair, answer is not expected verbatim."


@dataclass(frozen=True)
class QCVerdict:
    qa_id: str
    directive: Directive
    corrected_qtype: QType | None = None
    rationale: str = ""

    def __post_init__(self):
        if self.directive is Directive.TYPEFIX and self.corrected_qtype is None:
            raise ValueError("TYPEFIX needs a corrected type")
        if self.directive is not Directive.TYPEFIX and self.corrected_qtype is not None:
            raise ValueError(f"{self.directive.value} carries no corrected type")

    def to_dict(self) -> dict:
        return {
            "qa_id": self.qa_id,
            "directive": self.directive.value,
            "corrected_qtype": self.corrected_qtype.value if self.corrected_qtype else None,
            "rationale": self.rationale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QCVerdict":
        corrected = d.get("corrected_qtype")
        return cls(
            qa_id=str(d["qa_id"]),
            directive=Directive(d["directive"]),
            corrected_qtype=QType.parse(corrected) if corrected else None,
            rationale=str(d.get("rationale") or ""),
        )


def normalize_for_match(text: str) -> str:
    """Casefold, collapse whitespace and strip punctuation at both ends."""
    return " ".join(text.casefold().split()).strip(_EDGE_PUNCT + " ")


def _normalized_with_offsets(text: str) -> tuple[str, list[int]]:
    chars: list[str] = []
    offsets: list[int] = []
    pending_space = False
    for i, c in enumerate(text):
        if c.isspace():
            pending_space = bool(chars)
            continue
        if pending_space:
            chars.append(" ")
            offsets.append(i - 1)
            pending_space = False
        for folded in c.casefold():
            chars.append(folded)
            offsets.append(i)
    return "".join(chars), offsets


def grounding_prefilter(qa: QAPair, segment: Segment) -> GroundingReport:
    """Deterministic check that an explicit answer occurs in the segment."""
    if qa.segment_id != segment.segment_id:
        raise ValueError(f"pair {qa.qa_id} belongs to {qa.segment_id}, not {segment.segment_id}")
    if qa.qtype is QType.IMPLICIT:
        return GroundingReport(qa.qa_id, False, MatchKind.NOT_APPLICABLE)
    pos = segment.text.find(qa.answer)
    if pos != -1 and qa.answer:
        return GroundingReport(qa.qa_id, True, MatchKind.EXACT_SUBSTRING, (pos, pos + len(qa.answer)))
    needle = normalize_for_match(qa.answer)
    if needle:
        hay, offsets = _normalized_with_offsets(segment.text)
        pos = hay.find(needle)
        if pos != -1:
            span = (offsets[pos], offsets[pos + len(needle) - 1] + 1)
            return GroundingReport(qa.qa_id, True, MatchKind.NORMALIZED_SUBSTRING, span)
    return GroundingReport(qa.qa_id, False, MatchKind.NOT_FOUND)


def _grounding_note(qa: QAPair, segment: Segment, report: GroundingReport) -> str:
    note = report.describe()
    if report.match_kind is MatchKind.NOT_APPLICABLE:
        probe = replace(qa, qtype=QType.EXPLICIT)
        if grounding_prefilter(probe, segment).answer_found:
            note += " Note: this answer does occur verbatim in the passage."
    return note


def build_adjudication_prompt(
    qa: QAPair, segment: Segment, report: GroundingReport, temperature: float = QC_TEMPERATURE
) -> ChatPrompt:
    tpl = load_template("adjudicate")
    return ChatPrompt(
        user=tpl.render(
            "user",
            passage=segment.text,
            qa_id=qa.qa_id,
            qtype=qa.qtype.value.lower(),
            question=qa.question,
            answer=qa.answer,
            reasoning=qa.reasoning or "(none)",
            grounding=_grounding_note(qa, segment, report),
        ),
        system=tpl.render("system"),
        temperature=temperature,
        max_output_tokens=512,
        task="adjudicate",
    )


def parse_verdict(raw: str, qa: QAPair) -> QCVerdict:
    obj = extract_object(raw)
    if obj is None:
        raise ParseFailure("no JSON object found", raw)
    try:
        directive = Directive(str(obj.get("directive", "")).strip().upper())
    except ValueError:
        raise ParseFailure("directive must be KEEP, DELETE or TYPEFIX", raw, "directive")
    rationale = str(obj.get("rationale") or "").strip()
    if directive is not Directive.TYPEFIX:
        return QCVerdict(qa.qa_id, directive, None, rationale)
    flipped = QType.IMPLICIT if qa.qtype is QType.EXPLICIT else QType.EXPLICIT
    corrected = obj.get("corrected_type", obj.get("corrected_qtype"))
    if corrected is None:
        return QCVerdict(qa.qa_id, directive, flipped, rationale)
    try:
        corrected = QType.parse(corrected)
    except ValueError:
        raise ParseFailure("corrected_type must be explicit or implicit", raw, "corrected_type")
    if corrected is qa.qtype:
        raise ParseFailure("TYPEFIX must change the type", raw, "corrected_type")
    return QCVerdict(qa.qa_id, directive, corrected, rationale)


def adjudicate(
    qa: QAPair,
    segment: Segment,
    backend: Backend,
    *,
    report: GroundingReport | None = None,
    max_retries: int = 2,
    temperature: float = QC_TEMPERATURE,
) -> QCVerdict:
    """Ask the model for KEEP, DELETE or TYPEFIX on one pair.

    Fails closed: if no parseable verdict arrives within the retry budget
    the pair is deleted and the event is ledgered.
    """
    if report is None:
        report = grounding_prefilter(qa, segment)
    if report.match_kind is MatchKind.NOT_FOUND:
        backend.ledger.record("hallucination_warning", qa_id=qa.qa_id)
    base = build_adjudication_prompt(qa, segment, report, temperature)
    prompt = base
    problem = None
    for attempt in range(1, max_retries + 2):
        try:
            raw = backend.complete(prompt)
            return parse_verdict(raw, qa)
        except BackendError as exc:
            problem = f"backend error: {exc}"
        except ParseFailure as exc:
            problem = str(exc)
            prompt = with_retry_note(base, "adjudicate", problem)
        backend.ledger.record("adjudication_retry", qa_id=qa.qa_id, attempt=attempt, problem=problem)
    backend.ledger.record("adjudication_exhausted", qa_id=qa.qa_id, problem=problem)
    return QCVerdict(qa.qa_id, Directive.DELETE, None, f"adjudication exhausted: {problem}")


def backfill_reasoning(qa: QAPair, segment: Segment, backend: Backend) -> str | None:
    """One call asking how the answer follows from the passage."""
    tpl = load_template("backfill_reasoning")
    prompt = ChatPrompt(
        user=tpl.render("user", passage=segment.text, question=qa.question, answer=qa.answer),
        system=tpl.render("system"),
        temperature=QC_TEMPERATURE,
        max_output_tokens=768,
        task="backfill_reasoning",
    )
    try:
        raw = backend.complete(prompt)
    except BackendError:
        return None
    obj = extract_object(raw)
    if obj is not None:
        text = obj.get("reasoning")
        return text.strip() if isinstance(text, str) and text.strip() else None
    return raw.strip() or None


def apply_verdicts(
    pairs: Sequence[QAPair],
    verdicts: Sequence[QCVerdict],
    *,
    segments: Mapping[str, Segment] | None = None,
    backend: Backend | None = None,
) -> list[QAPair]:
    """Keep, drop or re-type pairs according to their verdicts.

    A pair re-typed to implicit without a reasoning trace gets one backfill
    call; if that yields nothing the pair is dropped rather than exported
    as an implicit pair with no trace.
    """
    by_id = {v.qa_id: v for v in verdicts}
    if len(by_id) != len(verdicts) or set(by_id) != {p.qa_id for p in pairs} or len(pairs) != len(verdicts):
        raise VerdictMismatch("need exactly one verdict per pair")
    out = []
    for pair in pairs:
        verdict = by_id[pair.qa_id]
        if verdict.directive is Directive.KEEP:
            out.append(pair)
        elif verdict.directive is Directive.DELETE:
            continue
        elif verdict.corrected_qtype is QType.EXPLICIT:
            out.append(replace(pair, qtype=QType.EXPLICIT))
        else:
            reasoning = pair.reasoning
            if not reasoning:
                if backend is None or segments is None:
                    raise ValueError("re-typing to implicit needs a backend and segments for backfill")
                reasoning = backfill_reasoning(pair, segments[pair.segment_id], backend)
            if not reasoning:
                if backend is not None:
                    backend.ledger.record("backfill_failed", qa_id=pair.qa_id)
                continue
            out.append(replace(pair, qtype=QType.IMPLICIT, reasoning=reasoning))
    return out


def enforce_segment_floor(
    segment: Segment,
    kept: Sequence[QAPair],
    backend: Backend,
    *,
    max_retries: int = 2,
    temperature: float = QC_TEMPERATURE,
    generation_temperature: float = 0.7,
) -> list[QAPair]:
    """Guarantee at least one validated explicit pair for ``segment``.

    When none survived, one replacement explicit pair is generated,
    adjudicated and appended. Raises :class:`FloorUnsatisfied` when the
    retry budget runs out.
    """
    for pair in kept:
        if pair.segment_id != segment.segment_id:
            raise ValueError(f"pair {pair.qa_id} does not belong to {segment.segment_id}")
    if any(p.qtype is QType.EXPLICIT for p in kept):
        return list(kept)

    tpl = load_template("regenerate_explicit")
    seen_questions = [p.question for p in kept]
    attempts = max_retries + 1
    problem = None
    for attempt in range(attempts):
        existing = "\n".join(f"- {q}" for q in seen_questions) or "(none)"
        base = ChatPrompt(
            user=tpl.render("user", segment_id=segment.segment_id, passage=segment.text, existing=existing),
            system=tpl.render("system"),
            temperature=generation_temperature,
            max_output_tokens=512,
            task="regenerate_explicit",
        )
        prompt = with_retry_note(base, "regenerate_explicit", problem) if problem else base
        problem = None
        try:
            raw = backend.complete(prompt)
            candidates = parse_generation_output(
                raw, segment.segment_id, id_prefix=f"r{attempt}_",
                provenance=Provenance.REGENERATED_IN_QC,
            )
        except (BackendError, ParseFailure) as exc:
            problem = str(exc)
            backend.ledger.record("floor_retry", segment_id=segment.segment_id, attempt=attempt, problem=problem)
            continue
        explicit = [c for c in candidates if c.qtype is QType.EXPLICIT]
        if not explicit:
            problem = "the reply contained no explicit pair"
            backend.ledger.record("floor_retry", segment_id=segment.segment_id, attempt=attempt, problem=problem)
            continue
        fresh = replace(explicit[0], qa_id=f"{segment.segment_id}:r{attempt}")
        seen_questions.append(fresh.question)
        verdict = adjudicate(fresh, segment, backend, max_retries=max_retries, temperature=temperature)
        backend.ledger.record("floor_adjudication", **verdict.to_dict())
        if verdict.directive is Directive.KEEP:
            backend.ledger.record("floor_regenerated", segment_id=segment.segment_id, qa_id=fresh.qa_id)
            return [*kept, fresh]
    backend.ledger.record("floor_unsatisfied", segment_id=segment.segment_id)
    raise FloorUnsatisfied(segment.segment_id, attempts)


@dataclass
class QCOutcome:
    pairs: list[QAPair]
    verdicts: list[QCVerdict]
    reports: list[GroundingReport]
    dropped_segments: list[str] = field(default_factory=list)
    counters: Counter = field(default_factory=Counter)


def run_quality_control(
    pairs: Sequence[QAPair],
    segments: Mapping[str, Segment],
    backend: Backend,
    *,
    max_retries: int = 2,
    temperature: float = QC_TEMPERATURE,
) -> QCOutcome:
    """Adjudicate every pair, apply verdicts, then enforce segment floors.

    Adjudication fans out across all pairs; floors are enforced per segment
    once that segment's verdicts are in. Output keeps input order, with any
    regenerated pair placed after its segment's survivors.
    """
    for p in pairs:
        if p.segment_id not in segments:
            raise ValueError(f"pair {p.qa_id} references unknown segment {p.segment_id}")
    reports = [grounding_prefilter(p, segments[p.segment_id]) for p in pairs]
    adjudicated = map_bounded(
        lambda job: adjudicate(job[0], segments[job[0].segment_id], backend, report=job[1],
                               max_retries=max_retries, temperature=temperature),
        list(zip(pairs, reports)),
        backend.max_parallel,
    )
    verdicts = []
    for (_, result), pair in zip(adjudicated, pairs):
        if isinstance(result, Exception):
            backend.ledger.record("adjudication_exhausted", qa_id=pair.qa_id, problem=str(result))
            result = QCVerdict(pair.qa_id, Directive.DELETE, None, f"adjudication failed: {result}")
        verdicts.append(result)

    counters: Counter = Counter()
    counters["in"] = len(pairs)
    for v in verdicts:
        counters[v.directive.value.lower()] += 1

    grouped: dict[str, list[int]] = defaultdict(list)
    for i, p in enumerate(pairs):
        grouped[p.segment_id].append(i)

    def settle(segment_id: str) -> list[QAPair]:
        idx = grouped[segment_id]
        kept = apply_verdicts([pairs[i] for i in idx], [verdicts[i] for i in idx],
                              segments=segments, backend=backend)
        return enforce_segment_floor(segments[segment_id], kept, backend,
                                     max_retries=max_retries, temperature=temperature)

    order = list(grouped)
    settled = map_bounded(settle, order, backend.max_parallel)
    out: list[QAPair] = []
    dropped: list[str] = []
    for segment_id, (_, result) in zip(order, settled):
        if isinstance(result, FloorUnsatisfied):
            dropped.append(segment_id)
            continue
        if isinstance(result, Exception):
            raise result
        out.extend(result)

    counters["regenerated"] = sum(p.provenance is Provenance.REGENERATED_IN_QC for p in out)
    counters["floor_dropped_segments"] = len(dropped)
    counters["out"] = len(out)
    return QCOutcome(out, verdicts, reports, dropped, counters)
