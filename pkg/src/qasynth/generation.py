"""Stage 1: explicit and implicit QA pairs per segment."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Any, Sequence

from .backend import Backend, BackendError, ChatPrompt, map_bounded
from .jsonfix import locate_array
from .prompts import load_template
from .records import Provenance, QAPair, QType, Segment

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.7


class ParseFailure(ValueError):
    """Model output that does not contain a usable QA array.

    ``path`` names the offending element or field (``"[1].reasoning"``);
    ``raw`` keeps the full output for the repair path.
    """

    def __init__(self, reason: str, raw: str, path: str | None = None):
        super().__init__(f"{path}: {reason}" if path else reason)
        self.reason = reason
        self.raw = raw
        self.path = path


class GenerationExhausted(RuntimeError):
    def __init__(self, segment_id: str, attempts: int, last_problem: str | None):
        super().__init__(
            f"segment {segment_id}: no usable QA pairs after {attempts} attempts"
            + (f" ({last_problem})" if last_problem else "")
        )
        self.segment_id = segment_id
        self.attempts = attempts


@dataclass(frozen=True)
class GenerationSpec:
    n_explicit: int = 2
    n_implicit: int = 1
    require_role_transformation: bool = True

    def __post_init__(self):
        if self.n_explicit < 0 or self.n_implicit < 0:
            raise ValueError("question counts must be non-negative")
        if self.n_explicit + self.n_implicit < 1:
            raise ValueError("at least one question per segment is required")

    @property
    def total(self) -> int:
        return self.n_explicit + self.n_implicit


# Per-segment recipes used for the SQuAD-style and Covid-QA-style corpora.
SQUAD_RECIPE = GenerationSpec(n_explicit=2, n_implicit=1)
COVID_RECIPE = GenerationSpec(n_explicit=3, n_implicit=3)


def build_generation_prompt(
    segment: Segment, spec: GenerationSpec, temperature: float = DEFAULT_TEMPERATURE
) -> ChatPrompt:
    tpl = load_template("generate_qa")
    directives = []
    if spec.n_explicit:
        directives.append(tpl.render("explicit", n_explicit=spec.n_explicit))
    if spec.n_implicit:
        directives.append(tpl.render("implicit", n_implicit=spec.n_implicit))
    if spec.require_role_transformation:
        directives.append(tpl.render("roles"))
    user = tpl.render(
        "user",
        segment_id=segment.segment_id,
        passage=segment.text,
        n_explicit=spec.n_explicit,
        n_implicit=spec.n_implicit,
        directives="\n".join(directives),
    )
    return ChatPrompt(
        user=user,
        system=tpl.render("system"),
        temperature=temperature,
        max_output_tokens=512 + 256 * spec.total,
        task="generate_qa",
    )


def with_retry_note(prompt: ChatPrompt, template: str, problem: str) -> ChatPrompt:
    note = load_template(template).render("retry", problem=problem)
    return ChatPrompt(
        user=f"{prompt.user}\n\n{note}",
        system=prompt.system,
        temperature=prompt.temperature,
        max_output_tokens=prompt.max_output_tokens,
        stop=prompt.stop,
        task=prompt.task,
    )


def _text_field(item: dict, key: str, path: str, raw: str) -> str:
    value = item.get(key)
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        value = str(value)
    if not isinstance(value, str) or not value.strip():
        raise ParseFailure(f"missing or empty {key!r}", raw, f"{path}.{key}")
    return value.strip()


def parse_generation_output(
    raw: str,
    segment_id: str,
    *,
    id_prefix: str = "q",
    provenance: Provenance = Provenance.GENERATED,
) -> list[QAPair]:
    """Parse the first JSON array in ``raw`` into QA pairs.

    Chatter around the array is ignored. Any element that breaks the schema
    fails the whole reply, since a partially valid batch usually means the
    model lost track of the format.
    """
    items = locate_array(raw)
    if items is None:
        raise ParseFailure("no JSON array found", raw)
    pairs = []
    for k, item in enumerate(items):
        path = f"[{k}]"
        if not isinstance(item, dict):
            raise ParseFailure("element is not an object", raw, path)
        question = _text_field(item, "question", path, raw)
        answer = _text_field(item, "answer", path, raw)
        type_key = "type" if "type" in item else "qtype"
        try:
            qtype = QType.parse(item.get(type_key))
        except ValueError:
            raise ParseFailure("type must be 'explicit' or 'implicit'", raw, f"{path}.type")
        reasoning = item.get("reasoning")
        if reasoning is not None and not isinstance(reasoning, str):
            raise ParseFailure("reasoning must be a string or null", raw, f"{path}.reasoning")
        reasoning = reasoning.strip() if reasoning else None
        if qtype is QType.IMPLICIT and not reasoning:
            raise ParseFailure("implicit pair lacks a reasoning trace", raw, f"{path}.reasoning")
        pairs.append(
            QAPair(
                qa_id=f"{segment_id}:{id_prefix}{k}",
                segment_id=segment_id,
                question=question,
                answer=answer,
                qtype=qtype,
                reasoning=reasoning or None,
                provenance=provenance,
            )
        )
    return pairs


def _select(pairs: list[QAPair], spec: GenerationSpec) -> list[QAPair]:
    quota = {QType.EXPLICIT: spec.n_explicit, QType.IMPLICIT: spec.n_implicit}
    picked = []
    for pair in pairs:
        if quota[pair.qtype] > 0:
            quota[pair.qtype] -= 1
            picked.append(pair)
    return picked


def generate_for_segment(
    segment: Segment,
    spec: GenerationSpec,
    backend: Backend,
    *,
    max_retries: int = 2,
    temperature: float = DEFAULT_TEMPERATURE,
) -> list[QAPair]:
    """Generate up to ``spec.total`` pairs for one segment with one call.

    Replies that fail to parse are retried with a corrective note. Extra
    pairs beyond the per-type counts are dropped; missing ones are logged
    to the ledger as a shortfall and never padded.
    """
    base = build_generation_prompt(segment, spec, temperature)
    prompt = base
    problem: str | None = None
    ledger = backend.ledger
    attempts = max_retries + 1
    for attempt in range(1, attempts + 1):
        try:
            raw = backend.complete(prompt)
        except BackendError as exc:
            problem = f"backend error: {exc}"
            ledger.record("generation_retry", segment_id=segment.segment_id, attempt=attempt,
                          problem=problem)
            continue
        try:
            parsed = parse_generation_output(raw, segment.segment_id)
        except ParseFailure as exc:
            problem = str(exc)
        else:
            picked = _select(parsed, spec)
            if picked:
                counts = Counter(p.qtype for p in picked)
                short_e = spec.n_explicit - counts[QType.EXPLICIT]
                short_i = spec.n_implicit - counts[QType.IMPLICIT]
                if short_e or short_i:
                    ledger.record("generation_shortfall", segment_id=segment.segment_id,
                                  explicit=short_e, implicit=short_i)
                if len(parsed) > len(picked):
                    ledger.record("generation_overflow", segment_id=segment.segment_id,
                                  dropped=len(parsed) - len(picked))
                return picked
            problem = (
                f"expected {spec.n_explicit} explicit and {spec.n_implicit} implicit pairs, "
                "got none of the requested types"
            )
        ledger.record("generation_retry", segment_id=segment.segment_id, attempt=attempt,
                      problem=problem)
        prompt = with_retry_note(base, "generate_qa", problem)
    ledger.record("generation_exhausted", segment_id=segment.segment_id)
    raise GenerationExhausted(segment.segment_id, attempts, problem)


def generate_corpus(
    segments: Sequence[Segment],
    spec: GenerationSpec,
    backend: Backend,
    **kwargs: Any,
) -> tuple[list[QAPair], list[GenerationExhausted]]:
    """Run :func:`generate_for_segment` over many segments concurrently.

    Pairs come back grouped in segment order whatever the completion
    order. Segments that exhaust their retries are returned separately.
    """
    ordered = sorted(segments, key=lambda s: (s.doc_id, s.index))
    results = map_bounded(
        lambda seg: generate_for_segment(seg, spec, backend, **kwargs),
        ordered,
        backend.max_parallel,
    )
    pairs: list[QAPair] = []
    failures: list[GenerationExhausted] = []
    for _, result in results:
        if isinstance(result, GenerationExhausted):
            failures.append(result)
        elif isinstance(result, Exception):
            raise result
        else:
            pairs.extend(result)
    return pairs, failures


def duplicate_answer_rate(pairs: Sequence[QAPair]) -> dict[str, float]:
    """Fraction of pairs per segment whose normalized answer repeats.

    A rough signal for how often role-transformed rephrasings collapsed
    onto the same answer; no threshold is implied.
    """
    by_segment: dict[str, list[str]] = {}
    for pair in pairs:
        by_segment.setdefault(pair.segment_id, []).append(" ".join(pair.answer.casefold().split()))
    return {
        seg: 1.0 - len(set(answers)) / len(answers)
        for seg, answers in by_segment.items()
    }
