"""Stage 3: counterfactual distractors and four-option item assembly."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .backend import Backend, BackendError, ChatPrompt, map_bounded
from .generation import with_retry_note
from .jsonfix import extract_object
from .prompts import load_template
from .quality_control import normalize_for_match
from .records import MCQItem, QAPair, Segment

log = logging.getLogger(__name__)

N_DISTRACTORS = 3
LETTERS = "ABCD"


class DistractorExhausted(RuntimeError):
    def __init__(self, qa_id: str, reason: str):
        super().__init__(f"{qa_id}: {reason}")
        self.qa_id = qa_id


class DuplicateOptions(ValueError):
    pass


class AppraisalVerdict(str, Enum):
    ACCEPTABLE = "Acceptable"
    REGENERATE = "Regenerate"


@dataclass(frozen=True)
class DistractorSet:
    options: tuple[str, str, str]
    nuanced_index: int

    def __post_init__(self):
        if len(self.options) != N_DISTRACTORS:
            raise ValueError("exactly three distractors are required")
        if not 0 <= self.nuanced_index < N_DISTRACTORS:
            raise ValueError("nuanced_index must point at one of the three distractors")


@dataclass(frozen=True)
class AppraisalEntry:
    text: str
    verdict: AppraisalVerdict
    reason: str = ""


@dataclass(frozen=True)
class DistractorAppraisal:
    qa_id: str
    per_distractor: tuple[AppraisalEntry, AppraisalEntry, AppraisalEntry]

    def __post_init__(self):
        if len(self.per_distractor) != N_DISTRACTORS:
            raise ValueError("an appraisal covers exactly three distractors")

    @property
    def to_regenerate(self) -> list[int]:
        return [i for i, e in enumerate(self.per_distractor) if e.verdict is AppraisalVerdict.REGENERATE]


def distractor_problem(answer: str, distractors: Sequence[str]) -> str | None:
    """Why a distractor list is unusable, or ``None`` if it is fine."""
    if len(distractors) != N_DISTRACTORS:
        return f"expected {N_DISTRACTORS} distractors, got {len(distractors)}"
    gold = normalize_for_match(answer)
    seen = set()
    for k, d in enumerate(distractors):
        if not isinstance(d, str) or not d.strip():
            return f"distractor {k} is empty"
        norm = normalize_for_match(d)
        if norm == gold:
            return f"distractor {k} repeats the correct answer"
        if norm in seen:
            return f"distractor {k} repeats another distractor"
        seen.add(norm)
    return None


def _distractor_prompt(qa: QAPair, segment: Segment, temperature: float) -> ChatPrompt:
    tpl = load_template("distractors")
    return ChatPrompt(
        user=tpl.render("user", passage=segment.text, question=qa.question, answer=qa.answer),
        system=tpl.render("system"),
        temperature=temperature,
        max_output_tokens=512,
        task="distractors",
    )


def generate_distractors(
    qa: QAPair,
    segment: Segment,
    backend: Backend,
    *,
    max_retries: int = 2,
    temperature: float = 0.7,
) -> DistractorSet:
    """Ask for three distractors, one flagged as the nuanced deviation."""
    base = _distractor_prompt(qa, segment, temperature)
    prompt = base
    problem = None
    for attempt in range(1, max_retries + 2):
        try:
            raw = backend.complete(prompt)
        except BackendError as exc:
            problem = f"backend error: {exc}"
        else:
            obj = extract_object(raw)
            if obj is None or not isinstance(obj.get("distractors"), list):
                problem = 'reply lacks a "distractors" list'
            else:
                texts = [d.strip() if isinstance(d, str) else d for d in obj["distractors"]]
                problem = distractor_problem(qa.answer, texts)
                nuanced = obj.get("nuanced_index")
                if problem is None and (not isinstance(nuanced, int) or isinstance(nuanced, bool)
                                        or not 0 <= nuanced < N_DISTRACTORS):
                    problem = "nuanced_index must be 0, 1 or 2"
                if problem is None:
                    return DistractorSet(tuple(texts), nuanced)
        backend.ledger.record("distractor_retry", qa_id=qa.qa_id, attempt=attempt, problem=problem)
        prompt = with_retry_note(base, "distractors", problem)
    backend.ledger.record("distractor_exhausted", qa_id=qa.qa_id, problem=problem)
    raise DistractorExhausted(qa.qa_id, problem or "no usable distractors")


def appraise_distractors(
    qa: QAPair,
    distractors: DistractorSet,
    segment: Segment,
    backend: Backend,
    *,
    enabled: bool = True,
) -> DistractorAppraisal:
    """Judge each distractor for contextual fit and discriminability.

    With ``enabled=False`` every distractor is accepted without a call. An
    unparseable appraisal marks all three for regeneration.
    """
    if not enabled:
        entries = tuple(AppraisalEntry(t, AppraisalVerdict.ACCEPTABLE, "appraisal disabled")
                        for t in distractors.options)
        return DistractorAppraisal(qa.qa_id, entries)
    tpl = load_template("appraise_distractors")
    listing = "\n".join(f"{i}. {t}" for i, t in enumerate(distractors.options))
    prompt = ChatPrompt(
        user=tpl.render("user", passage=segment.text, question=qa.question,
                        answer=qa.answer, listing=listing),
        system=tpl.render("system"),
        temperature=0.0,
        max_output_tokens=512,
        task="appraise_distractors",
    )
    verdicts: dict[int, tuple[AppraisalVerdict, str]] = {}
    try:
        raw = backend.complete(prompt)
    except BackendError as exc:
        raw = ""
        backend.ledger.record("appraisal_failed", qa_id=qa.qa_id, problem=str(exc))
    obj = extract_object(raw) if raw else None
    rows = obj.get("appraisals") if obj else None
    if isinstance(rows, list):
        for pos, row in enumerate(rows):
            if not isinstance(row, dict):
                continue
            idx = row.get("index", pos)
            word = str(row.get("verdict", "")).strip().lower()
            if isinstance(idx, int) and 0 <= idx < N_DISTRACTORS and word in ("acceptable", "regenerate"):
                verdict = AppraisalVerdict.ACCEPTABLE if word == "acceptable" else AppraisalVerdict.REGENERATE
                verdicts[idx] = (verdict, str(row.get("reason") or ""))
    if len(verdicts) != N_DISTRACTORS:
        backend.ledger.record("appraisal_unparseable", qa_id=qa.qa_id)
        verdicts = {i: (AppraisalVerdict.REGENERATE, "appraisal unparseable") for i in range(N_DISTRACTORS)}
    entries = tuple(AppraisalEntry(t, *verdicts[i]) for i, t in enumerate(distractors.options))
    return DistractorAppraisal(qa.qa_id, entries)


def replace_distractor(
    qa: QAPair,
    segment: Segment,
    distractors: DistractorSet,
    index: int,
    reason: str,
    backend: Backend,
    *,
    temperature: float = 0.7,
) -> str | None:
    """One call for a substitute at ``index``; ``None`` if unusable."""
    tpl = load_template("replace_distractor")
    keep = [t for i, t in enumerate(distractors.options) if i != index]
    nuanced = ""
    if index == distractors.nuanced_index:
        nuanced = " It must be a nuanced deviation: one subtle semantic shift away from the correct answer."
    prompt = ChatPrompt(
        user=tpl.render("user", passage=segment.text, question=qa.question, answer=qa.answer,
                        keep="; ".join(keep), rejected=distractors.options[index],
                        reason=reason or "judged weak", nuanced=nuanced),
        system=tpl.render("system"),
        temperature=temperature,
        max_output_tokens=256,
        task="replace_distractor",
    )
    try:
        raw = backend.complete(prompt)
    except BackendError:
        return None
    obj = extract_object(raw)
    text = obj.get("distractor") if obj else None
    if not isinstance(text, str) or not text.strip():
        return None
    candidate = [*distractors.options]
    candidate[index] = text.strip()
    if distractor_problem(qa.answer, candidate) is not None:
        return None
    return text.strip()


def refine_distractors(
    qa: QAPair,
    segment: Segment,
    distractors: DistractorSet,
    backend: Backend,
    *,
    max_rounds: int = 2,
    appraisal: bool = True,
    temperature: float = 0.7,
) -> DistractorSet:
    """Appraise, replace the weak ones, and repeat up to ``max_rounds``."""
    current = distractors
    for round_no in range(max_rounds + 1):
        verdict = appraise_distractors(qa, current, segment, backend, enabled=appraisal)
        weak = verdict.to_regenerate
        if not weak:
            return current
        if round_no == max_rounds:
            break
        options = list(current.options)
        for idx in weak:
            backend.ledger.record("distractor_regenerate", qa_id=qa.qa_id, index=idx)
            staged = DistractorSet(tuple(options), current.nuanced_index)
            fresh = replace_distractor(qa, segment, staged, idx, verdict.per_distractor[idx].reason,
                                       backend, temperature=temperature)
            if fresh is not None:
                options[idx] = fresh
        current = DistractorSet(tuple(options), current.nuanced_index)
    backend.ledger.record("distractor_exhausted", qa_id=qa.qa_id, problem="appraisal kept rejecting")
    raise DistractorExhausted(qa.qa_id, f"distractors still rejected after {max_rounds} regeneration rounds")


def position_key(run_seed: int, qa_id: str) -> int:
    """64-bit generator key derived from the run seed and the item id."""
    digest = hashlib.sha256(f"{run_seed}\x00{qa_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def correct_position(run_seed: int, qa_id: str) -> tuple[int, int]:
    """Draw the correct option's slot from a counter-based generator.

    Philox keyed by ``(run_seed, qa_id)``: the first 64-bit output modulo 4
    is uniform because 4 divides 2**64.
    """
    key = position_key(run_seed, qa_id)
    word = int(np.random.Philox(key=key).random_raw())
    return word & 3, key


def assemble_mcq(qa: QAPair, distractors: DistractorSet, run_seed: int) -> MCQItem:
    """Place the answer at a seeded random slot and the distractors around it."""
    problem = distractor_problem(qa.answer, distractors.options)
    if problem is not None:
        raise DuplicateOptions(f"{qa.qa_id}: {problem}")
    correct, key = correct_position(run_seed, qa.qa_id)
    slots = [i for i in range(4) if i != correct]
    options: list[str] = [""] * 4
    options[correct] = qa.answer
    for slot, text in zip(slots, distractors.options):
        options[slot] = text
    return MCQItem(
        qa_id=qa.qa_id,
        stem=qa.question,
        options=tuple(options),
        correct_index=correct,
        nuanced_index=slots[distractors.nuanced_index],
        rng_seed_used=key,
    )


def build_mcq(
    qa: QAPair,
    segment: Segment,
    backend: Backend,
    run_seed: int,
    *,
    max_retries: int = 2,
    max_rounds: int = 2,
    appraisal: bool = True,
    temperature: float = 0.7,
) -> MCQItem:
    distractors = generate_distractors(qa, segment, backend, max_retries=max_retries, temperature=temperature)
    distractors = refine_distractors(qa, segment, distractors, backend, max_rounds=max_rounds,
                                     appraisal=appraisal, temperature=temperature)
    return assemble_mcq(qa, distractors, run_seed)


def run_counterfactual(
    pairs: Sequence[QAPair],
    segments: Mapping[str, Segment],
    backend: Backend,
    run_seed: int,
    **kwargs,
) -> tuple[list[MCQItem], list[str]]:
    """Build items for every pair; returns ``(items, qa_only_ids)``.

    Pairs whose distractors never pass are left QA-only instead of being
    padded with junk options.
    """
    results = map_bounded(
        lambda qa: build_mcq(qa, segments[qa.segment_id], backend, run_seed, **kwargs),
        list(pairs),
        backend.max_parallel,
    )
    items: list[MCQItem] = []
    qa_only: list[str] = []
    for (_, result), qa in zip(results, pairs):
        if isinstance(result, (DistractorExhausted, DuplicateOptions)):
            qa_only.append(qa.qa_id)
        elif isinstance(result, Exception):
            raise result
        else:
            items.append(result)
    return items, qa_only
