import json
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qasynth.backend import ChatPrompt
from qasynth.mock import FunctionBackend, MockBackend
from qasynth.quality_control import (
    Directive,
    FloorUnsatisfied,
    MatchKind,
    QCVerdict,
    VerdictMismatch,
    adjudicate,
    apply_verdicts,
    enforce_segment_floor,
    grounding_prefilter,
    run_quality_control,
)
from qasynth.records import Provenance, QAPair, QType

from conftest import make_segment

SEG = make_segment("The capital of France is Paris. It hosted the 1900 Olympic Games, the city council said.")


def pair(k=0, answer="Paris", qtype=QType.EXPLICIT, reasoning=None, seg=SEG) -> QAPair:
    return QAPair(f"{seg.segment_id}:q{k}", seg.segment_id, f"Question {k}?", answer, qtype, reasoning)


def router(**handlers):
    """Backend that answers each task with its handler's return value."""

    def fn(prompt: ChatPrompt) -> str:
        handler = handlers[prompt.task]
        return handler(prompt) if callable(handler) else handler

    return FunctionBackend(fn, max_parallel=4)


def verdict(directive, corrected=None, rationale="r") -> str:
    return json.dumps({"directive": directive, "corrected_type": corrected, "rationale": rationale})


class TestGrounding:
    def test_exact(self):
        r = grounding_prefilter(pair(), SEG)
        assert r.match_kind is MatchKind.EXACT_SUBSTRING and r.answer_found
        assert SEG.text[slice(*r.matched_span)] == "Paris"

    def test_normalized(self):
        r = grounding_prefilter(pair(answer="paris."), SEG)
        assert r.match_kind is MatchKind.NORMALIZED_SUBSTRING
        assert SEG.text[slice(*r.matched_span)] == "Paris"

    def test_normalized_whitespace_and_case(self):
        r = grounding_prefilter(pair(answer="THE  1900\nolympic games"), SEG)
        assert r.match_kind is MatchKind.NORMALIZED_SUBSTRING
        assert SEG.text[slice(*r.matched_span)] == "the 1900 Olympic Games"

    def test_not_found(self):
        r = grounding_prefilter(pair(answer="Lyon"), SEG)
        assert r.match_kind is MatchKind.NOT_FOUND and not r.answer_found and r.matched_span is None

    def test_implicit_not_applicable(self):
        r = grounding_prefilter(pair(qtype=QType.IMPLICIT, reasoning="x"), SEG)
        assert r.match_kind is MatchKind.NOT_APPLICABLE and not r.answer_found

    def test_segment_mismatch(self):
        with pytest.raises(ValueError):
            grounding_prefilter(pair(), make_segment(doc_id="other"))


class TestAdjudicate:
    def test_keep(self):
        v = adjudicate(pair(), SEG, router(adjudicate=verdict("KEEP")))
        assert v.directive is Directive.KEEP and v.corrected_qtype is None

    def test_typefix_to_explicit(self):
        p = pair(qtype=QType.IMPLICIT, reasoning="it says so")
        v = adjudicate(p, SEG, router(adjudicate=verdict("TYPEFIX", "explicit")))
        assert v.directive is Directive.TYPEFIX and v.corrected_qtype is QType.EXPLICIT

    def test_verbatim_implicit_is_flagged_in_prompt(self):
        seen = []
        be = router(adjudicate=lambda p: seen.append(p.user) or verdict("KEEP"))
        adjudicate(pair(qtype=QType.IMPLICIT, reasoning="x"), SEG, be)
        assert "does occur verbatim" in seen[0]

    def test_delete(self):
        v = adjudicate(pair(answer="Lyon"), SEG, router(adjudicate=verdict("DELETE")))
        assert v.directive is Directive.DELETE

    def test_not_found_warns(self):
        seen = []
        be = router(adjudicate=lambda p: seen.append(p.user) or verdict("DELETE"))
        adjudicate(pair(answer="Lyon"), SEG, be)
        assert "WARNING" in seen[0]
        assert be.ledger.of_kind("hallucination_warning")

    def test_temperature_zero(self):
        temps = []
        adjudicate(pair(), SEG, router(adjudicate=lambda p: temps.append(p.temperature) or verdict("KEEP")))
        assert temps == [0.0]

    def test_unparseable_fails_closed(self):
        be = router(adjudicate="I think it is fine")
        v = adjudicate(pair(), SEG, be, max_retries=2)
        assert v.directive is Directive.DELETE
        assert be.calls["adjudicate"] == 3
        assert be.ledger.of_kind("adjudication_exhausted")

    def test_typefix_to_same_type_is_retried(self):
        replies = iter([verdict("TYPEFIX", "explicit"), verdict("KEEP")])
        v = adjudicate(pair(), SEG, router(adjudicate=lambda p: next(replies)))
        assert v.directive is Directive.KEEP

    def test_verdict_invariants(self):
        with pytest.raises(ValueError):
            QCVerdict("x", Directive.TYPEFIX)
        with pytest.raises(ValueError):
            QCVerdict("x", Directive.KEEP, QType.EXPLICIT)
        v = QCVerdict("x", Directive.TYPEFIX, QType.IMPLICIT, "why")
        assert list(v.to_dict()) == ["qa_id", "directive", "corrected_qtype", "rationale"]
        assert QCVerdict.from_dict(v.to_dict()) == v


class TestApplyVerdicts:
    def test_filtering(self):
        ps = [pair(k) for k in range(3)]
        vs = [QCVerdict(p.qa_id, d) for p, d in zip(ps, [Directive.KEEP, Directive.KEEP, Directive.DELETE])]
        assert apply_verdicts(ps, vs) == ps[:2]

    def test_typefix_to_implicit_backfills(self):
        p = pair()
        be = router(backfill_reasoning=json.dumps({"reasoning": "The passage names the capital."}))
        (out,) = apply_verdicts([p], [QCVerdict(p.qa_id, Directive.TYPEFIX, QType.IMPLICIT)],
                                segments={SEG.segment_id: SEG}, backend=be)
        assert out.qtype is QType.IMPLICIT and out.reasoning == "The passage names the capital."

    def test_failed_backfill_drops_pair(self):
        p = pair()
        be = router(backfill_reasoning="")
        out = apply_verdicts([p], [QCVerdict(p.qa_id, Directive.TYPEFIX, QType.IMPLICIT)],
                             segments={SEG.segment_id: SEG}, backend=be)
        assert out == [] and be.ledger.of_kind("backfill_failed")

    def test_typefix_to_explicit_keeps_reasoning(self):
        p = pair(qtype=QType.IMPLICIT, reasoning="trace")
        (out,) = apply_verdicts([p], [QCVerdict(p.qa_id, Directive.TYPEFIX, QType.EXPLICIT)])
        assert out.qtype is QType.EXPLICIT and out.reasoning == "trace"

    def test_empty(self):
        assert apply_verdicts([], []) == []

    def test_mismatch(self):
        with pytest.raises(VerdictMismatch):
            apply_verdicts([pair(0)], [QCVerdict("other", Directive.KEEP)])
        with pytest.raises(VerdictMismatch):
            apply_verdicts([pair(0), pair(1)], [QCVerdict(pair(0).qa_id, Directive.KEEP)])


REGEN = json.dumps([{"question": "Which city is the capital?", "answer": "Paris", "type": "explicit"}])


class TestFloor:
    def test_unchanged_when_met(self):
        kept = [pair(0), pair(1, qtype=QType.IMPLICIT, reasoning="r")]
        be = router()
        assert enforce_segment_floor(SEG, kept, be) == kept
        assert sum(be.calls.values()) == 0

    def test_regenerates_exactly_one(self):
        be = router(regenerate_explicit=REGEN, adjudicate=verdict("KEEP"))
        out = enforce_segment_floor(SEG, [], be)
        assert len(out) == 1
        assert out[0].qtype is QType.EXPLICIT and out[0].provenance is Provenance.REGENERATED_IN_QC
        assert out[0].qa_id == f"{SEG.segment_id}:r0"

    def test_regenerated_pair_must_pass_adjudication(self):
        verdicts = iter([verdict("DELETE"), verdict("KEEP")])
        be = router(regenerate_explicit=REGEN, adjudicate=lambda p: next(verdicts))
        out = enforce_segment_floor(SEG, [], be)
        assert [p.qa_id for p in out] == [f"{SEG.segment_id}:r1"]

    def test_unsatisfied(self):
        kept = [pair(0, qtype=QType.IMPLICIT, reasoning="r"), pair(1, qtype=QType.IMPLICIT, reasoning="r")]
        be = router(regenerate_explicit="no idea")
        with pytest.raises(FloorUnsatisfied):
            enforce_segment_floor(SEG, kept, be, max_retries=2)
        assert be.calls["regenerate_explicit"] == 3
        assert be.ledger.of_kind("floor_unsatisfied")

    def test_foreign_pair_rejected(self):
        with pytest.raises(ValueError):
            enforce_segment_floor(SEG, [pair(seg=make_segment(doc_id="x"))], router())


def test_run_with_generative_mock(passage):
    from qasynth.generation import COVID_RECIPE, generate_for_segment

    seg = make_segment(passage)
    be = MockBackend(seed=2)
    pairs = generate_for_segment(seg, COVID_RECIPE, be)
    out = run_quality_control(pairs, {seg.segment_id: seg}, be)
    c = out.counters
    assert c["in"] == 6 == c["keep"] + c["delete"] + c["typefix"]
    assert any(p.qtype is QType.EXPLICIT for p in out.pairs)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.sampled_from(["KEEP", "DELETE", "TYPEFIX", "junk"]), min_size=1, max_size=4),
                min_size=1, max_size=5))
def test_qc_invariants(plan):
    """Floor, totality, type coherence and fail-closed under arbitrary verdicts."""
    segs = {}
    pairs = []
    replies = {}
    for s, directives in enumerate(plan):
        seg = make_segment(SEG.text, doc_id=f"d{s}")
        segs[seg.segment_id] = seg
        for k, d in enumerate(directives):
            qtype = QType.EXPLICIT if k % 2 == 0 else QType.IMPLICIT
            p = QAPair(f"{seg.segment_id}:q{k}", seg.segment_id, f"Q{k} of {s}?", "Paris", qtype,
                       "trace" if qtype is QType.IMPLICIT else None)
            pairs.append(p)
            replies[p.qa_id] = d

    def adjudication(prompt):
        qa_id = prompt.user.split("Pair id: ", 1)[1].split("\n", 1)[0]
        d = replies.get(qa_id, "KEEP")
        return "nonsense" if d == "junk" else verdict(d)

    be = router(adjudicate=adjudication, regenerate_explicit=REGEN,
                backfill_reasoning=json.dumps({"reasoning": "filled"}))
    out = run_quality_control(pairs, segs, be, max_retries=0)
    c = out.counters
    assert len(out.verdicts) == len(pairs)
    assert c["in"] == c["keep"] + c["delete"] + c["typefix"]
    by_seg = Counter(p.segment_id for p in out.pairs if p.qtype is QType.EXPLICIT)
    assert all(by_seg[p.segment_id] >= 1 for p in out.pairs)
    assert all(p.reasoning for p in out.pairs if p.qtype is QType.IMPLICIT)
    rejected = {v.qa_id for v in out.verdicts if v.directive is Directive.DELETE}
    assert not rejected & {p.qa_id for p in out.pairs}
