import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qasynth.ingest import (
    CorpusError,
    Document,
    SegmentationError,
    count_tokens,
    load_corpus,
    normalize_text,
    segment_by_budget,
    segment_structural,
    tokenize,
)


def sentence(n_tokens: int, word: str = "word") -> str:
    # n_tokens - 1 words plus the full stop
    return " ".join([word] * (n_tokens - 1)) + "."


def doc(text: str, doc_id: str = "d") -> Document:
    return Document(doc_id, "mem://" + doc_id, text)


class TestCountTokens:
    def test_empty(self):
        assert count_tokens("") == 0

    def test_hello_world(self):
        assert count_tokens("hello world") == 2

    def test_clitic_split(self):
        assert tokenize("don't stop") == ["don", "'t", "stop"]
        assert count_tokens("don't stop") == 3

    def test_punctuation_detached(self):
        assert tokenize("Hi, there!") == ["Hi", ",", "there", "!"]

    @given(st.text(), st.text())
    def test_monotone_under_concatenation(self, a, b):
        assert count_tokens(a + b) >= max(count_tokens(a), count_tokens(b))


class TestLoadCorpus:
    def test_plain_text_one_document(self, tmp_path):
        p = tmp_path / "one.txt"
        p.write_text("A single paragraph of text.\n", encoding="utf-8")
        docs, diags = load_corpus([p])
        assert len(docs) == 1 and not diags
        assert docs[0].doc_id == "one"
        assert docs[0].metadata["source"] == "one.txt"

    def test_jsonl_three_records(self, tmp_path):
        p = tmp_path / "c.jsonl"
        p.write_text("\n".join(json.dumps({"text": f"record {i}"}) for i in range(3)), encoding="utf-8")
        docs, _ = load_corpus([p], "jsonl_with_text_field")
        assert [d.metadata["record_index"] for d in docs] == ["0", "1", "2"]
        assert [d.doc_id for d in docs] == ["c-0", "c-1", "c-2"]

    def test_malformed_line_skip(self, tmp_path):
        p = tmp_path / "c.jsonl"
        p.write_text('{"text": "a"}\n{oops\n{"text": "b"}\n', encoding="utf-8")
        docs, diags = load_corpus([p], "jsonl_with_text_field", on_error="skip")
        assert len(docs) == 2
        assert len(diags) == 1 and diags[0].line == 2

    def test_malformed_line_abort_names_line(self, tmp_path):
        p = tmp_path / "c.jsonl"
        p.write_text('{"text": "a"}\n{oops\n', encoding="utf-8")
        with pytest.raises(CorpusError, match=":2:"):
            load_corpus([p], "jsonl_with_text_field")

    def test_custom_text_field_and_missing_field(self, tmp_path):
        p = tmp_path / "c.jsonl"
        p.write_text('{"body": "x", "id": "k"}\n{"text": "y"}\n', encoding="utf-8")
        docs, diags = load_corpus([p], "jsonl_with_text_field", text_field="body", on_error="skip")
        assert [d.doc_id for d in docs] == ["k"]
        assert "body" in diags[0].message

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(CorpusError):
            load_corpus([tmp_path / "missing.txt"])

    def test_doc_ids_unique(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        a.mkdir(), b.mkdir()
        (a / "x.txt").write_text("one", encoding="utf-8")
        (b / "x.txt").write_text("two", encoding="utf-8")
        docs, _ = load_corpus([a / "x.txt", b / "x.txt"])
        assert len({d.doc_id for d in docs}) == 2


class TestSegmentByBudget:
    def test_five_sentences_fit_one_segment(self):
        segs = segment_by_budget(doc(" ".join([sentence(50)] * 5)), 256)
        assert [s.token_count for s in segs] == [250]

    def test_five_sentences_cap_100(self):
        segs = segment_by_budget(doc(" ".join([sentence(50)] * 5)), 100)
        assert [s.token_count for s in segs] == [100, 100, 50]

    def test_long_sentence_hard_split(self):
        segs = segment_by_budget(doc(sentence(300)), 256)
        assert [s.token_count for s in segs] == [256, 44]

    def test_cap_below_floor(self):
        with pytest.raises(SegmentationError):
            segment_by_budget(doc(sentence(40)), 4)

    def test_short_document_passes_through(self, caplog):
        segs = segment_by_budget(doc("Too short."), 16)
        assert len(segs) == 1 and segs[0].text == "Too short."
        assert "fewer than" in caplog.text

    def test_segment_ids_and_fields(self):
        segs = segment_by_budget(doc(" ".join([sentence(50)] * 5), "abc"), 100)
        assert [s.segment_id for s in segs] == ["abc::0000", "abc::0001", "abc::0002"]
        assert list(segs[0].to_dict()) == ["segment_id", "doc_id", "index", "text", "token_count"]

    def test_empty_document_rejected(self):
        with pytest.raises(SegmentationError):
            doc("   \n ")


class TestSegmentStructural:
    def test_three_paragraphs(self):
        text = "\n\n".join(sentence(20, w) for w in ("alpha", "beta", "gamma"))
        segs = segment_structural(doc(text), "blank_line", 256)
        assert len(segs) == 3
        assert segs[1].text.startswith("beta")

    def test_budget_fallback(self):
        text = " ".join(["token"] * 600)
        segs = segment_structural(doc(text), "blank_line", 256)
        assert [s.token_count for s in segs] == [256, 256, 88]

    def test_heading_regex(self):
        text = "# Intro\n" + sentence(20) + "\n# Methods\n" + sentence(20, "m")
        segs = segment_structural(doc(text), "heading_regex", 256)
        assert [s.text.split("\n")[0] for s in segs] == ["# Intro", "# Methods"]

    def test_invalid_custom_regex(self):
        with pytest.raises(SegmentationError):
            segment_structural(doc(sentence(20)), "custom_regex", 256, pattern="(")

    def test_unknown_delimiter(self):
        with pytest.raises(SegmentationError):
            segment_structural(doc(sentence(20)), "paragraphs", 256)


words = st.lists(
    st.sampled_from(["alpha", "beta", "don't", "x", "42", "é", ",", ".", "?", "!", "\n\n", "\n", "  "]),
    min_size=1, max_size=400,
)


def _joined(ws: list[str]) -> str:
    return " ".join(ws)


@settings(max_examples=150, deadline=None)
@given(words, st.integers(16, 80), st.sampled_from(["budget", "blank_line", "heading_regex"]))
def test_partition_is_lossless_and_capped(ws, cap, mode):
    text = _joined(ws)
    if not normalize_text(text):
        return
    d = doc(text)
    segs = segment_by_budget(d, cap) if mode == "budget" else segment_structural(d, mode, cap)
    norm = normalize_text(text)
    # segments are contiguous slices; the gaps between them are whitespace only
    pos = 0
    for s in segs:
        at = norm.index(s.text, pos)
        assert norm[pos:at].strip() == ""
        pos = at + len(s.text)
    assert norm[pos:].strip() == ""
    assert "".join("".join(s.text.split()) for s in segs) == "".join(norm.split())
    for s in segs:
        assert s.token_count == count_tokens(s.text)
        if count_tokens(norm) >= 16:
            assert s.token_count <= cap
    assert [s.index for s in segs] == list(range(len(segs)))


@settings(max_examples=50, deadline=None)
@given(words, st.integers(16, 80))
def test_segmentation_is_deterministic(ws, cap):
    text = _joined(ws)
    if not normalize_text(text):
        return
    assert segment_by_budget(doc(text), cap) == segment_by_budget(doc(text), cap)
