"""End-to-end acceptance checks, one test per criterion.

Run with ``pytest tests/test_acceptance.py``; the terminal summary lists
one PASS/FAIL line per criterion.
"""

import json
import os
import random
import subprocess
import sys
import textwrap
import time
from collections import Counter
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from qasynth.compose import CompositionConfig, EmptyComposition, mix
from qasynth.config import STAGES, load_config
from qasynth.counterfactual import DistractorSet, assemble_mcq
from qasynth.export import export_lines, validate_record
from qasynth.generation import GenerationSpec, generate_corpus
from qasynth.metrics import bleu, exact_match, lcs_length, rouge_l, rouge_n, semsim, token_f1
from qasynth.mock import FunctionBackend, MockBackend
from qasynth.pipeline import DONE, EXIT_OK, FILES, run_pipeline
from qasynth.quality_control import run_quality_control
from qasynth.records import Provenance, QAPair, QType, read_jsonl

from conftest import PASSAGE, make_segment
from malformed import corpus
from test_metrics import F1_EM_TABLE, brute_force_lcs

SEED = 7


def mock_overrides(corpus_glob, out_dir, run_id="run", *extra) -> list[str]:
    return [
        f"ingest.inputs=['{corpus_glob}']",
        f"run.out_dir={out_dir}",
        f"run.run_id={run_id}",
        f"run.seed={SEED}",
        "backend.kind=mock",
        "ingest.max_tokens=512",
        "generate.n_explicit=3",
        "generate.n_implicit=3",
        *extra,
    ]


@pytest.mark.criterion(1, "one 100-200 word text yields six QA-CoT pairs with four options each")
def test_end_to_end_shape(tmp_path):
    assert 100 <= len(PASSAGE.split()) <= 200
    (tmp_path / "covid.txt").write_text(PASSAGE)
    cfg = load_config(overrides=mock_overrides(tmp_path / "covid.txt", tmp_path / "runs"))
    started = time.perf_counter()
    res = run_pipeline(cfg)
    elapsed = time.perf_counter() - started
    assert res.exit_code == EXIT_OK and set(res.manifest.stage_status.values()) == {DONE}
    assert res.manifest.counters["ingest"]["segments"] == 1

    sft = list(read_jsonl(res.run_dir / FILES["sft"]))
    mcq = list(read_jsonl(res.run_dir / FILES["mcq"]))
    assert len(sft) == 6 and len(mcq) == 6
    assert all(validate_record(json.dumps(r), "qa_cot") is None for r in sft)
    assert all(len(r["options"]) == 4 and len(set(r["options"])) == 4 for r in mcq)
    assert {r["instruction"] for r in sft} == {r["stem"] for r in mcq}
    assert all(r["options"]["ABCD".index(r["answer_letter"])] for r in mcq)
    assert elapsed < 5.0


@pytest.mark.criterion(2, "QC floor holds under wholesale deletion on 10% of 500 segments")
def test_qc_floor():
    sentences = [s.strip() + "." for s in PASSAGE.split(".") if s.strip()]
    segments = [make_segment(" ".join(sentences[i % 8:] + sentences[: i % 8][:2]), doc_id=f"d{i:03d}")
                for i in range(500)]
    by_id = {s.segment_id: s for s in segments}
    doomed = {s.segment_id for i, s in enumerate(segments) if i % 10 == 0}
    assert len(doomed) == 50

    mock = MockBackend("generative", seed=SEED, max_parallel=8)
    pairs, failures = generate_corpus(segments, GenerationSpec(3, 3), mock)
    assert not failures

    def injected(prompt):
        if prompt.task == "adjudicate":
            qa_id = next(l for l in prompt.user.splitlines() if l.startswith("Pair id:")).split(": ", 1)[1]
            segment_id, local = qa_id.rsplit(":", 1)
            # regenerated pairs (":r<n>") are judged normally
            if segment_id in doomed and local.startswith("q"):
                return json.dumps({"directive": "DELETE", "corrected_type": None, "rationale": "injected"})
        return mock.complete(prompt)

    outcome = run_quality_control(pairs, by_id, FunctionBackend(injected, max_parallel=8))
    c = outcome.counters
    assert c["in"] == len(pairs) == c["keep"] + c["delete"] + c["typefix"]
    assert c["delete"] >= 6 * len(doomed)

    survivors: dict[str, list[QAPair]] = {}
    for p in outcome.pairs:
        survivors.setdefault(p.segment_id, []).append(p)
    assert set(survivors) == set(by_id) - set(outcome.dropped_segments)
    assert all(any(p.qtype is QType.EXPLICIT for p in ps) for ps in survivors.values())

    regenerated = [p for p in outcome.pairs if p.provenance is Provenance.REGENERATED_IN_QC]
    assert {p.segment_id for p in regenerated} == doomed - set(outcome.dropped_segments)
    assert all(p.qa_id.split(":")[-1].startswith("r") for p in regenerated)
    assert not outcome.dropped_segments


@pytest.mark.criterion(3, "correct-option positions are uniform over 10,000 seeded assemblies")
def test_position_uniformity():
    counts = Counter()
    for i in range(10_000):
        qa = QAPair(f"doc{i // 6}::0000:q{i % 6}", f"doc{i // 6}::0000", "Which one?", "right", QType.EXPLICIT)
        item = assemble_mcq(qa, DistractorSet(("wrong a", "wrong b", "wrong c"), 0), SEED)
        assert item.options[item.correct_index] == "right"
        counts[item.correct_index] += 1
    observed = [counts[k] for k in range(4)]
    assert stats.chisquare(observed).pvalue > 0.01
    assert all(abs(c / 10_000 - 0.25) <= 0.01 for c in observed)


def placeholder_pool(n_implicit: int, n_explicit: int) -> list[QAPair]:
    pool = [QAPair(f"i::{k:05d}:q0", f"i::{k:05d}", f"implicit {k}?", "a", QType.IMPLICIT, "because")
            for k in range(n_implicit)]
    pool += [QAPair(f"e::{k:05d}:q0", f"e::{k:05d}", f"explicit {k}?", "b", QType.EXPLICIT)
             for k in range(n_explicit)]
    return pool


def floor_in_hundredths(fraction: float, n: int) -> int:
    return round(fraction * 100) * n // 100


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 3000), st.integers(0, 3000), st.sampled_from([0, 0.33, 0.66, 1]),
       st.sampled_from([0, 0.33, 0.66, 1]), st.integers(0, 2**32))
def check_floor_law(n_i, n_e, f, g, seed):
    if f == 0 and g == 0:
        return
    expected = floor_in_hundredths(f, n_i) + floor_in_hundredths(g, n_e)
    if expected == 0:
        with pytest.raises(EmptyComposition):
            mix(placeholder_pool(n_i, n_e), CompositionConfig(f, g, seed))
        return
    dataset, rep = mix(placeholder_pool(n_i, n_e), CompositionConfig(f, g, seed))
    assert rep.n_implicit_sampled == floor_in_hundredths(f, n_i)
    assert rep.n_explicit_sampled == floor_in_hundredths(g, n_e)
    assert len(dataset) == rep.n_total == rep.n_implicit_sampled + rep.n_explicit_sampled


@pytest.mark.criterion(4, "composition sizes follow the floor law and reruns are identical")
def test_composition_law():
    pool = placeholder_pool(12_376, 12_294)
    dataset, rep = mix(pool, CompositionConfig(1, 1, SEED))
    assert rep.n_total == len(dataset) == 24_670
    check_floor_law()
    for f, g in [(0.66, 1), (1, 0.33), (0.33, 0.66)]:
        cfg = CompositionConfig(f, g, SEED, shuffle=True)
        first, _ = mix(pool, cfg)
        second, _ = mix(list(pool), cfg)
        assert first == second
        assert len(first) == floor_in_hundredths(f, 12_376) + floor_in_hundredths(g, 12_294)


@pytest.mark.criterion(5, "metric oracles: LCS brute force, F1/EM table, identity and range")
def test_metric_oracles():
    started = time.perf_counter()
    rng = random.Random(SEED)
    for _ in range(1_200):
        a = [rng.choice("abc") for _ in range(rng.randint(0, 12))]
        b = [rng.choice("abc") for _ in range(rng.randint(0, 12))]
        assert lcs_length(a, b) == brute_force_lcs(a, b)
        if a and b:
            expected = 0.0 if brute_force_lcs(a, b) == 0 else (
                200 * brute_force_lcs(a, b) / (len(a) + len(b)))
            assert rouge_l(" ".join(a), " ".join(b)) == pytest.approx(expected)

    for pred, gold, f1, em in F1_EM_TABLE:
        assert token_f1(pred, gold) == pytest.approx(f1)
        assert exact_match(pred, gold) == em

    vocab = ["the", "a", "Cat", "cat", "sat", "on", "mat", ",", ".", "!", "5.2", "it's"]
    for _ in range(2_000):
        x = " ".join(rng.choice(vocab) for _ in range(rng.randint(1, 10)))
        y = " ".join(rng.choice(vocab) for _ in range(rng.randint(0, 10)))
        identical = [token_f1(x, x), exact_match(x, x), rouge_l(x, x), rouge_n(x, x), bleu([x], [x]),
                     semsim(x, x, lambda t: [[1.0, 2.0, 3.0]] * 2)]
        assert all(v == pytest.approx(100.0) for v in identical)
        for v in (token_f1(x, y), exact_match(x, y), rouge_l(x, y), rouge_n(x, y), bleu([x], [y])):
            assert 0.0 <= v <= 100.0 + 1e-9
    assert time.perf_counter() - started < 60


@pytest.mark.criterion(6, "malformed corpus: every line is exported or quarantined, none lost")
def test_repair_conservation(tmp_path):
    pairs = corpus()
    lines = [line for _, line in pairs]
    res = export_lines(lines, "qa_cot", tmp_path / "out.jsonl", quarantine_path=tmp_path / "q.jsonl",
                       backend=MockBackend())
    assert res.n_input == 50 and res.n_deduped == 0
    assert res.n_exported + res.n_quarantined == 50

    exported = (tmp_path / "out.jsonl").read_text().splitlines()
    quarantined = [json.loads(x) for x in (tmp_path / "q.jsonl").read_text().splitlines()]
    assert len(exported) == res.n_exported and len(quarantined) == res.n_quarantined
    assert all(validate_record(x, "qa_cot") is None for x in exported)
    assert all(q["raw"] == lines[q["line_no"] - 1] and q["reason"] for q in quarantined)

    # every line not quarantined is accounted for by its own exported record
    q_lines = {q["line_no"] for q in quarantined}
    instructions = {json.loads(x)["instruction"] for x in exported}
    for line_no, (kind, line) in enumerate(pairs, 1):
        if line_no not in q_lines:
            i = line_no - 1
            assert f"What does item {i} describe?" in instructions, (kind, line)
    kinds = Counter(kind for line_no, (kind, _) in enumerate(pairs, 1) if line_no in q_lines)
    assert kinds["prose"] == 10 and kinds["fence"] == kinds["trailing_comma"] == kinds["bare_keys"] == 0


KILL_SCRIPT = textwrap.dedent("""
    import json, os, sys
    from qasynth.config import load_config
    from qasynth.pipeline import run_pipeline

    overrides, kill_after = json.loads(sys.argv[1]), sys.argv[2]

    def hook(stage, manifest):
        if stage == kill_after:
            os._exit(137)

    run_pipeline(load_config(overrides=overrides), on_stage_done=hook)
    sys.exit(0)
""")

ARTIFACTS = ("segments", "stage1", "stage2", "verdicts", "stage3", "train", "report", "sft", "mcq",
             "quarantine", "export_manifest")


def snapshot(run_dir: Path) -> dict[str, bytes]:
    return {k: (run_dir / FILES[k]).read_bytes() for k in ARTIFACTS if (run_dir / FILES[k]).exists()}


@pytest.mark.criterion(7, "killing the run at any stage boundary and resuming is byte-identical")
def test_resume_determinism(tmp_path):
    corpus_dir = tmp_path / "corpus"
    corpus_dir.mkdir()
    sentences = [s.strip() + "." for s in PASSAGE.split(".") if s.strip()]
    for d in range(4):
        (corpus_dir / f"doc{d}.txt").write_text(" ".join(sentences[d:] + sentences[:d]) * 3)
    glob_ = str(corpus_dir / "*.txt")
    extra = ("ingest.max_tokens=128", "compose.implicit_fraction=0.66", "compose.shuffle=true",
             "backend.max_parallel=8")

    reference = run_pipeline(load_config(overrides=mock_overrides(glob_, tmp_path / "ref", "run", *extra)))
    assert reference.exit_code == EXIT_OK
    expected = snapshot(reference.run_dir)
    assert {"sft", "mcq", "export_manifest"} <= set(expected)

    env = {**os.environ, "PYTHONPATH": os.pathsep.join(sys.path)}
    for stage in STAGES[:-1]:
        out_dir = tmp_path / f"kill_{stage}"
        overrides = mock_overrides(glob_, out_dir, "run", *extra)
        proc = subprocess.run([sys.executable, "-c", KILL_SCRIPT, json.dumps(overrides), stage],
                              env=env, capture_output=True, text=True)
        assert proc.returncode == 137, proc.stderr
        manifest = json.loads((out_dir / "run" / FILES["run_manifest"]).read_text())
        done = [s for s in STAGES if manifest["stage_status"][s] == DONE]
        assert done == list(STAGES[: STAGES.index(stage) + 1])

        resumed = run_pipeline(load_config(overrides=overrides))
        assert resumed.executed == list(STAGES[STAGES.index(stage) + 1:])
        assert snapshot(resumed.run_dir) == expected, stage
