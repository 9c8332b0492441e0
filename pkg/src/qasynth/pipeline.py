"""File-staged pipeline runner with a resumable run manifest.

Each stage reads the previous stage's JSONL and writes its own, so a run
directory holds every intermediate artifact:

    segments.jsonl -> stage1.jsonl -> stage2.jsonl (+ verdicts.jsonl)
    -> stage3.jsonl -> train.jsonl (+ report.json)
    -> sft.jsonl, mcq.jsonl, quarantine.jsonl (+ manifest.json)

``run_manifest.json`` tracks per-stage status, counters and timing.
Rerunning the same config resumes: stages marked Done are skipped, and
anything downstream of a re-executed stage is executed again.
"""

from __future__ import annotations

import glob
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from .backend import Backend, BackendConfig, OpenAICompatibleBackend
from .compose import CompositionConfig, EmptyComposition, mix
from .config import STAGES, ConfigError, check_config, config_hash, dump_config, input_format
from .counterfactual import run_counterfactual
from .export import ExportFormat, ExportResult, export_lines
from .generation import GenerationSpec, generate_corpus
from .ingest import TOKENIZER_NAME, load_corpus, segment_by_budget, segment_structural
from .ledger import RunLedger
from .mock import MockBackend
from .prompts import template_versions
from .quality_control import run_quality_control
from .records import QAPair, Segment, read_jsonl, write_json, write_jsonl

log = logging.getLogger(__name__)

PENDING, DONE, FAILED = "Pending", "Done", "Failed"

EXIT_OK, EXIT_CONFIG, EXIT_STAGE_FAILED, EXIT_PARTIAL = 0, 1, 2, 3

FILES = {
    "segments": "segments.jsonl",
    "stage1": "stage1.jsonl",
    "stage2": "stage2.jsonl",
    "verdicts": "verdicts.jsonl",
    "stage3": "stage3.jsonl",
    "train": "train.jsonl",
    "report": "report.json",
    "sft": "sft.jsonl",
    "mcq": "mcq.jsonl",
    "quarantine": "quarantine.jsonl",
    "export_manifest": "manifest.json",
    "run_manifest": "run_manifest.json",
    "ledger": "ledger.jsonl",
    "config": "config.yaml",
}


class StageFailure(RuntimeError):
    pass


# Stage functions: each reads and writes files and returns its counters.


def stage_ingest(
    inputs: Sequence[str],
    out: str | Path,
    *,
    fmt: str = "plain_text",
    text_field: str = "text",
    segmenter: str = "budget",
    delimiter: str = "blank_line",
    pattern: str | None = None,
    max_tokens: int = 256,
    on_error: str = "abort",
    ledger: RunLedger | None = None,
) -> dict[str, int]:
    if not inputs:
        raise StageFailure("ingest.inputs is empty; nothing to ingest")
    paths: list[str] = []
    for spec in inputs:
        matched = sorted(glob.glob(spec, recursive=True))
        if not matched:
            raise StageFailure(f"input {spec!r} matched no files")
        paths += [p for p in matched if p not in paths]
    docs, diagnostics = load_corpus(paths, fmt, text_field=text_field, on_error=on_error)
    for d in diagnostics:
        if ledger is not None:
            ledger.record("ingest_skipped", source=d.source, line=d.line, message=d.message)
    if not docs:
        raise StageFailure("no usable documents in the input")
    segments: list[Segment] = []
    for doc in docs:
        if segmenter == "structural":
            segments += segment_structural(doc, delimiter, max_tokens, pattern=pattern)
        else:
            segments += segment_by_budget(doc, max_tokens)
    write_jsonl(out, (s.to_dict() for s in segments))
    return {"documents": len(docs), "skipped_records": len(diagnostics), "segments": len(segments)}


def load_segments(path: str | Path) -> dict[str, Segment]:
    return {s.segment_id: s for s in (Segment.from_dict(d) for d in read_jsonl(path))}


def load_pairs(path: str | Path) -> list[QAPair]:
    return [QAPair.from_dict(d) for d in read_jsonl(path)]


def stage_generate(
    segments_path: str | Path,
    out: str | Path,
    spec: GenerationSpec,
    backend: Backend,
    *,
    max_retries: int = 2,
    temperature: float = 0.7,
) -> dict[str, int]:
    segments = list(load_segments(segments_path).values())
    pairs, failures = generate_corpus(segments, spec, backend, max_retries=max_retries, temperature=temperature)
    if segments and not pairs:
        raise StageFailure(f"generation produced no pairs for {len(segments)} segments")
    write_jsonl(out, (p.to_dict() for p in pairs))
    return {
        "segments": len(segments),
        "pairs": len(pairs),
        "explicit": sum(p.is_explicit for p in pairs),
        "implicit": sum(not p.is_explicit for p in pairs),
        "failed_segments": len(failures),
    }


def stage_qc(
    stage1_path: str | Path,
    segments_path: str | Path,
    out: str | Path,
    verdicts_out: str | Path,
    backend: Backend,
    *,
    max_retries: int = 2,
    temperature: float = 0.0,
) -> dict[str, int]:
    pairs = load_pairs(stage1_path)
    outcome = run_quality_control(pairs, load_segments(segments_path), backend,
                                  max_retries=max_retries, temperature=temperature)
    c = outcome.counters
    if c["in"] != c["keep"] + c["delete"] + c["typefix"]:
        raise StageFailure(f"QC conservation violated: {dict(c)}")
    if pairs and not outcome.pairs:
        raise StageFailure("quality control removed every pair")
    write_jsonl(out, (p.to_dict() for p in outcome.pairs))
    write_jsonl(verdicts_out, (v.to_dict() for v in outcome.verdicts))
    return {k: int(c[k]) for k in ("in", "keep", "delete", "typefix", "regenerated",
                                   "floor_dropped_segments", "out")}


def stage_distract(
    stage2_path: str | Path,
    segments_path: str | Path,
    out: str | Path,
    backend: Backend,
    seed: int,
    *,
    appraisal: bool = True,
    max_rounds: int = 2,
    max_retries: int = 2,
    temperature: float = 0.7,
) -> dict[str, int]:
    pairs = load_pairs(stage2_path)
    items, qa_only = run_counterfactual(
        pairs, load_segments(segments_path), backend, seed,
        max_retries=max_retries, max_rounds=max_rounds, appraisal=appraisal, temperature=temperature,
    )
    for qa_id in qa_only:
        backend.ledger.record("qa_only", qa_id=qa_id)
    write_jsonl(out, (item.to_dict() for item in items))
    return {"in": len(pairs), "items": len(items), "qa_only": len(qa_only)}


def stage_compose(
    pool_path: str | Path,
    out: str | Path,
    cfg: CompositionConfig,
    *,
    report_out: str | Path | None = None,
    segments_path: str | Path | None = None,
) -> dict[str, int]:
    pool = load_pairs(pool_path)
    lookup = None
    if segments_path is not None and Path(segments_path).exists():
        lookup = {sid: s.doc_id for sid, s in load_segments(segments_path).items()}
    dataset, rep = mix(pool, cfg, lookup)
    write_jsonl(out, (p.to_dict() for p in dataset))
    if report_out is not None:
        write_json(report_out, {"config": cfg.label, "seed": cfg.seed, **rep.to_dict()})
    return {"pool": len(pool), "implicit": rep.n_implicit_sampled,
            "explicit": rep.n_explicit_sampled, "total": rep.n_total}


def _read_lines(path: str | Path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return fh.read().splitlines()


def stage_export(
    train_path: str | Path,
    out: str | Path,
    fmt: str,
    *,
    quarantine_out: str | Path | None = None,
    manifest_out: str | Path | None = None,
    manifest_extra: Mapping[str, Any] | None = None,
    segments_path: str | Path | None = None,
    include_context: bool = False,
    mcq_source: str | Path | None = None,
    mcq_out: str | Path | None = None,
    backend: Backend | None = None,
    ledger: RunLedger | None = None,
) -> dict[str, int]:
    """Export the training set, plus MCQ items for the pairs it contains."""
    contexts = None
    if segments_path is not None and Path(segments_path).exists():
        contexts = {sid: s.text for sid, s in load_segments(segments_path).items()}
    if include_context and contexts is None:
        raise StageFailure("include_context needs the segments file")
    sft = export_lines(_read_lines(train_path), fmt, out, quarantine_path=quarantine_out,
                       backend=backend, include_context=include_context, contexts=contexts,
                       ledger=ledger)
    counters = {f"sft_{k[2:]}": v for k, v in sft.to_dict().items()}
    mcq: ExportResult | None = None
    if mcq_source is not None and mcq_out is not None:
        keep = {d["qa_id"] for d in read_jsonl(train_path)}
        lines = [line for line in _read_lines(mcq_source)
                 if line.strip() and json.loads(line).get("qa_id") in keep]
        mcq = export_lines(lines, ExportFormat.MCQ, mcq_out, backend=backend, ledger=ledger)
        counters.update({f"mcq_{k[2:]}": v for k, v in mcq.to_dict().items()})
    if manifest_out is not None:
        write_json(manifest_out, {
            "format": ExportFormat(fmt).value,
            "include_context": include_context,
            "counts": {"sft": sft.to_dict(), "mcq": mcq.to_dict() if mcq else None},
            **(manifest_extra or {}),
        })
    return counters


# Run manifest


@dataclass
class RunManifest:
    run_id: str
    config_hash: str
    stage_status: dict[str, str] = field(default_factory=lambda: {s: PENDING for s in STAGES})
    seeds: dict[str, int] = field(default_factory=dict)
    template_versions: dict[str, str] = field(default_factory=dict)
    counters: dict[str, dict[str, int]] = field(default_factory=dict)
    timing: dict[str, float] = field(default_factory=dict)
    tokenizer: str = TOKENIZER_NAME
    errors: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "config_hash": self.config_hash,
            "stage_status": dict(self.stage_status),
            "seeds": dict(self.seeds),
            "template_versions": dict(self.template_versions),
            "tokenizer": self.tokenizer,
            "counters": {k: dict(v) for k, v in self.counters.items()},
            "timing": dict(self.timing),
            "errors": dict(self.errors),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(
            run_id=d["run_id"],
            config_hash=d["config_hash"],
            stage_status={s: d.get("stage_status", {}).get(s, PENDING) for s in STAGES},
            seeds=dict(d.get("seeds", {})),
            template_versions=dict(d.get("template_versions", {})),
            counters={k: dict(v) for k, v in d.get("counters", {}).items()},
            timing=dict(d.get("timing", {})),
            tokenizer=d.get("tokenizer", TOKENIZER_NAME),
            errors=dict(d.get("errors", {})),
        )

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path: str | Path) -> None:
        write_json(path, self.to_dict())


def build_backend(cfg: Mapping[str, Any], ledger: RunLedger | None = None) -> Backend:
    b = cfg["backend"]
    if b["kind"] == "mock":
        if b["mock_mode"] == "scripted":
            return MockBackend.from_fixture(b["mock_script"], max_parallel=b["max_parallel"], ledger=ledger)
        return MockBackend("generative", seed=cfg["run"]["seed"], max_parallel=b["max_parallel"], ledger=ledger)
    bcfg = BackendConfig.from_env(max_parallel=b["max_parallel"], timeout=float(b["timeout"]),
                                  max_attempts=b["max_attempts"], backoff_base=float(b["backoff_base"]))
    return OpenAICompatibleBackend(bcfg, ledger)


def run_dir_for(cfg: Mapping[str, Any]) -> Path:
    run_id = cfg["run"]["run_id"] or config_hash(cfg)[:12]
    return Path(cfg["run"]["out_dir"]) / run_id


def _stage_inputs(stage: str, enabled: Sequence[str]) -> list[str]:
    """Files a stage reads; compose is bypassed when disabled."""
    compose_src = "train" if "compose" in enabled else "stage2"
    return {
        "ingest": [],
        "generate": ["segments"],
        "qc": ["stage1", "segments"],
        "distract": ["stage2", "segments"],
        "compose": ["stage2"],
        "export": [compose_src],
    }[stage]


_STAGE_OUTPUTS = {
    "ingest": ["segments"],
    "generate": ["stage1"],
    "qc": ["stage2", "verdicts"],
    "distract": ["stage3"],
    "compose": ["train", "report"],
    "export": ["sft", "export_manifest"],
}


@dataclass
class RunResult:
    manifest: RunManifest
    run_dir: Path
    exit_code: int
    executed: list[str]


def run_pipeline(
    cfg: Mapping[str, Any],
    *,
    backend: Backend | None = None,
    on_stage_done: Callable[[str, RunManifest], None] | None = None,
    stop_after: str | None = None,
) -> RunResult:
    """Run (or resume) every enabled stage of ``cfg``.

    ``on_stage_done`` is called after each completed stage, once its
    outputs and the manifest are on disk. ``stop_after`` ends the run
    cleanly after the named stage. Raises :class:`ConfigError` before
    touching the run directory if the config is invalid or belongs to a
    different run.
    """
    check_config(cfg)
    if stop_after is not None and stop_after not in STAGES:
        raise ConfigError([f"stop_after: unknown stage {stop_after!r}; valid stages are {', '.join(STAGES)}"])
    digest = config_hash(cfg)
    run_dir = run_dir_for(cfg)
    paths = {k: run_dir / v for k, v in FILES.items()}
    enabled = [s for s in STAGES if s in cfg["run"]["stages"]]

    if paths["run_manifest"].exists():
        manifest = RunManifest.load(paths["run_manifest"])
        if manifest.config_hash != digest:
            raise ConfigError([
                f"run.run_id: run {manifest.run_id!r} was created with config {manifest.config_hash[:12]}, "
                f"current config is {digest[:12]}; use a new run_id or the original config"
            ])
    else:
        manifest = RunManifest(run_id=run_dir.name, config_hash=digest)
    run_dir.mkdir(parents=True, exist_ok=True)
    paths["config"].write_text(dump_config(cfg), encoding="utf-8")
    seed = cfg["run"]["seed"]
    manifest.seeds = {"run": seed, "distract": seed, "compose": seed, "mock": seed}
    manifest.template_versions = template_versions()

    ledger = RunLedger()
    if backend is None:
        backend = build_backend(cfg, ledger)
    else:
        backend.ledger = ledger

    def stage_done(stage: str) -> bool:
        return (manifest.stage_status.get(stage) == DONE
                and all(paths[k].exists() for k in _STAGE_OUTPUTS[stage]))

    executed: list[str] = []
    invalidated = False
    for stage in enabled:
        if not invalidated and stage_done(stage):
            log.info("stage %s already done, skipping", stage)
            if stage == stop_after:
                break
            continue
        invalidated = True
        # everything downstream must run again
        for later in STAGES[STAGES.index(stage):]:
            manifest.stage_status[later] = PENDING
        manifest.errors.pop(stage, None)
        manifest.save(paths["run_manifest"])
        missing = [paths[k] for k in _stage_inputs(stage, enabled) if not paths[k].exists()]
        started = time.perf_counter()
        try:
            if missing:
                raise StageFailure(f"missing input {missing[0].name}; enable the stage that produces it")
            ledger.record("stage_start", stage=stage)
            counters = _run_stage(stage, cfg, paths, enabled, backend, ledger, manifest)
        except Exception as exc:
            manifest.stage_status[stage] = FAILED
            manifest.errors[stage] = f"{type(exc).__name__}: {exc}"
            manifest.timing[stage] = round(time.perf_counter() - started, 6)
            ledger.record("stage_failed", stage=stage, error=manifest.errors[stage])
            ledger.flush(paths["ledger"])
            manifest.save(paths["run_manifest"])
            log.error("stage %s failed: %s", stage, exc)
            return RunResult(manifest, run_dir, EXIT_STAGE_FAILED, executed)
        manifest.counters[stage] = counters
        manifest.timing[stage] = round(time.perf_counter() - started, 6)
        manifest.stage_status[stage] = DONE
        ledger.record("stage_done", stage=stage, **counters)
        ledger.flush(paths["ledger"])
        manifest.save(paths["run_manifest"])
        executed.append(stage)
        if on_stage_done is not None:
            on_stage_done(stage, manifest)
        if stage == stop_after:
            break

    partial = _is_partial(manifest)
    return RunResult(manifest, run_dir, EXIT_PARTIAL if partial else EXIT_OK, executed)


def _is_partial(manifest: RunManifest) -> bool:
    c = manifest.counters
    return any((
        c.get("ingest", {}).get("skipped_records", 0),
        c.get("generate", {}).get("failed_segments", 0),
        c.get("qc", {}).get("floor_dropped_segments", 0),
        c.get("distract", {}).get("qa_only", 0),
        c.get("export", {}).get("sft_quarantined", 0),
        c.get("export", {}).get("mcq_quarantined", 0),
    ))


def _run_stage(
    stage: str,
    cfg: Mapping[str, Any],
    paths: Mapping[str, Path],
    enabled: Sequence[str],
    backend: Backend,
    ledger: RunLedger,
    manifest: RunManifest,
) -> dict[str, int]:
    seed = cfg["run"]["seed"]
    if stage == "ingest":
        c = cfg["ingest"]
        return stage_ingest(c["inputs"], paths["segments"], fmt=input_format(cfg), text_field=c["text_field"],
                            segmenter=c["segmenter"], delimiter=c["delimiter"], pattern=c["pattern"],
                            max_tokens=c["max_tokens"], on_error=c["on_error"], ledger=ledger)
    if stage == "generate":
        c = cfg["generate"]
        spec = GenerationSpec(c["n_explicit"], c["n_implicit"], c["require_role_transformation"])
        return stage_generate(paths["segments"], paths["stage1"], spec, backend,
                              max_retries=c["max_retries"], temperature=c["temperature"])
    if stage == "qc":
        c = cfg["qc"]
        return stage_qc(paths["stage1"], paths["segments"], paths["stage2"], paths["verdicts"], backend,
                        max_retries=c["max_retries"], temperature=c["temperature"])
    if stage == "distract":
        c = cfg["distract"]
        return stage_distract(paths["stage2"], paths["segments"], paths["stage3"], backend, seed,
                              appraisal=c["appraisal"], max_rounds=c["max_rounds"],
                              max_retries=c["max_retries"], temperature=c["temperature"])
    if stage == "compose":
        c = cfg["compose"]
        comp = CompositionConfig(c["implicit_fraction"], c["explicit_fraction"], seed,
                                 c["shuffle"], c["stratify_by_segment"])
        try:
            return stage_compose(paths["stage2"], paths["train"], comp, report_out=paths["report"],
                                 segments_path=paths["segments"])
        except EmptyComposition as exc:
            raise StageFailure(str(exc)) from exc
    if stage == "export":
        c = cfg["export"]
        use_mcq = manifest.stage_status.get("distract") == DONE and paths["stage3"].exists()
        if not use_mcq and paths["mcq"].exists():
            paths["mcq"].unlink()
        return stage_export(
            paths["train"] if "compose" in enabled else paths["stage2"],
            paths["sft"], c["format"],
            quarantine_out=paths["quarantine"], manifest_out=paths["export_manifest"],
            manifest_extra={"config_hash": manifest.config_hash, "seeds": manifest.seeds,
                            "template_versions": manifest.template_versions,
                            "tokenizer": manifest.tokenizer},
            segments_path=paths["segments"], include_context=c["include_context"],
            mcq_source=paths["stage3"] if use_mcq else None,
            mcq_out=paths["mcq"] if use_mcq else None,
            backend=backend, ledger=ledger,
        )
    raise ValueError(f"unknown stage {stage!r}")
