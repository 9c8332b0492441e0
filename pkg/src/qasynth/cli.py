"""Command-line entry point: one subcommand per stage plus ``run``.

Exit codes: 0 success, 1 configuration or usage error, 2 stage failure,
3 partial success (artifacts written but some items were quarantined,
dropped or left without distractors; see the ledger).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .backend import Backend, BackendConfig, OpenAICompatibleBackend
from .compose import CompositionConfig
from .config import ConfigError, load_config
from .export import ExportFormat
from .generation import GenerationSpec
from .ingest import DEFAULT_MAX_TOKENS, DELIMITERS, SegmentationError, CorpusError
from .ledger import RunLedger
from .metrics import HTTPEmbedder, position_bias_audit, score
from .mock import MockBackend
from .records import MCQItem, read_jsonl, write_json

log = logging.getLogger("qasynth")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_PARTIAL = 0, 1, 2, 3


def _add_backend_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("backend")
    g.add_argument("--backend", choices=("http", "mock"), default="http",
                   help="http uses DSCORE_API_BASE / DSCORE_API_KEY / DSCORE_MODEL")
    g.add_argument("--mock-script", help="JSON fixture {prompt digest: reply} for a scripted mock")
    g.add_argument("--mock-seed", type=int, default=0)
    g.add_argument("--max-parallel", type=int, default=4)
    g.add_argument("--ledger", help="append ledger events to this JSONL file")


def _backend(args: argparse.Namespace, ledger: RunLedger) -> Backend:
    if args.backend == "mock":
        if args.mock_script:
            return MockBackend.from_fixture(args.mock_script, max_parallel=args.max_parallel, ledger=ledger)
        return MockBackend("generative", seed=args.mock_seed, max_parallel=args.max_parallel, ledger=ledger)
    return OpenAICompatibleBackend(BackendConfig.from_env(max_parallel=args.max_parallel), ledger)


def _flush(args: argparse.Namespace, ledger: RunLedger) -> None:
    if getattr(args, "ledger", None):
        ledger.flush(args.ledger)


def _segments_near(path: str, explicit: str | None) -> str | None:
    if explicit:
        return explicit
    guess = Path(path).with_name("segments.jsonl")
    return str(guess) if guess.exists() else None


def cmd_ingest(args: argparse.Namespace) -> int:
    ledger = RunLedger()
    fmt = {"text": "plain_text", "jsonl": "jsonl_with_text_field"}[args.format]
    counters = pipeline.stage_ingest(
        args.input, args.out, fmt=fmt, text_field=args.text_field, segmenter=args.segmenter,
        delimiter=args.delimiter, pattern=args.pattern, max_tokens=args.max_tokens,
        on_error=args.on_error, ledger=ledger,
    )
    _flush(args, ledger)
    print(f"{counters['segments']} segments from {counters['documents']} documents -> {args.out}")
    return EXIT_PARTIAL if counters["skipped_records"] else EXIT_OK


def cmd_generate(args: argparse.Namespace) -> int:
    ledger = RunLedger()
    spec = GenerationSpec(args.n_explicit, args.n_implicit, not args.no_roles)
    counters = pipeline.stage_generate(args.segments, args.out, spec, _backend(args, ledger),
                                       max_retries=args.max_retries, temperature=args.temperature)
    _flush(args, ledger)
    print(f"{counters['pairs']} pairs ({counters['explicit']} explicit, {counters['implicit']} implicit) -> {args.out}")
    return EXIT_PARTIAL if counters["failed_segments"] else EXIT_OK


def cmd_qc(args: argparse.Namespace) -> int:
    ledger = RunLedger()
    c = pipeline.stage_qc(args.stage1, args.segments, args.out, args.verdicts, _backend(args, ledger),
                          max_retries=args.max_retries, temperature=args.temperature)
    _flush(args, ledger)
    print(f"in={c['in']} keep={c['keep']} delete={c['delete']} typefix={c['typefix']} "
          f"regenerated={c['regenerated']} out={c['out']} -> {args.out}")
    return EXIT_PARTIAL if c["floor_dropped_segments"] else EXIT_OK


def cmd_distract(args: argparse.Namespace) -> int:
    ledger = RunLedger()
    c = pipeline.stage_distract(args.stage2, args.segments, args.out, _backend(args, ledger), args.seed,
                                appraisal=not args.no_appraisal, max_rounds=args.max_rounds,
                                max_retries=args.max_retries, temperature=args.temperature)
    _flush(args, ledger)
    print(f"{c['items']} four-option items, {c['qa_only']} left QA-only -> {args.out}")
    return EXIT_PARTIAL if c["qa_only"] else EXIT_OK


def cmd_compose(args: argparse.Namespace) -> int:
    try:
        cfg = CompositionConfig(args.implicit_frac, args.explicit_frac, args.seed,
                                args.shuffle, args.stratify_by_segment)
    except ValueError as exc:
        raise ConfigError([f"compose: {exc}"]) from exc
    c = pipeline.stage_compose(args.pool, args.out, cfg, report_out=args.report,
                               segments_path=_segments_near(args.pool, args.segments))
    print(f"{cfg.label}: {c['total']} pairs ({c['implicit']} implicit, {c['explicit']} explicit) -> {args.out}")
    return EXIT_OK


def cmd_export(args: argparse.Namespace) -> int:
    ledger = RunLedger()
    backend = _backend(args, ledger) if args.repair_backend else None
    fmt = ExportFormat(args.format)
    from .export import export_lines

    contexts = None
    segments = _segments_near(args.input, args.segments)
    if args.include_context:
        if segments is None:
            raise ConfigError(["export: --include-context needs --segments (or segments.jsonl beside the input)"])
        contexts = {sid: s.text for sid, s in pipeline.load_segments(segments).items()}
    with open(args.input, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    result = export_lines(lines, fmt, args.out, quarantine_path=args.quarantine, backend=backend,
                          include_context=args.include_context, contexts=contexts,
                          manifest_path=args.manifest, ledger=ledger)
    _flush(args, ledger)
    print(f"exported={result.n_exported} deduped={result.n_deduped} quarantined={result.n_quarantined} "
          f"(repaired {result.n_repaired}) -> {args.out}")
    return EXIT_PARTIAL if result.n_quarantined else EXIT_OK


def cmd_score(args: argparse.Namespace) -> int:
    preds = list(read_jsonl(args.preds))
    refs = list(read_jsonl(args.refs))
    key_p, key_r = args.pred_field, args.ref_field
    if len(preds) != len(refs):
        raise ConfigError([f"score: {len(preds)} predictions but {len(refs)} references"])
    embedder = HTTPEmbedder(args.embed_endpoint, args.embed_model) if args.embed_endpoint else None
    rep = score([str(p[key_p]) for p in preds], [str(r[key_r]) for r in refs], embedder)
    write_json(args.out, rep.to_dict())
    print(" ".join(f"{k}={v:.2f}" if isinstance(v, float) else f"{k}={v}" for k, v in rep.to_dict().items()))
    return EXIT_OK


def cmd_audit(args: argparse.Namespace) -> int:
    items = [MCQItem.from_dict(d) for d in read_jsonl(args.mcq)]
    if not items:
        raise ConfigError([f"audit: {args.mcq} holds no items"])
    result = position_bias_audit(items)
    write_json(args.out, {"n": len(items), **result})
    print(f"counts={result['counts']} chi_square={result['chi_square']:.3f} p_value={result['p_value']:.4f}")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    overrides = list(args.set or [])
    if args.backend:
        overrides.append(f"backend.kind={args.backend}")
    if args.mock_script:
        overrides += ["backend.mock_mode=scripted", f"backend.mock_script={args.mock_script}"]
    if args.run_id:
        overrides.append(f"run.run_id={args.run_id}")
    if args.out_dir:
        overrides.append(f"run.out_dir={args.out_dir}")
    cfg = load_config(args.config, overrides)
    result = pipeline.run_pipeline(cfg, stop_after=args.stop_after)
    m = result.manifest
    status = " ".join(f"{s}={m.stage_status[s]}" for s in m.stage_status)
    print(f"run {m.run_id} in {result.run_dir}: {status}")
    if result.exit_code == EXIT_STAGE:
        failed = next(s for s, st in m.stage_status.items() if st == pipeline.FAILED)
        print(f"stage {failed} failed: {m.errors.get(failed)}", file=sys.stderr)
    return result.exit_code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qasynth", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load documents and split them into segments")
    p.add_argument("--input", nargs="+", required=True, help="files or glob patterns")
    p.add_argument("--format", choices=("text", "jsonl"), default="text")
    p.add_argument("--text-field", default="text")
    p.add_argument("--max-tokens", type=int, default=DEFAULT_MAX_TOKENS)
    p.add_argument("--segmenter", choices=("budget", "structural"), default="budget")
    p.add_argument("--delimiter", choices=(*DELIMITERS, "custom_regex"), default="blank_line")
    p.add_argument("--pattern", help="regex for --delimiter custom_regex")
    p.add_argument("--on-error", choices=("abort", "skip"), default="abort")
    p.add_argument("--ledger")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("generate", help="stage 1: QA pairs per segment")
    p.add_argument("--segments", required=True)
    p.add_argument("--n-explicit", type=int, default=2)
    p.add_argument("--n-implicit", type=int, default=1)
    p.add_argument("--no-roles", action="store_true", help="drop the role-transformation directive")
    p.add_argument("--temperature", type=float, default=0.7)
    p.add_argument("--max-retries", type=int, default=2)
    p.add_argument("--out", required=True)
    _add_backend_args(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("qc", help="stage 2: adjudicate pairs and enforce the explicit floor")
    p.add_argument("--stage1", required=True)
    p.add_argument("--segments", required=True)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--max-retries", type=int, default=2)
    p.add_argument("--out", required=True)
    p.add_argument("--verdicts", required=True)
    _add_backend_args(p)
    p.set_defaults(func=cmd_qc)

    p = sub.add_parser("distract", help="stage 3: distractors and four-option items")
    p.add_argument("--stage2", required=True)
    p.add_argument("--segments", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--no-appraisal", action="store_true")
    p.add_argument("--max-rounds", type=int, default=2)
    p.add_argument("--max-retries", type=int, default=2)
    p.add_argument("--temperature", type=float, default=0.7)
    p.add_argument("--out", required=True)
    _add_backend_args(p)
    p.set_defaults(func=cmd_distract)

    p = sub.add_parser("compose", help="sample an implicit/explicit training mix")
    p.add_argument("--pool", required=True)
    p.add_argument("--implicit-frac", type=float, default=1.0)
    p.add_argument("--explicit-frac", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shuffle", action="store_true")
    p.add_argument("--stratify-by-segment", action="store_true")
    p.add_argument("--segments", help="segments.jsonl for the per-document histogram")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("export", help="write SFT records, repairing or quarantining bad lines")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--format", choices=[f.value for f in ExportFormat], default="qa_cot")
    p.add_argument("--include-context", action="store_true")
    p.add_argument("--segments", help="segments.jsonl for --include-context")
    p.add_argument("--out", required=True)
    p.add_argument("--quarantine")
    p.add_argument("--manifest")
    p.add_argument("--repair-backend", action="store_true",
                   help="allow one model call per record that mechanical repair cannot fix")
    _add_backend_args(p)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("score", help="F1, EM, BLEU, ROUGE-2, ROUGE-L and SemSim")
    p.add_argument("--preds", required=True)
    p.add_argument("--refs", required=True)
    p.add_argument("--pred-field", default="prediction")
    p.add_argument("--ref-field", default="answer")
    p.add_argument("--embed-endpoint", help="OpenAI-compatible /embeddings URL")
    p.add_argument("--embed-model", default="")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("audit", help="correct-option position bias of MCQ items")
    p.add_argument("--mcq", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("run", help="run or resume the whole pipeline from a config file")
    p.add_argument("--config", help="YAML config; defaults apply when omitted")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    p.add_argument("--backend", choices=("http", "mock"))
    p.add_argument("--mock-script")
    p.add_argument("--run-id")
    p.add_argument("--out-dir")
    p.add_argument("--stop-after", choices=pipeline.STAGES)
    p.set_defaults(func=cmd_run)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (pipeline.StageFailure, SegmentationError, CorpusError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
