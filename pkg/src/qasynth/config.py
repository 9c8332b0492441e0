"""Pipeline configuration: defaults, YAML loading, overrides and validation.

Precedence is command-line overrides, then the config file, then
:data:`DEFAULTS`. The merged result is hashed; the hash identifies the run
and guards resumption against silently changed settings.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml

from .ingest import DELIMITERS, MIN_MAX_TOKENS

STAGES = ("ingest", "generate", "qc", "distract", "compose", "export")

DEFAULTS: dict[str, Any] = {
    "run": {
        "run_id": None,
        "out_dir": "runs",
        "seed": 7,
        "stages": list(STAGES),
    },
    "ingest": {
        "inputs": [],
        "format": "text",
        "text_field": "text",
        "segmenter": "budget",
        "delimiter": "blank_line",
        "pattern": None,
        "max_tokens": 256,
        "on_error": "abort",
    },
    "backend": {
        "kind": "http",
        "mock_mode": "generative",
        "mock_script": None,
        "max_parallel": 4,
        "timeout": 120.0,
        "max_attempts": 4,
        "backoff_base": 1.0,
    },
    "generate": {
        "n_explicit": 2,
        "n_implicit": 1,
        "require_role_transformation": True,
        "temperature": 0.7,
        "max_retries": 2,
    },
    "qc": {
        "temperature": 0.0,
        "max_retries": 2,
    },
    "distract": {
        "appraisal": True,
        "max_rounds": 2,
        "max_retries": 2,
        "temperature": 0.7,
    },
    "compose": {
        "implicit_fraction": 1.0,
        "explicit_fraction": 1.0,
        "shuffle": False,
        "stratify_by_segment": False,
    },
    "export": {
        "format": "qa_cot",
        "include_context": False,
    },
}

# Settings that locate or label a run without changing its outputs.
_UNHASHED = {("run", "run_id"), ("run", "out_dir"), ("run", "stages")}

_INPUT_FORMATS = {"text": "plain_text", "plain_text": "plain_text",
                  "jsonl": "jsonl_with_text_field", "jsonl_with_text_field": "jsonl_with_text_field"}


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(errors))
        self.errors = errors


def merge(base: Mapping[str, Any], override: Mapping[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(dict(base))
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), Mapping):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(item: str) -> tuple[list[str], Any]:
    """Split ``section.key=value``; the value is parsed as YAML."""
    path, sep, raw = item.partition("=")
    if not sep or not path.strip():
        raise ConfigError([f"override {item!r}: expected section.key=value"])
    return path.strip().split("."), yaml.safe_load(raw)


def apply_overrides(cfg: Mapping[str, Any], overrides: Iterable[str]) -> dict[str, Any]:
    out = copy.deepcopy(dict(cfg))
    for item in overrides:
        keys, value = parse_override(item)
        node = out
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError([f"override {item!r}: {key} is not a section"])
        node[keys[-1]] = value
    return out


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> dict[str, Any]:
    """Defaults, then the YAML file at ``path``, then ``overrides``."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError([f"{path}: cannot load ({exc})"]) from exc
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError([f"{path}: top level must be a mapping of sections"])
        cfg = merge(cfg, data)
    return apply_overrides(cfg, overrides)


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v: Any) -> bool:
    return (isinstance(v, (int, float)) and not isinstance(v, bool)) and not math.isnan(v)


def validate_config(cfg: Mapping[str, Any]) -> list[str]:
    """Return every problem as ``"<section.key>: <constraint>"``; empty is Ok."""
    errors: list[str] = []

    def get(section: str, key: str) -> Any:
        return (cfg.get(section) or {}).get(key)

    def need(ok: bool, path: str, constraint: str) -> None:
        if not ok:
            errors.append(f"{path}: {constraint}")

    for section, value in cfg.items():
        if section not in DEFAULTS:
            errors.append(f"{section}: unknown section (valid: {', '.join(DEFAULTS)})")
        elif not isinstance(value, Mapping):
            errors.append(f"{section}: must be a mapping")
    for section, keys in DEFAULTS.items():
        for key in (cfg.get(section) or {}):
            if key not in keys:
                errors.append(f"{section}.{key}: unknown key (valid: {', '.join(keys)})")
    if errors:
        return errors

    stages = get("run", "stages")
    if not isinstance(stages, list) or not stages:
        errors.append("run.stages: non-empty list required")
        stages = []
    for name in stages:
        need(name in STAGES, "run.stages", f"unknown stage {name!r}; valid stages are {', '.join(STAGES)}")
    need(_is_int(get("run", "seed")), "run.seed", "integer required")
    run_id = get("run", "run_id")
    need(run_id is None or (isinstance(run_id, str) and run_id.strip() and "/" not in run_id),
         "run.run_id", "null or a non-empty name without '/'")

    inputs = get("ingest", "inputs")
    need(isinstance(inputs, list) and all(isinstance(p, str) for p in inputs),
         "ingest.inputs", "list of paths or glob patterns required")
    need(get("ingest", "format") in _INPUT_FORMATS, "ingest.format", "one of text, jsonl")
    need(get("ingest", "segmenter") in ("budget", "structural"), "ingest.segmenter", "one of budget, structural")
    delimiter = get("ingest", "delimiter")
    need(delimiter in (*DELIMITERS, "custom_regex"), "ingest.delimiter",
         f"one of {', '.join((*DELIMITERS, 'custom_regex'))}")
    if delimiter == "custom_regex":
        need(isinstance(get("ingest", "pattern"), str) and bool(get("ingest", "pattern")),
             "ingest.pattern", "regex required when delimiter is custom_regex")
    max_tokens = get("ingest", "max_tokens")
    need(_is_int(max_tokens) and max_tokens >= MIN_MAX_TOKENS, "ingest.max_tokens",
         f"integer >= {MIN_MAX_TOKENS} required")
    need(get("ingest", "on_error") in ("abort", "skip"), "ingest.on_error", "one of abort, skip")
    need(isinstance(get("ingest", "text_field"), str) and bool(get("ingest", "text_field")),
         "ingest.text_field", "non-empty string required")

    need(get("backend", "kind") in ("mock", "http"), "backend.kind", "one of mock, http")
    need(get("backend", "mock_mode") in ("generative", "scripted"), "backend.mock_mode",
         "one of generative, scripted")
    if get("backend", "kind") == "mock" and get("backend", "mock_mode") == "scripted":
        need(isinstance(get("backend", "mock_script"), str), "backend.mock_script",
             "fixture path required for the scripted mock")
    need(_is_int(get("backend", "max_parallel")) and get("backend", "max_parallel") >= 1,
         "backend.max_parallel", "integer >= 1 required")
    need(_is_int(get("backend", "max_attempts")) and get("backend", "max_attempts") >= 1,
         "backend.max_attempts", "integer >= 1 required")
    for key in ("timeout", "backoff_base"):
        need(_is_num(get("backend", key)) and get("backend", key) > 0, f"backend.{key}", "positive number required")

    n_exp, n_imp = get("generate", "n_explicit"), get("generate", "n_implicit")
    need(_is_int(n_exp) and n_exp >= 0, "generate.n_explicit", "integer >= 0 required")
    need(_is_int(n_imp) and n_imp >= 0, "generate.n_implicit", "integer >= 0 required")
    if _is_int(n_exp) and _is_int(n_imp):
        need(n_exp + n_imp >= 1, "generate.n_explicit", "n_explicit + n_implicit >= 1 required")
        if "qc" in stages:
            need(n_exp >= 1, "generate.n_explicit", ">= 1 required when stage qc enforces the explicit floor")

    for section in ("generate", "qc", "distract"):
        t = get(section, "temperature")
        need(_is_num(t) and 0 <= t <= 2, f"{section}.temperature", "number in [0, 2] required")
        r = get(section, "max_retries")
        need(_is_int(r) and r >= 0, f"{section}.max_retries", "integer >= 0 required")
    rounds = get("distract", "max_rounds")
    need(_is_int(rounds) and rounds >= 0, "distract.max_rounds", "integer >= 0 required")

    fractions_ok = True
    for key in ("implicit_fraction", "explicit_fraction"):
        f = get("compose", key)
        ok = _is_num(f) and 0 <= f <= 1
        fractions_ok &= ok
        need(ok, f"compose.{key}", "number in [0, 1] required")
    if fractions_ok and "compose" in stages:
        need(get("compose", "implicit_fraction") > 0 or get("compose", "explicit_fraction") > 0,
             "compose.implicit_fraction", "at least one fraction must be > 0 when stage compose is enabled")

    fmt = get("export", "format")
    need(fmt in ("qa_plain", "qa_cot"), "export.format",
         "one of qa_plain, qa_cot (MCQ items are exported alongside when stage distract ran)")
    for section, key in (("generate", "require_role_transformation"), ("distract", "appraisal"),
                         ("compose", "shuffle"), ("compose", "stratify_by_segment"),
                         ("export", "include_context")):
        need(isinstance(get(section, key), bool), f"{section}.{key}", "boolean required")
    return errors


def check_config(cfg: Mapping[str, Any]) -> None:
    errors = validate_config(cfg)
    if errors:
        raise ConfigError(errors)


def input_format(cfg: Mapping[str, Any]) -> str:
    return _INPUT_FORMATS[cfg["ingest"]["format"]]


def config_hash(cfg: Mapping[str, Any]) -> str:
    """SHA-256 over the settings that affect outputs."""
    hashed = copy.deepcopy(dict(cfg))
    for section, key in _UNHASHED:
        hashed.get(section, {}).pop(key, None)
    blob = json.dumps(hashed, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def dump_config(cfg: Mapping[str, Any]) -> str:
    return yaml.safe_dump(dict(cfg), sort_keys=False, allow_unicode=True)
