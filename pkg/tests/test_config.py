import pytest

from qasynth.config import (
    DEFAULTS,
    STAGES,
    ConfigError,
    apply_overrides,
    check_config,
    config_hash,
    load_config,
    validate_config,
)


def test_defaults_validate():
    assert validate_config(load_config()) == []


def test_max_tokens_below_floor():
    errors = validate_config(load_config(overrides=["ingest.max_tokens=4"]))
    assert len(errors) == 1 and errors[0].startswith("ingest.max_tokens:")


def test_unknown_stage_lists_valid_ones():
    errors = validate_config(load_config(overrides=["run.stages=[ingest, polish]"]))
    assert len(errors) == 1 and "polish" in errors[0]
    assert all(stage in errors[0] for stage in STAGES)


def test_both_fractions_zero_rejected_when_compose_enabled():
    cfg = load_config(overrides=["compose.implicit_fraction=0", "compose.explicit_fraction=0"])
    errors = validate_config(cfg)
    assert any(e.startswith("compose.implicit_fraction:") for e in errors)
    cfg["run"]["stages"] = ["ingest", "generate", "qc", "export"]
    assert validate_config(cfg) == []


def test_explicit_floor_needs_explicit_pairs():
    errors = validate_config(load_config(overrides=["generate.n_explicit=0"]))
    assert any(e.startswith("generate.n_explicit:") for e in errors)
    assert validate_config(load_config(overrides=["generate.n_explicit=0", "run.stages=[ingest, generate]"])) == []


def test_unknown_key_and_section():
    cfg = load_config(overrides=["ingest.max_token=300"])
    cfg["extra"] = {}
    errors = validate_config(cfg)
    assert any(e.startswith("ingest.max_token:") for e in errors)
    assert any(e.startswith("extra:") for e in errors)


def test_check_config_collects_every_error():
    with pytest.raises(ConfigError) as exc:
        check_config(load_config(overrides=["ingest.max_tokens=4", "backend.max_parallel=0"]))
    assert len(exc.value.errors) == 2


def test_yaml_file_then_overrides(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("generate:\n  n_explicit: 3\n  n_implicit: 3\nrun:\n  seed: 11\n")
    cfg = load_config(path, ["run.seed=12"])
    assert cfg["generate"]["n_explicit"] == 3 and cfg["run"]["seed"] == 12
    assert cfg["ingest"]["max_tokens"] == DEFAULTS["ingest"]["max_tokens"]


def test_bad_yaml(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("- not\n- a mapping\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_override_syntax():
    with pytest.raises(ConfigError):
        apply_overrides({}, ["no_equals_sign"])
    assert apply_overrides({"a": {"b": 1}}, ["a.b=[1, 2]"]) == {"a": {"b": [1, 2]}}


def test_hash_ignores_run_location_only():
    base = load_config()
    assert config_hash(base) == config_hash(load_config(overrides=["run.run_id=x", "run.out_dir=/tmp/o"]))
    assert config_hash(base) != config_hash(load_config(overrides=["run.seed=8"]))
    assert len(config_hash(base)) == 64
