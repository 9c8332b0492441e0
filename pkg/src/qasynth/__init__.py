"""Synthetic QA and counterfactual MCQ datasets from raw documents."""

from .backend import Backend, BackendConfig, ChatPrompt, OpenAICompatibleBackend
from .compose import CompositionConfig, mix
from .config import load_config, validate_config
from .counterfactual import assemble_mcq, build_mcq
from .generation import COVID_RECIPE, SQUAD_RECIPE, GenerationSpec, generate_corpus
from .ingest import Document, load_corpus, segment_by_budget, segment_structural
from .mock import FunctionBackend, MockBackend
from .pipeline import RunManifest, run_pipeline
from .quality_control import run_quality_control
from .records import MCQItem, Provenance, QAPair, QType, Segment

__version__ = "0.1.0"

__all__ = [
    "Backend", "BackendConfig", "ChatPrompt", "OpenAICompatibleBackend",
    "CompositionConfig", "mix", "load_config", "validate_config",
    "assemble_mcq", "build_mcq", "COVID_RECIPE", "SQUAD_RECIPE", "GenerationSpec",
    "generate_corpus", "Document", "load_corpus", "segment_by_budget", "segment_structural",
    "FunctionBackend", "MockBackend", "RunManifest", "run_pipeline", "run_quality_control",
    "MCQItem", "Provenance", "QAPair", "QType", "Segment",
]
