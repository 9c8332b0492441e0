"""Ratio-controlled dataset composition from a validated QA pool.

A config ``f/g`` keeps ``floor(f * |implicit|)`` implicit pairs and
``floor(g * |explicit|)`` explicit pairs, sampled without replacement.
Fractions are read as exact decimals (``0.33`` is 33/100), so the floor
never suffers from binary rounding: ``floor(0.29 * 100)`` is 29, not 28.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, Sequence

import numpy as np

from .records import QAPair, QType


class EmptyComposition(ValueError):
    pass


@dataclass(frozen=True)
class CompositionConfig:
    implicit_fraction: float = 1.0
    explicit_fraction: float = 1.0
    seed: int = 0
    shuffle: bool = False
    stratify_by_segment: bool = False

    def __post_init__(self):
        for name in ("implicit_fraction", "explicit_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0 or math.isnan(value):
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if self.implicit_fraction == 0 and self.explicit_fraction == 0:
            raise ValueError("at least one fraction must be positive")

    @property
    def label(self) -> str:
        def fmt(x: float) -> str:
            return str(int(x)) if float(x).is_integer() else f"{x:g}"
        return f"{fmt(self.implicit_fraction)}/{fmt(self.explicit_fraction)}"


@dataclass
class CompositionReport:
    n_implicit_pool: int = 0
    n_explicit_pool: int = 0
    n_implicit_sampled: int = 0
    n_explicit_sampled: int = 0
    n_total: int = 0
    per_document_histogram: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n_implicit_pool": self.n_implicit_pool,
            "n_explicit_pool": self.n_explicit_pool,
            "n_implicit_sampled": self.n_implicit_sampled,
            "n_explicit_sampled": self.n_explicit_sampled,
            "n_total": self.n_total,
            "per_document_histogram": dict(self.per_document_histogram),
        }


def sample_size(fraction: float, pool_size: int) -> int:
    """``floor(fraction * pool_size)`` evaluated on the decimal fraction."""
    return math.floor(Fraction(str(fraction)) * pool_size)


def doc_of_segment(segment_id: str) -> str:
    doc, sep, _ = segment_id.rpartition("::")
    return doc if sep else segment_id


def report(
    dataset: Sequence[QAPair],
    doc_lookup: Mapping[str, str] | Callable[[str], str] | None = None,
) -> CompositionReport:
    """Count pairs by type and by source document.

    ``doc_lookup`` maps segment ids to document ids; by default the
    document id is recovered from the ``<doc_id>::<index>`` segment id.
    """
    if doc_lookup is None:
        resolve = doc_of_segment
    elif callable(doc_lookup):
        resolve = doc_lookup
    else:
        resolve = doc_lookup.__getitem__
    counts = Counter(p.qtype for p in dataset)
    histogram = Counter(resolve(p.segment_id) for p in dataset)
    n_imp, n_exp = counts[QType.IMPLICIT], counts[QType.EXPLICIT]
    return CompositionReport(
        n_implicit_pool=n_imp,
        n_explicit_pool=n_exp,
        n_implicit_sampled=n_imp,
        n_explicit_sampled=n_exp,
        n_total=n_imp + n_exp,
        per_document_histogram=dict(sorted(histogram.items())),
    )


def _pick(indices: list[int], fraction: float, rng: np.random.Generator) -> list[int]:
    k = sample_size(fraction, len(indices))
    if k == len(indices):
        return list(indices)
    if k == 0:
        return []
    chosen = rng.choice(len(indices), size=k, replace=False)
    return [indices[i] for i in chosen]


def mix(
    pool: Sequence[QAPair],
    cfg: CompositionConfig,
    doc_lookup: Mapping[str, str] | Callable[[str], str] | None = None,
) -> tuple[list[QAPair], CompositionReport]:
    """Sample a training set from ``pool`` under ``cfg``.

    Sampling is global over the pool unless ``cfg.stratify_by_segment``,
    in which case the floor applies within each segment. Output keeps pool
    order unless ``cfg.shuffle``.
    """
    rng = np.random.default_rng(cfg.seed)
    implicit = [i for i, p in enumerate(pool) if p.qtype is QType.IMPLICIT]
    explicit = [i for i, p in enumerate(pool) if p.qtype is QType.EXPLICIT]

    if cfg.stratify_by_segment:
        groups: dict[str, tuple[list[int], list[int]]] = {}
        for i, p in enumerate(pool):
            groups.setdefault(p.segment_id, ([], []))[p.qtype is QType.EXPLICIT].append(i)
        chosen_imp, chosen_exp = [], []
        for imp, exp in groups.values():
            chosen_imp += _pick(imp, cfg.implicit_fraction, rng)
            chosen_exp += _pick(exp, cfg.explicit_fraction, rng)
    else:
        chosen_imp = _pick(implicit, cfg.implicit_fraction, rng)
        chosen_exp = _pick(explicit, cfg.explicit_fraction, rng)

    chosen = sorted(chosen_imp + chosen_exp)
    if not chosen:
        raise EmptyComposition(f"composition {cfg.label} selected no pairs from a pool of {len(pool)}")
    if cfg.shuffle:
        chosen = [chosen[i] for i in rng.permutation(len(chosen))]
    dataset = [pool[i] for i in chosen]

    rep = report(dataset, doc_lookup)
    rep.n_implicit_pool = len(implicit)
    rep.n_explicit_pool = len(explicit)
    return dataset, rep
