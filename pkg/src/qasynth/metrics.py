"""Answer-quality metrics and a position-bias audit.

All scores are percentages in [0, 100].

* Token F1 and exact match follow the SQuAD convention: lowercase, drop
  punctuation and the articles a/an/the, collapse whitespace.
* ROUGE and BLEU work on lowercase ``\\w+`` tokens.
* BLEU is corpus-level (single reference, up to 4-grams, uniform weights,
  brevity penalty). An order with zero clipped matches uses the add-one
  estimate ``1 / (candidate n-grams + 1)`` instead of zero.
* SemSim maps cosine similarity c to ``50 * (c + 1)``.
"""

from __future__ import annotations

import logging
import math
import re
import string
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import httpx
import numpy as np
from scipy import stats

from .records import MCQItem

log = logging.getLogger(__name__)

_ARTICLES_RE = re.compile(r"\b(a|an|the)\b", re.UNICODE)
_PUNCT = set(string.punctuation)
_WORD_RE = re.compile(r"\w+")

Embedder = Callable[[Sequence[str]], "np.ndarray | Sequence[Sequence[float]]"]


def normalize_answer(s: str) -> str:
    s = s.lower()
    s = "".join(ch for ch in s if ch not in _PUNCT)
    s = _ARTICLES_RE.sub(" ", s)
    return " ".join(s.split())


def token_f1(pred: str, gold: str) -> float:
    pred_tokens = normalize_answer(pred).split()
    gold_tokens = normalize_answer(gold).split()
    if not pred_tokens and not gold_tokens:
        return 100.0
    if not pred_tokens or not gold_tokens:
        return 0.0
    common = Counter(pred_tokens) & Counter(gold_tokens)
    same = sum(common.values())
    if same == 0:
        return 0.0
    precision = same / len(pred_tokens)
    recall = same / len(gold_tokens)
    return 100.0 * 2 * precision * recall / (precision + recall)


def exact_match(pred: str, gold: str) -> float:
    return 100.0 if normalize_answer(pred) == normalize_answer(gold) else 0.0


def tokens(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def _f_measure(overlap: int, n_pred: int, n_gold: int) -> float:
    if overlap == 0:
        return 0.0
    p, r = overlap / n_pred, overlap / n_gold
    return 100.0 * 2 * p * r / (p + r)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """Longest common subsequence length, O(len(a) * len(b)) DP."""
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(pred: str, gold: str) -> float:
    p, g = tokens(pred), tokens(gold)
    if not p and not g:
        return 100.0
    if not p or not g:
        return 0.0
    return _f_measure(lcs_length(p, g), len(p), len(g))


def ngrams(seq: Sequence[str], n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def rouge_n(pred: str, gold: str, n: int = 2) -> float:
    """N-gram overlap F-measure.

    Inputs shorter than ``n`` score 0, except that identical token
    sequences (including two empty ones) always score 100.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    p, g = tokens(pred), tokens(gold)
    if p == g:
        return 100.0
    if len(p) < n or len(g) < n:
        return 0.0
    pc, gc = ngrams(p, n), ngrams(g, n)
    overlap = sum((pc & gc).values())
    return _f_measure(overlap, sum(pc.values()), sum(gc.values()))


def bleu(preds: Sequence[str], golds: Sequence[str], max_n: int = 4) -> float:
    if len(preds) != len(golds):
        raise ValueError(f"got {len(preds)} predictions for {len(golds)} references")
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    matches = [0] * max_n
    totals = [0] * max_n
    c_len = r_len = 0
    for pred, gold in zip(preds, golds):
        p, g = tokens(pred), tokens(gold)
        c_len += len(p)
        r_len += len(g)
        for n in range(1, max_n + 1):
            pc, gc = ngrams(p, n), ngrams(g, n)
            matches[n - 1] += sum((pc & gc).values())
            totals[n - 1] += sum(pc.values())
    if c_len == 0:
        return 100.0 if r_len == 0 else 0.0
    log_p = 0.0
    for m, t in zip(matches, totals):
        precision = m / t if m > 0 else 1.0 / (t + 1)
        log_p += math.log(precision) / max_n
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return 100.0 * bp * math.exp(log_p)


def semsim(pred: str, gold: str, embedder: Embedder | None) -> float | None:
    """Cosine similarity of embeddings on a 0-100 scale.

    Returns ``None`` (metric omitted) when no embedder is configured, the
    embedder fails, or it returns a zero vector.
    """
    if embedder is None:
        return None
    try:
        vecs = np.asarray(embedder([pred, gold]), dtype=float)
    except Exception as exc:  # any embedder failure omits the metric
        log.warning("embedding failed, semsim omitted: %s", exc)
        return None
    a, b = vecs[0], vecs[1]
    denom = float(np.linalg.norm(a) * np.linalg.norm(b))
    if denom == 0.0:
        log.warning("zero embedding vector, semsim omitted")
        return None
    cos = float(np.clip(np.dot(a, b) / denom, -1.0, 1.0))
    return 50.0 * (cos + 1.0)


class HTTPEmbedder:
    """Client for an OpenAI-compatible ``/embeddings`` endpoint."""

    def __init__(self, url: str, model: str = "", api_key: str | None = None, timeout: float = 60.0,
                 transport: httpx.BaseTransport | None = None):
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)
        self.url = url
        self.model = model

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        resp = self._client.post(self.url, json={"model": self.model, "input": list(texts)})
        resp.raise_for_status()
        data = sorted(resp.json()["data"], key=lambda d: d.get("index", 0))
        return np.asarray([d["embedding"] for d in data], dtype=float)


def chi_square_uniform(counts: Sequence[int]) -> tuple[float, float]:
    """Chi-square goodness of fit against a uniform distribution."""
    observed = np.asarray(counts, dtype=float)
    if observed.sum() <= 0:
        raise ValueError("need at least one observation")
    result = stats.chisquare(observed)
    return float(result.statistic), float(result.pvalue)


def position_bias_audit(items: Iterable[MCQItem | int]) -> dict:
    """Count correct-option positions and test them against uniform(4).

    Accepts MCQ items or bare correct indices.
    """
    counts = [0, 0, 0, 0]
    for item in items:
        idx = item if isinstance(item, int) else item.correct_index
        counts[idx] += 1
    if sum(counts) == 0:
        raise ValueError("position audit needs at least one item")
    chi2, p = chi_square_uniform(counts)
    return {"counts": counts, "chi_square": chi2, "p_value": p}


@dataclass
class ScoreReport:
    f1: float
    em: float
    bleu: float
    rouge2: float
    rougeL: float
    semsim: float | None
    n: int

    def to_dict(self) -> dict:
        return {
            "f1": self.f1,
            "em": self.em,
            "bleu": self.bleu,
            "rouge2": self.rouge2,
            "rougeL": self.rougeL,
            "semsim": self.semsim,
            "n": self.n,
        }


def score(preds: Sequence[str], golds: Sequence[str], embedder: Embedder | None = None) -> ScoreReport:
    """Mean per-item F1/EM/ROUGE, corpus BLEU and mean SemSim."""
    if len(preds) != len(golds):
        raise ValueError(f"got {len(preds)} predictions for {len(golds)} references")
    n = len(preds)
    if n == 0:
        return ScoreReport(0.0, 0.0, 0.0, 0.0, 0.0, None, 0)

    def mean(fn) -> float:
        return sum(fn(p, g) for p, g in zip(preds, golds)) / n

    sims = None
    if embedder is not None:
        values = [semsim(p, g, embedder) for p, g in zip(preds, golds)]
        if all(v is not None for v in values):
            sims = sum(values) / n
        else:
            log.warning("semsim omitted: %d of %d items failed to embed",
                        sum(v is None for v in values), n)
    return ScoreReport(
        f1=mean(token_f1),
        em=mean(exact_match),
        bleu=bleu(preds, golds),
        rouge2=mean(rouge_n),
        rougeL=mean(rouge_l),
        semsim=sims,
        n=n,
    )
