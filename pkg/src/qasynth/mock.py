"""Offline backends for tests, demos and dry runs.

:class:`MockBackend` has two modes. *Scripted* replies come from a table
keyed by :meth:`ChatPrompt.digest`. *Generative* replies are built from the
prompt itself: the passage, the requested counts and the answer under
review are read back out of the rendered template and turned into
syntactically valid stage outputs. Both modes are pure functions of
``(prompt, seed)``.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
import threading
import time
from collections import Counter
from pathlib import Path
from typing import Callable, Mapping

from .backend import Backend, BackendError, ChatPrompt
from .ingest import sentence_breaks
from .ledger import RunLedger

_PASSAGE_RE = re.compile(r"<passage>\n(.*?)\n</passage>", re.DOTALL)
_COUNTS_RE = re.compile(r"Required counts: explicit=(\d+), implicit=(\d+)")
_TERM_RE = re.compile(r"\b(?:[A-Za-z][A-Za-z\-]{3,}|\d[\d,.]*\d|\d)\b")
_STOPWORDS = frozenset(
    """about above after again against also among another because been before being below
    between both could does doing down during each even every from further have having here
    into itself just more most much must only other over same should some such than that their
    theirs them then there these they this those through under until upon very were what when
    where which while whom whose will with within without would your which""".split()
)


def _line_value(text: str, label: str) -> str:
    m = re.search(rf"^{re.escape(label)}:[ \t]*(.*)$", text, re.MULTILINE)
    return m.group(1).strip() if m else ""


def _sentences(passage: str) -> list[str]:
    cuts = [0, *sentence_breaks(passage), len(passage)]
    return [passage[a:b].strip() for a, b in zip(cuts, cuts[1:]) if passage[a:b].strip()]


def _terms(passage: str) -> list[str]:
    seen: dict[str, str] = {}
    for m in _TERM_RE.finditer(passage):
        word = m.group()
        key = word.casefold()
        if key in _STOPWORDS or key in seen:
            continue
        seen[key] = word
    return list(seen.values())


def _norm(text: str) -> str:
    return " ".join(text.casefold().split()).strip(".,;:!?\"' ")


class MockBackend(Backend):
    """Deterministic stand-in for a chat model.

    Args:
        mode: ``"generative"`` or ``"scripted"``.
        script: digest -> reply table for scripted mode.
        default: reply used when a scripted digest is missing.
        seed: mixed into every generative reply.
        delay: seconds to sleep per call, for concurrency tests.
    """

    def __init__(
        self,
        mode: str = "generative",
        *,
        script: Mapping[str, str] | None = None,
        default: str | None = None,
        seed: int = 0,
        max_parallel: int = 4,
        delay: float = 0.0,
        ledger: RunLedger | None = None,
    ):
        if mode not in ("generative", "scripted"):
            raise ValueError(f"unknown mock mode {mode!r}")
        super().__init__(max_parallel, ledger)
        self.mode = mode
        self.script = dict(script or {})
        self.default = default
        self.seed = seed
        self.delay = delay
        self.calls: Counter[str] = Counter()
        self.peak_in_flight = 0
        self._in_flight = 0
        self._count_lock = threading.Lock()

    @classmethod
    def from_fixture(cls, path: str | Path, **kwargs) -> "MockBackend":
        """Load a scripted mock from a JSON object ``{digest: reply}``."""
        table = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(table, dict):
            raise ValueError("mock fixture must be a JSON object mapping prompt digests to replies")
        default = table.pop("*", None)
        return cls("scripted", script=table, default=default, **kwargs)

    def _complete(self, prompt: ChatPrompt) -> tuple[str, dict]:
        with self._count_lock:
            self.calls[prompt.task or "untagged"] += 1
            self._in_flight += 1
            self.peak_in_flight = max(self.peak_in_flight, self._in_flight)
        try:
            if self.delay:
                time.sleep(self.delay)
            if self.mode == "scripted":
                reply = self.script.get(prompt.digest(), self.default)
                if reply is None:
                    raise BackendError(f"no scripted reply for prompt {prompt.digest()[:12]}")
            else:
                reply = self._generate(prompt)
        finally:
            with self._count_lock:
                self._in_flight -= 1
        return reply, {"prompt_tokens": None, "completion_tokens": None}

    # generative mode

    def _rng(self, prompt: ChatPrompt) -> random.Random:
        digest = hashlib.sha256(f"{self.seed}:{prompt.digest()}".encode()).digest()
        return random.Random(int.from_bytes(digest[:8], "big"))

    def _generate(self, prompt: ChatPrompt) -> str:
        handler = getattr(self, f"_task_{prompt.task}", None)
        if handler is None:
            return "I am a mock model and do not know this task."
        m = _PASSAGE_RE.search(prompt.user)
        passage = m.group(1) if m else ""
        return handler(prompt, passage, self._rng(prompt))

    @staticmethod
    def _explicit_pair(passage: str, term: str) -> dict:
        sentence = next((s for s in _sentences(passage) if term in s), passage)
        words = sentence.replace(term, "____", 1).split()
        if len(words) > 24:
            at = next((i for i, w in enumerate(words) if "____" in w), 0)
            lo = max(0, min(at - 12, len(words) - 24))
            words = words[lo : lo + 24]
        cloze = " ".join(words)
        return {
            "question": f'Which term completes the passage statement "{cloze}"?',
            "answer": term,
            "type": "explicit",
            "reasoning": None,
        }

    @staticmethod
    def _implicit_pair(passage: str, term: str, other: str, k: int) -> dict:
        sentences = _sentences(passage) or [passage]
        sentence = next((s for s in sentences if term in s), sentences[k % len(sentences)])
        answer = sentence.rstrip(".!?")
        return {
            "question": f"What can be inferred from the passage about {term} in relation to {other}?",
            "answer": answer,
            "type": "implicit",
            "reasoning": (
                f'The passage mentions {term} in the statement "{sentence}". '
                f"Read together with what it says about {other}, this supports the answer."
            ),
        }

    def _task_generate_qa(self, prompt: ChatPrompt, passage: str, rng: random.Random) -> str:
        m = _COUNTS_RE.search(prompt.user)
        n_exp, n_imp = (int(m.group(1)), int(m.group(2))) if m else (1, 0)
        terms = _terms(passage) or ["passage"]
        rng.shuffle(terms)
        items = []
        for k in range(n_exp):
            items.append(self._explicit_pair(passage, terms[k % len(terms)]))
            if k >= len(terms):
                items[-1]["question"] += f" (variant {k + 1})"
        for k in range(n_imp):
            term = terms[(n_exp + k) % len(terms)]
            other = terms[(n_exp + k + 1) % len(terms)]
            items.append(self._implicit_pair(passage, term, other, k))
            if n_exp + k >= len(terms):
                items[-1]["question"] += f" (variant {k + 1})"
        return "Here are the question-answer pairs:\n" + json.dumps(items, ensure_ascii=False, indent=1)

    def _task_regenerate_explicit(self, prompt: ChatPrompt, passage: str, rng: random.Random) -> str:
        existing = prompt.user.split("Do not repeat any of these questions:", 1)[-1]
        terms = [t for t in _terms(passage) if f'"{t}' not in existing] or _terms(passage) or ["passage"]
        term = rng.choice(terms)
        return json.dumps([self._explicit_pair(passage, term)], ensure_ascii=False)

    def _task_adjudicate(self, prompt: ChatPrompt, passage: str, rng: random.Random) -> str:
        qtype = _line_value(prompt.user, "Labelled type")
        grounding = _line_value(prompt.user, "Grounding check")
        if qtype == "explicit" and grounding.startswith("NotFound"):
            verdict = {"directive": "DELETE", "corrected_type": None,
                       "rationale": "The answer is not supported by the passage."}
        else:
            verdict = {"directive": "KEEP", "corrected_type": None,
                       "rationale": "Grounded in the passage and correctly typed."}
        return json.dumps(verdict)

    def _task_backfill_reasoning(self, prompt: ChatPrompt, passage: str, rng: random.Random) -> str:
        answer = _line_value(prompt.user, "Answer")
        sentences = _sentences(passage) or [passage]
        support = next((s for s in sentences if answer and answer.split()[0] in s), sentences[0])
        return json.dumps({"reasoning": f'The passage states "{support}", from which the answer "{answer}" follows.'})

    @staticmethod
    def _fallbacks(answer: str) -> list[str]:
        return [f"not {answer}", f"{answer} only in part", f"the opposite of {answer}",
                f"something other than {answer}"]

    def _task_distractors(self, prompt: ChatPrompt, passage: str, rng: random.Random) -> str:
        answer = _line_value(prompt.user, "Correct answer")
        pool = [t for t in _terms(passage) if _norm(t) != _norm(answer)]
        rng.shuffle(pool)
        words = answer.split()
        candidates = []
        if len(words) > 3:
            slots = sorted(range(len(words)), key=lambda i: -len(words[i]))[:3]
            for slot, repl in zip(slots, pool):
                swapped = list(words)
                swapped[slot] = repl
                candidates.append(" ".join(swapped))
        candidates += pool + self._fallbacks(answer)
        chosen: list[str] = []
        seen = {_norm(answer)}
        for c in candidates:
            if _norm(c) not in seen:
                chosen.append(c)
                seen.add(_norm(c))
            if len(chosen) == 3:
                break
        return json.dumps({"distractors": chosen, "nuanced_index": 0}, ensure_ascii=False)

    def _task_replace_distractor(self, prompt: ChatPrompt, passage: str, rng: random.Random) -> str:
        answer = _line_value(prompt.user, "Correct answer")
        taken = {_norm(answer), _norm(_line_value(prompt.user, "Rejected distractor"))}
        taken |= {_norm(k) for k in _line_value(prompt.user, "Options to keep (do not repeat)").split("; ")}
        pool = [t for t in _terms(passage) if _norm(t) not in taken]
        rng.shuffle(pool)
        fresh = next(iter(pool + [c for c in self._fallbacks(answer) if _norm(c) not in taken]))
        return json.dumps({"distractor": fresh}, ensure_ascii=False)

    def _task_appraise_distractors(self, prompt: ChatPrompt, passage: str, rng: random.Random) -> str:
        rows = [{"index": i, "verdict": "acceptable", "reason": "plausible and wrong"} for i in range(3)]
        return json.dumps({"appraisals": rows})

    def _task_repair_record(self, prompt: ChatPrompt, passage: str, rng: random.Random) -> str:
        return "UNREPAIRABLE"


class FunctionBackend(Backend):
    """Backend whose replies come from a callable; handy for fault injection."""

    def __init__(self, fn: Callable[[ChatPrompt], str], *, max_parallel: int = 1,
                 ledger: RunLedger | None = None):
        super().__init__(max_parallel, ledger)
        self.fn = fn
        self.calls: Counter[str] = Counter()
        self._count_lock = threading.Lock()

    def _complete(self, prompt: ChatPrompt) -> tuple[str, dict]:
        with self._count_lock:
            self.calls[prompt.task or "untagged"] += 1
        return self.fn(prompt), {}
