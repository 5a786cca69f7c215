"""Domain types shared across the engine. No I/O lives here."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

DEFAULT_MAX_CONTEXT_CHARS = 24000


class ValidationError(ValueError):
    """A domain value violates one of its invariants."""


class StructuralError(ValueError):
    """A collection of per-kind values is missing or duplicating a kind."""


class FilterKind(str, enum.Enum):
    SUMMARY = "summary"
    EXTRACTION = "extraction"
    REASONING = "reasoning"


CANONICAL_KINDS: tuple[FilterKind, ...] = (
    FilterKind.SUMMARY,
    FilterKind.EXTRACTION,
    FilterKind.REASONING,
)


class TaskKind(str, enum.Enum):
    ODQA = "odqa"
    LONG_FORM = "long_form"
    CLOSED_SET = "closed_set"


def make_doc_id(title: str, text: str) -> str:
    return hashlib.sha256((title + text).encode("utf-8")).hexdigest()[:16]


DOC_SEPARATOR = " \u2014 "


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    text: str
    score: float
    rank: int

    def __post_init__(self) -> None:
        if not self.text or not self.text.strip():
            raise ValidationError(f"document {self.doc_id!r} has empty text")
        if self.rank < 1:
            raise ValidationError(f"document {self.doc_id!r} has rank {self.rank} < 1")

    def render(self) -> str:
        """Prompt block for this document: rank in brackets, title, separator, text."""
        return f"[{self.rank}] {self.title}{DOC_SEPARATOR}{self.text}"


@dataclass(frozen=True)
class Query:
    """One benchmark question with its gold answers and ranked documents.

    ``options`` holds ``(label, text)`` pairs for closed-set tasks and
    ``gold_answer_groups`` holds the per-aspect short-answer sets of
    long-form questions (used by str-em).
    """

    query_id: str
    question: str
    gold_answers: tuple[str, ...]
    documents: tuple[Document, ...]
    task_kind: TaskKind = TaskKind.ODQA
    gold_option: Optional[str] = None
    options: tuple[tuple[str, str], ...] = ()
    gold_answer_groups: Optional[tuple[tuple[str, ...], ...]] = None

    def __post_init__(self) -> None:
        # Normalize containers so callers may pass lists.
        object.__setattr__(self, "task_kind", TaskKind(self.task_kind))
        object.__setattr__(self, "gold_answers", tuple(self.gold_answers))
        object.__setattr__(self, "documents", tuple(self.documents))
        object.__setattr__(self, "options", tuple(tuple(o) for o in self.options))
        if self.gold_answer_groups is not None:
            object.__setattr__(
                self, "gold_answer_groups", tuple(tuple(g) for g in self.gold_answer_groups)
            )
        validate_query(self)

    @property
    def option_labels(self) -> tuple[str, ...]:
        return tuple(label for label, _ in self.options)

    def match_golds(self) -> tuple[str, ...]:
        """Gold strings used for substring scoring of free text.

        Long-form questions use their flattened short-answer groups when
        available; closed-set questions use the text of the gold option.
        """
        if self.task_kind is TaskKind.LONG_FORM and self.gold_answer_groups:
            return tuple(a for group in self.gold_answer_groups for a in group)
        if self.task_kind is TaskKind.CLOSED_SET:
            texts = [t for label, t in self.options if label.casefold() == (self.gold_option or "").casefold()]
            return tuple(texts) or self.gold_answers
        return self.gold_answers


def validate_query(q: Query) -> None:
    if not q.question or not q.question.strip():
        raise ValidationError(f"query {q.query_id!r}: empty question")
    if any(not isinstance(a, str) or not a.strip() for a in q.gold_answers):
        raise ValidationError(f"query {q.query_id!r}: empty gold answer string")
    if q.task_kind in (TaskKind.ODQA, TaskKind.LONG_FORM) and not q.gold_answers:
        raise ValidationError(f"query {q.query_id!r}: {q.task_kind.value} requires at least one gold answer")
    if q.task_kind is TaskKind.CLOSED_SET:
        if not q.gold_option:
            raise ValidationError(f"query {q.query_id!r}: closed_set requires gold_option")
        if q.options and q.gold_option.casefold() not in {l.casefold() for l in q.option_labels}:
            raise ValidationError(
                f"query {q.query_id!r}: gold_option {q.gold_option!r} not among options {q.option_labels}"
            )
    if q.gold_answer_groups is not None:
        if not q.gold_answer_groups or any(not g for g in q.gold_answer_groups):
            raise ValidationError(f"query {q.query_id!r}: empty gold answer group")
    ranks = [d.rank for d in q.documents]
    if ranks != list(range(1, len(ranks) + 1)):
        raise ValidationError(
            f"query {q.query_id!r}: document ranks must be contiguous from 1 in order, got {ranks}"
        )
    scores = [d.score for d in q.documents]
    if any(b > a for a, b in zip(scores, scores[1:])):
        raise ValidationError(f"query {q.query_id!r}: scores must be non-increasing with rank")


@dataclass(frozen=True)
class DecodeParams:
    temperature: float = 0.0
    top_p: float = 1.0
    max_tokens: int = 512

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValidationError(f"temperature must be >= 0, got {self.temperature}")
        if not 0 < self.top_p <= 1:
            raise ValidationError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.max_tokens < 1:
            raise ValidationError(f"max_tokens must be positive, got {self.max_tokens}")


@dataclass(frozen=True)
class PipelineConfig:
    top_k_docs: int = 10
    use_answer_agent: bool = True
    decode: DecodeParams = field(default_factory=DecodeParams)
    prompt_set_id: str = "v1"
    max_context_chars: int = DEFAULT_MAX_CONTEXT_CHARS

    def __post_init__(self) -> None:
        if self.top_k_docs < 1:
            raise ValidationError(f"top_k_docs must be positive, got {self.top_k_docs}")
        if self.max_context_chars < 1:
            raise ValidationError(f"max_context_chars must be positive, got {self.max_context_chars}")

    def for_task(self, task_kind: TaskKind) -> "PipelineConfig":
        """Closed-set tasks never run the Answer Agent."""
        if TaskKind(task_kind) is TaskKind.CLOSED_SET and self.use_answer_agent:
            return replace(self, use_answer_agent=False)
        return self

    def to_dict(self) -> dict:
        return {
            "top_k_docs": self.top_k_docs,
            "use_answer_agent": self.use_answer_agent,
            "decode": {
                "temperature": self.decode.temperature,
                "top_p": self.decode.top_p,
                "max_tokens": self.decode.max_tokens,
            },
            "prompt_set_id": self.prompt_set_id,
            "max_context_chars": self.max_context_chars,
        }


@dataclass(frozen=True)
class FilteredResponse:
    kind: FilterKind
    text: str
    source_query_id: str
    verbatim_ok: Optional[bool] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", FilterKind(self.kind))
        if not self.text or not self.text.strip():
            raise ValidationError(f"{self.kind.value} response for {self.source_query_id!r} is empty")
        if (self.kind is FilterKind.EXTRACTION) != (self.verbatim_ok is not None):
            raise ValidationError("verbatim_ok must be set for extraction responses and only for them")


@dataclass(frozen=True)
class CandidateAnswer:
    kind: FilterKind
    text: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", FilterKind(self.kind))
        if not self.text or not self.text.strip():
            raise ValidationError(f"candidate answer for {self.kind.value} is empty")


CALLS_WITH_ANSWER_AGENT = 7
CALLS_WITHOUT_ANSWER_AGENT = 4


@dataclass(frozen=True)
class PipelineResult:
    query_id: str
    filtered: Mapping[FilterKind, FilteredResponse]
    final_answer: str
    agent_calls: int
    backend_fingerprint: str
    candidates: Optional[Mapping[FilterKind, CandidateAnswer]] = None
    retries: int = 0
    prompt_set_id: str = "v1"
    parsed_option: Optional[str] = None

    def __post_init__(self) -> None:
        if set(self.filtered) != set(CANONICAL_KINDS):
            raise StructuralError(f"result {self.query_id!r} must hold all three filter kinds")
        if self.candidates is not None and set(self.candidates) != set(CANONICAL_KINDS):
            raise StructuralError(f"result {self.query_id!r} must hold all three candidate kinds")
        expected = CALLS_WITH_ANSWER_AGENT if self.candidates is not None else CALLS_WITHOUT_ANSWER_AGENT
        if self.agent_calls != expected:
            raise ValidationError(
                f"result {self.query_id!r}: agent_calls={self.agent_calls}, expected {expected}"
            )


def canonical_order(responses: Mapping[FilterKind, FilteredResponse]) -> list[FilteredResponse]:
    """Return the three responses as (summary, extraction, reasoning)."""
    return _ordered(responses)


def _ordered(items: Mapping) -> list:
    keys = {FilterKind(k) for k in items}
    if len(items) != 3 or keys != set(CANONICAL_KINDS):
        missing = [k.value for k in CANONICAL_KINDS if k not in keys]
        raise StructuralError(f"expected exactly the three filter kinds, missing {missing}")
    by_kind = {FilterKind(k): v for k, v in items.items()}
    return [by_kind[k] for k in CANONICAL_KINDS]


def truncate_to_budget(docs: Sequence[Document], max_chars: int) -> list[Document]:
    """Drop lowest-ranked documents until the rendered block fits ``max_chars``.

    The best-ranked document is always kept; if it alone exceeds the budget
    its text is clipped.
    """
    docs = sorted(docs, key=lambda d: d.rank)
    kept: list[Document] = []
    used = 0
    for doc in docs:
        size = len(doc.render()) + (2 if kept else 0)  # blank-line separator
        if used + size > max_chars:
            break
        kept.append(doc)
        used += size
    if not kept and docs:
        first = docs[0]
        overflow = len(first.render()) - max_chars
        clipped = first.text[: max(1, len(first.text) - overflow)]
        kept.append(replace(first, text=clipped))
    return kept
