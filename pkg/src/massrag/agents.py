"""Agent roles: prompt templates plus output contracts over a chat backend."""

from __future__ import annotations

import enum
import logging
import re
import string
import threading
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

from .backend import Backend, BackendError, ChatRequest
from .core import (
    CANONICAL_KINDS,
    CandidateAnswer,
    DecodeParams,
    Document,
    FilteredResponse,
    FilterKind,
    Query,
    StructuralError,
    TaskKind,
)

logger = logging.getLogger(__name__)


class Role(str, enum.Enum):
    SUMMARIZER = "summarizer"
    EXTRACTOR = "extractor"
    REASONER = "reasoner"
    ANSWER = "answer"
    SYNTHESIS = "synthesis"


FILTER_ROLES = {
    FilterKind.SUMMARY: Role.SUMMARIZER,
    FilterKind.EXTRACTION: Role.EXTRACTOR,
    FilterKind.REASONING: Role.REASONER,
}

# template file name -> (role, placeholders it must contain, exactly)
TEMPLATE_SPECS: dict[str, tuple[Role, frozenset[str]]] = {
    "summarizer": (Role.SUMMARIZER, frozenset({"question", "documents"})),
    "extractor": (Role.EXTRACTOR, frozenset({"question", "documents"})),
    "extractor_strict": (Role.EXTRACTOR, frozenset({"question", "documents"})),
    "reasoner": (Role.REASONER, frozenset({"question", "documents"})),
    "answer": (Role.ANSWER, frozenset({"question", "evidence"})),
    "synthesis_candidates": (Role.SYNTHESIS, frozenset({"question", "candidates"})),
    "synthesis_evidence": (Role.SYNTHESIS, frozenset({"question", "evidence"})),
    "synthesis_options": (Role.SYNTHESIS, frozenset({"question", "evidence", "options"})),
}

_SHORT = {Role.SUMMARIZER: 256, Role.EXTRACTOR: 256, Role.REASONER: 384, Role.ANSWER: 64, Role.SYNTHESIS: 64}
_LONG = {**_SHORT, Role.ANSWER: 512, Role.SYNTHESIS: 512}


def default_max_tokens(role: Role, task_kind: TaskKind = TaskKind.ODQA) -> int:
    table = _LONG if TaskKind(task_kind) is TaskKind.LONG_FORM else _SHORT
    return table[Role(role)]


class PromptError(ValueError):
    pass


class AgentError(RuntimeError):
    """An agent call failed; ``stage`` names the pipeline stage."""

    def __init__(self, stage: str, cause: BaseException) -> None:
        self.stage = stage
        self.cause = cause
        self.error_kind = getattr(cause, "kind", type(cause).__name__)
        super().__init__(f"{stage}: {cause}")


class UnparseableAnswerError(ValueError):
    def __init__(self, raw: str, labels: Sequence[str]) -> None:
        self.raw = raw
        self.kind = "unparseable_answer"
        super().__init__(f"no option label among {list(labels)} in {raw[:120]!r}")


def placeholders(skeleton: str) -> set[str]:
    return {name for _, name, _, _ in string.Formatter().parse(skeleton) if name is not None}


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    role: Role
    system_text: str
    user_skeleton: str

    def __post_init__(self) -> None:
        required = TEMPLATE_SPECS[self.name][1]
        found = placeholders(self.user_skeleton)
        if found != required:
            raise PromptError(
                f"template {self.name!r} must use placeholders {sorted(required)}, found {sorted(found)}"
            )

    def render(self, **values: str) -> str:
        return self.user_skeleton.format(**values)


def parse_template_file(name: str, text: str) -> PromptTemplate:
    """Parse a ``[system]`` / ``[user]`` sectioned template file."""
    match = re.fullmatch(r"\s*\[system\]\n(.*?)\n\[user\]\n(.*?)\s*", text, flags=re.S)
    if match is None:
        raise PromptError(f"template {name!r} needs a [system] section followed by a [user] section")
    role = TEMPLATE_SPECS[name][0]
    return PromptTemplate(name, role, match.group(1).strip(), match.group(2).strip())


def load_prompt_set(set_id: str = "v1", root: Union[str, Path, None] = None) -> dict[str, PromptTemplate]:
    """Load every template of a prompt set from ``<root>/<set_id>/<name>.txt``.

    ``root`` defaults to the prompt sets shipped with the package.
    """
    base = resources.files("massrag") / "prompts" if root is None else Path(root)
    folder = base / set_id
    if not folder.is_dir():
        raise PromptError(f"unknown prompt set {set_id!r}")
    templates = {}
    for name in TEMPLATE_SPECS:
        path = folder / f"{name}.txt"
        if not path.is_file():
            raise PromptError(f"prompt set {set_id!r} lacks {name}.txt")
        templates[name] = parse_template_file(name, path.read_text(encoding="utf-8"))
    return templates


# Extractor verbatim check -------------------------------------------------

_QUOTES = str.maketrans({"\u2018": "'", "\u2019": "'", "\u201a": "'", "\u201b": "'", "\u2032": "'",
                         "\u201c": '"', "\u201d": '"', "\u201e": '"', "\u201f": '"', "\u2033": '"',
                         "`": "'"})
_BULLET = re.compile(r"^\s*(?:[-*\u2022\u2023\u25e6\u2043]+|\d+[.)]|\(\d+\))\s+")
_WS = re.compile(r"\s+")


def normalize_span(text: str) -> str:
    return _WS.sub(" ", text.translate(_QUOTES)).strip()


def split_fragments(text: str) -> list[str]:
    """Split extractor output into normalized evidence fragments."""
    fragments = []
    for line in text.splitlines():
        line = _BULLET.sub("", line)
        frag = normalize_span(line)
        if len(frag) >= 2 and frag[0] == frag[-1] and frag[0] in "\"'":
            frag = frag[1:-1].strip()
        if frag:
            fragments.append(frag)
    return fragments


def verbatim_ok(text: str, docs: Sequence[Document]) -> bool:
    """True iff every fragment of ``text`` occurs in some document text."""
    fragments = split_fragments(text)
    if not fragments:
        return False
    haystacks = [normalize_span(d.text) for d in docs]
    return all(any(f in h for h in haystacks) for f in fragments)


# Closed-set label parsing -------------------------------------------------


def parse_option_label(text: str, labels: Sequence[str]) -> Optional[str]:
    """Find the first standalone option label in ``text``.

    Recognizes ``(B)``, ``B.`` / ``B)`` at line start or after whitespace,
    ``answer is B`` style phrases and a bare ``B``. Matching is
    case-insensitive; the earliest match wins. Returns the label as
    configured, or None.
    """
    if not labels:
        return None
    alt = "|".join(re.escape(l) for l in sorted(labels, key=len, reverse=True))
    patterns = [
        rf"\(\s*({alt})\s*\)",
        rf"(?:^|(?<=\s))({alt})[.):](?!\w)",
        rf"\b(?:answer|option|choice)\s*(?:is|:|=)?\s*:?\s*\(?({alt})\b",
        rf"^\s*({alt})\s*$",
    ]
    best: Optional[tuple[int, str]] = None
    for pat in patterns:
        for m in re.finditer(pat, text, flags=re.I | re.M):
            # "the answer is a liquid": a lowercase article, not a label
            if m.group(1).islower() and re.match(r"\s+[a-z]", text[m.end(1):]):
                continue
            if best is None or m.start(1) < best[0]:
                best = (m.start(1), m.group(1))
            break
    if best is None:
        return None
    by_fold = {l.casefold(): l for l in labels}
    return by_fold[best[1].casefold()]


_AGENT_NAMES = re.compile(r"\b(summari[sz]er|extractor|reasoner|answer agent)\b", re.I)


def _order_inputs(inputs) -> list:
    if isinstance(inputs, Mapping):
        items = dict(inputs)
    else:
        items = {}
        for item in inputs:
            if item.kind in items:
                raise StructuralError(f"duplicate input kind {item.kind.value}")
            items[item.kind] = item
    if len(items) != 3 or set(items) != set(CANONICAL_KINDS):
        raise StructuralError(
            f"synthesis needs exactly one input per filter kind, got {sorted(k.value for k in items)}"
        )
    return [items[k] for k in CANONICAL_KINDS]


def render_documents(docs: Sequence[Document]) -> str:
    return "\n\n".join(d.render() for d in sorted(docs, key=lambda d: d.rank))


def render_options(options: Sequence[tuple[str, str]]) -> str:
    return "\n".join(f"{label}. {text}" for label, text in options)


class Agents:
    """The five agent roles bound to one backend and prompt set.

    Stateless apart from the ``verbatim_retries`` counter, so one instance
    can serve concurrent queries.
    """

    def __init__(
        self,
        backend: Backend,
        prompts: Optional[Mapping[str, PromptTemplate]] = None,
        *,
        model_name: str = "",
        decode: DecodeParams = DecodeParams(),
        prompt_set_id: str = "v1",
    ) -> None:
        self.backend = backend
        self.prompt_set_id = prompt_set_id
        self.prompts = dict(prompts) if prompts is not None else load_prompt_set(prompt_set_id)
        self.model_name = model_name
        self.decode = decode
        self.verbatim_retries = 0
        self._lock = threading.Lock()

    def _call(self, template: str, q: Query, stage: str, view: str = "", **values: str) -> str:
        tpl = self.prompts[template]
        max_tokens = min(default_max_tokens(tpl.role, q.task_kind), self.decode.max_tokens)
        req = ChatRequest(
            system_prompt=tpl.system_text,
            user_prompt=tpl.render(question=q.question, **values),
            decode=replace(self.decode, max_tokens=max_tokens),
            model_name=self.model_name,
            role=template if template == "extractor_strict" else tpl.role.value,
            query_id=q.query_id,
            view=view,
        )
        try:
            text = self.backend.complete(req).text
        except BackendError as exc:
            raise AgentError(stage, exc) from exc
        if not text.strip():
            raise AgentError(stage, BackendError("agent returned empty output"))
        return text.strip()

    def _filter(self, kind: FilterKind, template: str, q: Query, docs: Sequence[Document]) -> str:
        if not docs:
            raise ValueError("filter agents need at least one document")
        return self._call(template, q, kind.value, documents=render_documents(docs))

    def summarize(self, q: Query, docs: Sequence[Document]) -> FilteredResponse:
        text = self._filter(FilterKind.SUMMARY, "summarizer", q, docs)
        return FilteredResponse(FilterKind.SUMMARY, text, q.query_id)

    def reason(self, q: Query, docs: Sequence[Document]) -> FilteredResponse:
        text = self._filter(FilterKind.REASONING, "reasoner", q, docs)
        return FilteredResponse(FilterKind.REASONING, text, q.query_id)

    def extract(self, q: Query, docs: Sequence[Document]) -> FilteredResponse:
        return self.extract_with_retries(q, docs)[0]

    def extract_with_retries(self, q: Query, docs: Sequence[Document]) -> tuple[FilteredResponse, int]:
        """Extract spans; a non-verbatim output is retried once with the strict prompt.

        Returns the response and the number of retry calls made (0 or 1). The
        retry output replaces the first only if it passes the verbatim check.
        """
        text = self._filter(FilterKind.EXTRACTION, "extractor", q, docs)
        if verbatim_ok(text, docs):
            return FilteredResponse(FilterKind.EXTRACTION, text, q.query_id, verbatim_ok=True), 0
        with self._lock:
            self.verbatim_retries += 1
        retry = self._filter(FilterKind.EXTRACTION, "extractor_strict", q, docs)
        if verbatim_ok(retry, docs):
            return FilteredResponse(FilterKind.EXTRACTION, retry, q.query_id, verbatim_ok=True), 1
        logger.info("extractor output for %s is not verbatim after retry", q.query_id)
        return FilteredResponse(FilterKind.EXTRACTION, text, q.query_id, verbatim_ok=False), 1

    def answer(self, q: Query, evidence: FilteredResponse) -> CandidateAnswer:
        if not evidence.text.strip():
            raise ValueError("answer agent needs non-empty evidence")
        text = self._call("answer", q, "answer", view=evidence.kind.value, evidence=evidence.text)
        return CandidateAnswer(evidence.kind, text)

    def synthesis_prompt(self, q: Query, inputs, options: Optional[Sequence[tuple[str, str]]] = None) -> tuple[str, dict]:
        """Template name and placeholder values for a synthesis call."""
        ordered = _order_inputs(inputs)
        if all(isinstance(i, CandidateAnswer) for i in ordered):
            if options:
                raise ValueError("closed-set synthesis consumes filtered evidence, not candidates")
            block = "\n".join(f"Candidate {n}: {c.text}" for n, c in enumerate(ordered, 1))
            return "synthesis_candidates", {"candidates": block}
        if all(isinstance(i, FilteredResponse) for i in ordered):
            block = "\n\n".join(f"Evidence {n}:\n{r.text}" for n, r in enumerate(ordered, 1))
            if options:
                return "synthesis_options", {"evidence": block, "options": render_options(options)}
            return "synthesis_evidence", {"evidence": block}
        raise StructuralError("synthesis inputs must be all candidates or all filtered responses")

    def synthesize(self, q: Query, inputs, options: Optional[Sequence[tuple[str, str]]] = None) -> str:
        """Final answer from three candidates or three filtered responses.

        With ``options``, the output is reduced to one option label and
        ``UnparseableAnswerError`` is raised when none can be found.
        """
        template, values = self.synthesis_prompt(q, inputs, options)
        text = self._call(template, q, "synthesis", **values)
        if _AGENT_NAMES.search(text):
            logger.warning("synthesis output for %s names a contributing agent", q.query_id)
        if options:
            labels = [label for label, _ in options]
            label = parse_option_label(text, labels)
            if label is None:
                raise UnparseableAnswerError(text, labels)
            return label
        return text
