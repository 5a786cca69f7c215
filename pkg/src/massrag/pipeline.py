"""Per-query orchestration and dataset runs with failure isolation."""

from __future__ import annotations

import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Callable, Optional, Sequence, Union

from .agents import Agents, AgentError, UnparseableAnswerError
from .core import (
    CALLS_WITH_ANSWER_AGENT,
    CALLS_WITHOUT_ANSWER_AGENT,
    CANONICAL_KINDS,
    CandidateAnswer,
    Document,
    FilteredResponse,
    FilterKind,
    PipelineConfig,
    PipelineResult,
    Query,
    TaskKind,
    truncate_to_budget,
)

logger = logging.getLogger(__name__)

RESULTS_SCHEMA_VERSION = 1


class EmptyRetrievalError(ValueError):
    kind = "empty_retrieval"


@dataclass(frozen=True)
class FailureRecord:
    query_id: str
    stage: str
    error_kind: str
    message: str

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "stage": self.stage,
            "error_kind": self.error_kind,
            "message": self.message,
        }


class QueryFailure(Exception):
    def __init__(self, record: FailureRecord) -> None:
        self.record = record
        super().__init__(f"{record.query_id} failed at {record.stage}: {record.message}")


def select_top_k(q: Query, k: int, max_context_chars: Optional[int] = None) -> list[Document]:
    """The ``k`` best-ranked documents, trimmed to the context budget."""
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if not q.documents:
        raise EmptyRetrievalError(f"query {q.query_id!r} has no retrieved documents")
    docs = sorted(q.documents, key=lambda d: d.rank)[:k]
    if max_context_chars is not None:
        docs = truncate_to_budget(docs, max_context_chars)
    return docs


def resolve_answer_agent(setting: Union[str, bool], task_kind: TaskKind) -> bool:
    """Map an ``on``/``off``/``auto`` setting to a concrete flag for ``task_kind``.

    ``auto`` enables the Answer Agent for open-domain and long-form QA and
    disables it for closed-set tasks.
    """
    task_kind = TaskKind(task_kind)
    if isinstance(setting, bool):
        on = setting
    elif setting == "on":
        on = True
    elif setting == "off":
        on = False
    elif setting == "auto":
        on = task_kind is not TaskKind.CLOSED_SET
    else:
        raise ValueError(f"answer agent setting must be on, off or auto, got {setting!r}")
    return on and task_kind is not TaskKind.CLOSED_SET


class Pipeline:
    def __init__(self, agents: Agents) -> None:
        self.agents = agents

    @property
    def fingerprint(self) -> str:
        fp = self.agents.backend.fingerprint
        return f"{fp}|{self.agents.model_name}" if self.agents.model_name else fp

    def run_query(self, q: Query, cfg: PipelineConfig) -> PipelineResult:
        """Run all agent stages for one query.

        Raises ``QueryFailure`` carrying the failing stage on any hard error.
        """
        cfg = cfg.for_task(q.task_kind)
        try:
            docs = select_top_k(q, cfg.top_k_docs, cfg.max_context_chars)
        except EmptyRetrievalError as exc:
            raise QueryFailure(FailureRecord(q.query_id, "retrieval", exc.kind, str(exc))) from exc

        try:
            with ThreadPoolExecutor(max_workers=3) as pool:
                futures = {
                    FilterKind.SUMMARY: pool.submit(self.agents.summarize, q, docs),
                    FilterKind.EXTRACTION: pool.submit(self.agents.extract_with_retries, q, docs),
                    FilterKind.REASONING: pool.submit(self.agents.reason, q, docs),
                }
                outcomes = _gather(futures)
                summary, (extraction, retries), reasoning = (outcomes[k] for k in CANONICAL_KINDS)
                filtered: dict[FilterKind, FilteredResponse] = {
                    FilterKind.SUMMARY: summary,
                    FilterKind.EXTRACTION: extraction,
                    FilterKind.REASONING: reasoning,
                }
                candidates: Optional[dict[FilterKind, CandidateAnswer]] = None
                if cfg.use_answer_agent:
                    answer_futures = {
                        kind: pool.submit(self.agents.answer, q, filtered[kind]) for kind in CANONICAL_KINDS
                    }
                    candidates = _gather(answer_futures)
        except AgentError as exc:
            raise QueryFailure(FailureRecord(q.query_id, exc.stage, exc.error_kind, str(exc.cause))) from exc

        options = q.options if q.task_kind is TaskKind.CLOSED_SET else None
        parsed: Optional[str] = None
        try:
            final = self.agents.synthesize(q, candidates if candidates is not None else filtered, options)
            if options:
                parsed = final
        except AgentError as exc:
            raise QueryFailure(FailureRecord(q.query_id, exc.stage, exc.error_kind, str(exc.cause))) from exc
        except UnparseableAnswerError as exc:
            logger.warning("query %s: %s", q.query_id, exc)
            final = exc.raw

        return PipelineResult(
            query_id=q.query_id,
            filtered=filtered,
            candidates=candidates,
            final_answer=final,
            agent_calls=CALLS_WITH_ANSWER_AGENT if candidates is not None else CALLS_WITHOUT_ANSWER_AGENT,
            backend_fingerprint=self.fingerprint,
            retries=retries,
            prompt_set_id=self.agents.prompt_set_id,
            parsed_option=parsed,
        )

    def run_dataset(
        self,
        queries: Sequence[Query],
        cfg: PipelineConfig,
        parallelism: int = 1,
        *,
        results_out: Optional[IO[str]] = None,
        failures_out: Optional[IO[str]] = None,
        on_progress: Optional[Callable[[int, int], None]] = None,
    ) -> tuple[list[PipelineResult], list[FailureRecord]]:
        """Run every query; per-query failures are recorded, never raised.

        Outputs keep input order. When ``results_out``/``failures_out`` are
        given, records are written as soon as every earlier query is done.
        """
        if parallelism < 1:
            raise ValueError(f"parallelism must be positive, got {parallelism}")
        n = len(queries)
        outcomes: list[Union[PipelineResult, FailureRecord, None]] = [None] * n
        lock = threading.Lock()
        state = {"next": 0, "done": 0}

        def flush() -> None:
            # Caller holds the lock.
            while state["next"] < n and outcomes[state["next"]] is not None:
                item = outcomes[state["next"]]
                if isinstance(item, PipelineResult) and results_out is not None:
                    results_out.write(dump_result(item) + "\n")
                    results_out.flush()
                elif isinstance(item, FailureRecord) and failures_out is not None:
                    failures_out.write(json.dumps(item.to_dict(), ensure_ascii=False) + "\n")
                    failures_out.flush()
                state["next"] += 1

        def work(i: int) -> None:
            q = queries[i]
            try:
                out: Union[PipelineResult, FailureRecord] = self.run_query(q, cfg)
            except QueryFailure as exc:
                logger.warning("%s", exc)
                out = exc.record
            with lock:
                outcomes[i] = out
                state["done"] += 1
                flush()
                if on_progress is not None:
                    on_progress(state["done"], n)

        if parallelism == 1:
            for i in range(n):
                work(i)
        else:
            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                for fut in [pool.submit(work, i) for i in range(n)]:
                    fut.result()

        results = [o for o in outcomes if isinstance(o, PipelineResult)]
        failures = [o for o in outcomes if isinstance(o, FailureRecord)]
        return results, failures


def _gather(futures: dict) -> dict:
    """Wait for all futures; re-raise the first error in canonical order."""
    out, first_error = {}, None
    for kind in CANONICAL_KINDS:
        try:
            out[kind] = futures[kind].result()
        except AgentError as exc:
            first_error = first_error or exc
    if first_error is not None:
        raise first_error
    return out


# Results file --------------------------------------------------------------


def result_to_dict(r: PipelineResult) -> dict:
    filtered = {}
    for resp in (r.filtered[k] for k in CANONICAL_KINDS):
        entry: dict = {"text": resp.text}
        if resp.verbatim_ok is not None:
            entry["verbatim_ok"] = resp.verbatim_ok
        filtered[resp.kind.value] = entry
    return {
        "schema_version": RESULTS_SCHEMA_VERSION,
        "query_id": r.query_id,
        "filtered": filtered,
        "candidates": (
            None if r.candidates is None else {k.value: r.candidates[k].text for k in CANONICAL_KINDS}
        ),
        "final_answer": r.final_answer,
        "parsed_option": r.parsed_option,
        "agent_calls": r.agent_calls,
        "retries": r.retries,
        "backend_fingerprint": r.backend_fingerprint,
        "prompt_set_id": r.prompt_set_id,
    }


def dump_result(r: PipelineResult) -> str:
    return json.dumps(result_to_dict(r), ensure_ascii=False, sort_keys=True)


def result_from_dict(d: dict) -> PipelineResult:
    version = d.get("schema_version")
    if version != RESULTS_SCHEMA_VERSION:
        raise ValueError(f"unsupported results schema_version {version!r}")
    qid = d["query_id"]
    filtered = {}
    for kind in CANONICAL_KINDS:
        entry = d["filtered"][kind.value]
        filtered[kind] = FilteredResponse(kind, entry["text"], qid, verbatim_ok=entry.get("verbatim_ok"))
    cands = d.get("candidates")
    candidates = None if cands is None else {k: CandidateAnswer(k, cands[k.value]) for k in CANONICAL_KINDS}
    return PipelineResult(
        query_id=qid,
        filtered=filtered,
        candidates=candidates,
        final_answer=d["final_answer"],
        agent_calls=d["agent_calls"],
        backend_fingerprint=d["backend_fingerprint"],
        retries=d.get("retries", 0),
        prompt_set_id=d.get("prompt_set_id", ""),
        parsed_option=d.get("parsed_option"),
    )


def read_results(path: Union[str, Path]) -> list[PipelineResult]:
    results = []
    with Path(path).open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                results.append(result_from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad result record: {exc}") from exc
    return results


def read_failures(path: Union[str, Path]) -> list[FailureRecord]:
    records = []
    with Path(path).open(encoding="utf-8") as f:
        for line in f:
            if line.strip():
                records.append(FailureRecord(**json.loads(line)))
    return records
