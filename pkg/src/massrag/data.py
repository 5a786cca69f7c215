"""Load benchmark questions and their pre-retrieved documents."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Optional, Union

from .core import Document, Query, TaskKind, ValidationError, make_doc_id

logger = logging.getLogger(__name__)

MAX_MALFORMED_FRACTION = 0.01


class DatasetError(ValueError):
    """The file as a whole cannot be ingested."""


@dataclass(frozen=True)
class RecordError:
    line: int
    message: str

    def __str__(self) -> str:
        return f"line {self.line}: {self.message}"


def _score(value: Any) -> Optional[float]:
    if value is None or value == "":
        return None
    return float(value)


def normalize_docs(raw: Iterable[dict]) -> list[Document]:
    """Turn raw retrieval records into ranked Documents.

    When every record has a score they are ranked by descending score (ties
    keep input order). Otherwise input order is kept and scores are
    synthesized as ``n, n-1, ..., 1``. Records with empty text are dropped.
    """
    kept = []
    for i, rec in enumerate(raw):
        text = rec.get("text") or ""
        if not str(text).strip():
            logger.warning("dropping retrieved document %d with empty text", i)
            continue
        kept.append(rec)
    scores = [_score(rec.get("score")) for rec in kept]
    if kept and all(s is not None for s in scores):
        order = sorted(range(len(kept)), key=lambda i: -scores[i])
        ranked = [(kept[i], scores[i]) for i in order]
    else:
        if any(s is not None for s in scores):
            logger.warning("some documents lack scores; ranking by input order")
        n = len(kept)
        ranked = [(rec, float(n - i)) for i, rec in enumerate(kept)]
    docs = []
    for rank, (rec, score) in enumerate(ranked, 1):
        title = str(rec.get("title") or "")
        text = str(rec["text"])
        doc_id = rec.get("id", rec.get("doc_id"))
        docs.append(
            Document(
                doc_id=str(doc_id) if doc_id not in (None, "") else make_doc_id(title, text),
                title=title,
                text=text,
                score=float(score),
                rank=rank,
            )
        )
    return docs


def _as_list(value: Any) -> list[str]:
    if value is None:
        return []
    if isinstance(value, str):
        return [value]
    return [str(v) for v in value]


def _options(rec: dict) -> list[tuple[str, str]]:
    if "options" in rec:
        opts = rec["options"]
        if isinstance(opts, dict):
            return [(str(k), str(v)) for k, v in opts.items()]
        return [(str(label), str(text)) for label, text in opts]
    choices = rec.get("choices")
    if isinstance(choices, dict) and "label" in choices:
        return list(zip(map(str, choices["label"]), map(str, choices["text"])))
    if isinstance(choices, list) and choices and isinstance(choices[0], dict):
        return [(str(c["label"]), str(c["text"])) for c in choices]
    return []


def _answer_groups(rec: dict) -> Optional[list[list[str]]]:
    if "gold_answer_groups" in rec:
        return [_as_list(g) for g in rec["gold_answer_groups"]]
    pairs = rec.get("qa_pairs")
    if pairs:
        return [_as_list(p.get("short_answers")) for p in pairs]
    return None


def record_to_query(rec: dict, task_kind: TaskKind, default_id: str) -> Query:
    """Map one source record (canonical or Self-RAG/ALCE style) onto a Query."""
    if not isinstance(rec, dict):
        raise ValidationError("record must be an object")
    task_kind = TaskKind(task_kind)
    question = rec.get("question")
    if not isinstance(question, str):
        raise ValidationError("missing string field 'question'")
    raw_docs = rec.get("ctxs", rec.get("docs", []))
    if not isinstance(raw_docs, list):
        raise ValidationError("'ctxs' must be a list")
    qid = rec.get("query_id", rec.get("id", rec.get("sample_id")))
    qid = str(qid) if qid not in (None, "") else default_id

    gold_option = None
    options: list[tuple[str, str]] = []
    groups = None
    if task_kind is TaskKind.CLOSED_SET:
        gold_option = rec.get("gold_option", rec.get("answerKey"))
        options = _options(rec)
        if not options:
            raise ValidationError("closed_set record has no options")
        answers = _as_list(rec.get("answers"))
    elif task_kind is TaskKind.LONG_FORM:
        groups = _answer_groups(rec)
        answers = _as_list(rec.get("answers"))
        if not answers:
            answers = _as_list(rec.get("answer"))
        if not answers and rec.get("annotations"):
            answers = [a["long_answer"] for a in rec["annotations"] if a.get("long_answer")]
        if groups is None:
            raise ValidationError("long_form record has no short-answer groups")
    else:
        if "answers" in rec:
            answers = _as_list(rec["answers"])
        elif "answer" in rec:
            answers = _as_list(rec["answer"])
        else:
            raise ValidationError("missing 'answers' list")
        if not answers:
            raise ValidationError("empty 'answers' list")
    return Query(
        query_id=qid,
        question=question,
        gold_answers=tuple(answers),
        documents=tuple(normalize_docs(raw_docs)),
        task_kind=task_kind,
        gold_option=str(gold_option) if gold_option is not None else None,
        options=tuple(options),
        gold_answer_groups=None if groups is None else tuple(tuple(g) for g in groups),
    )


def read_dataset(path: Union[str, Path], task_kind: Union[TaskKind, str]) -> tuple[list[Query], list[RecordError]]:
    """Parse a line-delimited dataset, collecting per-record errors.

    Raises ``DatasetError`` when more than 1% of the records are malformed
    or a query id repeats.
    """
    path = Path(path)
    task_kind = TaskKind(task_kind)
    try:
        content = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    if content.lstrip().startswith("["):
        # Whole-file JSON array (ALCE style); "line" then means record number.
        try:
            lines = [json.dumps(rec) for rec in json.loads(content)]
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}: invalid JSON array: {exc}") from exc
    else:
        lines = content.splitlines()
    queries: list[Query] = []
    errors: list[RecordError] = []
    total = 0
    seen: set[str] = set()
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        total += 1
        try:
            rec = json.loads(line)
            q = record_to_query(rec, task_kind, default_id=f"{path.stem}-{total - 1}")
        except json.JSONDecodeError as exc:
            errors.append(RecordError(lineno, f"invalid JSON: {exc.msg}"))
            continue
        except (ValidationError, ValueError, KeyError, TypeError) as exc:
            errors.append(RecordError(lineno, str(exc)))
            continue
        if q.query_id in seen:
            raise DatasetError(f"{path}: duplicate query_id {q.query_id!r} at line {lineno}")
        seen.add(q.query_id)
        queries.append(q)
    if total and len(errors) / total > MAX_MALFORMED_FRACTION:
        shown = "; ".join(str(e) for e in errors[:5])
        raise DatasetError(
            f"{path}: {len(errors)} of {total} records malformed (likely wrong schema or task kind): {shown}"
        )
    for e in errors:
        logger.warning("%s: skipped %s", path, e)
    return queries, errors


def load_dataset(path: Union[str, Path], task_kind: Union[TaskKind, str]) -> list[Query]:
    queries, _ = read_dataset(path, task_kind)
    logger.info("loaded %d queries from %s", len(queries), path)
    return queries


def query_to_record(q: Query) -> dict:
    """Canonical on-disk form of a Query."""
    rec: dict[str, Any] = {
        "query_id": q.query_id,
        "question": q.question,
        "answers": list(q.gold_answers),
    }
    if q.task_kind is TaskKind.CLOSED_SET:
        rec["gold_option"] = q.gold_option
        rec["options"] = [[label, text] for label, text in q.options]
    if q.gold_answer_groups is not None:
        rec["gold_answer_groups"] = [list(g) for g in q.gold_answer_groups]
    rec["ctxs"] = [
        {"id": d.doc_id, "title": d.title, "text": d.text, "score": d.score} for d in q.documents
    ]
    return rec


def write_dataset(queries: Iterable[Query], path: Union[str, Path]) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        for q in queries:
            f.write(json.dumps(query_to_record(q), ensure_ascii=False) + "\n")
