from __future__ import annotations

from importlib import resources
from pathlib import Path

import pytest

from massrag.agents import Agents
from massrag.backend import MockBackend, mock_script_load
from massrag.core import Document, Query, TaskKind
from massrag.data import load_dataset
from massrag.pipeline import Pipeline

FIXTURES = Path(str(resources.files("massrag") / "fixtures"))


def make_docs(*texts: str, titles=None) -> tuple[Document, ...]:
    titles = titles or [f"T{i}" for i in range(1, len(texts) + 1)]
    n = len(texts)
    return tuple(
        Document(doc_id=f"d{i}", title=t, text=x, score=float(n - i + 1), rank=i)
        for i, (t, x) in enumerate(zip(titles, texts), 1)
    )


def make_query(qid="q1", question="Who?", golds=("Paris",), docs=None, **kw) -> Query:
    docs = make_docs("Paris is the capital of France.") if docs is None else docs
    return Query(query_id=qid, question=question, gold_answers=tuple(golds), documents=docs, **kw)


@pytest.fixture
def fixture_dir() -> Path:
    return FIXTURES


@pytest.fixture
def odqa_queries() -> list[Query]:
    return load_dataset(FIXTURES / "odqa_fixture.jsonl", TaskKind.ODQA)


@pytest.fixture
def arc_queries() -> list[Query]:
    return load_dataset(FIXTURES / "arc_fixture.jsonl", TaskKind.CLOSED_SET)


@pytest.fixture
def odqa_mock() -> MockBackend:
    return mock_script_load(FIXTURES / "odqa_mock.jsonl")


@pytest.fixture
def arc_mock() -> MockBackend:
    return mock_script_load(FIXTURES / "arc_mock.jsonl")


def pipeline_for(backend) -> Pipeline:
    return Pipeline(Agents(backend))


# One line per acceptance criterion, echoed at the end of the session.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
