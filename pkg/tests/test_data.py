import json
import logging

import pytest

from massrag.core import TaskKind
from massrag.data import DatasetError, load_dataset, normalize_docs, read_dataset, write_dataset

from conftest import FIXTURES


def write(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


class TestNormalizeDocs:
    def test_synthesized_scores(self):
        docs = normalize_docs([{"text": "a"}, {"text": "b"}, {"text": "c"}])
        assert [d.score for d in docs] == [3.0, 2.0, 1.0]
        assert [d.rank for d in docs] == [1, 2, 3]
        assert [d.title for d in docs] == ["", "", ""]

    def test_resorted_by_score(self):
        docs = normalize_docs([{"text": "low", "score": 0.9}, {"text": "high", "score": 0.95}])
        assert [d.text for d in docs] == ["high", "low"]
        assert [d.rank for d in docs] == [1, 2]

    def test_string_scores_accepted(self):
        docs = normalize_docs([{"text": "a", "score": "1.5"}, {"text": "b", "score": "2.5"}])
        assert [d.text for d in docs] == ["b", "a"]

    def test_empty_text_dropped_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING):
            docs = normalize_docs([{"text": "a"}, {"text": "  "}, {"text": "c"}])
        assert [d.text for d in docs] == ["a", "c"]
        assert [d.rank for d in docs] == [1, 2]
        assert "empty text" in caplog.text

    def test_ids_kept_or_hashed(self):
        docs = normalize_docs([{"id": "7", "title": "T", "text": "a"}, {"title": "T", "text": "b"}])
        assert docs[0].doc_id == "7"
        assert len(docs[1].doc_id) == 16


class TestLoad:
    def test_fixture(self):
        queries = load_dataset(FIXTURES / "odqa_fixture.jsonl", "odqa")
        assert len(queries) == 12
        assert all(q.documents and q.gold_answers for q in queries)

    def test_closed_set_fixture(self):
        queries = load_dataset(FIXTURES / "arc_fixture.jsonl", TaskKind.CLOSED_SET)
        assert len(queries) == 4 and all(q.gold_option for q in queries)
        assert queries[0].options[1] == ("B", "Carbon dioxide")

    def test_missing_answers_reports_line(self, tmp_path):
        path = write(tmp_path / "d.jsonl", [{"question": "q?", "ctxs": [{"text": "x"}]}])
        with pytest.raises(DatasetError, match="line 1"):
            load_dataset(path, "odqa")

    def test_below_threshold_skips_with_errors(self, tmp_path):
        good = [{"question": f"q{i}?", "answers": ["a"], "ctxs": [{"text": "x"}]} for i in range(199)]
        bad = {"question": "bad?", "ctxs": []}
        path = write(tmp_path / "d.jsonl", good[:100] + [bad] + good[100:])
        queries, errors = read_dataset(path, "odqa")
        assert len(queries) == 199
        assert [e.line for e in errors] == [101]

    def test_above_threshold_is_hard_error(self, tmp_path):
        good = [{"question": f"q{i}?", "answers": ["a"], "ctxs": [{"text": "x"}]} for i in range(97)]
        bad = [{"question": "bad?"}] * 3
        with pytest.raises(DatasetError, match="3 of 100"):
            load_dataset(write(tmp_path / "d.jsonl", good + bad), "odqa")

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(DatasetError):
            load_dataset(tmp_path / "missing.jsonl", "odqa")

    def test_self_rag_arc_layout(self, tmp_path):
        rec = {
            "id": "Mercury_1",
            "question": "Which is a gas?",
            "answerKey": "C",
            "choices": {"text": ["Rock", "Water", "Steam"], "label": ["A", "B", "C"]},
            "ctxs": [{"id": "1", "title": "Steam", "text": "Steam is water vapour.", "score": "1.2"}],
        }
        (q,) = load_dataset(write(tmp_path / "arc.jsonl", [rec]), "closed_set")
        assert q.query_id == "Mercury_1" and q.gold_option == "C"
        assert q.options == (("A", "Rock"), ("B", "Water"), ("C", "Steam"))

    def test_alce_asqa_layout(self, tmp_path):
        rec = {
            "sample_id": "-123",
            "question": "Who played X?",
            "answer": "A played X in 1990 and B in 2000.",
            "qa_pairs": [{"short_answers": ["A"]}, {"short_answers": ["B", "Bee"]}],
            "docs": [{"title": "X", "text": "A starred as X.", "score": 1.0}],
        }
        path = tmp_path / "asqa.json"
        path.write_text(json.dumps([rec]))
        (q,) = load_dataset(path, "long_form")
        assert q.gold_answer_groups == (("A",), ("B", "Bee"))
        assert q.gold_answers == ("A played X in 1990 and B in 2000.",)
        assert q.match_golds() == ("A", "B", "Bee")

    def test_round_trip(self, tmp_path):
        for name, kind in (("odqa_fixture.jsonl", "odqa"), ("arc_fixture.jsonl", "closed_set")):
            queries = load_dataset(FIXTURES / name, kind)
            out = tmp_path / name
            write_dataset(queries, out)
            assert load_dataset(out, kind) == queries

    def test_round_trip_long_form(self, tmp_path):
        rec = {"question": "q?", "answers": ["long"], "gold_answer_groups": [["a"], ["b"]],
               "ctxs": [{"text": "t"}]}
        queries = load_dataset(write(tmp_path / "a.jsonl", [rec]), "long_form")
        write_dataset(queries, tmp_path / "b.jsonl")
        assert load_dataset(tmp_path / "b.jsonl", "long_form") == queries

    def test_duplicate_ids(self, tmp_path):
        recs = [{"query_id": "x", "question": "q?", "answers": ["a"], "ctxs": []}] * 2
        with pytest.raises(DatasetError, match="duplicate"):
            load_dataset(write(tmp_path / "d.jsonl", recs), "odqa")
