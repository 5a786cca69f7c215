import itertools

import pytest

from massrag.core import (
    CandidateAnswer,
    DecodeParams,
    Document,
    FilteredResponse,
    FilterKind,
    PipelineConfig,
    PipelineResult,
    Query,
    StructuralError,
    TaskKind,
    ValidationError,
    canonical_order,
    make_doc_id,
    truncate_to_budget,
)

from conftest import make_docs, make_query

S, E, R = FilterKind.SUMMARY, FilterKind.EXTRACTION, FilterKind.REASONING


def _responses(kinds):
    return {k: FilteredResponse(k, f"text {k.value}", "q1", verbatim_ok=True if k is E else None) for k in kinds}


@pytest.mark.parametrize("order", list(itertools.permutations([S, E, R])))
def test_canonical_order_any_insertion_order(order):
    out = canonical_order(_responses(order))
    assert [r.kind for r in out] == [S, E, R]


def test_canonical_order_missing_kind():
    with pytest.raises(StructuralError):
        canonical_order(_responses([S, E]))


def test_filter_kind_has_three_variants():
    assert [k.value for k in FilterKind] == ["summary", "extraction", "reasoning"]


def test_decode_defaults_are_greedy():
    d = DecodeParams()
    assert d.temperature == 0 and d.top_p == 1.0


@pytest.mark.parametrize("kw", [{"temperature": -0.1}, {"top_p": 0.0}, {"top_p": 1.5}, {"max_tokens": 0}])
def test_decode_rejects_bad_values(kw):
    with pytest.raises(ValidationError):
        DecodeParams(**kw)


def test_query_rejects_rank_gap():
    docs = (
        Document("a", "", "x", 2.0, 1),
        Document("b", "", "y", 1.0, 3),
    )
    with pytest.raises(ValidationError, match="contiguous"):
        make_query(docs=docs)


def test_query_rejects_increasing_scores():
    docs = (Document("a", "", "x", 1.0, 1), Document("b", "", "y", 2.0, 2))
    with pytest.raises(ValidationError, match="non-increasing"):
        make_query(docs=docs)


def test_query_requires_gold_answers_for_odqa():
    with pytest.raises(ValidationError):
        make_query(golds=())
    with pytest.raises(ValidationError):
        make_query(golds=("",))


def test_closed_set_requires_gold_option():
    with pytest.raises(ValidationError):
        make_query(golds=(), task_kind=TaskKind.CLOSED_SET, options=(("A", "x"), ("B", "y")))
    q = make_query(golds=(), task_kind=TaskKind.CLOSED_SET, options=(("A", "x"), ("B", "y")), gold_option="b")
    assert q.match_golds() == ("y",)


def test_empty_question_rejected():
    with pytest.raises(ValidationError):
        make_query(question="  ")


def test_document_empty_text_rejected():
    with pytest.raises(ValidationError):
        Document("a", "t", "  ", 1.0, 1)


def test_doc_id_hash_is_stable():
    assert make_doc_id("T", "text") == make_doc_id("T", "text")
    assert make_doc_id("T", "text") != make_doc_id("T", "text2")


def test_verbatim_flag_only_on_extraction():
    with pytest.raises(ValidationError):
        FilteredResponse(S, "x", "q", verbatim_ok=True)
    with pytest.raises(ValidationError):
        FilteredResponse(E, "x", "q")
    with pytest.raises(ValidationError):
        FilteredResponse(R, "", "q")


def test_closed_set_config_forces_answer_agent_off():
    cfg = PipelineConfig(use_answer_agent=True)
    assert cfg.for_task(TaskKind.CLOSED_SET).use_answer_agent is False
    assert cfg.for_task(TaskKind.ODQA).use_answer_agent is True


def test_result_call_accounting_invariant():
    filtered = _responses([S, E, R])
    cands = {k: CandidateAnswer(k, "x") for k in (S, E, R)}
    PipelineResult("q", filtered, "x", 7, "fp", candidates=cands)
    PipelineResult("q", filtered, "x", 4, "fp")
    with pytest.raises(ValidationError):
        PipelineResult("q", filtered, "x", 4, "fp", candidates=cands)
    with pytest.raises(ValidationError):
        PipelineResult("q", filtered, "x", 7, "fp")
    with pytest.raises(StructuralError):
        PipelineResult("q", _responses([S, E]), "x", 4, "fp")


def test_truncation_drops_lowest_ranked_first():
    docs = make_docs("a" * 50, "b" * 50, "c" * 50)
    sizes = [len(d.render()) for d in docs]
    kept = truncate_to_budget(docs, sizes[0] + 2 + sizes[1])
    assert [d.rank for d in kept] == [1, 2]
    assert [d.rank for d in truncate_to_budget(docs, 10_000)] == [1, 2, 3]


def test_truncation_keeps_and_clips_top_document():
    docs = make_docs("x" * 500, "y")
    kept = truncate_to_budget(docs, 100)
    assert len(kept) == 1 and kept[0].rank == 1
    assert len(kept[0].render()) <= 100
