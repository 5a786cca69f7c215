"""Metrics (accuracy, str-em, ROUGE-L), evidence coverage and per-agent reports."""

from __future__ import annotations

import enum
import itertools
import re
import string
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

from .core import CANONICAL_KINDS, FilterKind, PipelineConfig, PipelineResult, Query, TaskKind

SYNTHESIS = "synthesis"
ROUGE_VARIANT = "rouge-l-f1/regex-word-tokens/casefold"


class UndefinedMetricError(ValueError):
    """A rate was requested over zero queries."""


class Normalization(str, enum.Enum):
    CASEFOLD_WS = "casefold_ws"
    CASEFOLD_WS_PUNCT = "casefold_ws_punct"


_WS = re.compile(r"\s+")
_PUNCT = str.maketrans({c: " " for c in string.punctuation})


def normalize(text: str, mode: Normalization = Normalization.CASEFOLD_WS) -> str:
    """Casefold and collapse whitespace; optionally replace punctuation by spaces."""
    text = text.casefold()
    if Normalization(mode) is Normalization.CASEFOLD_WS_PUNCT:
        text = text.translate(_PUNCT)
    return _WS.sub(" ", text).strip()


def contains_any(text: str, golds: Iterable[str], mode: Normalization = Normalization.CASEFOLD_WS) -> bool:
    norm = normalize(text, mode)
    for gold in golds:
        g = normalize(gold, mode)
        if g and g in norm:
            return True
    return False


def accuracy(pred: str, golds: Sequence[str], mode: Normalization = Normalization.CASEFOLD_WS) -> bool:
    """True iff some normalized gold answer is a substring of the normalized prediction."""
    if not golds:
        raise ValueError("accuracy needs at least one gold answer")
    return contains_any(pred, golds, mode)


def str_em(pred: str, gold_groups: Sequence[Sequence[str]], mode: Normalization = Normalization.CASEFOLD_WS) -> float:
    """Fraction of answer groups with at least one member found in ``pred``."""
    if not gold_groups or any(not g for g in gold_groups):
        raise ValueError("str_em needs at least one non-empty gold group")
    hit = sum(1 for group in gold_groups if contains_any(pred, group, mode))
    return hit / len(gold_groups)


_TOKEN = re.compile(r"\w+")


def rouge_tokens(text: str) -> list[str]:
    return _TOKEN.findall(text.casefold())


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(pred: str, ref: str) -> float:
    """ROUGE-L F1 between two strings over casefolded word tokens."""
    p, r = rouge_tokens(pred), rouge_tokens(ref)
    if not p or not r:
        return 0.0
    lcs = lcs_length(p, r)
    if lcs == 0:
        return 0.0
    precision, recall = lcs / len(p), lcs / len(r)
    return 2 * precision * recall / (precision + recall)


def option_correct(result: PipelineResult, q: Query) -> bool:
    return (
        result.parsed_option is not None
        and q.gold_option is not None
        and result.parsed_option.casefold() == q.gold_option.casefold()
    )


# Evidence coverage -----------------------------------------------------------

IndicatorTable = Mapping[str, Mapping[FilterKind, bool]]


def indicator_table(
    results: Sequence[PipelineResult],
    queries: Mapping[str, Query],
    mode: Normalization = Normalization.CASEFOLD_WS,
) -> dict[str, dict[FilterKind, bool]]:
    """Per query and filter kind: does the response contain a gold answer?"""
    table = {}
    for r in results:
        golds = queries[r.query_id].match_golds()
        table[r.query_id] = {k: contains_any(r.filtered[k].text, golds, mode) for k in CANONICAL_KINDS}
    return table


def ecr_from_table(agent_set: Iterable[FilterKind], table: IndicatorTable) -> float:
    """Fraction of queries where any agent in ``agent_set`` captured the gold evidence."""
    agents = [FilterKind(a) for a in agent_set]
    if not table:
        raise UndefinedMetricError("ECR is undefined over an empty query set")
    covered = sum(1 for row in table.values() if any(row[a] for a in agents))
    return covered / len(table)


def ecr(
    agent_set: Iterable[FilterKind],
    responses: Mapping[str, Mapping[FilterKind, str]],
    golds: Mapping[str, Sequence[str]],
    mode: Normalization = Normalization.CASEFOLD_WS,
) -> float:
    """Evidence coverage rate of ``agent_set`` over per-query response texts."""
    agents = [FilterKind(a) for a in agent_set]
    table = {
        qid: {a: contains_any(texts[a], golds[qid], mode) for a in agents}
        for qid, texts in responses.items()
    }
    return ecr_from_table(agents, table)


AGENT_SUBSETS: tuple[tuple[FilterKind, ...], ...] = tuple(
    combo for n in (1, 2, 3) for combo in itertools.combinations(CANONICAL_KINDS, n)
)


def subset_label(agents: Iterable[FilterKind]) -> str:
    return "+".join(FilterKind(a).value for a in agents)


def ecr_table(table: IndicatorTable) -> dict[str, float]:
    """ECR for every non-empty subset of filter agents."""
    return {subset_label(s): ecr_from_table(s, table) for s in AGENT_SUBSETS}


def uniquely_attributable_subset(table: IndicatorTable) -> set[str]:
    """Queries whose gold evidence was captured by exactly one filter agent."""
    return {qid for qid, row in table.items() if sum(bool(row[k]) for k in CANONICAL_KINDS) == 1}


# Reports ---------------------------------------------------------------------


def per_agent_accuracy(
    results: Sequence[PipelineResult],
    queries: Mapping[str, Query],
    mode: Normalization = Normalization.CASEFOLD_WS,
) -> dict[str, float]:
    """Accuracy of each filter response and of the final answer."""
    if not results:
        raise UndefinedMetricError("per-agent accuracy is undefined over zero results")
    out: dict[str, float] = {}
    for kind in CANONICAL_KINDS:
        out[kind.value] = sum(
            accuracy(r.filtered[kind].text, queries[r.query_id].match_golds(), mode) for r in results
        ) / len(results)
    out[SYNTHESIS] = sum(final_correct(r, queries[r.query_id], mode) for r in results) / len(results)
    return out


def final_correct(result: PipelineResult, q: Query, mode: Normalization = Normalization.CASEFOLD_WS) -> bool:
    if q.task_kind is TaskKind.CLOSED_SET:
        return option_correct(result, q)
    return accuracy(result.final_answer, q.match_golds(), mode)


@dataclass
class EvalReport:
    dataset: str
    n: int
    accuracy: float
    task_kind: TaskKind
    normalization: Normalization
    str_em: Optional[float] = None
    rouge_l: Optional[float] = None
    per_agent_accuracy: dict[str, float] = field(default_factory=dict)
    ecr: dict[str, float] = field(default_factory=dict)
    uas_size: Optional[int] = None
    n_failed: int = 0
    config_echo: Optional[PipelineConfig] = None

    def __post_init__(self) -> None:
        if self.n <= 0:
            raise UndefinedMetricError("an evaluation report needs at least one query")
        rates = [self.accuracy, self.str_em, self.rouge_l, *self.per_agent_accuracy.values(), *self.ecr.values()]
        for rate in rates:
            if rate is not None and not 0.0 <= rate <= 1.0:
                raise ValueError(f"rate {rate} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "task_kind": self.task_kind.value,
            "n": self.n,
            "n_failed": self.n_failed,
            "accuracy": self.accuracy,
            "str_em": self.str_em,
            "rouge_l": self.rouge_l,
            "rouge_variant": ROUGE_VARIANT if self.rouge_l is not None else None,
            "per_agent_accuracy": self.per_agent_accuracy,
            "ecr": self.ecr,
            "uas_size": self.uas_size,
            "indicator": {"normalization": self.normalization.value, "match": "substring"},
            "config_echo": self.config_echo.to_dict() if self.config_echo else None,
        }

    def table(self) -> str:
        rows = [("dataset", self.dataset), ("task_kind", self.task_kind.value), ("n", str(self.n)),
                ("failed", str(self.n_failed))]
        if self.task_kind is TaskKind.LONG_FORM:
            rows += [("em (str-em)", _pct(self.str_em)), ("rg (ROUGE-L)", _pct(self.rouge_l))]
        else:
            rows.append(("acc", _pct(self.accuracy)))
        rows += [(f"acc[{k}]", _pct(v)) for k, v in self.per_agent_accuracy.items()]
        rows += [(f"ECR[{k}]", _pct(v)) for k, v in self.ecr.items()]
        if self.uas_size is not None:
            rows.append(("uniquely attributable", str(self.uas_size)))
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows) + "\n"


def _pct(x: Optional[float]) -> str:
    return "-" if x is None else f"{100 * x:.1f}"


def evaluate(
    results: Sequence[PipelineResult],
    queries: Sequence[Query],
    *,
    dataset: str = "",
    n_failed: int = 0,
    mode: Normalization = Normalization.CASEFOLD_WS,
    config: Optional[PipelineConfig] = None,
) -> EvalReport:
    """Score results against their queries.

    ``queries`` is the full evaluated set; queries without a result (failed
    runs) count as incorrect. Every result must belong to some query.
    """
    by_id = {q.query_id: q for q in queries}
    unknown = [r.query_id for r in results if r.query_id not in by_id]
    if unknown:
        raise KeyError(f"results reference unknown query ids: {unknown[:5]}")
    n = len(queries)
    if n == 0:
        raise UndefinedMetricError("no queries to evaluate")
    task_kind = queries[0].task_kind
    present = list(results)

    acc = sum(final_correct(r, by_id[r.query_id], mode) for r in present) / n
    em = rg = None
    if task_kind is TaskKind.LONG_FORM:
        em = sum(
            str_em(r.final_answer, by_id[r.query_id].gold_answer_groups or [by_id[r.query_id].gold_answers], mode)
            for r in present
        ) / n
        rg = sum(
            max(rouge_l(r.final_answer, ref) for ref in by_id[r.query_id].gold_answers) for r in present
        ) / n

    per_agent: dict[str, float] = {}
    ecrs: dict[str, float] = {}
    uas = None
    if present:
        per_agent = per_agent_accuracy(present, by_id, mode)
        table = indicator_table(present, by_id, mode)
        ecrs = ecr_table(table)
        uas = len(uniquely_attributable_subset(table))
    return EvalReport(
        dataset=dataset,
        n=n,
        accuracy=acc,
        task_kind=task_kind,
        normalization=Normalization(mode),
        str_em=em,
        rouge_l=rg,
        per_agent_accuracy=per_agent,
        ecr=ecrs,
        uas_size=uas,
        n_failed=n_failed,
        config_echo=config,
    )
