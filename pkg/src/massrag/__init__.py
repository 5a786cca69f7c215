"""Multi-agent evidence filtering and answer synthesis for retrieval-augmented QA."""

from .agents import Agents, load_prompt_set, parse_option_label, verbatim_ok
from .backend import CachingBackend, ChatRequest, ChatResponse, HttpBackend, MockBackend, mock_script_load
from .core import (
    CandidateAnswer,
    DecodeParams,
    Document,
    FilteredResponse,
    FilterKind,
    PipelineConfig,
    PipelineResult,
    Query,
    TaskKind,
    canonical_order,
)
from .data import load_dataset, normalize_docs
from .evaluation import accuracy, ecr, evaluate, rouge_l, str_em, uniquely_attributable_subset
from .pipeline import Pipeline, select_top_k

__all__ = [
    "Agents",
    "CachingBackend",
    "CandidateAnswer",
    "ChatRequest",
    "ChatResponse",
    "DecodeParams",
    "Document",
    "FilterKind",
    "FilteredResponse",
    "HttpBackend",
    "MockBackend",
    "Pipeline",
    "PipelineConfig",
    "PipelineResult",
    "Query",
    "TaskKind",
    "accuracy",
    "canonical_order",
    "ecr",
    "evaluate",
    "load_dataset",
    "load_prompt_set",
    "mock_script_load",
    "normalize_docs",
    "parse_option_label",
    "rouge_l",
    "select_top_k",
    "str_em",
    "uniquely_attributable_subset",
    "verbatim_ok",
]
