"""Command-line entry point: run, eval, ecr, subset and ablate."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

from .agents import Agents, PromptError, load_prompt_set
from .backend import (
    CacheError,
    CachingBackend,
    CountingBackend,
    HttpBackend,
    MockScriptError,
    mock_script_load,
)
from .config import ConfigError, RunConfig, load_config
from .core import CANONICAL_KINDS, PipelineConfig, PipelineResult, Query, TaskKind
from .data import DatasetError, load_dataset
from .evaluation import (
    Normalization,
    UndefinedMetricError,
    ecr_from_table,
    ecr_table,
    evaluate,
    indicator_table,
    uniquely_attributable_subset,
)
from .pipeline import FailureRecord, Pipeline, read_failures, read_results

logger = logging.getLogger("massrag")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_STORAGE = 0, 2, 3, 4

RESULTS_FILE = "results.jsonl"
FAILURES_FILE = "failures.jsonl"
MANIFEST_FILE = "manifest.json"


class CliError(Exception):
    def __init__(self, code: int, message: str) -> None:
        self.code = code
        super().__init__(message)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, ensure_ascii=False, sort_keys=True) + "\n", encoding="utf-8")


# Wiring ----------------------------------------------------------------------


def _load_config(args: argparse.Namespace) -> RunConfig:
    try:
        cfg = load_config(args.config)
        cfg.apply(
            {
                "backend.kind": getattr(args, "backend", None),
                "backend.mock_script": getattr(args, "mock_script", None),
                "backend.cache_path": getattr(args, "cache", None),
                "run.parallelism": getattr(args, "parallelism", None),
                "run.task_kind": getattr(args, "task_kind", None),
                "pipeline.top_k_docs": getattr(args, "top_k", None),
                "pipeline.answer_agent": getattr(args, "answer_agent", None),
                "pipeline.prompt_set_id": getattr(args, "prompt_set", None),
            }
        )
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    return cfg


def _load_queries(path: str, task_kind: TaskKind) -> list[Query]:
    try:
        return load_dataset(path, task_kind)
    except DatasetError as exc:
        raise CliError(EXIT_DATA, str(exc)) from exc


class Engine:
    """Backend stack, agents and pipeline built from one config."""

    def __init__(self, cfg: RunConfig, out_dir: Optional[Path] = None) -> None:
        b = cfg["backend"]
        try:
            if b["kind"] == "mock":
                inner = mock_script_load(b["mock_script"])
            else:
                inner = HttpBackend(b["base_url"], timeout=b["timeout"])
        except (OSError, MockScriptError) as exc:
            raise CliError(EXIT_CONFIG, f"backend.mock_script: {exc}") from exc
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, f"backend.base_url: {exc}") from exc
        self.live = CountingBackend(inner)
        cache_path = b["cache_path"]
        if cache_path is None and b["kind"] == "cached-http" and out_dir is not None:
            cache_path = str(out_dir / "cache.jsonl")
        self.cache: Optional[CachingBackend] = None
        backend = self.live
        if cache_path is not None or b["kind"] == "cached-http":
            try:
                self.cache = CachingBackend(self.live, cache_path)
                backend = self.cache
            except CacheError as exc:
                logger.warning("%s; continuing without cache", exc)
        p = cfg["pipeline"]
        try:
            prompts = load_prompt_set(p["prompt_set_id"], p["prompt_dir"])
        except PromptError as exc:
            raise CliError(EXIT_CONFIG, f"pipeline.prompt_set_id: {exc}") from exc
        self.agents = Agents(
            backend,
            prompts,
            model_name=b["model_name"],
            decode=cfg.pipeline_config().decode,
            prompt_set_id=p["prompt_set_id"],
        )
        self.pipeline = Pipeline(self.agents)

    def stats(self) -> dict:
        return {
            "live_calls": self.live.total,
            "live_calls_by_role": dict(sorted(self.live.by_role.items())),
            "cache": self.cache.stats.to_dict() if self.cache is not None else None,
            "verbatim_retries": self.agents.verbatim_retries,
        }


def stage_counts(results: Sequence[PipelineResult]) -> dict:
    answered = sum(1 for r in results if r.candidates is not None)
    return {
        "summary": len(results),
        "extraction": len(results),
        "reasoning": len(results),
        "answer": 3 * answered,
        "synthesis": len(results),
        "total_agent_calls": sum(r.agent_calls for r in results),
        "extraction_retries": sum(r.retries for r in results),
    }


def execute_run(
    cfg: RunConfig,
    queries: Sequence[Query],
    out_dir: Path,
    pipeline_cfg: Optional[PipelineConfig] = None,
    engine: Optional[Engine] = None,
) -> tuple[list[PipelineResult], list[FailureRecord], dict]:
    """Run ``queries`` and write results, failures and manifest to ``out_dir``."""
    engine = engine or Engine(cfg, out_dir)
    pcfg = pipeline_cfg or cfg.pipeline_config()
    started = _now()
    live_before = engine.live.total
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "reports").mkdir(exist_ok=True)
        (out_dir / "plotdata").mkdir(exist_ok=True)
        with (out_dir / RESULTS_FILE).open("w", encoding="utf-8") as rf, (out_dir / FAILURES_FILE).open(
            "w", encoding="utf-8"
        ) as ff:
            results, failures = engine.pipeline.run_dataset(
                queries, pcfg, cfg["run"]["parallelism"], results_out=rf, failures_out=ff
            )
    except OSError as exc:
        raise CliError(EXIT_STORAGE, f"cannot write run outputs under {out_dir}: {exc}") from exc
    manifest = {
        "config": cfg.to_dict(),
        "pipeline_config": pcfg.to_dict(),
        "task_kind": cfg.task_kind.value,
        "prompt_set_id": pcfg.prompt_set_id,
        "backend_fingerprint": engine.pipeline.fingerprint,
        "started_at": started,
        "finished_at": _now(),
        "n_queries": len(queries),
        "n_results": len(results),
        "n_failures": len(failures),
        "calls": stage_counts(results),
        "live_calls_this_run": engine.live.total - live_before,
        "backend_stats": engine.stats(),
    }
    try:
        _write_json(out_dir / MANIFEST_FILE, manifest)
    except OSError as exc:
        raise CliError(EXIT_STORAGE, f"cannot write manifest: {exc}") from exc
    return results, failures, manifest


# Subcommands -----------------------------------------------------------------


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    queries = _load_queries(args.dataset, cfg.task_kind)
    out_dir = Path(args.out_dir)
    results, failures, manifest = execute_run(cfg, queries, out_dir)
    print(
        f"{len(results)} results, {len(failures)} failures, "
        f"{manifest['calls']['total_agent_calls']} agent calls, "
        f"{manifest['live_calls_this_run']} live backend calls -> {out_dir}"
    )
    return EXIT_OK


def _task_kind_for(args: argparse.Namespace, results_path: Path) -> TaskKind:
    if getattr(args, "task_kind", None):
        return TaskKind(args.task_kind)
    manifest = results_path.parent / MANIFEST_FILE
    if manifest.exists():
        return TaskKind(json.loads(manifest.read_text(encoding="utf-8"))["task_kind"])
    return TaskKind.ODQA


def _load_joined(args: argparse.Namespace) -> tuple[list[PipelineResult], list[Query], list[FailureRecord], Path]:
    """Results, the queries they cover (including failed ones) and failures."""
    results_path = Path(args.results)
    task_kind = _task_kind_for(args, results_path)
    queries = _load_queries(args.dataset, task_kind)
    try:
        results = read_results(results_path)
    except OSError as exc:
        raise CliError(EXIT_STORAGE, f"cannot read results: {exc}") from exc
    except ValueError as exc:
        raise CliError(EXIT_DATA, str(exc)) from exc
    failures_path = Path(args.failures) if getattr(args, "failures", None) else results_path.parent / FAILURES_FILE
    failures = read_failures(failures_path) if failures_path.exists() else []
    by_id = {q.query_id: q for q in queries}
    unknown = sorted({r.query_id for r in results} - set(by_id))
    if unknown:
        raise CliError(EXIT_DATA, f"results reference query ids absent from the dataset: {unknown[:5]}")
    covered = [r.query_id for r in results] + [f.query_id for f in failures]
    if not results and not failures:
        raise CliError(EXIT_DATA, "undefined metric: the results file is empty")
    evaluated = [by_id[qid] for qid in dict.fromkeys(covered) if qid in by_id]
    return results, evaluated, failures, results_path.parent


def cmd_eval(args: argparse.Namespace) -> int:
    results, queries, failures, run_dir = _load_joined(args)
    out_dir = Path(args.out) if args.out else run_dir
    try:
        report = evaluate(
            results,
            queries,
            dataset=Path(args.dataset).stem,
            n_failed=len(failures),
            mode=Normalization(args.normalization),
        )
    except UndefinedMetricError as exc:
        raise CliError(EXIT_DATA, f"undefined metric: {exc}") from exc
    try:
        _write_json(out_dir / "reports" / "eval.json", report.to_dict())
        (out_dir / "reports" / "eval.txt").write_text(report.table(), encoding="utf-8")
        _write_plot(out_dir / "plotdata" / "per_agent_accuracy.csv", report.per_agent_accuracy)
    except OSError as exc:
        raise CliError(EXIT_STORAGE, f"cannot write report: {exc}") from exc
    print(report.table(), end="")
    return EXIT_OK


def _write_plot(path: Path, values: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["category", "value"])
        for k, v in values.items():
            w.writerow([k, v])


def _coverage(args: argparse.Namespace):
    results, queries, _, run_dir = _load_joined(args)
    if not results:
        raise CliError(EXIT_DATA, "undefined metric: no successful results")
    by_id = {q.query_id: q for q in queries}
    table = indicator_table(results, by_id, Normalization(args.normalization))
    return table, Path(args.out) if args.out else run_dir


def cmd_ecr(args: argparse.Namespace) -> int:
    table, out_dir = _coverage(args)
    subset = sorted(uniquely_attributable_subset(table))
    overall = ecr_table(table)
    on_subset = {}
    if subset:
        sub_table = {qid: table[qid] for qid in subset}
        on_subset = {k.value: ecr_from_table([k], sub_table) for k in CANONICAL_KINDS}
    payload = {
        "n": len(table),
        "indicator": {"normalization": args.normalization, "match": "substring"},
        "ecr": overall,
        "uniquely_attributable_subset": {"size": len(subset), "ecr": on_subset},
    }
    try:
        _write_json(out_dir / "reports" / "ecr.json", payload)
        _write_plot(out_dir / "plotdata" / "ecr.csv", overall)
        _write_plot(out_dir / "plotdata" / "ecr_uas.csv", on_subset)
        _write_subset(out_dir, subset)
    except OSError as exc:
        raise CliError(EXIT_STORAGE, f"cannot write ECR outputs: {exc}") from exc
    width = max(len(k) for k in overall) + 5
    for k, v in overall.items():
        print(f"{'ECR[' + k + ']':<{width}}  {100 * v:.1f}")
    print(f"uniquely attributable subset: {len(subset)} of {len(table)}")
    return EXIT_OK


def _write_subset(out_dir: Path, subset: list[str]) -> None:
    path = out_dir / "reports" / "uas_ids.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{qid}\n" for qid in subset), encoding="utf-8")


def cmd_subset(args: argparse.Namespace) -> int:
    table, out_dir = _coverage(args)
    subset = sorted(uniquely_attributable_subset(table))
    try:
        _write_subset(out_dir, subset)
    except OSError as exc:
        raise CliError(EXIT_STORAGE, f"cannot write subset: {exc}") from exc
    for qid in subset:
        print(qid)
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    queries = _load_queries(args.dataset, cfg.task_kind)
    out_dir = Path(args.out)
    base = cfg.pipeline_config()
    if args.axis == "answer_agent":
        variants = [("answer_agent=on", True), ("answer_agent=off", False)]
        configs = [(name, replace(base, use_answer_agent=on)) for name, on in variants]
    else:
        try:
            ks = [int(v) for v in args.values.split(",")]
        except ValueError:
            raise CliError(EXIT_CONFIG, f"--values must be comma-separated integers, got {args.values!r}") from None
        configs = [(f"top_k={k}", replace(base, top_k_docs=k)) for k in ks]

    engine = Engine(cfg, out_dir)
    rows = []
    for name, pcfg in configs:
        run_dir = out_dir / name.replace("=", "_")
        results, failures, manifest = execute_run(cfg, queries, run_dir, pcfg, engine)
        row = {
            "setting": name,
            "n": len(queries),
            "failures": len(failures),
            "agent_calls": manifest["calls"]["total_agent_calls"],
            "retries": manifest["calls"]["extraction_retries"],
            "live_calls": manifest["live_calls_this_run"],
        }
        if queries:
            report = evaluate(results, queries, n_failed=len(failures), mode=cfg.normalization)
            row["acc"] = report.accuracy
            row["str_em"] = report.str_em
            row["rouge_l"] = report.rouge_l
        rows.append(row)
    try:
        _write_json(out_dir / "reports" / f"ablation_{args.axis}.json", {"axis": args.axis, "rows": rows})
        table = _format_rows(rows)
        (out_dir / "reports" / f"ablation_{args.axis}.txt").write_text(table, encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_STORAGE, f"cannot write ablation report: {exc}") from exc
    print(table, end="")
    return EXIT_OK


def _format_rows(rows: list[dict]) -> str:
    cols = ["setting", "n", "failures", "agent_calls", "retries", "live_calls", "acc", "str_em", "rouge_l"]
    def fmt(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{100 * v:.1f}"
        return str(v)
    cells = [cols] + [[fmt(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    return "".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() + "\n" for row in cells)


# Parser ----------------------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", choices=["http", "mock", "cached-http"])
    p.add_argument("--mock-script", help="mock script file (mock backend)")
    p.add_argument("--cache", help="on-disk response cache file")
    p.add_argument("--parallelism", type=int)
    p.add_argument("--top-k", type=int)
    p.add_argument("--answer-agent", choices=["on", "off", "auto"])
    p.add_argument("--prompt-set")
    p.add_argument("--task-kind", choices=[t.value for t in TaskKind])


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("results", help="results.jsonl from a run")
    p.add_argument("dataset", help="dataset file the run consumed")
    p.add_argument("--failures", help="failures file (default: next to results)")
    p.add_argument("--task-kind", choices=[t.value for t in TaskKind])
    p.add_argument("--normalization", choices=[n.value for n in Normalization], default="casefold_ws")
    p.add_argument("--out", help="output directory (default: the results directory)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="massrag", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the pipeline over a dataset")
    p.add_argument("config")
    p.add_argument("dataset")
    p.add_argument("out_dir")
    _add_run_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="compute accuracy / str-em / ROUGE-L and per-agent accuracy")
    _add_eval_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ecr", help="evidence coverage table and uniquely attributable subset")
    _add_eval_flags(p)
    p.set_defaults(func=cmd_ecr)

    p = sub.add_parser("subset", help="list the uniquely attributable subset")
    _add_eval_flags(p)
    p.set_defaults(func=cmd_subset)

    p = sub.add_parser("ablate", help="compare configurations along one axis")
    p.add_argument("config")
    p.add_argument("dataset")
    p.add_argument("--axis", required=True, choices=["answer_agent", "top_k"])
    p.add_argument("--values", default="5,10", help="top_k values (comma-separated)")
    p.add_argument("--out", required=True)
    _add_run_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
