"""Run configuration: a nested YAML file, validated key by key."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from .core import DecodeParams, PipelineConfig, TaskKind, ValidationError
from .evaluation import Normalization
from .pipeline import resolve_answer_agent

DEFAULTS: dict[str, dict[str, Any]] = {
    "backend": {
        "kind": "mock",
        "mock_script": None,
        "base_url": None,
        "model_name": "",
        "cache_path": None,
        "timeout": 120.0,
    },
    "pipeline": {
        "top_k_docs": 10,
        "answer_agent": "auto",
        "prompt_set_id": "v1",
        "prompt_dir": None,
        "max_context_chars": 24000,
    },
    "decode": {"temperature": 0.0, "top_p": 1.0, "max_tokens": 512},
    "run": {"task_kind": "odqa", "parallelism": 1},
    "eval": {"normalization": "casefold_ws"},
}

BACKEND_KINDS = ("http", "mock", "cached-http")
_PATH_KEYS = (("backend", "mock_script"), ("backend", "cache_path"), ("pipeline", "prompt_dir"))


class ConfigError(ValueError):
    def __init__(self, key: str, message: str) -> None:
        self.key = key
        super().__init__(f"config key {key!r}: {message}")


@dataclass
class RunConfig:
    data: dict[str, dict[str, Any]]

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.data[section]

    @property
    def task_kind(self) -> TaskKind:
        return TaskKind(self.data["run"]["task_kind"])

    @property
    def normalization(self) -> Normalization:
        return Normalization(self.data["eval"]["normalization"])

    def pipeline_config(self, task_kind: Optional[TaskKind] = None) -> PipelineConfig:
        p, d = self.data["pipeline"], self.data["decode"]
        task_kind = task_kind or self.task_kind
        return PipelineConfig(
            top_k_docs=p["top_k_docs"],
            use_answer_agent=resolve_answer_agent(p["answer_agent"], task_kind),
            decode=DecodeParams(d["temperature"], d["top_p"], d["max_tokens"]),
            prompt_set_id=p["prompt_set_id"],
            max_context_chars=p["max_context_chars"],
        )

    def apply(self, overrides: dict[str, Any]) -> None:
        """Set ``section.key`` values (None entries are ignored), then revalidate."""
        for path, value in overrides.items():
            if value is None:
                continue
            section, key = path.split(".")
            if key not in DEFAULTS.get(section, {}):
                raise ConfigError(path, "unknown key")
            self.data[section][key] = value
        _validate(self.data)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)


def _check_type(key: str, value: Any, default: Any) -> None:
    if default is None or value is None:
        return
    if isinstance(default, bool) or isinstance(value, bool):
        ok = isinstance(value, type(default))
    elif isinstance(default, float):
        ok = isinstance(value, (int, float))
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(key, f"expected {type(default).__name__}, got {value!r}")


def _validate(data: dict) -> None:
    b, p, r = data["backend"], data["pipeline"], data["run"]
    if b["kind"] not in BACKEND_KINDS:
        raise ConfigError("backend.kind", f"must be one of {BACKEND_KINDS}")
    if b["kind"] == "mock" and not b["mock_script"]:
        raise ConfigError("backend.mock_script", "required for the mock backend")
    if isinstance(p["answer_agent"], bool):
        p["answer_agent"] = "on" if p["answer_agent"] else "off"
    if p["answer_agent"] not in ("on", "off", "auto"):
        raise ConfigError("pipeline.answer_agent", "must be on, off or auto")
    for key in ("top_k_docs", "max_context_chars"):
        if p[key] < 1:
            raise ConfigError(f"pipeline.{key}", "must be positive")
    if r["parallelism"] < 1:
        raise ConfigError("run.parallelism", "must be positive")
    try:
        TaskKind(r["task_kind"])
    except ValueError:
        raise ConfigError("run.task_kind", f"must be one of {[t.value for t in TaskKind]}") from None
    try:
        Normalization(data["eval"]["normalization"])
    except ValueError:
        raise ConfigError("eval.normalization", f"must be one of {[n.value for n in Normalization]}") from None
    d = data["decode"]
    try:
        DecodeParams(d["temperature"], d["top_p"], d["max_tokens"])
    except ValidationError as exc:
        raise ConfigError("decode", str(exc)) from None


def parse_config(raw: Any, base_dir: Union[str, Path, None] = None) -> RunConfig:
    """Merge ``raw`` over the defaults; unknown keys and bad values raise ConfigError.

    Relative file paths are resolved against ``base_dir``.
    """
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    data = copy.deepcopy(DEFAULTS)
    for section, values in raw.items():
        if section not in DEFAULTS:
            raise ConfigError(str(section), "unknown section")
        if values is None:
            continue
        if not isinstance(values, dict):
            raise ConfigError(section, "must be a mapping")
        for key, value in values.items():
            path = f"{section}.{key}"
            if key not in DEFAULTS[section]:
                raise ConfigError(path, "unknown key")
            if path != "pipeline.answer_agent":  # YAML reads bare on/off as booleans
                _check_type(path, value, DEFAULTS[section][key])
            data[section][key] = value
    if base_dir is not None:
        for section, key in _PATH_KEYS:
            value = data[section][key]
            if value and not Path(value).is_absolute():
                data[section][key] = str(Path(base_dir) / value)
    _validate(data)
    return RunConfig(data)


def load_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"invalid YAML in {path}: {exc}") from exc
    return parse_config(raw, base_dir=path.parent)
