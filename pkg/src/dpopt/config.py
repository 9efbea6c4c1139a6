"""Run configuration: one YAML file per run, validated before anything executes.

Example::

    task: sst2                 # built-in name, or {name, classes, initial_instruction}
    data:
      train: train.jsonl       # paths are relative to this file
      validation: val.jsonl    # or validation_fraction: 0.1
      test: test.jsonl
    engine:
      mode: dp-opt
      n_candidates: 5
      max_tokens: 50
    backend:
      kind: ngram
      corpus: corpus.txt
      order: 3
    output: report.json
    seed: 0
"""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, create_model, model_validator

from dpopt.backends import EndpointConfig, HttpBackend, NgramBackend, TableBackend
from dpopt.engine import EngineConfig
from dpopt.templates import BUILTIN_TASKS, TaskSpec

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Configuration could not be read or failed validation."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _engine_section():
    hints = typing.get_type_hints(EngineConfig)
    fields = {f.name: (hints[f.name], f.default) for f in dataclasses.fields(EngineConfig)}
    fields["mode"] = (Literal["dp-opt", "opt", "dln-1"], EngineConfig.mode)
    return create_model("EngineSection", __config__=ConfigDict(extra="forbid"), **fields)


EngineSection = _engine_section()


class TaskSection(_Strict):
    name: str
    classes: list[str] = Field(min_length=1)
    initial_instruction: str


class DataSection(_Strict):
    train: Optional[str] = None
    validation: Optional[str] = None
    validation_fraction: float = Field(0.1, gt=0, lt=1)
    test: Optional[str] = None


class EndpointSection(_Strict):
    base_url: str
    model: str
    api_key_env: str = "DPOPT_API_KEY"
    timeout: float = Field(30.0, gt=0)
    max_attempts: int = Field(5, ge=1)
    backoff_initial: float = Field(0.5, ge=0)
    backoff_factor: float = Field(2.0, ge=1)
    max_concurrency: int = Field(4, ge=1)
    vocab_size: int = Field(50000, ge=2)
    stop: Optional[list[str]] = None
    label_max_tokens: Optional[int] = None


class BackendSection(_Strict):
    kind: Literal["ngram", "table", "http"]
    corpus: Optional[str] = None
    order: int = Field(3, ge=1)
    repeat: int = Field(1, ge=1)
    table: Optional[str] = None
    endpoint: Optional[EndpointSection] = None

    @model_validator(mode="after")
    def _check_kind(self):
        need = {"ngram": "corpus", "table": "table", "http": "endpoint"}[self.kind]
        if getattr(self, need) is None:
            raise ValueError(f"backend kind {self.kind!r} requires field {need!r}")
        return self


class IclSection(_Strict):
    shots: int = Field(5, ge=0)


class RunConfig(_Strict):
    version: int = CONFIG_VERSION
    task: Union[str, TaskSection]
    data: DataSection = DataSection()
    engine: EngineSection = EngineSection()
    backend: BackendSection
    eval_backend: Optional[BackendSection] = None
    icl: IclSection = IclSection()
    output: Optional[str] = None
    seed: int = 0
    # reject dp-opt runs whose nominal delta mass N*L*delta0 exceeds the budget
    preflight: bool = True

    @model_validator(mode="after")
    def _check(self):
        if self.version != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {self.version}")
        if isinstance(self.task, str) and self.task not in BUILTIN_TASKS:
            raise ValueError(f"unknown task {self.task!r}; built-ins: {sorted(BUILTIN_TASKS)}")
        return self

    # populated by load_config
    _base_dir: Path = Path(".")

    def resolve(self, path: Optional[str]) -> Optional[Path]:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else self._base_dir / p

    def task_spec(self) -> TaskSpec:
        if isinstance(self.task, str):
            return BUILTIN_TASKS[self.task]
        return TaskSpec(self.task.name, tuple(self.task.classes), self.task.initial_instruction)

    def engine_config(self, **overrides) -> EngineConfig:
        fields = self.engine.model_dump()
        fields["seed"] = self.seed
        fields.update(overrides)
        return EngineConfig(**fields)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    try:
        cfg = RunConfig.model_validate(raw)
        cfg.engine_config()  # surfaces cross-field engine errors now
    except ValidationError as exc:
        lines = [f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in exc.errors()]
        raise ConfigError(f"{path}: invalid config\n  " + "\n  ".join(lines)) from None
    except ValueError as exc:
        raise ConfigError(f"{path}: invalid config: {exc}") from None
    cfg._base_dir = path.resolve().parent
    return cfg


def build_backend(section: BackendSection, resolve=lambda p: Path(p)):
    """Instantiate the backend a config section describes."""
    if section.kind == "ngram":
        text = Path(resolve(section.corpus)).read_text(encoding="utf-8")
        lines = [ln for ln in text.splitlines() if ln.strip()]
        return NgramBackend.train(lines * section.repeat, section.order)
    if section.kind == "table":
        return TableBackend.from_json(resolve(section.table))
    return HttpBackend(EndpointConfig(**section.endpoint.model_dump()))
