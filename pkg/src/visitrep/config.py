"""Run configuration: a single JSON document that drives every CLI stage.

The file mirrors the per-module config dataclasses key for key, so a run
directory's copy of the config is enough to reproduce the run. Unknown keys
are rejected at every level rather than silently ignored.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

from .cohort import TASK_CODES, TASK_LOS, TASK_MORTALITY, TASK_READMISSION
from .code_embedder import CodeEmbedderConfig
from .errors import ValidationError
from .evaluation import EvalConfig
from .synth import SynthConfig
from .tasks import TaskHeadConfig
from .text_embedder import SummarizerConfig

TASK_ALIASES = {
    "readmission": TASK_READMISSION,
    "mortality": TASK_MORTALITY,
    "los": TASK_LOS,
    "codes": TASK_CODES,
}


@dataclass(frozen=True)
class Paths:
    cohort: str = ""
    group_map: str = ""
    out: str = "run"


@dataclass(frozen=True)
class PreprocessConfig:
    min_code_freq: int = 5
    min_age: int = 18
    min_visits: int = 1

    def validate(self) -> None:
        if self.min_code_freq < 1:
            raise ValidationError(
                f"preprocess: min_code_freq must be >= 1, got {self.min_code_freq}"
            )
        if self.min_visits < 1:
            raise ValidationError(f"preprocess: min_visits must be >= 1, got {self.min_visits}")


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def _section_to_json(cfg) -> dict:
    return {f.name: _plain(getattr(cfg, f.name)) for f in fields(cfg)}


def _section_from_json(cls, obj, where: str, pair_tuples=(), int_tuples=()):
    if not isinstance(obj, dict):
        raise ValidationError(f"{where}: expected an object, got {type(obj).__name__}")
    unknown = set(obj) - {f.name for f in fields(cls)}
    if unknown:
        raise ValidationError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = dict(obj)
    for name in pair_tuples:
        if name in kwargs:
            kwargs[name] = tuple(tuple(pair) for pair in kwargs[name])
    for name in int_tuples:
        if name in kwargs:
            kwargs[name] = tuple(kwargs[name])
    return cls(**kwargs)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    task: str = "mortality"
    paths: Paths = field(default_factory=Paths)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    code_embedder: CodeEmbedderConfig = field(default_factory=CodeEmbedderConfig)
    summarizer: SummarizerConfig = field(default_factory=SummarizerConfig)
    task_head: TaskHeadConfig = field(default_factory=TaskHeadConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        if self.task not in TASK_ALIASES:
            raise ValidationError(
                f"config: unknown task {self.task!r}, expected one of {sorted(TASK_ALIASES)}"
            )
        self.preprocess.validate()
        self.synth.validate()
        self.code_embedder.validate()
        self.summarizer.validate()
        self.task_head.validate()
        self.eval.validate()

    @property
    def internal_task(self) -> str:
        return TASK_ALIASES[self.task]

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "task": self.task,
            "paths": _section_to_json(self.paths),
            "preprocess": _section_to_json(self.preprocess),
            "synth": _section_to_json(self.synth),
            "code_embedder": _section_to_json(self.code_embedder),
            "summarizer": _section_to_json(self.summarizer),
            "task_head": _section_to_json(self.task_head),
            "eval": _section_to_json(self.eval),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        if not isinstance(obj, dict):
            raise ValidationError(f"config: expected an object, got {type(obj).__name__}")
        known = {
            "seed", "task", "paths", "preprocess", "synth",
            "code_embedder", "summarizer", "task_head", "eval",
        }
        unknown = set(obj) - known
        if unknown:
            raise ValidationError(f"config: unknown keys {sorted(unknown)}")
        kwargs = {}
        if "seed" in obj:
            kwargs["seed"] = int(obj["seed"])
        if "task" in obj:
            kwargs["task"] = obj["task"]
        if "paths" in obj:
            kwargs["paths"] = _section_from_json(Paths, obj["paths"], "config.paths")
        if "preprocess" in obj:
            kwargs["preprocess"] = _section_from_json(
                PreprocessConfig, obj["preprocess"], "config.preprocess"
            )
        if "synth" in obj:
            kwargs["synth"] = _section_from_json(
                SynthConfig, obj["synth"], "config.synth", pair_tuples=("vocab_sizes",)
            )
        if "code_embedder" in obj:
            kwargs["code_embedder"] = _section_from_json(
                CodeEmbedderConfig, obj["code_embedder"], "config.code_embedder"
            )
        if "summarizer" in obj:
            kwargs["summarizer"] = _section_from_json(
                SummarizerConfig, obj["summarizer"], "config.summarizer"
            )
        if "task_head" in obj:
            kwargs["task_head"] = _section_from_json(
                TaskHeadConfig, obj["task_head"], "config.task_head"
            )
        if "eval" in obj:
            kwargs["eval"] = _section_from_json(
                EvalConfig, obj["eval"], "config.eval", int_tuples=("recall_ks",)
            )
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from exc
    return RunConfig.from_json(obj)


def write_run_config(config: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_json(), fh, sort_keys=True, indent=2)
        fh.write("\n")
