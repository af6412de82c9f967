"""Flat ``key = value`` run configuration files.

Blank lines and ``#`` comments are ignored. Every key must be one of
:data:`KEYS`; anything else is an error. Ranges are written ``lo,hi``.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .model import NetworkSpec, SpecError, format_stages, paper_classification_spec, paper_segmentation_spec
from .train import TrainConfig

__all__ = [
    "ConfigError",
    "KEYS",
    "TOY_CLASSIFICATION_STAGES",
    "TOY_SEGMENTATION_STAGES",
    "parse_config_text",
    "load_config",
    "build_run_config",
    "render_config",
    "normalize_task",
]

TOY_CLASSIFICATION_STAGES = (
    "FDS(N=64,r=0.2,K=32,C=32)-DPCT(M=4)-FDS(N=16,r=0.4,K=32,C=64)-DPCT(M=4)"
    "-POOL(C=128)-DPCT(M=4)-FC(C=64)-FC(C=32)-FC(C=3)"
)
TOY_SEGMENTATION_STAGES = (
    "FDS(N=128,r=0.2,K=32,C=32)-DPCT(M=2)-FDS(N=32,r=0.4,K=32,C=64)-DPCT(M=2)-POOL(C=128)-DPCT(M=2)"
    "-FUS(C=64)-DPCT(M=2)-FUS(C=32)-DPCT(M=2)-FUS(C=32)-DPCT(M=2)-FC(C=32)-FC(C=2)"
)

# key -> (default, description); a default of None means "derived"
KEYS: dict[str, tuple[object, str]] = {
    "task": (None, "classification | segmentation (defaults to the --task flag)"),
    "stages": (None, "stage string, e.g. FDS(N=64,r=0.2,K=32,C=32)-DPCT(M=4)-...; defaults to the published layout"),
    "n_classes": (None, "class or part count; defaults to the dataset's label vocabulary size"),
    "in_channels": (3, "input feature width (xyz)"),
    "attention": ("both", "none | pwsa | cwsa | both"),
    "head_dropout": (0.4, "dropout between FC stages"),
    **{
        f.name: (f.default, "training hyperparameter")
        for f in dataclasses.fields(TrainConfig)
    },
}


class ConfigError(ValueError):
    pass


def normalize_task(task: str) -> str:
    aliases = {"cls": "classification", "classification": "classification", "seg": "segmentation", "segmentation": "segmentation"}
    try:
        return aliases[task]
    except KeyError:
        raise ConfigError(f"unknown task {task!r}") from None


def parse_config_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def load_config(path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def _convert(key: str, value: str, like):
    try:
        if isinstance(like, tuple):
            parts = [float(v) for v in value.split(",")]
            if len(parts) != 2:
                raise ValueError("expected lo,hi")
            return tuple(parts)
        if isinstance(like, bool):
            return value.lower() in ("1", "true", "yes")
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    return value


def build_run_config(values: dict[str, str], task: str | None = None, n_classes: int | None = None):
    """Turn parsed values into ``(NetworkSpec, TrainConfig)``.

    Segmentation runs default to the segmentation schedule (lr 0.0005,
    halved every 20 epochs, 80 epochs).
    """
    cfg_task = values.get("task")
    if cfg_task and task and normalize_task(cfg_task) != normalize_task(task):
        raise ConfigError(f"config task {cfg_task!r} disagrees with requested task {task!r}")
    task = normalize_task(cfg_task or task or "classification")
    if "n_classes" in values:
        n_classes = _convert("n_classes", values["n_classes"], 0)
    train_kw = {
        f.name: _convert(f.name, values[f.name], f.default)
        for f in dataclasses.fields(TrainConfig)
        if f.name in values
    }
    try:
        tc = TrainConfig.for_segmentation(**train_kw) if task == "segmentation" else TrainConfig(**train_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if "stages" in values:
        stages = values["stages"]
    else:
        default = paper_classification_spec() if task == "classification" else paper_segmentation_spec()
        stages = default.stages
        if n_classes is not None:
            stages = format_stages(stages[:-1]) + f"-FC(C={n_classes})"
    if n_classes is None:
        raise ConfigError("n_classes is unknown; set it in the config")
    try:
        spec = NetworkSpec(
            stages,
            task,
            n_classes,
            _convert("in_channels", values.get("in_channels", "3"), 0),
            values.get("attention", "both"),
            _convert("head_dropout", values.get("head_dropout", "0.4"), 0.0),
        )
        spec.validate()
    except SpecError as exc:
        raise ConfigError(f"network: {exc}") from None
    return spec, tc


def render_config(spec: NetworkSpec, tc: TrainConfig) -> str:
    lines = [
        f"task = {spec.task}",
        f"stages = {format_stages(spec.stages)}",
        f"n_classes = {spec.n_classes}",
        f"in_channels = {spec.in_channels}",
        f"attention = {spec.attention}",
        f"head_dropout = {spec.head_dropout!r}",
    ]
    for f in dataclasses.fields(tc):
        v = getattr(tc, f.name)
        lines.append(f"{f.name} = {','.join(repr(x) for x in v) if isinstance(v, tuple) else repr(v)}")
    return "\n".join(lines) + "\n"
