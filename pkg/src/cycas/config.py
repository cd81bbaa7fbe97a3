"""YAML run configuration.

One file holds every section; a single top-level ``seed`` feeds the stream,
the trainer and the sweep defaults. Errors name the offending field and,
when known, the line it sits on.
"""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .evalkit import EvalConfig
from .loss import LossConfig
from .simulator import StreamConfig
from .trainer import Phase, Schedule, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SweepConfig:
    tau_alpha_mean: tuple[float, ...] = (0.9,)
    tau_beta_mean: tuple[float, ...] = (1.0, 0.8, 0.6, 0.4, 0.2)
    memory_size: tuple[int, ...] = (4096,)
    top_k: tuple[int, ...] = (10,)
    seed: tuple[int, ...] = (0,)
    # variance of the per-batch truncated gaussian around each mean
    tau_var: float = 0.01


@dataclass(frozen=True)
class SimulateConfig:
    count: int = 4
    pairs_per_batch: int = 16
    inter_fraction: float = 0.5
    cap_per_side: int = 40


@dataclass(frozen=True)
class RunConfig:
    seed: int
    out_dir: str = "runs/default"
    stream: StreamConfig = field(default_factory=StreamConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)

    def stream_config(self, **overrides) -> StreamConfig:
        return dataclasses.replace(self.stream, **{"seed": self.seed, **overrides})

    def train_config(self, **overrides) -> TrainConfig:
        return dataclasses.replace(self.train, **{"seed": self.seed, **overrides})

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=seed)


SECTIONS = {
    "stream": StreamConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "sweep": SweepConfig,
    "simulate": SimulateConfig,
}
# these come from the root seed and may not be set per section
_ROOT_OWNED = {"stream": {"seed"}, "train": {"seed"}}


# ------------------------------------------------------------------ parsing

def _key_lines(node, prefix="", out=None) -> dict[str, int]:
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = f"{prefix}.{k.value}" if prefix else str(k.value)
            out[path] = k.start_mark.line + 1
            _key_lines(v, path, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            path = f"{prefix}[{i}]"
            out[path] = v.start_mark.line + 1
            _key_lines(v, path, out)
    return out


class _Ctx:
    def __init__(self, source: str, lines: dict[str, int]):
        self.source = source
        self.lines = lines

    def fail(self, path: str, msg: str):
        line, probe = None, path
        while probe and line is None:
            line = self.lines.get(probe)
            probe = probe.rpartition(".")[0] if "." in probe else probe.rpartition("[")[0]
        where = f"{self.source}:{line}" if line else self.source
        raise ConfigError(f"{where}: {path}: {msg}")


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _coerce(value, hint, path: str, ctx: _Ctx):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if hint is int:
        if not _is_int(value):
            ctx.fail(path, f"expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            ctx.fail(path, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            ctx.fail(path, f"expected a string, got {value!r}")
        return value
    if hint is Schedule:
        if not isinstance(value, list):
            ctx.fail(path, "expected a list of phases")
        return Schedule(tuple(_build(Phase, item, f"{path}[{i}]", ctx)
                              for i, item in enumerate(value)))
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path, ctx)
    if origin is tuple:
        if not isinstance(value, list):
            ctx.fail(path, f"expected a list, got {value!r}")
        return tuple(_coerce(v, args[0], f"{path}[{i}]", ctx) for i, v in enumerate(value))
    raise ConfigError(f"{path}: unsupported field type {hint}")


def _build(cls, data, path: str, ctx: _Ctx, skip: frozenset = frozenset()):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        ctx.fail(path, "expected a mapping")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        sub = f"{path}.{key}" if path else str(key)
        if key in skip:
            ctx.fail(sub, "set by the top-level seed; remove it here")
        if key not in fields:
            ctx.fail(sub, f"unknown field (allowed: {', '.join(sorted(set(fields) - skip))})")
    kwargs = {}
    for name, f in fields.items():
        sub = f"{path}.{name}" if path else name
        if name in data:
            kwargs[name] = _coerce(data[name], hints[name], sub, ctx)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            ctx.fail(sub, "missing required field")
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        ctx.fail(path or "<root>", str(exc))


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: malformed YAML: {exc}") from exc
    ctx = _Ctx(source, _key_lines(node) if node is not None else {})
    if data is None:
        data = {}
    if not isinstance(data, dict):
        ctx.fail("<root>", "expected a mapping at the top level")
    unknown = set(data) - {"seed", "out_dir", *SECTIONS}
    if unknown:
        key = sorted(unknown)[0]
        ctx.fail(key, f"unknown section (allowed: seed, out_dir, {', '.join(SECTIONS)})")
    if "seed" not in data:
        ctx.fail("seed", "missing required field")
    seed = _coerce(data["seed"], int, "seed", ctx)
    out_dir = _coerce(data.get("out_dir", "runs/default"), str, "out_dir", ctx)
    sections = {name: _build(cls, data.get(name), name, ctx,
                             frozenset(_ROOT_OWNED.get(name, ())))
                for name, cls in SECTIONS.items()}
    return RunConfig(seed=seed, out_dir=out_dir, **sections)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from exc
    return parse_config(text, str(path))


# ------------------------------------------------------------ serialization

def _plain(value):
    if isinstance(value, Schedule):
        return [_plain(p) for p in value.phases]
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def config_to_dict(cfg: RunConfig) -> dict:
    out = {"seed": cfg.seed, "out_dir": cfg.out_dir}
    for name in SECTIONS:
        section = _plain(getattr(cfg, name))
        for key in _ROOT_OWNED.get(name, ()):
            section.pop(key, None)
        out[name] = section
    return out


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    path = Path(out_dir) / "config.yaml"
    path.write_text(dump_config(cfg))
    return path
