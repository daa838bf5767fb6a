"""Experiment configuration: YAML file -> validated frozen dataclasses.

Unknown keys are rejected anywhere in the tree; errors name the dotted key path
and, when the value came from a file, its line number.
"""

from __future__ import annotations

import copy
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError
from .ipod_core import IpodTolerances

SCHEMA_VERSION = 1
EXPERIMENT_KINDS = ("linear-assimilation", "burgers-assimilation", "convergence-suite", "ipod-bench")


@dataclass(frozen=True)
class ProblemConfig:
    h: float = 1.0 / 20.0
    tau: float = 1.0 / 200.0
    T: float = 1.0
    beta_plus: float = 1.0
    beta_minus: float = 0.5
    forcing: str = "interface"
    noise_sigma: float = 1.0 / 20.0

    _choices = {"forcing": ("interface", "zero", "manufactured")}


@dataclass(frozen=True)
class BurgersConfig:
    n_cells: int = 64
    tau: float = 1.0 / 100.0
    T: float = 0.5
    nu: float = 0.05
    noise_sigma: float = 0.0


@dataclass(frozen=True)
class DescentConfig:
    gamma: float = 1.0 / 2000.0
    kappa: float = 1.0
    tol_sd: float = 1e-5
    termination_mode: str = "grad-norm"
    max_iters: int = 5000
    mode: str = "both"
    reference_gradient: bool = False
    log_every: int = 50

    _choices = {
        "termination_mode": ("grad-norm", "objective-decrement"),
        "mode": ("exact", "inexact", "both"),
    }


@dataclass(frozen=True)
class CompressionConfig:
    tol_p: float = 1e-8
    tol_sv: float = 1e-8
    tol_o: float = 1e-12
    reorth_cap: int = 5
    weight: str = "L2-mass"

    _choices = {"weight": ("L2-mass", "H1")}

    def tolerances(self) -> IpodTolerances:
        return IpodTolerances(tol_p=self.tol_p, tol_sv=self.tol_sv, tol_o=self.tol_o, reorth_cap=self.reorth_cap)


@dataclass(frozen=True)
class SuiteConfig:
    n_instances: int = 10000
    k: int = 200
    workers: int = 1


@dataclass(frozen=True)
class BenchConfig:
    m: int = 120
    n: int = 64
    rank: int = 8
    noise: float = 1e-11
    n_streams: int = 10
    tolerances: tuple[float, ...] = (1e-10, 1e-8, 1e-6)
    weight: str = "mass"

    _choices = {"weight": ("identity", "mass")}


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    kind: str
    schema_version: int = SCHEMA_VERSION
    output_dir: str = "runs"
    seed: int = 0
    problem: ProblemConfig | None = None
    burgers: BurgersConfig | None = None
    descent: DescentConfig | None = None
    compression: CompressionConfig | None = None
    suite: SuiteConfig | None = None
    bench: BenchConfig | None = None

    _choices = {"kind": EXPERIMENT_KINDS}

    def section(self, name: str) -> Any:
        """Named section, or its defaults when the file omitted it."""
        value = getattr(self, name)
        if value is None:
            return _SECTION_TYPES[name]()
        return value


_SECTION_TYPES: dict[str, type] = {
    "problem": ProblemConfig,
    "burgers": BurgersConfig,
    "descent": DescentConfig,
    "compression": CompressionConfig,
    "suite": SuiteConfig,
    "bench": BenchConfig,
}

_NONNEGATIVE = {"gamma", "noise_sigma", "tol_p", "tol_sv", "noise"}
_UNCHECKED = {"seed", "schema_version"}

_REQUIRED_SECTIONS = {
    "linear-assimilation": ("problem", "descent"),
    "burgers-assimilation": ("burgers", "descent"),
    "convergence-suite": ("suite",),
    "ipod-bench": ("bench",),
}


# ---- Line tracking ----
def _line_map(text: str) -> dict[str, int]:
    """Dotted key path -> 1-based source line of the key."""
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError:
        return {}
    lines: dict[str, int] = {}

    def walk(node: yaml.Node, prefix: str) -> None:
        if isinstance(node, yaml.MappingNode):
            for key_node, value_node in node.value:
                path = f"{prefix}.{key_node.value}" if prefix else str(key_node.value)
                lines[path] = key_node.start_mark.line + 1
                walk(value_node, path)

    if root is not None:
        walk(root, "")
    return lines


# ---- Validation ----
def _yaml11_float(value: Any) -> Any:
    """YAML 1.1 reads exponent literals without a dot (1e-8) as strings."""
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    return value


def _coerce(value: Any, tp: Any, path: str, lines: Mapping[str, int]) -> Any:
    line = lines.get(path)
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and type(None) in args):
        inner = [a for a in args if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, inner[0], path, lines)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, Mapping):
            raise ConfigError(f"expected a mapping, got {type(value).__name__}", key=path, line=line)
        return _build(tp, value, path, lines)
    if origin is tuple:
        if not isinstance(value, (list, tuple)) or not value:
            raise ConfigError("expected a non-empty list", key=path, line=line)
        return tuple(_coerce(v, args[0], f"{path}[{i}]", lines) for i, v in enumerate(value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", key=path, line=line)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", key=path, line=line)
        return value
    if tp is float:
        value = _yaml11_float(value)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", key=path, line=line)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", key=path, line=line)
        return value
    raise ConfigError(f"unsupported field type {tp!r}", key=path, line=line)


def _build(cls: type, data: Mapping[str, Any], prefix: str, lines: Mapping[str, int]) -> Any:
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            path = f"{prefix}.{key}" if prefix else str(key)
            raise ConfigError("unknown key", key=path, line=lines.get(path))
    kwargs: dict[str, Any] = {}
    for f in dataclasses.fields(cls):
        path = f"{prefix}.{f.name}" if prefix else f.name
        if f.name not in data:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise ConfigError("required key missing", key=path, line=lines.get(prefix) if prefix else None)
            continue
        kwargs[f.name] = _coerce(data[f.name], hints[f.name], path, lines)
    choices: dict[str, tuple[str, ...]] = getattr(cls, "_choices", {})
    for name, allowed in choices.items():
        if name in kwargs and kwargs[name] not in allowed:
            path = f"{prefix}.{name}" if prefix else name
            raise ConfigError(f"{kwargs[name]!r} is not one of {', '.join(allowed)}", key=path, line=lines.get(path))
    for name, value in kwargs.items():
        if name in _UNCHECKED or isinstance(value, bool) or not isinstance(value, (int, float)):
            continue
        path = f"{prefix}.{name}" if prefix else name
        if name in _NONNEGATIVE:
            if value < 0:
                raise ConfigError("must be >= 0", key=path, line=lines.get(path))
        elif value <= 0:
            raise ConfigError("must be > 0", key=path, line=lines.get(path))
    return cls(**kwargs)


def from_mapping(data: Any, lines: Mapping[str, int] | None = None) -> ExperimentConfig:
    lines = lines or {}
    if not isinstance(data, Mapping):
        raise ConfigError("top level must be a mapping")
    cfg: ExperimentConfig = _build(ExperimentConfig, data, "", lines)
    if cfg.schema_version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema version {cfg.schema_version} (expected {SCHEMA_VERSION})", key="schema_version", line=lines.get("schema_version"))
    if not cfg.name or "/" in cfg.name or cfg.name.startswith("."):
        raise ConfigError("name must be a plain directory name", key="name", line=lines.get("name"))
    for section in _REQUIRED_SECTIONS[cfg.kind]:
        if getattr(cfg, section) is None:
            raise ConfigError(f"section required for kind {cfg.kind!r}", key=section)
    if cfg.problem is not None:
        n = round(1.0 / cfg.problem.h)
        if abs(n * cfg.problem.h - 1.0) > 1e-12:
            raise ConfigError("h must divide 1 so the interface x=1 lies on mesh edges", key="problem.h", line=lines.get("problem.h"))
    if cfg.descent is not None and cfg.descent.mode != "exact" and cfg.kind.endswith("assimilation") and cfg.compression is None:
        raise ConfigError(f"descent.mode {cfg.descent.mode!r} needs a compression section", key="compression")
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    src = Path(path)
    try:
        text = src.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {src}: {e}")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigError(f"YAML parse error: {getattr(e, 'problem', e)}", line=mark.line + 1 if mark else None)
    return from_mapping(data, _line_map(text))


def to_mapping(cfg: ExperimentConfig) -> dict[str, Any]:
    """Normalized mapping; ``from_mapping(to_mapping(c)) == c``. Absent sections are dropped."""

    def norm(obj: Any) -> Any:
        if dataclasses.is_dataclass(obj):
            return {f.name: norm(getattr(obj, f.name)) for f in dataclasses.fields(obj) if getattr(obj, f.name) is not None}
        if isinstance(obj, tuple):
            return [norm(v) for v in obj]
        return obj

    return norm(cfg)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_mapping(cfg), sort_keys=True)


def parse_override(spec: str) -> tuple[str, list[Any]]:
    """``key.path=v1,v2,...`` -> (key path, parsed values)."""
    if "=" not in spec:
        raise ConfigError(f"override {spec!r} must look like key=v1,v2")
    key, _, raw = spec.partition("=")
    key = key.strip()
    values = [_yaml11_float(yaml.safe_load(v.strip())) for v in raw.split(",") if v.strip()]
    if not key or not values:
        raise ConfigError(f"override {spec!r} must name a key and at least one value")
    return key, values


def with_override(cfg: ExperimentConfig, key: str, value: Any, *, name_suffix: str | None = None) -> ExperimentConfig:
    data = copy.deepcopy(to_mapping(cfg))
    node = data
    parts = key.split(".")
    for part in parts[:-1]:
        child = node.get(part)
        if child is None:
            child = {}
            node[part] = child
        if not isinstance(child, dict):
            raise ConfigError("cannot override inside a scalar", key=key)
        node = child
    node[parts[-1]] = value
    if name_suffix is not None:
        data["name"] = f"{cfg.name}-{name_suffix}"
    return from_mapping(data)
