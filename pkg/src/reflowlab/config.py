"""Run configuration: a versioned YAML document with strict key checking."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .dist2d import ToyTask, balanced_toy_task, default_toy_task, single_gaussian_task
from .errors import ConfigError, SchemaError
from .meanflow import CfgConfig, LossConfig, TimeSamplerConfig
from .nncore import AdamConfig, NetSpec

SCHEMA_VERSION = 1
METHODS = ("re_meanflow", "two_rectified", "meanflow_scratch")
# derived-seed stream ids; appending is fine, renumbering changes every run
STREAMS = {"stage1": 1, "reflow": 2, "stage3": 3, "flow2": 4, "scratch": 5, "eval": 6, "diagnostics": 7}
# keys that change where or how fast a run happens, but not what it computes
_UNHASHED = ("out", "reflow.workers")


@dataclass
class TaskConfig:
    preset: str = "toy"  # toy | toy_conditional | balanced | single_gaussian | custom
    custom: dict[str, Any] | None = None

    def build(self) -> ToyTask:
        if self.preset == "toy":
            return default_toy_task()
        if self.preset == "toy_conditional":
            return default_toy_task(conditional=True)
        if self.preset == "balanced":
            return balanced_toy_task()
        if self.preset == "single_gaussian":
            return single_gaussian_task()
        if self.preset == "custom":
            if not self.custom:
                raise ConfigError("task.preset 'custom' needs a task.custom mapping")
            try:
                return ToyTask.from_dict(self.custom)
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"task.custom is invalid: {exc}") from exc
        raise ConfigError(f"unknown task preset {self.preset!r}")


@dataclass
class NetConfig:
    hidden: list[int] = field(default_factory=lambda: [128, 128, 128])
    activation: str = "tanh"

    def spec(self) -> NetSpec:
        return NetSpec(tuple(self.hidden), self.activation)


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    ema_decay: float = 0.999

    def adam(self) -> AdamConfig:
        return AdamConfig(self.lr, self.beta1, self.beta2, self.eps, self.ema_decay)


@dataclass
class Stage1Config:
    iters: int = 10_000
    class_dropout: float = 0.1


@dataclass
class ReflowConfig:
    n_pairs: int = 100_000
    solver: str = "euler"
    steps: int = 100
    truncate_k: float = 10.0
    workers: int = 1
    chunk_size: int = 4096


@dataclass
class Stage3Config:
    iters: int = 10_000
    velocity_source: str = "conditional"  # or "flow": query the frozen stage-1 model
    class_dropout: float = 0.1


@dataclass
class TimeConfig:
    t_dist: str = "u_shape"
    u_shape_a: float = 4.0
    interval_dist: str = "sigmoid_normal"
    interval_mean: float = -0.8
    interval_std: float = 1.0
    ratio_r_neq_t: float = 0.25
    avoid_enabled: bool = True
    t_hi: float = 0.95
    r_lo: float = 0.4

    def sampler(self) -> TimeSamplerConfig:
        return TimeSamplerConfig(**dataclasses.asdict(self))


@dataclass
class LossSection:
    p: float = 0.5
    c: float = 1e-3

    def loss(self) -> LossConfig:
        return LossConfig(self.p, self.c)


@dataclass
class GuidanceConfig:
    enabled: bool = False
    omega_prime_range: list[float] = field(default_factory=lambda: [1.0, 3.0])
    kappa_rule: str = "zero"
    stage_split: float = 0.5

    def cfg(self) -> CfgConfig | None:
        if not self.enabled:
            return None
        return CfgConfig(tuple(self.omega_prime_range), self.kappa_rule, self.stage_split)


@dataclass
class ComparisonConfig:
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    second_flow_iters: int = 10_000
    scratch_iters: int = 20_000
    curve_points: int = 5
    curve_samples: int = 2000


@dataclass
class EvalConfig:
    n_samples: int = 20_000
    outlier_sigma: float = 4.0
    ed_max_points: int = 4096
    straightness_steps: int = 50
    straightness_samples: int = 500
    lipschitz_pairs: int = 20_000
    heatmap_grid: int = 20
    heatmap_draws: int = 100_000
    hist_bins: int = 30


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    mode: str = "re_meanflow"
    out: str = "runs/toy"
    batch: int = 1024
    task: TaskConfig = field(default_factory=TaskConfig)
    net: NetConfig = field(default_factory=NetConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    reflow: ReflowConfig = field(default_factory=ReflowConfig)
    stage3: Stage3Config = field(default_factory=Stage3Config)
    time_sampler: TimeConfig = field(default_factory=TimeConfig)
    loss: LossSection = field(default_factory=LossSection)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    comparison: ComparisonConfig = field(default_factory=ComparisonConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise SchemaError(f"config schema_version {self.schema_version} is not supported (expected {SCHEMA_VERSION})")
        if self.mode not in METHODS:
            raise ConfigError(f"mode must be one of {METHODS}, got {self.mode!r}")
        bad = [m for m in self.comparison.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown comparison methods {bad}")
        if self.batch <= 0:
            raise ConfigError("batch must be positive")
        if not 0 <= self.reflow.truncate_k < 100:
            raise ConfigError(f"reflow.truncate_k must lie in [0, 100), got {self.reflow.truncate_k}")
        if self.reflow.solver not in ("euler", "heun"):
            raise ConfigError(f"unknown solver {self.reflow.solver!r}")
        if self.reflow.workers < 1:
            raise ConfigError("reflow.workers must be >= 1")
        if self.stage3.velocity_source not in ("conditional", "flow"):
            raise ConfigError(f"unknown stage3.velocity_source {self.stage3.velocity_source!r}")
        if self.net.activation not in ("tanh", "silu"):
            raise ConfigError(f"unknown activation {self.net.activation!r}")
        # building these runs their own range checks
        self.time_sampler.sampler()
        self.guidance.cfg()

    # -- serialization ---------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_yaml())
        return path

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config document must be a mapping")
        if "schema_version" not in data:
            raise SchemaError("config is missing schema_version")
        if data["schema_version"] != SCHEMA_VERSION:
            raise SchemaError(f"config schema_version {data['schema_version']} is not supported (expected {SCHEMA_VERSION})")
        return _build(cls, data, "")

    def config_hash(self) -> str:
        d = self.to_dict()
        for dotted in _UNHASHED:
            node = d
            *parents, leaf = dotted.split(".")
            for p in parents:
                node = node[p]
            node.pop(leaf, None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, **dotted: Any) -> "RunConfig":
        """Copy with ``section.key`` style overrides applied (None values are skipped)."""
        d = self.to_dict()
        for key, val in dotted.items():
            if val is None:
                continue
            node = d
            *parents, leaf = key.split(".")
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[leaf] = val
        return RunConfig.from_dict(d)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return RunConfig.from_dict(data or {})


def _build(cls, data: dict[str, Any], prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'} must be a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, val in data.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, val, f"{prefix}{name}.")
        else:
            kwargs[name] = _coerce(hint, val, prefix + name)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config section {prefix or 'root'}: {exc}") from exc


def _coerce(hint, val, key: str):
    if val is None:
        return None
    origin = typing.get_origin(hint)
    if hint is bool:
        if not isinstance(val, bool):
            raise ConfigError(f"{key} must be true or false")
        return val
    if hint is int:
        if isinstance(val, bool) or not isinstance(val, (int, float)) or float(val) != int(val):
            raise ConfigError(f"{key} must be an integer")
        return int(val)
    if hint is float:
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(val)
    if hint is str:
        if not isinstance(val, str):
            raise ConfigError(f"{key} must be a string")
        return val
    if origin is list:
        if not isinstance(val, (list, tuple)):
            raise ConfigError(f"{key} must be a list")
        (inner,) = typing.get_args(hint)
        return [_coerce(inner, v, f"{key}[{i}]") for i, v in enumerate(val)]
    return val


def stream_seed(master: int, stream: str) -> np.random.SeedSequence:
    """Independent seed sequence for one pipeline stage."""
    return np.random.SeedSequence([int(master), STREAMS[stream]])


def stream_rng(master: int, stream: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(master, stream))


def stream_int(master: int, stream: str) -> int:
    return int(stream_seed(master, stream).generate_state(1, dtype=np.uint32)[0])
