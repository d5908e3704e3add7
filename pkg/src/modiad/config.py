"""Run configuration: nested sections, strict keys, canonical YAML round-trip."""

import dataclasses
import math
import types
import typing
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError
from .scheduler import POLICIES


@dataclass(frozen=True)
class TopologyConfig:
    clients: int = 5
    classes: int = 10
    per_client: int = 4
    share: int = 2


@dataclass(frozen=True)
class DefectSection:
    min_size: int = 2
    max_size: typing.Optional[int] = None
    offset_magnitude: float = 3.0


@dataclass(frozen=True)
class EvalSection:
    val_normal: int = 16
    val_anomalous: int = 16
    test_normal: int = 48
    test_anomalous: int = 48


@dataclass(frozen=True)
class StreamConfig:
    packet_cap: int = 10
    dirichlet_alpha: float = 1.0
    pool_per_pair: int = 250
    d2d: int = 16
    d3d: int = 12
    grid: int = 8
    noise_sigma: float = 0.05
    cond_bound: float = 4.0
    mean_scale: float = 0.5
    offset_scale: float = 0.5
    latent_dim: typing.Optional[int] = 12
    defect: DefectSection = field(default_factory=DefectSection)
    eval: EvalSection = field(default_factory=EvalSection)


@dataclass(frozen=True)
class ModelConfig:
    hidden: typing.Optional[int] = None
    depth: int = 2


@dataclass(frozen=True)
class TrainingSection:
    eta: float = 0.3
    tau_max: int = 5
    batch: typing.Optional[int] = None


@dataclass(frozen=True)
class SchedulerConfig:
    policy: str = "smg"
    alpha: float = 0.5
    beta: float = 0.5
    epsilon: float = 1e-8


@dataclass(frozen=True)
class BudgetConfig:
    per_client: typing.Union[int, list] = 2
    global_: int = 5


@dataclass(frozen=True)
class LoraSection:
    enabled: bool = False
    t_warm: int = 10
    gamma: float = 0.5
    rank: int = 4
    adapt_biases: bool = False
    init_scale: float = 2.0
    max_degradation: float = 0.05


@dataclass(frozen=True)
class SeedConfig:
    master: int = 0
    repetitions: int = 5


@dataclass(frozen=True)
class MetricsConfig:
    fpr_limits: list = field(default_factory=lambda: [0.1, 0.05])
    score_reduction: str = "max"
    connectivity: int = 4


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "runs/default"
    format: str = "csv"


@dataclass(frozen=True)
class RunConfig:
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingSection = field(default_factory=TrainingSection)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    budgets: BudgetConfig = field(default_factory=BudgetConfig)
    lora: LoraSection = field(default_factory=LoraSection)
    rounds: int = 50
    seeds: SeedConfig = field(default_factory=SeedConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        validate(self)

    @property
    def hidden(self) -> int:
        s = self.stream
        return self.model.hidden if self.model.hidden is not None else (s.d2d + s.d3d) // 2

    def per_client_budgets(self) -> tuple:
        b = self.budgets.per_client
        return tuple(b) if isinstance(b, list) else (b,) * self.topology.clients

    def replace(self, **sections) -> "RunConfig":
        """Copy with sections replaced; values may be dicts of field overrides."""
        updates = {}
        for name, value in sections.items():
            current = getattr(self, name)
            if isinstance(value, dict) and dataclasses.is_dataclass(current):
                value = dataclasses.replace(current, **{_py_name(k): v for k, v in value.items()})
            updates[name] = value
        return dataclasses.replace(self, **updates)


def _py_name(key: str) -> str:
    return "global_" if key == "global" else key


def _file_name(name: str) -> str:
    return "global" if name == "global_" else name


def _check_scalar(value, tp, path):
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}", key=path)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", key=path)
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", key=path)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", key=path)
        return value
    if tp is list:
        if not isinstance(value, list):
            raise ConfigError(f"expected a list, got {value!r}", key=path)
        return list(value)
    raise ConfigError(f"unsupported field type {tp}", key=path)


def _coerce(value, tp, path):
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        options = typing.get_args(tp)
        if value is None and type(None) in options:
            return None
        errors = []
        for opt in options:
            if opt is type(None):
                continue
            try:
                return _coerce(value, opt, path)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(f"value {value!r} matches none of the allowed types", key=path)
    return _check_scalar(value, tp, path)


def _build(cls, data, path=""):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"expected a section, got {data!r}", key=path or None)
    hints = typing.get_type_hints(cls)
    known = {_file_name(f.name): f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError("unknown key", key=where)
    kwargs = {}
    for key, value in data.items():
        f = known[key]
        kwargs[f.name] = _coerce(value, hints[f.name], f"{path}.{key}" if path else key)
    if cls is RunConfig:
        return RunConfig(**kwargs)
    return cls(**kwargs)


def from_dict(data) -> RunConfig:
    return _build(RunConfig, data)


def to_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        out[_file_name(f.name)] = to_dict(value) if dataclasses.is_dataclass(value) else (
            list(value) if isinstance(value, (list, tuple)) else value)
    return out


def dump_yaml(cfg: RunConfig) -> str:
    """Canonical form: every key present, sorted, block style."""
    return yaml.safe_dump(to_dict(cfg), sort_keys=True, default_flow_style=False)


def load_yaml(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"not valid YAML: {exc}") from exc
    return from_dict(data)


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    return load_yaml(text)


def _require(cond, key, message):
    if not cond:
        raise ConfigError(message, key=key)


def validate(cfg: RunConfig) -> None:
    t = cfg.topology
    _require(t.clients >= 1, "topology.clients", "must be >= 1")
    _require(t.classes >= 1, "topology.classes", "must be >= 1")
    _require(1 <= t.per_client <= t.classes, "topology.per_client", "must lie in 1..classes")
    _require(1 <= t.share <= t.clients, "topology.share", "must lie in 1..clients")
    _require(t.clients * t.per_client == t.classes * t.share, "topology",
             f"clients*per_client = {t.clients * t.per_client} must equal classes*share = {t.classes * t.share}")

    s = cfg.stream
    _require(s.packet_cap >= 0, "stream.packet_cap", "must be >= 0")
    _require(s.dirichlet_alpha > 0 and math.isfinite(s.dirichlet_alpha), "stream.dirichlet_alpha", "must be > 0")
    _require(s.pool_per_pair >= 0, "stream.pool_per_pair", "must be >= 0")
    for name in ("d2d", "d3d", "grid"):
        _require(getattr(s, name) >= 1, f"stream.{name}", "must be >= 1")
    _require(s.noise_sigma >= 0, "stream.noise_sigma", "must be >= 0")
    _require(s.cond_bound >= 1, "stream.cond_bound", "must be >= 1")
    if s.latent_dim is not None:
        _require(1 <= s.latent_dim <= min(s.d2d, s.d3d), "stream.latent_dim", "must lie in 1..min(d2d, d3d)")
    _require(1 <= s.defect.min_size <= s.grid, "stream.defect.min_size", "must lie in 1..grid")
    if s.defect.max_size is not None:
        _require(s.defect.min_size <= s.defect.max_size <= s.grid, "stream.defect.max_size",
                 "must lie in min_size..grid")
    _require(s.defect.offset_magnitude >= 0, "stream.defect.offset_magnitude", "must be >= 0")
    for name in ("val_normal", "val_anomalous", "test_normal", "test_anomalous"):
        _require(getattr(s.eval, name) >= 1, f"stream.eval.{name}", "must be >= 1")

    _require(cfg.model.depth >= 1, "model.depth", "must be >= 1")
    _require(cfg.model.hidden is None or cfg.model.hidden >= 1, "model.hidden", "must be >= 1")

    tr = cfg.training
    _require(tr.eta > 0 and math.isfinite(tr.eta), "training.eta", "must be finite and > 0")
    _require(tr.tau_max >= 0, "training.tau_max", "must be >= 0")
    _require(tr.batch is None or tr.batch >= 1, "training.batch", "must be >= 1 or null")

    sc = cfg.scheduler
    _require(sc.policy in POLICIES, "scheduler.policy", f"must be one of {', '.join(POLICIES)}")
    _require(sc.alpha >= 0, "scheduler.alpha", "must be >= 0")
    _require(sc.beta >= 0, "scheduler.beta", "must be >= 0")
    _require(sc.alpha + sc.beta > 0, "scheduler.beta", "alpha + beta must be > 0")
    _require(sc.epsilon > 0, "scheduler.epsilon", "must be > 0")

    b = cfg.budgets
    _require(b.global_ >= 0, "budgets.global", "must be >= 0")
    if isinstance(b.per_client, list):
        _require(len(b.per_client) == t.clients, "budgets.per_client", "list length must equal topology.clients")
        for i, x in enumerate(b.per_client):
            _require(isinstance(x, int) and not isinstance(x, bool) and x >= 0,
                     f"budgets.per_client[{i}]", "must be an integer >= 0")
    else:
        _require(b.per_client >= 0, "budgets.per_client", "must be >= 0")

    lo = cfg.lora
    _require(lo.t_warm >= 0, "lora.t_warm", "must be >= 0")
    _require(0 < lo.gamma <= 1, "lora.gamma", "must lie in (0, 1]")
    _require(lo.rank >= 1, "lora.rank", "must be >= 1")
    _require(lo.init_scale >= 0, "lora.init_scale", "must be >= 0")
    _require(lo.max_degradation >= 0, "lora.max_degradation", "must be >= 0")
    if lo.enabled:
        hidden = cfg.model.hidden if cfg.model.hidden is not None else (s.d2d + s.d3d) // 2
        dims = [s.d2d, s.d3d] + ([hidden] if cfg.model.depth > 1 else [])
        _require(lo.rank < min(dims), "lora.rank", f"must be < the smallest layer dim {min(dims)}")

    _require(cfg.rounds >= 0, "rounds", "must be >= 0")
    _require(cfg.seeds.master >= 0, "seeds.master", "must be >= 0")
    _require(cfg.seeds.repetitions >= 1, "seeds.repetitions", "must be >= 1")

    m = cfg.metrics
    _require(len(m.fpr_limits) >= 1, "metrics.fpr_limits", "need at least one limit")
    for i, lim in enumerate(m.fpr_limits):
        _require(isinstance(lim, (int, float)) and not isinstance(lim, bool) and 0 < lim <= 1,
                 f"metrics.fpr_limits[{i}]", "must lie in (0, 1]")
    _require(m.score_reduction in ("max", "mean"), "metrics.score_reduction", "must be 'max' or 'mean'")
    _require(m.connectivity in (4, 8), "metrics.connectivity", "must be 4 or 8")
    _require(cfg.output.format in ("csv", "jsonl"), "output.format", "must be 'csv' or 'jsonl'")
