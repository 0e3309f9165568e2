"""Run configuration: a flat ``key = value`` file split into sections.

    [run]
    resolution = 64
    c_min = 3.0
    ...

``#`` and ``;`` start comments. Every key has a default and unknown keys are
rejected with the offending line number.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .distributed.engine import check_micro_batch
from .distributed.sharding import PlanError, ShardPlan, make_shard_plan
from .model import GeneratorConfig
from .pde_loss import LossConfig

CONFIG_FORMAT = "pdegen-config v1"


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = f"{path or '<config>'}:{line}: " if line else (f"{path}: " if path else "")
        super().__init__(where + message)
        self.line = line


@dataclass(frozen=True)
class RunConfig:
    # [run]
    resolution: int = 64
    c_min: float = 3.0
    c_max: float = 6.0
    n_samples: int = 256
    batch_size: int = 64
    micro_batch: int = 2
    epochs: int = 10
    seed: int = 0
    precision: int = 32
    lam: float = 10.0
    x_boundary: bool = False
    out_dir: str = "run"
    checkpoint_every: int = 0
    # [model]
    base_resolution: int = 8
    base_channels: int = 32
    min_channels: int = 8
    bn_momentum: float = 0.1
    # [optimizer]
    optimizer: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.0
    history: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    max_line_search: int = 20
    # [transport]
    workers: int = 1
    transport: str = "inproc"
    addresses: tuple = ()
    timeout: float = 60.0

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(self.resolution, self.base_resolution, self.base_channels,
                               self.min_channels, self.seed, self.precision, self.bn_momentum)

    def loss_config(self) -> LossConfig:
        return LossConfig(self.lam, self.x_boundary)

    def plan(self) -> ShardPlan:
        return make_shard_plan(self.n_samples, self.batch_size, self.workers)

    def effective(self) -> "RunConfig":
        """Same run with the sample and batch counts replaced by their adjusted values."""
        plan = self.plan()
        return dataclasses.replace(self, n_samples=plan.n_samples_adj, batch_size=plan.batch_size_adj)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["addresses"] = list(self.addresses)
        return d

    def to_text(self) -> str:
        out = [f"# {CONFIG_FORMAT}"]
        for section, keys in SECTIONS.items():
            out.append(f"\n[{section}]")
            for key in keys:
                out.append(f"{key} = {_format(getattr(self, key))}")
        return "\n".join(out) + "\n"


SECTIONS = {
    "run": ["resolution", "c_min", "c_max", "n_samples", "batch_size", "micro_batch", "epochs", "seed",
            "precision", "lam", "x_boundary", "out_dir", "checkpoint_every"],
    "model": ["base_resolution", "base_channels", "min_channels", "bn_momentum"],
    "optimizer": ["optimizer", "lr", "momentum", "history", "c1", "c2", "max_line_search"],
    "transport": ["workers", "transport", "addresses", "timeout"],
}
_TYPES = {f.name: type(f.default) for f in dataclasses.fields(RunConfig)}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(key: str, raw: str):
    kind = _TYPES[key]
    if kind is bool:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind is tuple:
        return tuple(a.strip() for a in raw.split(",") if a.strip())
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def parse_config(text: str, path: str | None = None) -> RunConfig:
    values, lines = {}, {}
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", lineno, path)
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]", lineno, path)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno, path)
        key, raw = (s.strip() for s in line.split("=", 1))
        if section is None:
            raise ConfigError(f"key {key!r} appears before any [section]", lineno, path)
        if key not in SECTIONS[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]", lineno, path)
        if key in values:
            raise ConfigError(f"duplicate key {key!r} (first set on line {lines[key]})", lineno, path)
        try:
            values[key] = _convert(key, raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", lineno, path) from None
        lines[key] = lineno
    cfg = RunConfig(**values)
    validate(cfg, lines, path)
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", path=str(path)) from None
    return parse_config(text, str(path))


def validate(cfg: RunConfig, lines: dict | None = None, path: str | None = None) -> None:
    lines = lines or {}

    def fail(key, msg):
        raise ConfigError(msg, lines.get(key), path)

    try:
        cfg.generator_config()
    except ValueError as exc:
        fail("resolution", str(exc))
    if not cfg.c_min <= cfg.c_max or cfg.c_min < 0:
        fail("c_min", f"c range [{cfg.c_min}, {cfg.c_max}] must satisfy 0 <= c_min <= c_max")
    if not cfg.lam > 0:
        fail("lam", f"lam must be > 0, got {cfg.lam}")
    if cfg.epochs < 1:
        fail("epochs", f"epochs must be >= 1, got {cfg.epochs}")
    if cfg.checkpoint_every < 0:
        fail("checkpoint_every", "checkpoint_every must be >= 0")
    if cfg.optimizer not in ("sgd", "lbfgs"):
        fail("optimizer", f"optimizer must be 'sgd' or 'lbfgs', got {cfg.optimizer!r}")
    if not cfg.lr > 0:
        fail("lr", f"lr must be > 0, got {cfg.lr}")
    if not 0 <= cfg.momentum < 1:
        fail("momentum", f"momentum must be in [0, 1), got {cfg.momentum}")
    if cfg.history < 1 or cfg.max_line_search < 1:
        fail("history", "history and max_line_search must be >= 1")
    if not 0 < cfg.c1 < cfg.c2 < 1:
        fail("c1", "line search needs 0 < c1 < c2 < 1")
    if cfg.workers < 1:
        fail("workers", f"workers must be >= 1, got {cfg.workers}")
    if cfg.transport not in ("inproc", "sockets"):
        fail("transport", f"transport must be 'inproc' or 'sockets', got {cfg.transport!r}")
    if cfg.transport == "sockets" and len(cfg.addresses) != cfg.workers:
        fail("addresses", f"sockets transport needs {cfg.workers} addresses, got {len(cfg.addresses)}")
    if not cfg.timeout > 0:
        fail("timeout", "timeout must be > 0")
    try:
        check_micro_batch(cfg.plan(), cfg.micro_batch)
    except PlanError as exc:
        fail("batch_size", str(exc))
