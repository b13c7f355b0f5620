"""Versioned JSON run configuration.

Unknown keys anywhere are rejected. Defaults are the desk-scale recipe used by
the CLI; see README for the meaning of each field.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .model import METHODS
from .network import DEFAULT_OPS, CellSpec, NetworkSpec
from .train import TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    kind: str = "two_moons"
    n: int = 1000
    noise: float = 0.2
    seed: int = 0
    test_fraction: float = 0.4
    ood_offset: float | None = None
    path: str | None = None


@dataclass
class NetworkConfig:
    num_nodes: int = 4
    op_kinds: list = field(default_factory=lambda: list(DEFAULT_OPS))
    node_width: int = 8
    normalize: bool = False
    num_cells: int = 2
    compression: float = 0.4

    def build(self, input_dim: int, num_classes: int) -> NetworkSpec:
        cell = CellSpec(self.num_nodes, tuple(self.op_kinds), self.node_width, self.normalize)
        return NetworkSpec(input_dim, num_classes, self.num_cells, cell, self.compression)


@dataclass
class EvalConfig:
    mc: int = 100
    bins: int = 15
    eps_list: list = field(default_factory=lambda: [0.0, 0.02, 0.05, 0.1])
    attack_mc: int = 30
    bim_iters: int = 3
    sweep: list = field(default_factory=lambda: [1, 2, 5, 10, 20, 50, 100])
    refine_structures: int = 5
    methods: list = field(default_factory=lambda: list(METHODS))
    eval_seed: int = 12345


# toy-problem overrides of the TrainConfig defaults
DESK_TRAIN = {"lr_w": 0.02, "tau_decay": "auto"}


@dataclass
class RunConfig:
    version: int = SCHEMA_VERSION
    method: str = "dbsn"
    seed: int = 0
    out: str = "runs"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: dict = field(default_factory=lambda: dict(DESK_TRAIN))
    eval: EvalConfig = field(default_factory=EvalConfig)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train, seed=self.seed)

    def to_dict(self) -> dict:
        return asdict(self)

    def identity(self) -> dict:
        """The fields that determine a training run (seed and output excluded)."""
        d = self.to_dict()
        return {k: d[k] for k in ("version", "method", "dataset", "network", "train")}

    def config_hash(self) -> str:
        blob = json.dumps(self.identity(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def run_dir(self) -> Path:
        return Path(self.out) / f"{self.method}-{self.config_hash()}-s{self.seed}"


def _strict(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _check_types(obj, where: str) -> None:
    defaults = type(obj)()
    for f in fields(obj):
        val, ref = getattr(obj, f.name), getattr(defaults, f.name)
        if ref is None or val is None:
            continue
        if isinstance(ref, bool):
            ok = isinstance(val, bool)
        elif isinstance(ref, int):
            ok = isinstance(val, int) and not isinstance(val, bool)
        elif isinstance(ref, float):
            ok = isinstance(val, (int, float)) and not isinstance(val, bool)
        else:
            ok = isinstance(val, type(ref))
        if not ok:
            raise ConfigError(f"{where}.{f.name}: expected {type(ref).__name__}, got {type(val).__name__}")


def from_dict(data: dict) -> RunConfig:
    data = copy.deepcopy(data)
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(data) - {f.name for f in fields(RunConfig)}
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}")
    version = data.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config version {version}")
    train = dict(DESK_TRAIN)
    train_in = data.pop("train", {})
    if not isinstance(train_in, dict):
        raise ConfigError("train: expected an object")
    allowed = TrainConfig.field_names() - {"seed"}
    unknown = set(train_in) - allowed
    if unknown:
        raise ConfigError(f"train: unknown keys {sorted(unknown)}")
    train.update(train_in)
    cfg = RunConfig(
        version=version,
        method=data.get("method", "dbsn"),
        seed=data.get("seed", 0),
        out=data.get("out", "runs"),
        dataset=_strict(DatasetConfig, data.get("dataset", {}), "dataset"),
        network=_strict(NetworkConfig, data.get("network", {}), "network"),
        train=train,
        eval=_strict(EvalConfig, data.get("eval", {}), "eval"),
    )
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}")
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool) or cfg.seed < 0:
        raise ConfigError("seed must be a nonnegative integer")
    for name in ("dataset", "network", "eval"):
        _check_types(getattr(cfg, name), name)
    if cfg.eval.mc < 1 or cfg.eval.attack_mc < 1 or cfg.eval.bins < 1:
        raise ConfigError("eval counts must be >= 1")
    bad = set(cfg.eval.methods) - set(METHODS)
    if bad:
        raise ConfigError(f"eval.methods: unknown {sorted(bad)}")
    try:
        cfg.train_config()
        cfg.network.build(2, 2)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(data)
