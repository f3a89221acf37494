"""Run configuration files.

A run is described by one YAML (or JSON) document::

    data:
      train: data/FB15k-237/train.txt     # relative paths resolve against the config file
      valid: data/FB15k-237/valid.txt
      test: data/FB15k-237/test.txt
    model:
      scorer: distmult                    # rescal | distmult | complex
      d_e: 100
      entity_decom: {kind: fc, out_dim: 400}
    train:
      epochs: 500                         # Adagrad lr grid {0.08, 0.10, 0.12}; Adam {0.01, 0.005, 0.001, 0.0005}
    output_dir: runs/distmult
    eval: {split: test, workers: 1}
    bench: {split: valid, repetitions: 3, workers: 1}

Unknown keys anywhere are rejected. Training fields missing from ``train``
fall back to the defaults for the scorer (see ``TrainConfig.scorer_defaults``).
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .models import ModelConfig
from .training import TrainConfig


def _strict(cls, data, what):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{what} must be a mapping")
    unknown = set(data) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{what}: {exc}") from None


@dataclass
class DataConfig:
    train: str | None = None
    valid: str | None = None
    test: str | None = None
    # sizes for `params` when the dataset files are not at hand
    num_entities: int | None = None
    num_relations: int | None = None

    @property
    def has_files(self) -> bool:
        return all((self.train, self.valid, self.test))


@dataclass
class EvalConfig:
    split: str = "test"
    workers: int = 1
    batch_size: int = 256


@dataclass
class BenchConfig:
    split: str = "valid"
    repetitions: int = 3
    workers: int = 1


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs/default"
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: str | Path = ".") -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        allowed = {"data", "model", "train", "output_dir", "eval", "bench"}
        unknown = set(raw) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            model = ModelConfig.from_dict(dict(raw.get("model") or {}))
        except TypeError as exc:
            raise ConfigError(f"model: {exc}") from None
        train_raw = dict(raw.get("train") or {})
        unknown = set(train_raw) - {f.name for f in fields(TrainConfig)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        try:
            train = TrainConfig.scorer_defaults(model.scorer, **train_raw)
        except TypeError as exc:
            raise ConfigError(f"train: {exc}") from None
        cfg = cls(
            data=_strict(DataConfig, raw.get("data"), "data"),
            model=model,
            train=train,
            output_dir=str(raw.get("output_dir", "runs/default")),
            eval=_strict(EvalConfig, raw.get("eval"), "eval"),
            bench=_strict(BenchConfig, raw.get("bench"), "bench"),
            base_dir=Path(base_dir),
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from None
        return cls.from_dict(raw or {}, base_dir=path.parent)

    def validate(self) -> None:
        try:
            self.model.validate()
            self.train.validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        if self.eval.split not in ("train", "valid", "test") or self.bench.split not in ("train", "valid", "test"):
            raise ConfigError("split must be one of train, valid, test")
        if self.eval.workers < 1 or self.bench.workers < 1 or self.bench.repetitions < 1 or self.eval.batch_size < 1:
            raise ConfigError("workers, repetitions and batch_size must be >= 1")
        if self.data.num_entities is not None and self.data.num_entities < 1:
            raise ConfigError("data.num_entities must be positive")
        if self.data.num_relations is not None and self.data.num_relations < 1:
            raise ConfigError("data.num_relations must be positive")

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def output_path(self) -> Path:
        return self.resolve(self.output_dir)

    def data_paths(self) -> tuple[Path, Path, Path]:
        if not self.data.has_files:
            raise ConfigError("data.train, data.valid and data.test are required")
        return tuple(self.resolve(p) for p in (self.data.train, self.data.valid, self.data.test))

    def with_seed(self, seed: int) -> "RunConfig":
        cfg = copy.deepcopy(self)
        cfg.model.seed = seed
        cfg.train.seed = seed
        return cfg

    def to_dict(self) -> dict:
        return {
            "data": asdict(self.data),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "output_dir": self.output_dir,
            "eval": asdict(self.eval),
            "bench": asdict(self.bench),
        }


# hyperparameter ranges expanded by `kgdecomp grid`
CONV_CHANNELS_GRID = (2, 3, 4)
CONV_KSIZE_GRID = (3, 4)
FC_OUT_GRID = (200, 400)
RESCAL_PRE_DECOM_GRID = (100, 200, 400, 1000, 2000)
