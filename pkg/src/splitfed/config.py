"""Experiment configuration: JSON schema, presets, validation.

Configs are plain JSON. A ``preset`` key loads hyperparameters first;
explicit keys override it. ``parse_config`` applies defaults, validates
every field with a field-level message, and the parsed config serializes
back to an identical config (round-trip).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import seeds
from .data import Dataset, Partition, gen_synthetic, load_idx, partition_dirichlet, partition_iid
from .models import build_conv, build_mlp
from .protocols import SPLIT_VARIANTS, VARIANTS


class ConfigError(Exception):
    def __init__(self, field_name: str, message: str):
        self.field_name = field_name
        super().__init__(f"{field_name}: {message}")


# Hyperparameter presets mirroring the published experimental setup.
PRESETS = {
    "paper-sfl": {
        "optimizer": {"kind": "adam", "lr": 0.001},
        "batch_size": 64,
        "epochs": 5,
    },
    "paper-fedavg": {
        "optimizer": {"kind": "sgd", "lr": 0.01},
        "batch_size": 64,
        "epochs": 5,
    },
}


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    num_classes: int = 8
    dim: int = 32
    per_class: int = 60
    test_per_class: int = 25
    class_sep: float = 2.0
    images: str | None = None
    labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None


@dataclass
class ModelSpec:
    kind: str = "mlp"
    hidden: tuple[int, ...] = (64, 64, 64)
    channels: tuple[int, ...] = (4, 8)
    dense_width: int = 32
    kernel_size: int = 3


@dataclass
class PartitionSpec:
    kind: str = "iid"
    mu: float = 0.1
    min_samples: int | None = None  # None: one full batch


@dataclass
class OptimizerSpec:
    kind: str = "sgd"
    lr: float | tuple[float, ...] = 0.01


@dataclass
class ExperimentConfig:
    variant: str
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    clients: int = 8
    cut: int = 1
    rounds: int = 10
    epochs: int = 5
    batch_size: int = 64
    permute_per_round: bool = False
    seed: int = 0
    out_dir: str = "out"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"]["hidden"] = list(self.model.hidden)
        d["model"]["channels"] = list(self.model.channels)
        if isinstance(self.optimizer.lr, tuple):
            d["optimizer"]["lr"] = list(self.optimizer.lr)
        return d

    @property
    def num_blocks(self) -> int:
        if self.model.kind == "mlp":
            return len(self.model.hidden) + 1
        return len(self.model.channels) + 2

    @property
    def lr_schedule(self):
        lr = self.optimizer.lr
        return list(lr) if isinstance(lr, tuple) else lr


def _require(cond: bool, field_name: str, message: str) -> None:
    if not cond:
        raise ConfigError(field_name, message)


def _build_section(cls, raw, section: str, tuple_fields=()):
    _require(isinstance(raw, dict), section,
             f"must be an object, got {type(raw).__name__}")
    known = set(cls.__dataclass_fields__)
    for key in raw:
        _require(key in known, f"{section}.{key}", "unknown field")
    cleaned = dict(raw)
    for key in tuple_fields:
        if key in cleaned and isinstance(cleaned[key], list):
            cleaned[key] = tuple(cleaned[key])
    return cls(**cleaned)


def _require_int(value, field_name: str) -> None:
    _require(isinstance(value, int) and not isinstance(value, bool),
             field_name, f"must be an integer, got {value!r}")


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", f"config must be a JSON object, got {type(raw).__name__}")
    raw = dict(raw)

    preset_name = raw.pop("preset", None)
    if preset_name is not None:
        _require(preset_name in PRESETS, "preset",
                 f"unknown preset {preset_name!r}; available: {sorted(PRESETS)}")
        merged = {}
        for key, value in PRESETS[preset_name].items():
            merged[key] = value
        merged.update(raw)
        raw = merged

    known = set(ExperimentConfig.__dataclass_fields__)
    for key in raw:
        _require(key in known, key, "unknown field")
    _require("variant" in raw, "variant",
             f"required; one of {list(VARIANTS)}")

    kwargs = dict(raw)
    kwargs["dataset"] = _build_section(DatasetSpec, raw.get("dataset", {}), "dataset")
    kwargs["model"] = _build_section(ModelSpec, raw.get("model", {}), "model",
                                     tuple_fields=("hidden", "channels"))
    kwargs["partition"] = _build_section(PartitionSpec, raw.get("partition", {}), "partition")
    opt_raw = dict(raw.get("optimizer", {}))
    if isinstance(opt_raw.get("lr"), list):
        opt_raw["lr"] = tuple(float(v) for v in opt_raw["lr"])
    kwargs["optimizer"] = _build_section(OptimizerSpec, opt_raw, "optimizer")

    try:
        cfg = ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError("<root>", str(exc)) from exc
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    _require(cfg.variant in VARIANTS, "variant",
             f"must be one of {list(VARIANTS)}, got {cfg.variant!r}")
    for name in ("clients", "rounds", "epochs", "batch_size", "cut", "seed"):
        _require_int(getattr(cfg, name), name)
    _require(cfg.clients >= 1, "clients", f"must be >= 1, got {cfg.clients}")
    _require(cfg.rounds >= 0, "rounds", f"must be >= 0, got {cfg.rounds}")
    _require(cfg.epochs >= 0, "epochs", f"must be >= 0, got {cfg.epochs}")
    _require(cfg.batch_size >= 1, "batch_size", f"must be >= 1, got {cfg.batch_size}")
    _require(cfg.seed >= 0, "seed", f"must be >= 0, got {cfg.seed}")

    ds = cfg.dataset
    _require(ds.kind in ("synthetic", "idx"), "dataset.kind",
             f"must be 'synthetic' or 'idx', got {ds.kind!r}")
    if ds.kind == "synthetic":
        _require(ds.num_classes >= 2, "dataset.num_classes",
                 f"must be >= 2, got {ds.num_classes}")
        _require(ds.dim >= 1, "dataset.dim", f"must be >= 1, got {ds.dim}")
        _require(ds.per_class >= 1, "dataset.per_class",
                 f"must be >= 1, got {ds.per_class}")
        _require(ds.test_per_class >= 1, "dataset.test_per_class",
                 f"must be >= 1, got {ds.test_per_class}")
    else:
        for name in ("images", "labels", "test_images", "test_labels"):
            _require(getattr(ds, name) is not None, f"dataset.{name}",
                     "required for idx datasets")

    m = cfg.model
    _require(m.kind in ("mlp", "conv-small"), "model.kind",
             f"must be 'mlp' or 'conv-small', got {m.kind!r}")
    if m.kind == "mlp":
        _require(len(m.hidden) >= 1, "model.hidden", "needs at least one block width")
        _require(all(int(h) >= 1 for h in m.hidden), "model.hidden",
                 f"widths must be >= 1, got {m.hidden}")
    else:
        _require(len(m.channels) >= 1, "model.channels", "needs at least one conv block")
        _require(m.dense_width >= 1, "model.dense_width",
                 f"must be >= 1, got {m.dense_width}")

    p = cfg.partition
    _require(p.kind in ("iid", "dirichlet"), "partition.kind",
             f"must be 'iid' or 'dirichlet', got {p.kind!r}")
    if p.kind == "dirichlet":
        _require(_is_number(p.mu) and p.mu > 0, "partition.mu",
                 f"must be a number > 0, got {p.mu!r}")
        if p.min_samples is not None:
            _require_int(p.min_samples, "partition.min_samples")
            _require(p.min_samples >= 1, "partition.min_samples",
                     f"must be >= 1, got {p.min_samples}")

    opt = cfg.optimizer
    _require(opt.kind in ("sgd", "adam"), "optimizer.kind",
             f"must be 'sgd' or 'adam', got {opt.kind!r}")
    lrs = opt.lr if isinstance(opt.lr, tuple) else (opt.lr,)
    _require(len(lrs) >= 1, "optimizer.lr", "schedule must not be empty")
    _require(all(_is_number(v) for v in lrs), "optimizer.lr",
             f"rates must be numbers, got {opt.lr!r}")
    _require(all(v >= 0 for v in lrs), "optimizer.lr",
             f"rates must be >= 0, got {opt.lr}")

    if cfg.variant in SPLIT_VARIANTS:
        n_blocks = cfg.num_blocks
        _require(1 <= cfg.cut <= n_blocks - 1, "cut",
                 f"must be in [1, {n_blocks - 1}] for variant {cfg.variant!r} "
                 f"({n_blocks} blocks), got {cfg.cut}")


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"{path}: line {exc.lineno}, col {exc.colno}: {exc.msg}") from exc
    return config_from_dict(raw)


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def build_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    ds = cfg.dataset
    if ds.kind == "synthetic":
        train = gen_synthetic(ds.num_classes, ds.dim, ds.per_class, ds.class_sep,
                              seed=cfg.seed)
        test_seed = int(np.random.SeedSequence([cfg.seed, seeds.SYNTH_TEST]).generate_state(1)[0])
        test = gen_synthetic(ds.num_classes, ds.dim, ds.test_per_class, ds.class_sep,
                             seed=test_seed)
        return train, test
    train = load_idx(ds.images, ds.labels)
    test = load_idx(ds.test_images, ds.test_labels, num_classes=train.num_classes)
    return train, test


def build_model(cfg: ExperimentConfig, sample_shape: tuple[int, ...],
                num_classes: int):
    m = cfg.model
    if m.kind == "mlp":
        model, boundaries = build_mlp(sample_shape, m.hidden, num_classes)
    else:
        model, boundaries = build_conv(sample_shape, m.channels, m.dense_width,
                                       num_classes, m.kernel_size)
    model.init_params(cfg.seed)
    return model, boundaries


def build_partition(cfg: ExperimentConfig, train: Dataset) -> Partition:
    p = cfg.partition
    if p.kind == "iid":
        return partition_iid(train, cfg.clients, seed=cfg.seed)
    min_samples = p.min_samples if p.min_samples is not None else cfg.batch_size
    return partition_dirichlet(train, cfg.clients, p.mu, seed=cfg.seed,
                               min_samples=min_samples)
