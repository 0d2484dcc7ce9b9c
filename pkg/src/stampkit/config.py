"""Pipeline configuration: JSON with a fixed schema, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    vocab: str = ""
    expression: str = ""
    coords: str = ""
    images: str = ""  # directory with images.dtn / regions.dtn / images.tsv
    labels: str = ""  # optional ground truth, evaluation only
    out: str = "out"


@dataclass
class DataConfig:
    seq_len: int = 64
    min_genes: int = 100
    mask_rate: float = 0.15
    means: str = ""  # optional DTN file with external per-gene means


@dataclass
class GeneEncoderSection:
    dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 128
    dropout: float = 0.0
    ln_eps: float = 1e-12


@dataclass
class VisionEncoderSection:
    image_side: int = 48
    mini_patch_side: int = 8
    channels: int = 3
    dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 128


@dataclass
class Stage1Config:
    epochs: int = 1
    batch_size: int = 256
    lr: float = 1e-4
    min_lr: float = 1e-5
    warmup: int = 0
    weight_decay: float = 0.1


@dataclass
class Stage2Config:
    epochs: int = 1
    minibatches_per_step: int = 24
    k: int = 9
    d_max: float = 0.0  # 0 selects 3x the median nearest-neighbour distance
    lr: float = 1e-4
    min_lr: float = 1e-4
    warmup: int = 0
    weight_decay: float = 0.1
    random_neighbors: bool = False


@dataclass
class LossToggles:
    csp: bool = True
    p_s: bool = True
    r_s: bool = True
    p_r: bool = True

    def enabled(self) -> list[str]:
        return [k for k in ("csp", "p_s", "r_s", "p_r") if getattr(self, k)]


@dataclass
class AlignConfig:
    steps: int = 300
    batch_size: int = 32
    grad_accum: int = 1
    lr: float = 1e-4
    min_lr: float = 1e-5
    warmup: int = 500
    weight_decay: float = 1e-3
    shared_dim: int = 128
    tau_init: float = 10.0
    freeze_gene: bool = False
    losses: LossToggles = field(default_factory=LossToggles)


@dataclass
class EvalConfig:
    folds: int = 5
    top_k: int = 50
    top_genes: int = 100
    probe_epochs: int = 100
    probe_lr_gene: float = 1e-3
    probe_lr_vision: float = 1e-4
    kmeans_restarts: int = 10


@dataclass
class PipelineConfig:
    seed: int
    dataset: str = "dataset"
    paths: Paths = field(default_factory=Paths)
    data: DataConfig = field(default_factory=DataConfig)
    gene_encoder: GeneEncoderSection = field(default_factory=GeneEncoderSection)
    vision_encoder: VisionEncoderSection = field(default_factory=VisionEncoderSection)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    align: AlignConfig = field(default_factory=AlignConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in raw:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise ConfigError(f"{where}: missing required key {f.name!r}")
            continue
        value = raw[f.name]
        typ = hints[f.name]
        path = f"{where}.{f.name}"
        if dataclasses.is_dataclass(typ):
            kwargs[f.name] = _build(typ, value, path)
        elif typ is bool:
            if not isinstance(value, bool):
                raise ConfigError(f"{path}: expected a boolean")
            kwargs[f.name] = value
        elif typ is int:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{path}: expected an integer")
            kwargs[f.name] = value
        elif typ is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{path}: expected a number")
            kwargs[f.name] = float(value)
        elif typ is str:
            if not isinstance(value, str):
                raise ConfigError(f"{path}: expected a string")
            kwargs[f.name] = value
        else:
            kwargs[f.name] = value
    return cls(**kwargs)


def config_from_dict(raw: dict) -> PipelineConfig:
    cfg = _build(PipelineConfig, raw, "config")
    validate(cfg)
    return cfg


def validate(cfg: PipelineConfig) -> None:
    if cfg.seed < 0:
        raise ConfigError("config.seed must be nonnegative")
    if not 0 < cfg.data.mask_rate < 1:
        raise ConfigError("config.data.mask_rate must lie in (0, 1)")
    if cfg.data.seq_len < 1:
        raise ConfigError("config.data.seq_len must be >= 1")
    if cfg.stage2.k < 2:
        raise ConfigError("config.stage2.k must be >= 2")
    if cfg.align.batch_size < 1 or cfg.align.grad_accum < 1:
        raise ConfigError("config.align batch sizes must be >= 1")


def load_config(path, check_paths: bool = True) -> PipelineConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = config_from_dict(raw)
    base = path.parent
    for name in ("vocab", "expression", "coords", "images", "labels", "out"):
        value = getattr(cfg.paths, name)
        if value and not Path(value).is_absolute():
            setattr(cfg.paths, name, str((base / value).resolve()))
    if cfg.data.means and not Path(cfg.data.means).is_absolute():
        cfg.data.means = str((base / cfg.data.means).resolve())
    if check_paths:
        for name in ("vocab", "expression", "coords", "images", "labels"):
            value = getattr(cfg.paths, name)
            if value and not Path(value).exists():
                raise ConfigError(f"config.paths.{name}: {value} does not exist")
        if cfg.data.means and not Path(cfg.data.means).exists():
            raise ConfigError(f"config.data.means: {cfg.data.means} does not exist")
    return cfg


def desk_config(seed: int, dataset_dir: str = ".", out: str = "out") -> PipelineConfig:
    """Settings sized for the default synthetic dataset on one CPU."""
    d = Path(dataset_dir)
    return PipelineConfig(
        seed=seed,
        dataset="synthetic",
        paths=Paths(vocab=str(d / "vocab.txt"), expression=str(d / "expression.tsv"),
                    coords=str(d / "coords.tsv"), images=str(d), labels=str(d / "labels.tsv"),
                    out=out),
        data=DataConfig(seq_len=64, min_genes=10),
        stage1=Stage1Config(epochs=8, batch_size=32, lr=2e-3, min_lr=2e-4, warmup=10),
        stage2=Stage2Config(epochs=40, minibatches_per_step=4, lr=3e-3, min_lr=3e-4, warmup=5),
        align=AlignConfig(steps=300, batch_size=32, lr=1e-3, min_lr=1e-4, warmup=20),
        eval=EvalConfig(probe_epochs=200, probe_lr_gene=1e-2, probe_lr_vision=1e-2),
    )
