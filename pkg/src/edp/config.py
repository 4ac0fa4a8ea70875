"""Experiment configuration: a JSON document whose keys mirror the dataclass fields."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from . import nncore
from .data import PartitionPlan, concat, load_idx, subset, synth_dataset
from .errors import ContractError
from .optim import DpConfig, SgdConfig
from .rng import substream


@dataclass(frozen=True)
class DatasetSource:
    """``kind`` is ``"idx"`` (paired image/label files, concatenated) or ``"synthetic"``."""

    kind: str = "idx"
    images: tuple = ()
    labels: tuple = ()
    num_classes: int = 10
    count: int = 15000
    height: int = 32
    width: int = 32
    synth_seed: int = 0
    limit: Optional[int] = None  # seeded subsample taken before partitioning

    def __post_init__(self):
        if self.kind not in ("idx", "synthetic"):
            raise ContractError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "idx" and len(self.images) != len(self.labels):
            raise ContractError("idx source needs one labels file per images file")
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "labels", tuple(self.labels))


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSource
    plan: PartitionPlan
    initial: SgdConfig
    private: SgdConfig
    dp: DpConfig
    seed: int = 0
    out: str = "out"
    architecture: object = "reference"
    weights: Optional[tuple] = None
    record_curves: bool = False

    def __post_init__(self):
        if self.weights is not None:
            object.__setattr__(self, "weights", tuple(self.weights))
            if len(self.weights) != self.plan.participant_count:
                raise ContractError("one ensemble weight per participant is required")
        if isinstance(self.architecture, list):
            object.__setattr__(self, "architecture", tuple(dict_to_spec(d) if isinstance(d, dict) else d
                                                          for d in self.architecture))

    @property
    def participants(self) -> int:
        return self.plan.participant_count

    def layer_specs(self):
        if self.architecture == "reference":
            return nncore.mnist_architecture(self.dataset.num_classes)
        return list(self.architecture)


def spec_to_dict(spec) -> dict:
    return {"kind": spec.kind, **asdict(spec)}


def dict_to_spec(d: dict):
    kinds = {cls.kind: cls for cls in nncore.LAYER_KINDS}
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in kinds:
        raise ContractError(f"unknown layer kind {kind!r}")
    return kinds[kind](**d)


def _float(x):
    # JSON has no infinity literal; "inf" strings stand in for it
    return "inf" if isinstance(x, float) and math.isinf(x) else x


def to_dict(cfg: ExperimentConfig) -> dict:
    d = {
        "dataset": asdict(cfg.dataset),
        "plan": asdict(cfg.plan),
        "initial": asdict(cfg.initial),
        "private": asdict(cfg.private),
        "dp": {k: _float(v) for k, v in asdict(cfg.dp).items()},
        "seed": cfg.seed,
        "out": cfg.out,
        "architecture": cfg.architecture if cfg.architecture == "reference"
        else [spec_to_dict(s) for s in cfg.architecture],
        "weights": list(cfg.weights) if cfg.weights is not None else None,
        "record_curves": cfg.record_curves,
    }
    d["dataset"]["images"] = list(cfg.dataset.images)
    d["dataset"]["labels"] = list(cfg.dataset.labels)
    return d


def _build(cls, raw, section):
    if not isinstance(raw, dict):
        raise ContractError(f"'{section}' must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ContractError(f"unknown keys in '{section}': {sorted(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ContractError(f"bad '{section}' section: {exc}") from None


def from_dict(d: dict) -> ExperimentConfig:
    required = ("dataset", "plan", "initial", "private", "dp")
    missing = [k for k in required if k not in d]
    if missing:
        raise ContractError(f"config is missing {missing}")
    unknown = set(d) - {f.name for f in fields(ExperimentConfig)}
    if unknown:
        raise ContractError(f"unknown top-level keys: {sorted(unknown)}")
    if not isinstance(d["dp"], dict):
        raise ContractError("'dp' must be an object")
    dp_raw = {k: (float(v) if v == "inf" else v) for k, v in d["dp"].items()}
    return ExperimentConfig(
        dataset=_build(DatasetSource, d["dataset"], "dataset"),
        plan=_build(PartitionPlan, d["plan"], "plan"),
        initial=_build(SgdConfig, d["initial"], "initial"),
        private=_build(SgdConfig, d["private"], "private"),
        dp=_build(DpConfig, dp_raw, "dp"),
        seed=int(d.get("seed", 0)),
        out=str(d.get("out", "out")),
        architecture=d.get("architecture", "reference"),
        weights=d.get("weights"),
        record_curves=bool(d.get("record_curves", False)),
    )


def emit(cfg: ExperimentConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True)


def parse(text: str) -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ContractError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ContractError("config must be a JSON object")
    return from_dict(raw)


def load(path) -> ExperimentConfig:
    return parse(Path(path).read_text())


def with_overrides(cfg: ExperimentConfig, *, seed=None, nm=None, nc=None, epochs=None, batch=None,
                   participants=None, out=None) -> ExperimentConfig:
    """Apply command-line scalar overrides; a flag always wins over the file."""
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if nm is not None:
        cfg = replace(cfg, dp=replace(cfg.dp, noise_multiplier=nm))
    if nc is not None:
        cfg = replace(cfg, dp=replace(cfg.dp, clip_threshold=nc))
    if epochs is not None:
        cfg = replace(cfg, initial=replace(cfg.initial, epochs=epochs), private=replace(cfg.private, epochs=epochs))
    if batch is not None:
        cfg = replace(cfg, initial=replace(cfg.initial, batch_size=batch),
                      private=replace(cfg.private, batch_size=batch), dp=replace(cfg.dp, minibatch_size=batch))
    if participants is not None:
        weights = cfg.weights if cfg.weights is None or len(cfg.weights) == participants else None
        cfg = replace(cfg, plan=replace(cfg.plan, participant_count=participants), weights=weights)
    if out is not None:
        cfg = replace(cfg, out=str(out))
    return cfg


def load_dataset(cfg: ExperimentConfig):
    src = cfg.dataset
    if src.kind == "synthetic":
        ds = synth_dataset(src.synth_seed, src.count, src.num_classes, src.height, src.width)
    else:
        if not src.images:
            raise ContractError("idx source lists no files")
        ds = concat(load_idx(i, l, src.num_classes) for i, l in zip(src.images, src.labels))
    if src.limit is not None:
        ds = subset(ds, src.limit, int(substream(cfg.seed, "subset").integers(2**32)))
    return ds


def partition_plan(cfg: ExperimentConfig, dataset_size: int = None) -> PartitionPlan:
    """The configured plan with its shuffle seed mixed into the master seed."""
    mixed = int(substream(cfg.seed, "partition", cfg.plan.seed).integers(2**32))
    return replace(cfg.plan, seed=mixed)


# ---------------------------------------------------------------- presets


def mnist_files(mnist_dir) -> DatasetSource:
    d = Path(mnist_dir)
    return DatasetSource(
        kind="idx",
        images=(str(d / "train-images-idx3-ubyte"), str(d / "t10k-images-idx3-ubyte")),
        labels=(str(d / "train-labels-idx1-ubyte"), str(d / "t10k-labels-idx1-ubyte")),
        num_classes=10,
    )


def mnist_full(mnist_dir, nm: float = 1.5, seed: int = 0, out: str = "out") -> ExperimentConfig:
    """Full-size MNIST run: 420 public images, five participants with 6653 private images each."""
    return ExperimentConfig(
        dataset=mnist_files(mnist_dir),
        plan=PartitionPlan(28000, 420, 6653, 1663, 5),
        initial=SgdConfig(0.001, 60, 250),
        private=SgdConfig(0.15, 60, 250),
        dp=DpConfig(nm, 1.0, 250, 1e-4),
        seed=seed,
        out=out,
    )


def mnist_reduced(mnist_dir, nm: float = 1.5, seed: int = 0, out: str = "out") -> ExperimentConfig:
    """10 private epochs and 2000 private training examples per participant.

    The initial model keeps its full 60 epochs; it costs one step per epoch.
    """
    plan = PartitionPlan(28000, 420, 2000, 1663, 5)
    return ExperimentConfig(
        dataset=replace(mnist_files(mnist_dir), limit=plan.total),
        plan=plan,
        initial=SgdConfig(0.001, 60, 250),
        private=SgdConfig(0.15, 10, 250),
        dp=DpConfig(nm, 1.0, 250, 1e-4),
        seed=seed,
        out=out,
    )


def synthetic_default(seed: int = 0, nm: float = 1.5, epochs: int = 10, out: str = "out") -> ExperimentConfig:
    """Three-class synthetic corpus with the 6000/90/1426/356 split."""
    return ExperimentConfig(
        dataset=DatasetSource(kind="synthetic", num_classes=3, count=15000, height=32, width=32),
        plan=PartitionPlan(6000, 90, 1426, 356, 5),
        initial=SgdConfig(0.05, 30, 18),
        private=SgdConfig(0.05, epochs, 18),
        dp=DpConfig(nm, 1.0, 18, 7e-4),
        seed=seed,
        out=out,
    )
