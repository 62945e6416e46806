"""
Pydantic schemas for configuration, manifests, reports and training logs.
"""

from enum import IntEnum
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


IMAGE_SIZE = 112
NUM_CLASSES = 7
REGIONS = ("h", "le", "re", "no", "lm", "rm")
LANDMARK_REGIONS = REGIONS[1:]


# ---------------------------
# Labels and domains
# ---------------------------
class ExpressionLabel(IntEnum):
    """The seven basic expressions, in the fixed index order used everywhere."""
    SURPRISE = 0
    FEAR = 1
    DISGUST = 2
    HAPPINESS = 3
    SADNESS = 4
    ANGER = 5
    NEUTRAL = 6


class Domain(IntEnum):
    SOURCE = 0
    TARGET = 1

    @property
    def other(self) -> "Domain":
        return Domain.TARGET if self is Domain.SOURCE else Domain.SOURCE


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ---------------------------
# Run configuration
# ---------------------------
class BackboneConfig(_Section):
    """Feature extractor settings."""
    name: str = Field(default="toy", description="One of resnet50, resnet18, mobilenetv2, toy")
    pretrained_path: str | None = Field(default=None, description="Optional state_dict file for the backbone")
    mean: tuple[float, float, float] | None = None
    std: tuple[float, float, float] | None = None
    holistic_kernel: int = Field(default=1, ge=1, description="Kernel size of the 512->64 projection")
    local_kernel: int = Field(default=1, ge=1, description="Kernel size of the 128->64 projections")
    share_local_heads: bool = False
    horizontal_flip: bool = False


class EdgeValues(_Section):
    """Prior adjacency weights per connection type."""
    holistic_local: float = Field(default=1.0, ge=0.0, le=1.0)
    local_local: float = Field(default=0.5, ge=0.0, le=1.0)
    inter_holistic: float = Field(default=1.0, ge=0.0, le=1.0)
    inter_holistic_local: float = Field(default=0.5, ge=0.0, le=1.0)
    inter_local_local: float = Field(default=0.25, ge=0.0, le=1.0)


class GraphConfig(_Section):
    init: str = "prior"
    freeze_adjacency: bool = False
    mode: str = "full"
    intra_layers: int = 2
    inter_layers: int = 1
    final_activation: bool = True
    edges: EdgeValues = Field(default_factory=EdgeValues)


class BankConfig(_Section):
    alpha: float = Field(default=0.1, gt=0.0, lt=1.0)
    recluster_period: int = Field(default=10, ge=1)
    num_clusters: int = Field(default=7, ge=1)
    mode: Literal["per_class", "dataset_level"] = "per_class"
    update: Literal["full", "iter_only", "epoch_only"] = "full"
    source_clusters: Literal["kmeans", "labels"] = "kmeans"
    kmeans_iters: int = Field(default=100, ge=1)
    kmeans_restarts: int = Field(default=1, ge=1)


class TrainConfig(_Section):
    batch_size: int = Field(default=32, ge=2)
    stage1_epochs: int = Field(default=15, ge=0)
    stage2_epochs: int = Field(default=20, ge=0)
    lr: float = Field(default=1e-4, gt=0.0)
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_epoch: int = Field(default=10, ge=1)
    disc_lr: float = Field(default=1e-3, gt=0.0)
    disc_hidden: int = Field(default=128, ge=1)
    disc_patience: int = Field(default=3, ge=0)
    disc_min_delta: float = 1e-3
    adversarial: bool = True
    adversarial_mode: Literal["alternating", "grl"] = "alternating"
    grl_lambda: float = 1.0
    early_stopping_patience: int | None = Field(default=5, ge=1)
    plft_epochs: int = Field(default=5, ge=0)
    num_workers: int = Field(default=0, ge=0)


class ProtocolConfig(_Section):
    """Source/target roster of one benchmark run."""
    source: str = "toy_source"
    targets: list[str] = Field(default_factory=lambda: ["toy_target"])
    manifests: dict[str, str] = Field(default_factory=dict, description="dataset name -> manifest path")
    methods: list[Literal["agra", "dt", "plft", "adversarial_holistic"]] = Field(
        default_factory=lambda: ["agra"]
    )
    checkpoint: str | None = Field(default=None, description="Checkpoint used by mmd / dump-features")


class MMDConfig(_Section):
    multipliers: list[float] = Field(default_factory=lambda: [0.25, 0.5, 1.0, 2.0, 4.0])
    bandwidths: list[float] | None = None
    unbiased: bool = True


class RunConfig(_Section):
    """Every module's configuration, resolved from a YAML file plus overrides."""
    seed: int = 0
    output_dir: str = "runs/default"
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    graph: GraphConfig = Field(default_factory=GraphConfig)
    bank: BankConfig = Field(default_factory=BankConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    protocol: ProtocolConfig = Field(default_factory=ProtocolConfig)
    mmd: MMDConfig = Field(default_factory=MMDConfig)


# ---------------------------
# Manifests
# ---------------------------
class ManifestRecord(BaseModel):
    """One line of a dataset manifest."""
    model_config = ConfigDict(extra="forbid")

    path: str
    label: int | None = Field(default=None, ge=0, le=NUM_CLASSES - 1)
    landmarks: list[tuple[float, float]] = Field(min_length=5, max_length=5)
    split: Literal["train", "val", "test"]
    id: str | None = None

    @field_validator("landmarks")
    @classmethod
    def _landmarks_in_bounds(cls, value: list[tuple[float, float]]) -> list[tuple[float, float]]:
        for x, y in value:
            if not (0 <= x <= IMAGE_SIZE - 1 and 0 <= y <= IMAGE_SIZE - 1):
                raise ValueError(f"landmark ({x}, {y}) outside [0, {IMAGE_SIZE - 1}]")
        return value


class DatasetManifest(BaseModel):
    name: str
    root: str = "."
    records: list[ManifestRecord] = Field(default_factory=list)

    def split(self, split: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == split]


# ---------------------------
# Reports and logs
# ---------------------------
class ReportRow(BaseModel):
    """One report row: a method evaluated on every target."""
    method: str
    source: str
    backbone: str
    accuracies: dict[str, float | None]
    failures: dict[str, str] = Field(default_factory=dict)
    mean: float | None = None
    mmd_before: dict[str, float] = Field(default_factory=dict)
    mmd_after: dict[str, float] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _accuracy_range(self) -> "ReportRow":
        for target, acc in self.accuracies.items():
            if acc is not None and not 0.0 <= acc <= 100.0:
                raise ValueError(f"accuracy for {target} outside [0, 100]: {acc}")
        return self


class BenchmarkReport(BaseModel):
    rows: list[ReportRow]
    targets: list[str]
    config: dict
    config_hash: str
    seed: int
    wall_clock: float


class TrainLogRecord(BaseModel):
    stage: int
    epoch: int
    iter: int
    L_cls: float
    L_adv: float | None = None
    L_D: float | None = None
    lr_F: float
    lr_D: float | None = None
    config_hash: str
    seed: int
