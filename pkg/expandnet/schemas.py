import math
from datetime import datetime
from typing import Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, Field, field_validator, model_validator

LayerKind = Literal["conv", "linear", "batchnorm", "relu", "maxpool", "flatten", "classifier-conv"]
MetricKind = Literal["self_resemblance", "l1_norm", "mean_activation"]
ALL_METRICS: Tuple[str, ...] = ("self_resemblance", "l1_norm", "mean_activation")

LEARNABLE_KINDS = {"conv", "linear", "classifier-conv"}
CLASSIFIER_KINDS = {"linear", "classifier-conv"}


class LayerSpec(BaseModel):
    kind: LayerKind
    name: Optional[str] = None
    width: Optional[int] = Field(default=None, ge=1)
    kernel: Optional[Tuple[int, int]] = None
    stride: int = Field(default=1, ge=1)
    padding: int = Field(default=0, ge=0)
    couple_group: Optional[str] = None
    # Declared input size (e.g. 4*4*198 for a flattened head); checked by the shape pass.
    in_features: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _check_kind_fields(self):
        if self.kind not in LEARNABLE_KINDS and self.width is not None:
            raise ValueError(f"width is only meaningful for learnable layers, not {self.kind}")
        if self.kind in ("conv", "maxpool") and self.kernel is None:
            raise ValueError(f"{self.kind} layer needs a kernel")
        if self.kernel is not None and min(self.kernel) < 1:
            raise ValueError("kernel extents must be positive")
        if self.couple_group is not None and self.kind not in ("conv", "linear"):
            raise ValueError("only conv and linear layers can join a couple_group")
        return self

    @property
    def learnable(self) -> bool:
        return self.kind in LEARNABLE_KINDS


class ArchSpec(BaseModel):
    name: str = "custom"
    input_shape: Tuple[int, int, int]
    num_classes: int = Field(ge=2)
    layers: List[LayerSpec] = Field(min_length=1)
    bn_eps: float = Field(default=1e-3, gt=0)
    bn_momentum: float = Field(default=0.1, gt=0, le=1)

    @model_validator(mode="after")
    def _check_classifier_and_groups(self):
        if min(self.input_shape) < 1:
            raise ValueError("input_shape extents must be positive")
        last = self.layers[-1]
        if last.kind not in CLASSIFIER_KINDS:
            raise ValueError("the last layer must be a linear or classifier-conv classifier")
        if last.couple_group is not None:
            raise ValueError("the classifier cannot join a couple_group")
        if last.width is None:
            last.width = self.num_classes
        if last.width != self.num_classes:
            raise ValueError(f"classifier width {last.width} != num_classes {self.num_classes}")
        for index, layer in enumerate(self.layers[:-1]):
            if layer.kind == "classifier-conv":
                raise ValueError(f"layer {index}: classifier-conv is only allowed as the last layer")
            if layer.kind in ("conv", "linear") and layer.width is None:
                raise ValueError(f"layer {index}: {layer.kind} needs a width")
        groups: Dict[str, set] = {}
        for layer in self.layers:
            if layer.couple_group is not None:
                groups.setdefault(layer.couple_group, set()).add(layer.width)
        for group, widths in groups.items():
            if len(widths) != 1:
                raise ValueError(f"couple_group {group!r} has unequal widths {sorted(widths)}")
        return self

    @property
    def classifier_index(self) -> int:
        return len(self.layers) - 1

    @property
    def learnable_indices(self) -> List[int]:
        return [i for i, layer in enumerate(self.layers) if layer.learnable]

    @property
    def expandable_indices(self) -> List[int]:
        return [i for i in self.learnable_indices if i != self.classifier_index]

    def widths(self) -> List[int]:
        return [self.layers[i].width for i in self.expandable_indices]

    def layer_label(self, index: int) -> str:
        return self.layers[index].name or f"{self.layers[index].kind}{index}"


class TrainConfig(BaseModel):
    lr0: float = Field(default=0.005, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    nesterov: bool = True
    weight_decay: float = Field(default=5e-4, ge=0)
    batch_size: int = Field(default=128, ge=1)
    epochs: int = Field(default=60, ge=0)
    schedule: List[Tuple[int, float]] = [(30, 0.2)]
    dtype: Literal["float64", "float32"] = "float64"
    flips: bool = False
    max_translate: int = Field(default=0, ge=0)

    @field_validator("schedule")
    @classmethod
    def _check_schedule(cls, value):
        for epoch, multiplier in value:
            if epoch < 0 or multiplier <= 0:
                raise ValueError("schedule entries need epoch >= 0 and multiplier > 0")
        return sorted(value)

    @classmethod
    def mnist(cls, **overrides) -> "TrainConfig":
        return cls(**{"lr0": 0.005, "epochs": 60, "schedule": [(30, 0.2)], **overrides})

    @classmethod
    def cifar(cls, **overrides) -> "TrainConfig":
        preset = {
            "lr0": 0.1,
            "epochs": 200,
            "schedule": [(60, 0.2), (120, 0.2), (180, 0.2)],
            "flips": True,
            "max_translate": 4,
        }
        return cls(**{**preset, **overrides})


# Search epochs allowed per training epoch when max_expansion_epochs is unset.
DEFAULT_SEARCH_FACTOR = 4


class ExpansionConfig(BaseModel):
    # math.inf disables expansion entirely.
    epsilon: float = 1e-6
    f_exp: int = Field(default=1, ge=1)
    stability_fraction: float = Field(default=0.5, gt=0, le=1)
    max_width: Optional[int] = Field(default=None, ge=1)
    eval_every: int = Field(default=1, ge=1)
    condition: Literal["prose", "printed"] = "prose"
    max_expansion_epochs: Optional[int] = Field(default=None, ge=1)
    start_from_one: bool = True

    @field_validator("epsilon")
    @classmethod
    def _check_epsilon(cls, value):
        if not (0 < value < 1 or value == math.inf):
            raise ValueError("epsilon must lie in (0, 1), or be inf to disable expansion")
        return value

    @property
    def enabled(self) -> bool:
        return math.isfinite(self.epsilon)

    def search_limit(self, epochs: int) -> int:
        if self.max_expansion_epochs is not None:
            return self.max_expansion_epochs
        return DEFAULT_SEARCH_FACTOR * max(epochs, 1)

    @classmethod
    def mnist(cls, **overrides) -> "ExpansionConfig":
        return cls(**{"f_exp": 8, **overrides})

    @classmethod
    def cifar(cls, **overrides) -> "ExpansionConfig":
        return cls(**{"f_exp": 16, **overrides})


class SyntheticTaskSpec(BaseModel):
    num_classes: int = Field(default=2, ge=2)
    image_size: int = Field(default=12, ge=4)
    channels: int = Field(default=1, ge=1)
    difficulty: float = Field(default=0.0, ge=0, le=1)
    clusters_per_class: int = Field(default=1, ge=1)
    n_train: int = Field(default=512, ge=1)
    n_test: int = Field(default=256, ge=1)
    seed: int = 0


class DataConfig(BaseModel):
    source: Literal["synthetic", "mnist"] = "synthetic"
    synthetic: SyntheticTaskSpec = Field(default_factory=SyntheticTaskSpec)
    mnist_train_images: Optional[str] = None
    mnist_train_labels: Optional[str] = None
    mnist_test_images: Optional[str] = None
    mnist_test_labels: Optional[str] = None
    mnist_layout: Literal["native", "replicate32"] = "native"
    limit_train: Optional[int] = Field(default=None, ge=1)
    limit_test: Optional[int] = Field(default=None, ge=1)
    normalize: bool = True

    @model_validator(mode="after")
    def _check_paths(self):
        if self.source == "mnist":
            paths = [self.mnist_train_images, self.mnist_train_labels, self.mnist_test_images, self.mnist_test_labels]
            if any(p is None for p in paths):
                raise ValueError("mnist source needs train/test image and label paths")
        return self


class PruneConfig(BaseModel):
    checkpoint: Optional[str] = None
    metrics: List[MetricKind] = list(ALL_METRICS)
    scope: Literal["global", "per-layer"] = "global"
    recompute_bn: bool = True
    eval_batch_size: int = Field(default=256, ge=1)


class RunConfig(BaseModel):
    arch: Union[str, ArchSpec]
    data: DataConfig = Field(default_factory=DataConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    expansion: ExpansionConfig = Field(default_factory=ExpansionConfig)
    prune: PruneConfig = Field(default_factory=PruneConfig)
    seed: int = 0


class EpochSummary(BaseModel):
    kind: Literal["epoch"] = "epoch"
    phase: Literal["train", "search", "final"]
    epoch: int
    step: int
    lr: float
    widths: List[int]
    params: int
    train_loss: float
    train_accuracy: float
    test_loss: Optional[float] = None
    test_accuracy: Optional[float] = None


class ExpansionEvent(BaseModel):
    kind: Literal["expansion"] = "expansion"
    step: int
    epoch: int
    layers: List[int]
    old_widths: List[int]
    new_widths: List[int]
    trigger_score: float
    suppressed: bool = False


class ImportanceReport(BaseModel):
    layer: int
    metric: MetricKind
    scores: List[float]
    step: int


class PrunePoint(BaseModel):
    features_removed: int = Field(ge=0)
    accuracy: float
    params: int
    layer: Optional[int] = None
    feature: Optional[int] = None
    score: Optional[float] = None


class PruneCurve(BaseModel):
    metric: MetricKind
    scope: Literal["global", "per-layer"] = "global"
    layer: Optional[int] = None
    points: List[PrunePoint]

    @model_validator(mode="after")
    def _check_monotone(self):
        removed = [p.features_removed for p in self.points]
        if not removed or removed[0] != 0:
            raise ValueError("a prune curve starts at features_removed == 0")
        if any(b <= a for a, b in zip(removed, removed[1:])):
            raise ValueError("features_removed must be strictly increasing")
        return self


class RunRecord(BaseModel):
    run_id: str
    config_hash: str
    seed: int
    mode: Literal["train", "expand", "prune"]
    arch_name: str
    layer_names: List[str]
    epochs: List[EpochSummary] = []
    final_widths: List[int]
    final_params: int
    test_accuracy: Optional[float] = None
    test_loss: Optional[float] = None
    reset_count: int = 0
    artifacts: Dict[str, str] = {}


class RunResponse(BaseModel):
    run_id: str
    config_hash: str
    seed: int
    mode: str
    arch_name: str
    final_widths: str
    final_params: int
    test_accuracy: Optional[float] = None
    reset_count: int = 0
    wall_time: float
    out_dir: str
    created_at: datetime

    class Config:
        from_attributes = True


class EpochMetricResponse(BaseModel):
    epoch: int
    phase: str
    step: int
    params: int
    train_loss: float
    train_accuracy: float
    test_accuracy: Optional[float] = None
    widths: str

    class Config:
        from_attributes = True


class ExpansionEventResponse(BaseModel):
    step: int
    epoch: int
    layers: str
    old_widths: str
    new_widths: str
    trigger_score: float
    suppressed: bool

    class Config:
        from_attributes = True
