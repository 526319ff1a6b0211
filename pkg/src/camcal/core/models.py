"""Data models for camcal."""

import json
import math
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from typing import Any, Dict, List, Optional


class Stage(Enum):
    """Training stage of the decoupled pipeline."""
    REPRESENTATION = "representation"
    CLASSIFIER = "classifier"


class HeadKind(Enum):
    """Classifier head variant."""
    LINEAR = "linear"
    WEIGHT_NORM = "weight_norm"
    WEIGHT_NORM_SHARED_G = "weight_norm_shared_g"
    NORM_FC = "norm_fc"


class SamplerKind(Enum):
    """Batch sampling strategy."""
    INSTANCE_BALANCED = "instance_balanced"
    CLASS_BALANCED = "class_balanced"


class CamcVariant(Enum):
    """Calibration block used in the classifier stage."""
    NONE = "none"
    CAMC = "camc"
    CAMCPP = "camcpp"


class Split(Enum):
    """Class group by number of training images."""
    MANY = "many"
    MEDIUM = "medium"
    LOW = "low"


class DataSource(Enum):
    """Where training images come from."""
    SYNTHETIC = "synthetic"
    CIFAR10 = "cifar10"
    CIFAR100 = "cifar100"


# Errors


class CamcalError(Exception):
    """Base class for camcal errors."""


class InvalidArgumentError(CamcalError, ValueError):
    """An argument violates an operation's precondition."""


class FormatError(CamcalError, ValueError):
    """A file or byte buffer does not follow the expected layout."""

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(CamcalError, ArithmeticError):
    """Training produced a non-finite value."""

    def __init__(self, message: str, epoch: int = -1, batch: int = -1, lr: float = float("nan")):
        super().__init__(f"{message} (epoch={epoch}, batch={batch}, lr={lr:.6g})")
        self.epoch = epoch
        self.batch = batch
        self.lr = lr


# Defaults taken from the two-stage recipe; epochs are scaled to desk size.
DEFAULT_G = {Stage.REPRESENTATION: 0.5, Stage.CLASSIFIER: 16.0}
DEFAULT_EPOCHS = {Stage.REPRESENTATION: 30, Stage.CLASSIFIER: 10}
DEFAULT_SAMPLER = {
    Stage.REPRESENTATION: SamplerKind.INSTANCE_BALANCED,
    Stage.CLASSIFIER: SamplerKind.CLASS_BALANCED,
}
G_GRID = [2.0 ** e for e in range(-5, 6)]


def encode_float(value: Optional[float]) -> Any:
    """Encode a float for JSON, spelling infinity as "inf"."""
    if value is not None and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


def decode_float(value: Any) -> Optional[float]:
    """Inverse of encode_float."""
    if value is None:
        return None
    if isinstance(value, str):
        if value.strip().lower() in ("inf", "infinity", "+inf"):
            return math.inf
        if value.strip().lower() in ("-inf", "-infinity"):
            return -math.inf
    return float(value)


def _from_dict(cls, data: Dict[str, Any], section: str) -> Any:
    """Build a config dataclass, rejecting unknown keys field-by-field."""
    if not isinstance(data, dict):
        raise InvalidArgumentError(f"{section}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise InvalidArgumentError(
            "; ".join(f"{section}.{name}: unknown field" for name in unknown)
        )
    return cls(**data)


@dataclass
class TrainConfig:
    """Hyperparameters of one training stage."""
    stage: str = "representation"
    head: Optional[str] = None
    g: Optional[float] = None
    lr_max: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    epochs: Optional[int] = None
    sampler: Optional[str] = None
    seed: int = 0
    tau: Optional[float] = None
    k: int = 5
    camc_variant: str = "none"
    m: int = 2
    warm_start: bool = True
    augment: bool = False
    channels: List[int] = field(default_factory=lambda: [32, 64, 128, 256])

    @property
    def stage_enum(self) -> Stage:
        return Stage(self.stage)

    @property
    def head_kind(self) -> HeadKind:
        return HeadKind(self.head) if self.head else HeadKind.NORM_FC

    @property
    def effective_g(self) -> float:
        return self.g if self.g is not None else DEFAULT_G[self.stage_enum]

    @property
    def effective_epochs(self) -> int:
        return self.epochs if self.epochs is not None else DEFAULT_EPOCHS[self.stage_enum]

    @property
    def sampler_kind(self) -> SamplerKind:
        return SamplerKind(self.sampler) if self.sampler else DEFAULT_SAMPLER[self.stage_enum]

    @property
    def variant(self) -> CamcVariant:
        return CamcVariant(self.camc_variant)

    def validate(self) -> None:
        """Check field values; raises InvalidArgumentError naming every bad field."""
        problems = []
        checks = [
            ("stage", lambda: Stage(self.stage)),
            ("head", lambda: self.head is None or HeadKind(self.head)),
            ("sampler", lambda: self.sampler is None or SamplerKind(self.sampler)),
            ("camc_variant", lambda: CamcVariant(self.camc_variant)),
        ]
        for name, check in checks:
            try:
                check()
            except ValueError:
                problems.append(f"train.{name}: invalid value {getattr(self, name)!r}")
        if self.g is not None and not self.g > 0:
            problems.append(f"train.g: must be positive, got {self.g}")
        if self.lr_max < 0:
            problems.append(f"train.lr_max: must be non-negative, got {self.lr_max}")
        if not 0 <= self.momentum < 1:
            problems.append(f"train.momentum: must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            problems.append(f"train.weight_decay: must be non-negative, got {self.weight_decay}")
        if self.batch_size < 1:
            problems.append(f"train.batch_size: must be positive, got {self.batch_size}")
        if self.epochs is not None and self.epochs < 0:
            problems.append(f"train.epochs: must be non-negative, got {self.epochs}")
        if self.k < 1:
            problems.append(f"train.k: must be at least 1, got {self.k}")
        if self.m < 1:
            problems.append(f"train.m: must be at least 1, got {self.m}")
        if self.tau is not None and self.tau < 0:
            problems.append(f"train.tau: must be non-negative, got {self.tau}")
        if not self.channels or any(int(c) < 1 for c in self.channels):
            problems.append(f"train.channels: need positive channel counts, got {self.channels}")
        if not problems and self.stage_enum is Stage.CLASSIFIER:
            if self.sampler_kind is not SamplerKind.CLASS_BALANCED:
                problems.append("train.sampler: the classifier stage samples class_balanced")
            if self.variant is not CamcVariant.NONE and self.head_kind is not HeadKind.NORM_FC:
                problems.append("train.head: calibration requires the norm_fc head")
        if problems:
            raise InvalidArgumentError("; ".join(problems))

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["tau"] = encode_float(self.tau)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        config = _from_dict(cls, data, "train")
        config.tau = decode_float(config.tau)
        config.channels = [int(c) for c in config.channels]
        return config


@dataclass
class DatasetSpec:
    """Where the long-tailed training set comes from and how it is cut."""
    source: Optional[str] = None
    rho: float = 100.0
    base_per_class: Optional[int] = None
    num_classes: int = 10
    image_size: int = 32
    seed: Optional[int] = None
    data_path: Optional[str] = None
    dataset_dir: Optional[str] = None
    val_per_class: int = 20
    test_per_class: int = 50

    @property
    def source_enum(self) -> DataSource:
        return DataSource(self.source)

    @property
    def effective_base_per_class(self) -> int:
        """Largest-class size: 5000 for CIFAR-10, 500 otherwise, unless set."""
        if self.base_per_class is not None:
            return self.base_per_class
        return 5000 if self.source == DataSource.CIFAR10.value else 500

    @property
    def effective_num_classes(self) -> int:
        return {DataSource.CIFAR10.value: 10, DataSource.CIFAR100.value: 100}.get(
            self.source, self.num_classes
        )

    @property
    def effective_seed(self) -> int:
        return self.seed if self.seed is not None else 0

    def validate(self) -> None:
        problems = []
        if self.source is None and self.dataset_dir is None:
            problems.append("dataset.source: required")
        elif self.source is not None:
            try:
                DataSource(self.source)
            except ValueError:
                problems.append(f"dataset.source: invalid value {self.source!r}")
        if self.rho < 1:
            problems.append(f"dataset.rho: must be at least 1, got {self.rho}")
        if self.base_per_class is not None and self.base_per_class < 1:
            problems.append(f"dataset.base_per_class: must be positive, got {self.base_per_class}")
        if self.num_classes < 1:
            problems.append(f"dataset.num_classes: must be positive, got {self.num_classes}")
        if self.image_size < 16:
            problems.append(f"dataset.image_size: must be at least 16, got {self.image_size}")
        if problems:
            raise InvalidArgumentError("; ".join(problems))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DatasetSpec":
        return _from_dict(cls, data, "dataset")


@dataclass
class EvalOptions:
    """Evaluation and split settings."""
    many_threshold: int = 100
    few_threshold: int = 20
    class_averaged: bool = False
    groups: int = 10
    jobs: Optional[int] = None

    def validate(self) -> None:
        problems = []
        if self.few_threshold > self.many_threshold:
            problems.append(
                f"eval.few_threshold: {self.few_threshold} exceeds many_threshold {self.many_threshold}"
            )
        if self.groups < 1:
            problems.append(f"eval.groups: must be positive, got {self.groups}")
        if self.jobs is not None and self.jobs < 1:
            problems.append(f"eval.jobs: must be positive, got {self.jobs}")
        if problems:
            raise InvalidArgumentError("; ".join(problems))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EvalOptions":
        return _from_dict(cls, data, "eval")


@dataclass
class RunConfig:
    """A full experiment record: training, dataset and evaluation settings."""
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    eval: EvalOptions = field(default_factory=EvalOptions)
    output_dir: Optional[str] = None

    def validate(self) -> None:
        problems = []
        for part in (self.train, self.dataset, self.eval):
            try:
                part.validate()
            except InvalidArgumentError as e:
                problems.append(str(e))
        if problems:
            raise InvalidArgumentError("; ".join(problems))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "train": self.train.to_dict(),
            "dataset": self.dataset.to_dict(),
            "eval": self.eval.to_dict(),
            "output_dir": self.output_dir,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        if not isinstance(data, dict):
            raise InvalidArgumentError("config: expected a JSON object")
        unknown = sorted(set(data) - {"train", "dataset", "eval", "output_dir"})
        if unknown:
            raise InvalidArgumentError("; ".join(f"{name}: unknown field" for name in unknown))
        return cls(
            train=TrainConfig.from_dict(data.get("train", {})),
            dataset=DatasetSpec.from_dict(data.get("dataset", {})),
            eval=EvalOptions.from_dict(data.get("eval", {})),
            output_dir=data.get("output_dir"),
        )

    @classmethod
    def from_json(cls, json_str: str) -> "RunConfig":
        try:
            data = json.loads(json_str)
        except json.JSONDecodeError as e:
            raise InvalidArgumentError(f"config: not valid JSON ({e})")
        return cls.from_dict(data)


# Help text for every config field, keyed by section; drives the CLI options.
FIELD_HELP: Dict[str, Dict[str, str]] = {
    "train": {
        "stage": "Training stage: representation or classifier",
        "head": "Head kind: linear, weight_norm, weight_norm_shared_g, norm_fc (default norm_fc)",
        "g": "Magnitude g of the normalized head (default 0.5 stage 1, 16 stage 2)",
        "lr_max": "Peak learning rate of the cosine schedule",
        "momentum": "SGD momentum",
        "weight_decay": "Constant weight decay on backbone and head weights",
        "batch_size": "Images per SGD step",
        "epochs": "Training epochs (default 30 stage 1, 10 stage 2)",
        "sampler": "instance_balanced or class_balanced (stage default if unset)",
        "seed": "Seed for initialization and sampling",
        "tau": "Calibrate classes with fewer training images than tau ('inf' for all)",
        "k": "Prototypes per calibrated class",
        "camc_variant": "Calibration block: none, camc or camcpp",
        "m": "CAMC++ crop grid side",
        "warm_start": "Start the stage-2 head from the stage-1 weights",
        "augment": "Random horizontal flip and padded random crop",
        "channels": "Backbone channels per conv stage, comma separated",
    },
    "dataset": {
        "source": "synthetic, cifar10 or cifar100",
        "rho": "Imbalance ratio max(N_i)/min(N_i)",
        "base_per_class": "Images in the largest class (default 5000 for cifar10, else 500)",
        "num_classes": "Number of classes",
        "image_size": "Side of the square synthetic images",
        "seed": "Seed for dataset construction (default: the train seed)",
        "data_path": "Directory holding the CIFAR binary batches",
        "dataset_dir": "Directory of a dataset written by make-dataset",
        "val_per_class": "Balanced validation images per class",
        "test_per_class": "Balanced test images per class",
    },
    "eval": {
        "many_threshold": "Classes with more training images than this are many-shot",
        "few_threshold": "Classes with fewer training images than this are low-shot",
        "class_averaged": "Average split accuracies over classes instead of images",
        "groups": "Number of count-sorted class groups for gain reports",
        "jobs": "Evaluation/sweep workers (default CAMCAL_THREADS)",
    },
}
