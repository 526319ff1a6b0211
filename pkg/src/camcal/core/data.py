"""Long-tailed datasets: count profiles, CIFAR ingestion, synthetic shapes and sampling."""

import json
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .models import (
    DataSource,
    DatasetSpec,
    FormatError,
    InvalidArgumentError,
    SamplerKind,
    Split,
)

logger = logging.getLogger(__name__)

MANY_THRESHOLD = 100
FEW_THRESHOLD = 20

CIFAR_RECORD_SIZE = {"cifar10": 3073, "cifar100": 3074}
CIFAR_NUM_CLASSES = {"cifar10": 10, "cifar100": 100}
CIFAR_COARSE_CLASSES = 20
CIFAR_PIXELS = 3 * 32 * 32
CIFAR_TRAIN_FILES = {
    "cifar10": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "cifar100": ["train.bin"],
}
CIFAR_TEST_FILES = {"cifar10": ["test_batch.bin"], "cifar100": ["test.bin"]}

DATASET_FORMAT = "camcal-dataset"
DATASET_VERSION = 1

# Held-out synthetic sets draw from seeds offset from the training seed.
VAL_SEED_OFFSET = 7919
TEST_SEED_OFFSET = 104729


def split_for_count(count: int, many: int = MANY_THRESHOLD, few: int = FEW_THRESHOLD) -> Split:
    """Many iff count > many, low iff count < few, medium otherwise."""
    if count > many:
        return Split.MANY
    if count < few:
        return Split.LOW
    return Split.MEDIUM


@dataclass
class LongTailedDataset:
    """Labeled images with per-class counts and split tags.

    Arrays are made read-only on construction; derive new datasets with subset().
    """
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    many_threshold: int = MANY_THRESHOLD
    few_threshold: int = FEW_THRESHOLD
    class_names: Optional[List[str]] = None
    seed: Optional[int] = None
    rho: Optional[float] = None
    source: str = "synthetic"
    coarse_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise InvalidArgumentError(
                f"images {self.images.shape} and labels {self.labels.shape} do not pair up"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InvalidArgumentError(f"labels must lie in [0, {self.num_classes})")
        self.images.flags.writeable = False
        self.labels.flags.writeable = False
        if self.class_names is None:
            self.class_names = [f"class_{c}" for c in range(self.num_classes)]

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @cached_property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    @property
    def split_of(self) -> List[Split]:
        return split_tags(self.class_counts, self.many_threshold, self.few_threshold)

    @property
    def imbalance_ratio(self) -> float:
        counts = self.class_counts
        return float(counts.max()) / float(counts.min()) if counts.min() > 0 else math.inf

    @cached_property
    def _by_class(self) -> Tuple[np.ndarray, np.ndarray]:
        order = np.argsort(self.labels, kind="stable")
        offsets = np.concatenate([[0], np.cumsum(self.class_counts)[:-1]])
        return order, offsets

    def indices_of(self, class_index: int) -> np.ndarray:
        """Dataset indices of one class, in dataset order."""
        order, offsets = self._by_class
        start = offsets[class_index]
        return order[start:start + self.class_counts[class_index]]

    def subset(self, indices: Sequence[int]) -> "LongTailedDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LongTailedDataset(
            images=self.images[indices],
            labels=self.labels[indices],
            num_classes=self.num_classes,
            many_threshold=self.many_threshold,
            few_threshold=self.few_threshold,
            class_names=list(self.class_names),
            seed=self.seed,
            rho=self.rho,
            source=self.source,
            coarse_labels=None if self.coarse_labels is None else self.coarse_labels[indices],
        )

    def with_thresholds(self, many: int, few: int) -> "LongTailedDataset":
        dataset = self.subset(np.arange(len(self)))
        dataset.many_threshold = many
        dataset.few_threshold = few
        return dataset


def split_tags(counts: Sequence[int], many: int = MANY_THRESHOLD, few: int = FEW_THRESHOLD) -> List[Split]:
    """Split tag per class; a pure function of the counts and thresholds."""
    return [split_for_count(int(n), many, few) for n in counts]


# Count profiles


def longtail_profile(base_per_class: int, num_classes: int, rho: float) -> List[int]:
    """Exponential per-class counts n_i = base * rho^(-i/(N-1)).

    Counts are truncated to integers (the usual CIFAR-LT recipe), the last class
    is base/rho computed directly, and every class keeps at least one image.

    Raises:
        InvalidArgumentError: If rho < 1, num_classes < 1 or base/rho < 1
    """
    if rho < 1:
        raise InvalidArgumentError(f"rho must be at least 1, got {rho}")
    if num_classes < 1 or base_per_class < 1:
        raise InvalidArgumentError("num_classes and base_per_class must be positive")
    if base_per_class / rho < 1:
        raise InvalidArgumentError(
            f"base_per_class/rho must be at least 1, got {base_per_class}/{rho}"
        )
    if num_classes == 1:
        return [base_per_class]
    counts = []
    for i in range(num_classes):
        if i == 0:
            value = float(base_per_class)
        elif i == num_classes - 1:
            value = base_per_class / rho
        else:
            value = base_per_class * rho ** (-i / (num_classes - 1))
        # Nudge for representation error so exact products like 5000*0.01 stay 50.
        counts.append(max(1, int(math.floor(value + 1e-9))))
    return counts


def class_permutation(seed: int, num_classes: int) -> np.ndarray:
    """Class indices in the order the count profile is handed out: perm[0] gets the most images."""
    return np.random.default_rng(seed).permutation(num_classes)


def make_longtailed(
    base_per_class: int,
    num_classes: int,
    rho: float,
    seed: int,
    source: Optional[LongTailedDataset] = None,
    image_size: int = 32,
) -> LongTailedDataset:
    """Cut a long-tailed training set following longtail_profile().

    With a source collection, class perm[i] keeps its first n_i items in file order,
    where perm = class_permutation(seed, num_classes). Without one, synthetic shapes
    are drawn with exactly the profile counts.

    Raises:
        InvalidArgumentError: On a bad profile, or when the source lacks images
    """
    counts = longtail_profile(base_per_class, num_classes, rho)
    if source is None:
        dataset = synth_shapes(num_classes, counts, image_size, seed)
        dataset.rho = rho
        return dataset

    if source.num_classes != num_classes:
        raise InvalidArgumentError(
            f"source has {source.num_classes} classes, profile asks for {num_classes}"
        )
    permutation = class_permutation(seed, num_classes)
    keep = []
    for rank, class_index in enumerate(permutation):
        available = source.indices_of(int(class_index))
        if len(available) < counts[rank]:
            raise InvalidArgumentError(
                f"class {class_index} has {len(available)} images, profile needs {counts[rank]}"
            )
        keep.append(available[:counts[rank]])
    dataset = source.subset(np.sort(np.concatenate(keep)))
    dataset.seed = seed
    dataset.rho = rho
    logger.info("cut long-tailed set: rho=%s counts=%s", rho, dataset.class_counts.tolist())
    return dataset


def default_tau(source: str, rho: float, counts: Sequence[int]) -> float:
    """Calibration threshold presets: CIFAR100-LT 100, CIFAR10-LT 1000/200, else the median count."""
    if source == DataSource.CIFAR100.value:
        return 100.0
    if source == DataSource.CIFAR10.value:
        return 1000.0 if rho <= 50 else 200.0
    return float(np.median(np.asarray(counts, dtype=np.float64)))


# CIFAR binary format


def decode_cifar_binary(raw: bytes, variant: str) -> LongTailedDataset:
    """Decode CIFAR binary records; pixels are scaled to [0, 1].

    Raises:
        FormatError: On a truncated record or an out-of-range label byte
    """
    if variant not in CIFAR_RECORD_SIZE:
        raise InvalidArgumentError(f"unknown CIFAR variant {variant!r}")
    size = CIFAR_RECORD_SIZE[variant]
    num_classes = CIFAR_NUM_CLASSES[variant]
    if len(raw) % size:
        start = (len(raw) // size) * size
        raise FormatError(
            f"truncated {variant} record: {len(raw) - start} of {size} bytes present", offset=start
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, size)
    label_column = size - CIFAR_PIXELS - 1
    labels = records[:, label_column].astype(np.int64)
    bad = np.nonzero(labels >= num_classes)[0]
    if bad.size:
        row = int(bad[0])
        raise FormatError(
            f"label {labels[row]} out of range for {variant}", offset=row * size + label_column
        )
    coarse = None
    if variant == "cifar100":
        coarse = records[:, 0].astype(np.int64)
        bad = np.nonzero(coarse >= CIFAR_COARSE_CLASSES)[0]
        if bad.size:
            row = int(bad[0])
            raise FormatError(f"coarse label {coarse[row]} out of range", offset=row * size)
    images = records[:, size - CIFAR_PIXELS:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return LongTailedDataset(
        images=images,
        labels=labels,
        num_classes=num_classes,
        source=variant,
        coarse_labels=coarse,
    )


def load_cifar_binary(path: Path, variant: str) -> LongTailedDataset:
    """Read one CIFAR-10/100 binary batch file."""
    return decode_cifar_binary(Path(path).read_bytes(), variant)


def encode_cifar_binary(dataset: LongTailedDataset, variant: str) -> bytes:
    """Encode images and labels back into CIFAR binary records."""
    pixels = np.rint(np.asarray(dataset.images) * 255.0).clip(0, 255).astype(np.uint8)
    if pixels.shape[1:] != (3, 32, 32):
        raise InvalidArgumentError(f"CIFAR records hold 3x32x32 images, got {pixels.shape[1:]}")
    columns = [dataset.labels.astype(np.uint8)[:, None]]
    if variant == "cifar100":
        coarse = dataset.coarse_labels
        if coarse is None:
            coarse = np.zeros(len(dataset), dtype=np.int64)
        columns.insert(0, coarse.astype(np.uint8)[:, None])
    columns.append(pixels.reshape(len(dataset), -1))
    return np.concatenate(columns, axis=1).tobytes()


def _cifar_layout(variant: str) -> str:
    if variant == "cifar10":
        return "3073-byte records: 1 label byte, then 1024 R, 1024 G, 1024 B bytes (32x32 row-major)"
    return "3074-byte records: coarse label byte, fine label byte, then 3072 pixel bytes"


def load_cifar_split(data_path: Path, variant: str, train: bool = True) -> LongTailedDataset:
    """Load and concatenate the standard CIFAR binary batch files of one split.

    Raises:
        FileNotFoundError: Naming the missing files and the expected byte layout
    """
    names = (CIFAR_TRAIN_FILES if train else CIFAR_TEST_FILES)[variant]
    paths = [Path(data_path) / name for name in names]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise FileNotFoundError(
            f"missing CIFAR files: {', '.join(missing)}; expected {_cifar_layout(variant)}"
        )
    parts = [load_cifar_binary(p, variant) for p in paths]
    coarse = None
    if variant == "cifar100":
        coarse = np.concatenate([p.coarse_labels for p in parts])
    return LongTailedDataset(
        images=np.concatenate([p.images for p in parts]),
        labels=np.concatenate([p.labels for p in parts]),
        num_classes=CIFAR_NUM_CLASSES[variant],
        source=variant,
        coarse_labels=coarse,
    )


# Synthetic shapes


PatternFn = Callable[[np.ndarray, np.ndarray, np.random.Generator], np.ndarray]


def _stripes(coord: np.ndarray, periods: float = 2.5) -> np.ndarray:
    return np.floor((coord + 1.0) * periods) % 2 == 0


def _corner_blobs(u, v, rng):
    mask = np.zeros_like(u, dtype=bool)
    for cu, cv in ((-0.6, -0.6), (0.6, -0.6), (-0.6, 0.6), (0.6, 0.6)):
        mask |= (u - cu) ** 2 + (v - cv) ** 2 < 0.12
    return mask


def _dot_grid(u, v, rng):
    mask = np.zeros_like(u, dtype=bool)
    for cu in (-0.6, 0.0, 0.6):
        for cv in (-0.6, 0.0, 0.6):
            mask |= (u - cu) ** 2 + (v - cv) ** 2 < 0.04
    return mask


PATTERNS: Dict[str, PatternFn] = {
    "horizontal_bars": lambda u, v, rng: _stripes(v),
    "vertical_bars": lambda u, v, rng: _stripes(u),
    "diagonal_bars": lambda u, v, rng: _stripes((u + v) / 2.0, 3.0),
    "ring": lambda u, v, rng: np.abs(np.hypot(u, v) - 0.65) < 0.18,
    "disk": lambda u, v, rng: np.hypot(u, v) < 0.6,
    "checkers": lambda u, v, rng: (np.floor((u + 1) * 2) + np.floor((v + 1) * 2)) % 2 == 0,
    "plus": lambda u, v, rng: (np.abs(u) < 0.22) | (np.abs(v) < 0.22),
    "cross": lambda u, v, rng: (np.abs(u - v) < 0.3) | (np.abs(u + v) < 0.3),
    "corner_blobs": _corner_blobs,
    "triangle": lambda u, v, rng: (v > 2.0 * np.abs(u) - 1.0) & (v < 0.8),
    "frame": lambda u, v, rng: (np.maximum(np.abs(u), np.abs(v)) > 0.6)
    & (np.maximum(np.abs(u), np.abs(v)) < 0.9),
    "dot_grid": _dot_grid,
    "anti_diagonal_bars": lambda u, v, rng: _stripes((u - v) / 2.0, 3.0),
    "half_disk": lambda u, v, rng: (np.hypot(u, v) < 0.8) & (v > 0),
    "diamond": lambda u, v, rng: np.abs(u) + np.abs(v) < 0.75,
    "concentric": lambda u, v, rng: np.sin(np.hypot(u, v) * 10.0) > 0,
}


def _draw_image(pattern: PatternFn, size: int, channels: int, rng: np.random.Generator) -> np.ndarray:
    canvas = rng.uniform(0.0, 0.35, size=(channels, size, size))
    # clutter
    for _ in range(2):
        side = int(rng.integers(2, max(3, size // 4)))
        y, x = rng.integers(0, size - side, size=2)
        canvas[:, y:y + side, x:x + side] += rng.uniform(0.0, 0.3, size=(channels, 1, 1))

    side = int(rng.integers(size // 2, size - size // 8 + 1))
    y, x = rng.integers(0, size - side + 1, size=2)
    coords = np.linspace(-1.0, 1.0, side)
    v, u = np.meshgrid(coords, coords, indexing="ij")
    mask = pattern(u, v, rng).astype(np.float64)
    color = rng.uniform(0.65, 1.0, size=(channels, 1, 1))
    region = canvas[:, y:y + side, x:x + side]
    canvas[:, y:y + side, x:x + side] = region * (1.0 - mask) + color * mask
    return np.clip(canvas, 0.0, 1.0)


def synth_shapes(
    num_classes: int,
    counts: Sequence[int],
    image_size: int,
    seed: int,
    channels: int = 3,
) -> LongTailedDataset:
    """Procedural long-tailed image set: one pattern generator per class.

    Each image places its class pattern at a random position and scale on a
    cluttered noise background. Output is bit-identical for equal arguments.

    Raises:
        InvalidArgumentError: If image_size < 16, counts do not match num_classes,
            or there are more classes than pattern generators
    """
    if image_size < 16:
        raise InvalidArgumentError(f"image_size must be at least 16, got {image_size}")
    if num_classes > len(PATTERNS):
        raise InvalidArgumentError(
            f"{num_classes} classes requested, only {len(PATTERNS)} pattern generators exist"
        )
    if len(counts) != num_classes or any(int(n) < 0 for n in counts):
        raise InvalidArgumentError("counts must give one non-negative count per class")

    rng = np.random.default_rng(seed)
    names = list(PATTERNS)[:num_classes]
    images = np.zeros((int(sum(counts)), channels, image_size, image_size), dtype=np.float32)
    labels = np.zeros(len(images), dtype=np.int64)
    position = 0
    for class_index, name in enumerate(names):
        for _ in range(int(counts[class_index])):
            images[position] = _draw_image(PATTERNS[name], image_size, channels, rng)
            labels[position] = class_index
            position += 1
    return LongTailedDataset(
        images=images,
        labels=labels,
        num_classes=num_classes,
        class_names=names,
        seed=seed,
        source=DataSource.SYNTHETIC.value,
    )


# Sampling


@dataclass
class SamplerSpec:
    """How batches are drawn."""
    kind: SamplerKind = SamplerKind.INSTANCE_BALANCED
    seed: int = 0
    batch_size: int = 64


def sample_indices(
    dataset: LongTailedDataset, spec: SamplerSpec, rng: np.random.Generator
) -> np.ndarray:
    """Draw batch_size dataset indices with replacement per the sampler kind.

    Raises:
        InvalidArgumentError: On an empty dataset, or an empty class under class_balanced
    """
    if len(dataset) == 0:
        raise InvalidArgumentError("cannot sample from an empty dataset")
    if spec.batch_size < 1:
        raise InvalidArgumentError(f"batch_size must be positive, got {spec.batch_size}")
    if spec.kind is SamplerKind.INSTANCE_BALANCED:
        return rng.integers(0, len(dataset), size=spec.batch_size)

    counts = dataset.class_counts
    empty = np.nonzero(counts == 0)[0]
    if empty.size:
        raise InvalidArgumentError(f"class {int(empty[0])} is empty; class_balanced needs every class")
    order, offsets = dataset._by_class
    classes = rng.integers(0, dataset.num_classes, size=spec.batch_size)
    within = rng.integers(0, counts[classes])
    return order[offsets[classes] + within]


def sample_batch(
    dataset: LongTailedDataset, spec: SamplerSpec, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    """One batch of (images, labels); advances `rng`."""
    indices = sample_indices(dataset, spec, rng)
    return dataset.images[indices], dataset.labels[indices]


class BatchSampler:
    """A sampler that owns its RNG stream."""

    def __init__(
        self, dataset: LongTailedDataset, spec: SamplerSpec, rng: Optional[np.random.Generator] = None
    ):
        self.dataset = dataset
        self.spec = spec
        self.rng = rng if rng is not None else np.random.default_rng(spec.seed)

    @property
    def batches_per_epoch(self) -> int:
        return max(1, math.ceil(len(self.dataset) / self.spec.batch_size))

    def next_indices(self) -> np.ndarray:
        return sample_indices(self.dataset, self.spec, self.rng)

    def next_batch(self) -> Tuple[np.ndarray, np.ndarray]:
        return sample_batch(self.dataset, self.spec, self.rng)


def augment_batch(
    images: np.ndarray, rng: np.random.Generator, flip: bool = True, crop_padding: int = 4
) -> np.ndarray:
    """Random horizontal flip and zero-padded random crop, per image."""
    out = np.array(images, copy=True)
    n, _, h, w = out.shape
    if flip:
        flips = rng.random(n) < 0.5
        out[flips] = out[flips][..., ::-1]
    if crop_padding > 0:
        p = crop_padding
        padded = np.pad(out, ((0, 0), (0, 0), (p, p), (p, p)))
        offsets = rng.integers(0, 2 * p + 1, size=(n, 2))
        for i, (dy, dx) in enumerate(offsets):
            out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    return out


# Dataset directories


def save_dataset(dataset: LongTailedDataset, directory: Path) -> Path:
    """Write manifest.json, images.bin (LE float32) and labels.bin (LE int32)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "source": dataset.source,
        "num_classes": dataset.num_classes,
        "class_names": dataset.class_names,
        "counts": dataset.class_counts.tolist(),
        "splits": [s.value for s in dataset.split_of],
        "many_threshold": dataset.many_threshold,
        "few_threshold": dataset.few_threshold,
        "seed": dataset.seed,
        "rho": dataset.rho,
        "image_shape": list(dataset.image_shape),
        "length": len(dataset),
    }
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (directory / "images.bin").write_bytes(dataset.images.astype("<f4").tobytes())
    (directory / "labels.bin").write_bytes(dataset.labels.astype("<i4").tobytes())
    return directory


def load_dataset(directory: Path) -> LongTailedDataset:
    """Read a directory written by save_dataset().

    Raises:
        FormatError: If the manifest and blobs disagree
    """
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("format") != DATASET_FORMAT or manifest.get("version") != DATASET_VERSION:
        raise FormatError(f"{directory} is not a version-{DATASET_VERSION} camcal dataset")
    shape = [int(manifest["length"])] + [int(d) for d in manifest["image_shape"]]
    raw_images = (directory / "images.bin").read_bytes()
    raw_labels = (directory / "labels.bin").read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(raw_images) != expected:
        raise FormatError(f"images.bin holds {len(raw_images)} bytes, manifest implies {expected}")
    if len(raw_labels) != shape[0] * 4:
        raise FormatError(f"labels.bin holds {len(raw_labels)} bytes, manifest implies {shape[0] * 4}")
    dataset = LongTailedDataset(
        images=np.frombuffer(raw_images, dtype="<f4").reshape(shape),
        labels=np.frombuffer(raw_labels, dtype="<i4"),
        num_classes=int(manifest["num_classes"]),
        many_threshold=int(manifest["many_threshold"]),
        few_threshold=int(manifest["few_threshold"]),
        class_names=list(manifest["class_names"]),
        seed=manifest.get("seed"),
        rho=manifest.get("rho"),
        source=manifest.get("source", "synthetic"),
    )
    if dataset.class_counts.tolist() != manifest["counts"]:
        raise FormatError("labels.bin counts differ from the manifest")
    return dataset


# Experiment datasets


@dataclass
class DataSplits:
    """Training, validation and test sets of one experiment."""
    train: LongTailedDataset
    val: LongTailedDataset
    test: LongTailedDataset


def _balanced_head(dataset: LongTailedDataset, per_class: int, skip: int = 0) -> np.ndarray:
    picks = [dataset.indices_of(c)[skip:skip + per_class] for c in range(dataset.num_classes)]
    return np.sort(np.concatenate(picks)) if picks else np.zeros(0, dtype=np.int64)


def build_train_set(spec: DatasetSpec) -> LongTailedDataset:
    """The long-tailed training set a dataset spec describes."""
    if spec.dataset_dir:
        return load_dataset(Path(spec.dataset_dir))
    spec.validate()
    if spec.source == DataSource.SYNTHETIC.value:
        return make_longtailed(
            spec.effective_base_per_class,
            spec.num_classes,
            spec.rho,
            spec.effective_seed,
            image_size=spec.image_size,
        )
    if not spec.data_path:
        raise InvalidArgumentError(f"dataset.data_path: required for source {spec.source}")
    full = load_cifar_split(Path(spec.data_path), spec.source, train=True)
    return make_longtailed(
        spec.effective_base_per_class,
        spec.effective_num_classes,
        spec.rho,
        spec.effective_seed,
        source=full,
    )


def build_datasets(
    spec: DatasetSpec, many: int = MANY_THRESHOLD, few: int = FEW_THRESHOLD
) -> DataSplits:
    """Build train/val/test for a dataset spec.

    Synthetic val/test sets are balanced draws from seeds disjoint from training.
    CIFAR val/test come from the official test batch: the first val_per_class
    images of each class validate, the next test_per_class images test.
    """
    train = build_train_set(spec).with_thresholds(many, few)
    seed = train.seed if train.seed is not None else spec.effective_seed
    if train.source == DataSource.SYNTHETIC.value:
        size = train.image_shape[-1]
        n = train.num_classes
        val = synth_shapes(n, [spec.val_per_class] * n, size, seed + VAL_SEED_OFFSET)
        test = synth_shapes(n, [spec.test_per_class] * n, size, seed + TEST_SEED_OFFSET)
    else:
        if not spec.data_path:
            raise InvalidArgumentError(f"dataset.data_path: required for source {train.source}")
        held_out = load_cifar_split(Path(spec.data_path), train.source, train=False)
        val = held_out.subset(_balanced_head(held_out, spec.val_per_class))
        test = held_out.subset(
            _balanced_head(held_out, spec.test_per_class, skip=spec.val_per_class)
        )
    return DataSplits(train=train, val=val, test=test)
