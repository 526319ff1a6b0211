"""Two-stage decoupled training, the optimizer and the ablation sweeps."""

import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np

from .camc import init_prototypes
from .checkpoint import Checkpoint, backbone_from_checkpoint, head_from_checkpoint, model_to_checkpoint
from .config import resolve_jobs
from .data import (
    BatchSampler,
    LongTailedDataset,
    SamplerSpec,
    augment_batch,
    default_tau,
)
from .evaluation import SplitReport, evaluate, report_from_predictions
from .functional import softmax_cross_entropy
from .models import (
    G_GRID,
    CamcalError,
    CamcVariant,
    HeadKind,
    InvalidArgumentError,
    NumericalError,
    Stage,
    TrainConfig,
    encode_float,
)
from .network import Backbone, ClassifierHead, ncm_fit_labeled, ncm_predict
from .pipeline import Model
from .tensor import Tensor, backward, parameter

logger = logging.getLogger(__name__)

T = TypeVar("T")

# Independent RNG streams derived from the run seed.
STREAM_INIT = 1
STREAM_SAMPLER = 2
STREAM_AUGMENT = 3
STREAM_HEAD = 4


def rng_for(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


# Optimization


def sgd_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[np.ndarray]],
    lr: float,
    momentum: float,
    velocity: Optional[List[np.ndarray]] = None,
    weight_decay: Union[float, Sequence[float]] = 0.0,
) -> List[np.ndarray]:
    """Heavy-ball SGD: v <- momentum*v + grad (+ wd*p); p <- p - lr*v.

    Parameters are updated in place; the new velocity is returned. A missing
    gradient counts as zero.
    """
    if velocity is None:
        velocity = [np.zeros_like(p.data) for p in params]
    if isinstance(weight_decay, (int, float)):
        weight_decay = [float(weight_decay)] * len(params)
    if not len(params) == len(grads) == len(velocity) == len(weight_decay):
        raise InvalidArgumentError("params, grads, velocity and weight decays must pair up")
    updated = []
    for p, g, v, decay in zip(params, grads, velocity, weight_decay):
        g = np.zeros_like(p.data) if g is None else np.asarray(g)
        if g.shape != p.shape or v.shape != p.shape:
            raise InvalidArgumentError(f"gradient {g.shape} or velocity {v.shape} does not match {p.shape}")
        if decay:
            g = g + decay * p.data
        v = momentum * v + g
        p.data = np.asarray(p.data - lr * v, dtype=p.dtype)
        updated.append(v)
    return updated


def cosine_lr(epoch: int, total_epochs: int, lr_max: float) -> float:
    """0.5 * lr_max * (1 + cos(pi * epoch / total_epochs))."""
    if not 0 <= epoch < total_epochs:
        raise InvalidArgumentError(f"epoch {epoch} outside [0, {total_epochs})")
    return 0.5 * lr_max * (1.0 + math.cos(math.pi * epoch / total_epochs))


# Training records


@dataclass
class EpochRecord:
    """Metrics of one epoch."""
    stage: str
    epoch: int
    lr: float
    loss: float
    val: Optional[SplitReport] = None
    labels_seen: List[int] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        record = {"stage": self.stage, "epoch": self.epoch, "lr": self.lr, "loss": self.loss}
        for name in ("top1_all", "top1_many", "top1_medium", "top1_low"):
            record[name] = getattr(self.val, name) if self.val is not None else None
        record["labels_seen"] = self.labels_seen
        return record


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: Model
    history: List[EpochRecord] = field(default_factory=list)

    @property
    def losses(self) -> List[float]:
        return [r.loss for r in self.history]


EpochCallback = Callable[[EpochRecord], None]


def _decays(model: Model, weight_decay: float) -> Dict[str, float]:
    """Constant decay on backbone and head weights; none on biases, magnitudes or CAMC."""
    return {
        name: weight_decay if name.endswith(".weight") and not name.startswith("camc.") else 0.0
        for name in model.trainable_parameters()
    }


def _run_epochs(
    model: Model,
    config: TrainConfig,
    sampler: BatchSampler,
    batch_loss: Callable[[np.ndarray, int], Tensor],
    validate: Callable[[], Optional[SplitReport]],
    on_epoch: Optional[EpochCallback],
) -> List[EpochRecord]:
    params = model.trainable_parameters()
    decays = _decays(model, config.weight_decay)
    names = list(params)
    velocity = None
    history = []
    epochs = config.effective_epochs
    num_classes = sampler.dataset.num_classes
    for epoch in range(epochs):
        lr = cosine_lr(epoch, epochs, config.lr_max)
        losses = []
        seen = np.zeros(num_classes, dtype=np.int64)
        for batch in range(sampler.batches_per_epoch):
            indices = sampler.next_indices()
            seen += np.bincount(sampler.dataset.labels[indices], minlength=num_classes)
            model.zero_grad()
            loss = batch_loss(indices, epoch)
            if not loss.is_finite():
                raise NumericalError("non-finite training loss", epoch, batch, lr)
            backward(loss)
            grads = [params[n].grad for n in names]
            if any(g is not None and not np.all(np.isfinite(g)) for g in grads):
                raise NumericalError("non-finite gradient", epoch, batch, lr)
            velocity = sgd_step(
                [params[n] for n in names], grads, lr, config.momentum, velocity, [decays[n] for n in names]
            )
            losses.append(loss.item())
        record = EpochRecord(
            stage=config.stage,
            epoch=epoch,
            lr=lr,
            loss=float(np.mean(losses)),
            val=validate(),
            labels_seen=seen.tolist(),
        )
        val_all = record.val.top1_all if record.val is not None else None
        logger.info("stage=%s epoch=%d lr=%.6g loss=%.4f val_top1=%s", config.stage, epoch, lr, record.loss, val_all)
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
    model.zero_grad()
    return history


def _dataset_meta(dataset: LongTailedDataset) -> Dict[str, Any]:
    return {
        "class_counts": dataset.class_counts.tolist(),
        "image_shape": list(dataset.image_shape),
        "source": dataset.source,
        "rho": dataset.rho,
        "many_threshold": dataset.many_threshold,
        "few_threshold": dataset.few_threshold,
    }


def train_stage1(
    dataset: LongTailedDataset,
    config: TrainConfig,
    val: Optional[LongTailedDataset] = None,
    on_epoch: Optional[EpochCallback] = None,
) -> TrainResult:
    """Representation learning: backbone and head trained jointly.

    Raises:
        InvalidArgumentError: If the config is not a valid representation-stage config
        NumericalError: On a non-finite loss or gradient
    """
    config.validate()
    if config.stage_enum is not Stage.REPRESENTATION:
        raise InvalidArgumentError("train.stage: train_stage1 needs stage=representation")
    init_rng = rng_for(config.seed, STREAM_INIT)
    backbone = Backbone.create(config.channels, dataset.image_shape[0], init_rng)
    head = ClassifierHead.create(
        config.head_kind, dataset.num_classes, backbone.out_channels, config.effective_g, init_rng
    )
    model = Model(backbone, head, Stage.REPRESENTATION)
    sampler = BatchSampler(
        dataset,
        SamplerSpec(config.sampler_kind, config.seed, config.batch_size),
        rng=rng_for(config.seed, STREAM_SAMPLER),
    )
    augment_rng = rng_for(config.seed, STREAM_AUGMENT)

    def batch_loss(indices: np.ndarray, epoch: int) -> Tensor:
        images = np.asarray(dataset.images[indices])
        if config.augment:
            images = augment_batch(images, augment_rng)
        return softmax_cross_entropy(model.scores(images), dataset.labels[indices])

    def validate() -> Optional[SplitReport]:
        if val is None:
            return None
        return evaluate(model, val, dataset.class_counts, dataset.many_threshold, dataset.few_threshold)

    history = _run_epochs(model, config, sampler, batch_loss, validate, on_epoch)
    checkpoint = model_to_checkpoint(
        model,
        epoch=config.effective_epochs,
        seed=config.seed,
        config=config.to_dict(),
        meta=_dataset_meta(dataset),
    )
    return TrainResult(checkpoint, model, history)


def _stage2_head(stage1: Checkpoint, config: TrainConfig, num_classes: int, dim: int) -> ClassifierHead:
    if config.warm_start:
        previous = head_from_checkpoint(stage1).effective_weight().astype(np.float64)
        if previous.shape != (num_classes, dim):
            raise InvalidArgumentError(
                f"stage-1 head is {previous.shape}, stage 2 needs ({num_classes}, {dim})"
            )
        norms = np.maximum(np.linalg.norm(previous, axis=1, keepdims=True), 1e-12)
        return ClassifierHead.with_weight(config.head_kind, parameter(previous / norms), config.effective_g)
    return ClassifierHead.create(
        config.head_kind, num_classes, dim, config.effective_g, rng_for(config.seed, STREAM_HEAD)
    )


def resolve_tau(config: TrainConfig, dataset: LongTailedDataset) -> float:
    if config.tau is not None:
        return float(config.tau)
    return default_tau(dataset.source, dataset.rho or 1.0, dataset.class_counts)


def train_stage2(
    stage1: Checkpoint,
    dataset: LongTailedDataset,
    config: TrainConfig,
    val: Optional[LongTailedDataset] = None,
    on_epoch: Optional[EpochCallback] = None,
) -> TrainResult:
    """Classifier re-training on the frozen stage-1 backbone, with optional calibration.

    Backbone features of the training set are computed once; only the head
    and the calibration block receive gradients.

    Raises:
        InvalidArgumentError: On a non-classifier config, a mismatched checkpoint,
            or a tail class without images
        NumericalError: On a non-finite loss or gradient
    """
    config.validate()
    if config.stage_enum is not Stage.CLASSIFIER:
        raise InvalidArgumentError("train.stage: train_stage2 needs stage=classifier")
    backbone = backbone_from_checkpoint(stage1)
    backbone.freeze()
    if backbone.in_channels != dataset.image_shape[0]:
        raise InvalidArgumentError("stage-1 backbone and dataset disagree on image channels")

    head = _stage2_head(stage1, config, dataset.num_classes, backbone.out_channels)
    variant = config.variant
    tau = resolve_tau(config, dataset)
    camc = None
    if variant is not CamcVariant.NONE:
        camc = init_prototypes(backbone, dataset, tau, config.k, config.seed)
    model = Model(backbone, head, Stage.CLASSIFIER, camc=camc, variant=variant, m=config.m)

    train_features = model.extract(np.asarray(dataset.images))
    val_features = model.extract(np.asarray(val.images)) if val is not None else None
    sampler = BatchSampler(
        dataset,
        SamplerSpec(config.sampler_kind, config.seed, config.batch_size),
        rng=rng_for(config.seed, STREAM_SAMPLER),
    )

    def batch_loss(indices: np.ndarray, epoch: int) -> Tensor:
        batch = train_features.take(indices)
        scores = model.scores_from_features(batch.feature_maps, batch.embeddings, batch.grids)
        return softmax_cross_entropy(scores, dataset.labels[indices])

    def validate() -> Optional[SplitReport]:
        if val is None:
            return None
        return report_from_predictions(
            val.labels,
            model.predict_features(val_features),
            dataset.class_counts,
            dataset.many_threshold,
            dataset.few_threshold,
        )

    history = _run_epochs(model, config, sampler, batch_loss, validate, on_epoch)
    meta = _dataset_meta(dataset)
    meta["tau"] = encode_float(tau) if variant is not CamcVariant.NONE else None
    checkpoint = model_to_checkpoint(
        model,
        epoch=config.effective_epochs,
        seed=config.seed,
        config=config.to_dict(),
        meta=meta,
    )
    # The frozen backbone is carried over bit for bit.
    checkpoint.tensors.update(stage1.backbone_tensors())
    return TrainResult(checkpoint, model, history)


# Sweeps


def run_parallel(keys: Sequence[Any], fn: Callable[[Any], T], jobs: Optional[int] = None) -> List[T]:
    """fn over keys, in input order, on up to resolve_jobs(jobs) threads."""
    workers = resolve_jobs(jobs)
    if workers > 1 and len(keys) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, keys))
    return [fn(key) for key in keys]


@dataclass
class RunOutcome:
    """One run of a sweep: its key and final report, or the error that stopped it."""
    key: Any
    history: List[EpochRecord] = field(default_factory=list)
    report: Optional[SplitReport] = None
    checkpoint: Optional[Checkpoint] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def _guarded(run: Callable[[Any], RunOutcome]) -> Callable[[Any], RunOutcome]:
    def wrapper(key: Any) -> RunOutcome:
        try:
            return run(key)
        except CamcalError as e:
            logger.warning("run %s failed: %s", key, e)
            return RunOutcome(key=key, error=str(e))

    return wrapper


@dataclass
class GSweepReport:
    runs: List[RunOutcome]

    @property
    def best(self) -> Optional[RunOutcome]:
        """Run with the highest final validation accuracy; the earliest wins ties."""
        scored = [r for r in self.runs if r.ok and r.report is not None and r.report.top1_all is not None]
        if not scored:
            return None
        return max(scored, key=lambda r: r.report.top1_all)


def sweep_g(
    dataset: LongTailedDataset,
    g_values: Sequence[float] = tuple(G_GRID),
    config: Optional[TrainConfig] = None,
    val: Optional[LongTailedDataset] = None,
    jobs: Optional[int] = None,
) -> GSweepReport:
    """Stage-1 training for each g with the same seed; a failed run does not stop the rest.

    Raises:
        InvalidArgumentError: If g_values is empty
    """
    if not g_values:
        raise InvalidArgumentError("sweep_g needs at least one g value")
    base = config or TrainConfig(head=HeadKind.NORM_FC.value)

    def run(g: float) -> RunOutcome:
        result = train_stage1(dataset, dataclasses.replace(base, g=float(g)), val)
        final = result.history[-1].val if result.history else None
        return RunOutcome(key=float(g), history=result.history, report=final, checkpoint=result.checkpoint)

    return GSweepReport(run_parallel(list(g_values), _guarded(run), jobs))


def _test_report(model: Model, test: LongTailedDataset, train: LongTailedDataset) -> SplitReport:
    return evaluate(model, test, train.class_counts, train.many_threshold, train.few_threshold)


def sweep_tau(
    stage1: Checkpoint,
    dataset: LongTailedDataset,
    taus: Sequence[float],
    config: TrainConfig,
    test: LongTailedDataset,
    jobs: Optional[int] = None,
) -> List[RunOutcome]:
    """Stage-2 calibration for each threshold (0 disables it, inf covers every class)."""

    def run(tau: float) -> RunOutcome:
        result = train_stage2(stage1, dataset, dataclasses.replace(config, tau=float(tau)))
        return RunOutcome(
            key=float(tau), history=result.history, report=_test_report(result.model, test, dataset)
        )

    return run_parallel(list(taus), _guarded(run), jobs)


def sweep_m(
    stage1: Checkpoint,
    dataset: LongTailedDataset,
    grid_sides: Sequence[int],
    config: TrainConfig,
    test: LongTailedDataset,
    jobs: Optional[int] = None,
) -> List[RunOutcome]:
    """Stage-2 CAMC++ for each crop-grid side M."""

    def run(m: int) -> RunOutcome:
        camcpp = dataclasses.replace(config, camc_variant=CamcVariant.CAMCPP.value, m=int(m))
        result = train_stage2(stage1, dataset, camcpp)
        return RunOutcome(
            key=int(m), history=result.history, report=_test_report(result.model, test, dataset)
        )

    return run_parallel(list(grid_sides), _guarded(run), jobs)


# Classifier comparison


@dataclass
class HeadComparisonRow:
    """Test reports of one stage-1 head under three protocols: as trained, after cRT, NCM."""
    label: str
    representation: Optional[SplitReport] = None
    crt: Optional[SplitReport] = None
    ncm: Optional[SplitReport] = None
    error: Optional[str] = None


def head_variants(g_star: float) -> List[Tuple[str, HeadKind, Optional[float]]]:
    return [
        ("linear", HeadKind.LINEAR, None),
        ("weight_norm", HeadKind.WEIGHT_NORM, None),
        ("weight_norm_shared_g", HeadKind.WEIGHT_NORM_SHARED_G, None),
        ("norm_fc g=1", HeadKind.NORM_FC, 1.0),
        (f"norm_fc g={g_star:g}", HeadKind.NORM_FC, g_star),
    ]


def ncm_report(model: Model, train: LongTailedDataset, test: LongTailedDataset) -> SplitReport:
    """Nearest-class-mean predictions on the model's frozen embeddings."""
    _, train_embeddings = model.backbone.encode(np.asarray(train.images))
    _, test_embeddings = model.backbone.encode(np.asarray(test.images))
    ncm = ncm_fit_labeled(train_embeddings, train.labels, train.num_classes)
    predictions = ncm_predict(test_embeddings, ncm)
    return report_from_predictions(
        test.labels, predictions, train.class_counts, train.many_threshold, train.few_threshold
    )


def compare_heads(
    train: LongTailedDataset,
    test: LongTailedDataset,
    config: TrainConfig,
    stage2_config: TrainConfig,
    g_star: float = 0.5,
    jobs: Optional[int] = None,
) -> List[HeadComparisonRow]:
    """Train every stage-1 head variant and score it directly, after linear cRT and with NCM."""

    def run(variant: Tuple[str, HeadKind, Optional[float]]) -> HeadComparisonRow:
        label, kind, g = variant
        try:
            stage1 = train_stage1(train, dataclasses.replace(config, head=kind.value, g=g))
            crt_config = dataclasses.replace(
                stage2_config,
                head=HeadKind.LINEAR.value,
                camc_variant=CamcVariant.NONE.value,
                warm_start=False,
            )
            crt = train_stage2(stage1.checkpoint, train, crt_config)
        except CamcalError as e:
            logger.warning("head %s failed: %s", label, e)
            return HeadComparisonRow(label=label, error=str(e))
        return HeadComparisonRow(
            label=label,
            representation=_test_report(stage1.model, test, train),
            crt=_test_report(crt.model, test, train),
            ncm=ncm_report(stage1.model, train, test),
        )

    return run_parallel(head_variants(g_star), run, jobs)
