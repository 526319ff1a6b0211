"""Class activation maps and the CAM calibration block (CAMC and CAMC++)."""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import LongTailedDataset
from .functional import conv2d, global_avg_pool, l2_normalize, resize_bilinear, sigmoid
from .models import HeadKind, InvalidArgumentError, Stage
from .network import Backbone, ClassifierHead, head_score
from .tensor import Operand, Tensor, as_tensor, matmul, parameter, reshape, stack, tsum

logger = logging.getLogger(__name__)


@dataclass
class Cam:
    """Activation map of one class over the feature-map grid."""
    values: Tensor
    class_index: int

    def numpy(self) -> np.ndarray:
        return self.values.data


def _check_feature_map(feature_map: Tensor, channels: int) -> None:
    if feature_map.ndim != 3:
        raise InvalidArgumentError(f"feature map must be [C,H,W], got {feature_map.shape}")
    if feature_map.shape[0] != channels:
        raise InvalidArgumentError(
            f"feature map has {feature_map.shape[0]} channels, weights expect {channels}"
        )


def compute_cam_weighted_sum(feature_map: Operand, w_c: Operand, class_index: int = -1) -> Cam:
    """M(x,y) = sum_i w_c[i] f_i(x,y); no bias term."""
    f, w = as_tensor(feature_map), as_tensor(w_c)
    if w.ndim != 1:
        raise InvalidArgumentError(f"class weight must be a vector, got {w.shape}")
    _check_feature_map(f, w.shape[0])
    return Cam(tsum(f * reshape(w, (w.shape[0], 1, 1)), axis=0), class_index)


def compute_cam_conv(feature_map: Operand, weights: Operand) -> Tensor:
    """All N class maps at once, as a 1x1 convolution of the feature map with W [N,C]."""
    f, w = as_tensor(feature_map), as_tensor(weights)
    if w.ndim != 2:
        raise InvalidArgumentError(f"class weights must be [N,C], got {w.shape}")
    _check_feature_map(f, w.shape[1])
    out = conv2d(reshape(f, (1,) + f.shape), reshape(w, w.shape + (1, 1)))
    return reshape(out, out.shape[1:])


class CamcBlock:
    """Prototype banks for tail classes plus the shared K->1 fusion convolution."""

    def __init__(
        self,
        prototypes: Dict[int, Tensor],
        fusion_weight: Tensor,
        fusion_bias: Tensor,
        tau: float,
        k: int,
    ):
        if k < 1:
            raise InvalidArgumentError(f"K must be at least 1, got {k}")
        for class_index, bank in prototypes.items():
            if bank.ndim != 2 or bank.shape[0] != k:
                raise InvalidArgumentError(f"prototype bank of class {class_index} must be [K,C]")
        self.prototypes = {int(c): prototypes[c] for c in sorted(prototypes)}
        self.fusion_weight = fusion_weight
        self.fusion_bias = fusion_bias
        self.tau = tau
        self.k = k

    @classmethod
    def fresh_fusion(cls, prototypes: Dict[int, Tensor], tau: float, k: int) -> "CamcBlock":
        """Fusion initialized to the uniform average 1/K with zero bias."""
        weight = parameter(np.full((1, k, 1, 1), 1.0 / k))
        bias = parameter(np.zeros(1))
        return cls(prototypes, weight, bias, tau, k)

    @property
    def tail_classes(self) -> List[int]:
        return list(self.prototypes)

    def is_tail(self, class_index: int) -> bool:
        return class_index in self.prototypes

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def named_parameters(self) -> Dict[str, Tensor]:
        named = {f"camc.prototypes.{c}": bank for c, bank in self.prototypes.items()}
        named["camc.fusion.weight"] = self.fusion_weight
        named["camc.fusion.bias"] = self.fusion_bias
        return named


def tail_classes_for(class_counts: Sequence[int], tau: float) -> List[int]:
    """Classes with fewer than tau training images; tau = inf selects every class."""
    return [c for c, n in enumerate(class_counts) if n < tau]


def select_prototype_indices(
    dataset: LongTailedDataset, class_index: int, k: int, seed: int
) -> np.ndarray:
    """First K indices of a seeded shuffle of the class, repeated cyclically if short."""
    available = dataset.indices_of(class_index)
    if len(available) == 0:
        raise InvalidArgumentError(f"tail class {class_index} has no training images")
    order = np.random.default_rng([seed, class_index]).permutation(len(available))
    chosen = available[order][:k]
    return np.resize(chosen, k)


def init_prototypes(
    backbone: Backbone, dataset: LongTailedDataset, tau: float, k: int, seed: int
) -> CamcBlock:
    """Seed prototype banks with backbone embeddings of tail-class training images.

    Raises:
        InvalidArgumentError: If K < 1 or a tail class has no images
    """
    if k < 1:
        raise InvalidArgumentError(f"K must be at least 1, got {k}")
    prototypes = {}
    tail = tail_classes_for(dataset.class_counts, tau)
    if tail:
        picks = {c: select_prototype_indices(dataset, c, k, seed) for c in tail}
        flat = np.concatenate(list(picks.values()))
        _, embeddings = backbone.encode(np.asarray(dataset.images[flat]))
        for i, c in enumerate(tail):
            prototypes[c] = parameter(embeddings[i * k:(i + 1) * k])
    logger.info("calibrating %d tail classes (tau=%s, K=%d)", len(tail), tau, k)
    return CamcBlock.fresh_fusion(prototypes, tau, k)


def _batched(feature_map: Operand) -> Tensor:
    f = as_tensor(feature_map)
    if f.ndim == 3:
        return reshape(f, (1,) + f.shape)
    if f.ndim != 4:
        raise InvalidArgumentError(f"feature map must be [C,H,W] or [B,C,H,W], got {f.shape}")
    return f


def calibrated_feature_map(feature_map: Operand, block: CamcBlock, class_index: int) -> Tensor:
    """(1 + sigmoid(fused prototype response)) * F, as [B,C,H,W]."""
    if not block.is_tail(class_index):
        raise InvalidArgumentError(f"class {class_index} has no prototype bank")
    f = _batched(feature_map)
    bank = block.prototypes[class_index]
    if bank.shape[1] != f.shape[1]:
        raise InvalidArgumentError(
            f"prototypes have {bank.shape[1]} channels, feature map has {f.shape[1]}"
        )
    responses = conv2d(f, reshape(bank, bank.shape + (1, 1)))
    fused = conv2d(responses, block.fusion_weight, block.fusion_bias)
    return f * (sigmoid(fused) + 1.0)


def camc_forward(feature_map: Operand, block: CamcBlock, class_index: int) -> Tensor:
    """Calibrated embedding of one tail class: [C] for one map, [B,C] for a batch.

    Raises:
        InvalidArgumentError: If the class has no prototype bank
    """
    single = as_tensor(feature_map).ndim == 3
    pooled = global_avg_pool(calibrated_feature_map(feature_map, block, class_index))
    return reshape(pooled, pooled.shape[1:]) if single else pooled


def camc_score_all(
    feature_map: Operand, embedding: Operand, block: Optional[CamcBlock], head: ClassifierHead
) -> Tensor:
    """Classifier-stage scores with calibrated embeddings for tail classes.

    Head classes score <x/|x|, g w_c/|w_c|> on the plain embedding; each tail class
    scores its own calibrated embedding against its own weight.

    Raises:
        InvalidArgumentError: If the head is not norm_fc
    """
    if head.kind is not HeadKind.NORM_FC:
        raise InvalidArgumentError(f"calibrated scoring needs a norm_fc head, got {head.kind.value}")
    base = head_score(embedding, head, Stage.CLASSIFIER)
    if block is None or not block.tail_classes:
        return base

    single = base.ndim == 1
    base2 = reshape(base, (1,) + base.shape) if single else base
    directions = head.scaled_directions()
    tail = block.tail_classes
    columns = []
    for c in tail:
        x_c = l2_normalize(camc_forward(_batched(feature_map), block, c), axis=-1)
        columns.append(matmul(x_c, directions[c]))
    # [B,T] tail scores scattered into their columns by a fixed 0/1 matrix.
    tail_scores = stack(columns, axis=1)
    placement = np.zeros((len(tail), head.num_classes), dtype=base.dtype)
    placement[np.arange(len(tail)), tail] = 1.0
    keep = np.ones(head.num_classes, dtype=base.dtype)
    keep[tail] = 0.0
    scores = base2 * keep + matmul(tail_scores, placement)
    return reshape(scores, base.shape) if single else scores


def crop_windows(height: int, width: int, m: int) -> List[tuple]:
    """(top, bottom, left, right) of the M x M raw-size windows, clipped, row-major."""
    if m < 1:
        raise InvalidArgumentError(f"M must be at least 1, got {m}")
    windows = []
    for i in range(m):
        cy = (i + 0.5) / m * height
        top = max(0, math.floor(cy - height / 2))
        bottom = min(height, math.floor(cy + height / 2))
        for j in range(m):
            cx = (j + 0.5) / m * width
            left = max(0, math.floor(cx - width / 2))
            right = min(width, math.floor(cx + width / 2))
            windows.append((top, bottom, left, right))
    return windows


def crop_patches(image: np.ndarray, m: int) -> np.ndarray:
    """The M*M clipped windows of one [C,H,W] image, each resized back to H x W."""
    _, height, width = image.shape
    return np.stack(
        [
            resize_bilinear(image[:, top:bottom, left:right], (height, width))
            for top, bottom, left, right in crop_windows(height, width, m)
        ]
    )


def camcpp_feature_grids(images: np.ndarray, backbone: Backbone, m: int) -> np.ndarray:
    """[B,C,M,M] grids of patch embeddings for a batch of images."""
    images = np.asarray(images.data if isinstance(images, Tensor) else images)
    if images.ndim != 4:
        raise InvalidArgumentError(f"expected [B,C,H,W] images, got {images.shape}")
    patches = np.concatenate([crop_patches(image, m) for image in images])
    _, embeddings = backbone.encode(patches)
    channels = embeddings.shape[1]
    return embeddings.reshape(len(images), m, m, channels).transpose(0, 3, 1, 2).copy()


def camcpp_feature_grid(image: Operand, backbone: Backbone, m: int) -> Tensor:
    """[C,M,M] map whose (i,j) vector encodes the window centered at grid point (i,j).

    Raises:
        InvalidArgumentError: If M < 1 or the image is not [C,H,W]
    """
    data = as_tensor(image).data
    if data.ndim != 3:
        raise InvalidArgumentError(f"expected one [C,H,W] image, got {data.shape}")
    return Tensor._wrap(camcpp_feature_grids(data[None], backbone, m)[0])
