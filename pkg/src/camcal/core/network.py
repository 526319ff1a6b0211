"""Convolutional backbone, classifier heads and the nearest-class-mean evaluator."""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .functional import conv2d, global_avg_pool, l2_normalize, max_pool2d, relu
from .models import HeadKind, InvalidArgumentError, Stage
from .tensor import Operand, Tensor, as_tensor, matmul, no_grad, parameter, reshape

logger = logging.getLogger(__name__)

DEFAULT_CHANNELS = (32, 64, 128, 256)
NCM_EPSILON = 1e-12


def kaiming_uniform(shape: Tuple[int, ...], fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Backbone:
    """Stacked 3x3 conv + bias + relu stages, 2x2 max-pool after every stage but the last."""

    def __init__(self, weights: Sequence[Tensor], biases: Sequence[Tensor]):
        if len(weights) != len(biases) or not weights:
            raise InvalidArgumentError("backbone needs one bias per conv stage")
        self.weights = list(weights)
        self.biases = list(biases)

    @classmethod
    def create(
        cls,
        channels: Sequence[int] = DEFAULT_CHANNELS,
        in_channels: int = 3,
        rng: Optional[np.random.Generator] = None,
    ) -> "Backbone":
        """Kaiming-uniform fan-in weights, zero biases."""
        rng = rng if rng is not None else np.random.default_rng(0)
        weights, biases = [], []
        previous = in_channels
        for width in channels:
            shape = (int(width), previous, 3, 3)
            weights.append(parameter(kaiming_uniform(shape, previous * 9, rng)))
            biases.append(parameter(np.zeros(int(width))))
            previous = int(width)
        return cls(weights, biases)

    @property
    def in_channels(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def num_stages(self) -> int:
        return len(self.weights)

    def forward(self, images: Operand) -> Tuple[Tensor, Tensor]:
        """Encode [N,C_img,H,W] images into ([N,C,H',W'] feature maps, [N,C] embeddings)."""
        x = as_tensor(images)
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise InvalidArgumentError(
                f"backbone expects [N,{self.in_channels},H,W] images, got {x.shape}"
            )
        for stage, (weight, bias) in enumerate(zip(self.weights, self.biases)):
            x = relu(conv2d(x, weight, bias, padding=1))
            if stage < self.num_stages - 1:
                x = max_pool2d(x, 2)
        return x, global_avg_pool(x)

    __call__ = forward

    def encode(self, images: np.ndarray, batch_size: int = 256) -> Tuple[np.ndarray, np.ndarray]:
        """Forward without recording, in chunks; returns plain arrays."""
        maps, embeddings = [], []
        with no_grad():
            for start in range(0, len(images), batch_size):
                feature_map, embedding = self.forward(images[start:start + batch_size])
                maps.append(feature_map.data)
                embeddings.append(embedding.data)
        if not maps:
            raise InvalidArgumentError("nothing to encode")
        return np.concatenate(maps), np.concatenate(embeddings)

    def parameters(self) -> List[Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    def named_parameters(self) -> Dict[str, Tensor]:
        named = {}
        for i, (weight, bias) in enumerate(zip(self.weights, self.biases), start=1):
            named[f"backbone.stage{i}.weight"] = weight
            named[f"backbone.stage{i}.bias"] = bias
        return named

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False
            p.zero_grad()


def backbone_forward(image: Operand, backbone: Backbone) -> Tuple[Tensor, Tensor]:
    """Encode one [C_img,H,W] image into ([C,H',W'] feature map, [C] embedding)."""
    x = as_tensor(image)
    if x.ndim != 3:
        raise InvalidArgumentError(f"backbone_forward expects one [C,H,W] image, got {x.shape}")
    feature_map, embedding = backbone.forward(reshape(x, (1,) + x.shape))
    return (
        reshape(feature_map, feature_map.shape[1:]),
        reshape(embedding, embedding.shape[1:]),
    )


@dataclass
class ClassifierHead:
    """Class weights W [N,C] plus the bias (linear) or magnitude g (normalized kinds).

    norm_fc keeps g as a fixed float; weight_norm learns one g per class and
    weight_norm_shared_g a single g, both stored as tensors.
    """
    kind: HeadKind
    weight: Tensor
    bias: Optional[Tensor] = None
    g: Union[float, Tensor] = 1.0

    @classmethod
    def create(
        cls,
        kind: HeadKind,
        num_classes: int,
        dim: int,
        g: float = 1.0,
        rng: Optional[np.random.Generator] = None,
    ) -> "ClassifierHead":
        rng = rng if rng is not None else np.random.default_rng(0)
        weight = parameter(kaiming_uniform((num_classes, dim), dim, rng))
        return cls.with_weight(kind, weight, g)

    @classmethod
    def with_weight(cls, kind: HeadKind, weight: Tensor, g: float = 1.0) -> "ClassifierHead":
        """Wrap an existing weight matrix; learnable magnitudes start at 1."""
        num_classes = weight.shape[0]
        if kind is HeadKind.LINEAR:
            return cls(kind, weight, bias=parameter(np.zeros(num_classes)))
        if kind is HeadKind.WEIGHT_NORM:
            return cls(kind, weight, g=parameter(np.ones(num_classes)))
        if kind is HeadKind.WEIGHT_NORM_SHARED_G:
            return cls(kind, weight, g=parameter(np.ones(1)))
        return cls(kind, weight, g=float(g))

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def scaled_directions(self) -> Tensor:
        """g * w_c / |w_c| for the normalized kinds."""
        direction = l2_normalize(self.weight, axis=1)
        if isinstance(self.g, Tensor):
            g = reshape(self.g, (self.g.size, 1))
            return direction * g
        return direction * self.g

    def effective_weight(self) -> np.ndarray:
        """The weight matrix the scores are computed with."""
        with no_grad():
            if self.kind is HeadKind.LINEAR:
                return np.array(self.weight.data)
            return np.array(self.scaled_directions().data)

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def named_parameters(self) -> Dict[str, Tensor]:
        named = {"head.weight": self.weight}
        if self.bias is not None:
            named["head.bias"] = self.bias
        if isinstance(self.g, Tensor):
            named["head.g"] = self.g
        return named


def head_score(embedding: Operand, head: ClassifierHead, stage: Stage) -> Tensor:
    """Class scores for a [C] embedding or a [B,C] batch.

    linear: Wx + b. Normalized kinds: <x, g w_c/|w_c|> in the representation
    stage and <x/|x|, g w_c/|w_c|> in the classifier stage.
    """
    x = as_tensor(embedding)
    if x.shape[-1] != head.dim or x.ndim not in (1, 2):
        raise InvalidArgumentError(f"embedding {x.shape} does not match head dimension {head.dim}")
    if head.kind is HeadKind.LINEAR:
        return matmul(x, head.weight.T) + head.bias
    if Stage(stage) is Stage.CLASSIFIER:
        x = l2_normalize(x, axis=-1)
    return matmul(x, head.scaled_directions().T)


@dataclass
class NcmClassifier:
    """Per-class mean embeddings, [N,C]."""
    class_means: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.class_means.shape[0]


def ncm_fit(embeddings: Sequence[Sequence[np.ndarray]]) -> NcmClassifier:
    """Mean embedding of each class; `embeddings[c]` holds the class-c vectors.

    Raises:
        InvalidArgumentError: If any class has no embeddings
    """
    means = []
    for class_index, vectors in enumerate(embeddings):
        stacked = np.asarray(vectors, dtype=np.float64)
        if stacked.size == 0:
            raise InvalidArgumentError(f"class {class_index} has no embeddings to average")
        means.append(stacked.reshape(len(stacked), -1).mean(axis=0))
    if not means:
        raise InvalidArgumentError("ncm_fit needs at least one class")
    return NcmClassifier(np.stack(means))


def ncm_fit_labeled(embeddings: np.ndarray, labels: np.ndarray, num_classes: int) -> NcmClassifier:
    """ncm_fit over a flat [n,C] array with integer labels."""
    return ncm_fit([embeddings[labels == c] for c in range(num_classes)])


def _unit_rows(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=-1, keepdims=True)
    return matrix / np.maximum(norms, NCM_EPSILON)


def ncm_predict(embedding: np.ndarray, ncm: NcmClassifier) -> Union[int, np.ndarray]:
    """Class with the highest cosine to its mean; ties go to the lowest index.

    Accepts one [C] vector (returns an int) or a [B,C] batch (returns an array).
    """
    x = np.asarray(embedding.data if isinstance(embedding, Tensor) else embedding, dtype=np.float64)
    cosines = _unit_rows(x) @ _unit_rows(ncm.class_means).T
    predictions = np.argmax(cosines, axis=-1)
    return int(predictions) if x.ndim == 1 else predictions
