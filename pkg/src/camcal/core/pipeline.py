"""A backbone, a head and an optional calibration block scored as one model."""

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .camc import CamcBlock, camc_score_all, camcpp_feature_grids
from .models import CamcVariant, InvalidArgumentError, Stage
from .network import Backbone, ClassifierHead, head_score
from .tensor import Operand, Tensor, as_tensor, no_grad


@dataclass
class Features:
    """Frozen-backbone outputs for a set of images."""
    feature_maps: np.ndarray
    embeddings: np.ndarray
    grids: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.embeddings)

    def take(self, indices: np.ndarray) -> "Features":
        return Features(
            self.feature_maps[indices],
            self.embeddings[indices],
            None if self.grids is None else self.grids[indices],
        )


class Model:
    """Scoring path of one training stage."""

    def __init__(
        self,
        backbone: Backbone,
        head: ClassifierHead,
        stage: Stage = Stage.REPRESENTATION,
        camc: Optional[CamcBlock] = None,
        variant: CamcVariant = CamcVariant.NONE,
        m: int = 2,
    ):
        if variant is not CamcVariant.NONE and camc is None:
            raise InvalidArgumentError(f"variant {variant.value} needs a calibration block")
        self.backbone = backbone
        self.head = head
        self.stage = Stage(stage)
        self.camc = camc
        self.variant = variant
        self.m = m

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    @property
    def calibrated(self) -> bool:
        return self.variant is not CamcVariant.NONE and self.camc is not None

    def extract(self, images: np.ndarray, batch_size: int = 256) -> Features:
        """Backbone outputs (and CAMC++ grids when needed) without recording."""
        feature_maps, embeddings = self.backbone.encode(images, batch_size)
        grids = None
        if self.variant is CamcVariant.CAMCPP:
            grids = np.concatenate(
                [
                    camcpp_feature_grids(images[start:start + batch_size], self.backbone, self.m)
                    for start in range(0, len(images), batch_size)
                ]
            )
        return Features(feature_maps, embeddings, grids)

    def scores_from_features(
        self, feature_map: Operand, embedding: Operand, grid: Optional[Operand] = None
    ) -> Tensor:
        """[B,N] scores from precomputed backbone outputs."""
        if not self.calibrated:
            return head_score(embedding, self.head, self.stage)
        calibration_map = grid if self.variant is CamcVariant.CAMCPP else feature_map
        if calibration_map is None:
            raise InvalidArgumentError("CAMC++ scoring needs the crop-grid feature map")
        return camc_score_all(calibration_map, embedding, self.camc, self.head)

    def scores(self, images: Operand) -> Tensor:
        """Scores recorded on the tape for a batch of images."""
        x = as_tensor(images)
        feature_map, embedding = self.backbone.forward(x)
        grid = None
        if self.variant is CamcVariant.CAMCPP:
            grid = camcpp_feature_grids(x.data, self.backbone, self.m)
        return self.scores_from_features(feature_map, embedding, grid)

    def predict_features(self, features: Features) -> np.ndarray:
        with no_grad():
            scores = self.scores_from_features(
                features.feature_maps, features.embeddings, features.grids
            )
        return np.argmax(scores.data, axis=-1)

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Argmax class per image; pure with respect to the parameters."""
        predictions = [
            self.predict_features(self.extract(images[start:start + batch_size], batch_size))
            for start in range(0, len(images), batch_size)
        ]
        if not predictions:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(predictions).astype(np.int64)

    def named_parameters(self) -> Dict[str, Tensor]:
        named = dict(self.backbone.named_parameters())
        named.update(self.head.named_parameters())
        if self.camc is not None:
            named.update(self.camc.named_parameters())
        return named

    def trainable_parameters(self) -> Dict[str, Tensor]:
        return {name: p for name, p in self.named_parameters().items() if p.requires_grad}

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: np.array(p.data) for name, p in self.named_parameters().items()}

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()
