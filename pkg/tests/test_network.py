"""Tests for the backbone, classifier heads and NCM."""

import numpy as np
import pytest

from camcal.core.models import HeadKind, InvalidArgumentError, Stage
from camcal.core.network import (
    Backbone,
    ClassifierHead,
    backbone_forward,
    head_score,
    ncm_fit,
    ncm_fit_labeled,
    ncm_predict,
)
from camcal.core.tensor import as_tensor, backward, float64_mode, gradcheck, parameter


class TestBackbone:
    """Tests for the convolutional backbone."""

    def test_output_shapes(self, tiny_backbone):
        """Two stages on 16x16 give an 8x8 map with 8 channels."""
        images = np.zeros((2, 3, 16, 16), dtype=np.float32)
        feature_map, embedding = tiny_backbone(images)
        assert feature_map.shape == (2, 8, 8, 8)
        assert embedding.shape == (2, 8)

    def test_embedding_is_gap_of_map(self, tiny_backbone, tiny_dataset):
        """The embedding is the spatial mean of the feature map."""
        feature_map, embedding = tiny_backbone(np.asarray(tiny_dataset.images[:3]))
        np.testing.assert_allclose(embedding.data, feature_map.data.mean(axis=(2, 3)), rtol=1e-5)

    def test_features_are_non_negative(self, tiny_backbone, tiny_dataset):
        """ReLU outputs are non-negative."""
        feature_map, _ = tiny_backbone(np.asarray(tiny_dataset.images[:3]))
        assert feature_map.data.min() >= 0.0

    def test_single_image(self, tiny_backbone, tiny_dataset):
        """backbone_forward drops the batch axis."""
        feature_map, embedding = backbone_forward(tiny_dataset.images[0], tiny_backbone)
        assert feature_map.shape == (8, 8, 8)
        assert embedding.shape == (8,)

    def test_wrong_channels(self, tiny_backbone):
        """Images must match the input channels."""
        with pytest.raises(InvalidArgumentError):
            tiny_backbone(np.zeros((1, 1, 16, 16)))

    def test_encode_matches_forward(self, tiny_backbone, tiny_dataset):
        """Chunked encoding equals one forward pass."""
        images = np.asarray(tiny_dataset.images[:5])
        _, embeddings = tiny_backbone.encode(images, batch_size=2)
        _, direct = tiny_backbone(images)
        np.testing.assert_allclose(embeddings, direct.data, rtol=1e-6)

    def test_freeze(self, tiny_backbone):
        """Frozen parameters stop requiring gradients."""
        tiny_backbone.freeze()
        assert not any(p.requires_grad for p in tiny_backbone.parameters())

    def test_parameter_names(self, tiny_backbone):
        """Stages are numbered from 1."""
        assert list(tiny_backbone.named_parameters()) == [
            "backbone.stage1.weight",
            "backbone.stage1.bias",
            "backbone.stage2.weight",
            "backbone.stage2.bias",
        ]


class TestHeadScore:
    """Tests for the four classifier heads."""

    def test_linear(self):
        """Wx + b."""
        head = ClassifierHead.with_weight(HeadKind.LINEAR, parameter([[1.0, 2.0], [0.0, -1.0]]))
        head.bias = parameter([0.5, 0.0])
        scores = head_score(as_tensor([1.0, 1.0]), head, Stage.REPRESENTATION)
        np.testing.assert_allclose(scores.data, [3.5, -1.0])

    def test_norm_fc_representation_stage(self):
        """Stage 1 scores <x, g w/|w|> with an unnormalized embedding."""
        head = ClassifierHead.with_weight(HeadKind.NORM_FC, parameter([[3.0, 4.0]]), g=0.5)
        scores = head_score(as_tensor([2.0, 0.0]), head, Stage.REPRESENTATION)
        assert scores.data[0] == pytest.approx(0.5 * 2.0 * 0.6)

    def test_norm_fc_classifier_stage_is_bounded(self, rng):
        """Stage 2 scores are cosines times g."""
        head = ClassifierHead.create(HeadKind.NORM_FC, 5, 4, g=16.0, rng=rng)
        scores = head_score(as_tensor(rng.normal(size=(3, 4)) * 100.0), head, Stage.CLASSIFIER)
        assert np.abs(scores.data).max() <= 16.0 + 1e-3

    def test_norm_fc_scale_invariant_in_w(self, rng):
        """Scaling a class weight leaves norm_fc scores unchanged."""
        w = rng.normal(size=(3, 4))
        x = as_tensor(rng.normal(size=4))
        a = head_score(x, ClassifierHead.with_weight(HeadKind.NORM_FC, parameter(w), 2.0), Stage.CLASSIFIER)
        b = head_score(x, ClassifierHead.with_weight(HeadKind.NORM_FC, parameter(w * 7.0), 2.0), Stage.CLASSIFIER)
        np.testing.assert_allclose(a.data, b.data, rtol=1e-5)

    def test_weight_norm_learns_per_class_g(self, rng):
        """weight_norm has one learnable magnitude per class, shared_g a single one."""
        per_class = ClassifierHead.create(HeadKind.WEIGHT_NORM, 3, 4, rng=rng)
        shared = ClassifierHead.create(HeadKind.WEIGHT_NORM_SHARED_G, 3, 4, rng=rng)
        assert per_class.g.shape == (3,)
        assert shared.g.shape == (1,)
        assert "head.g" in per_class.named_parameters()

    def test_effective_weight_norms(self, rng):
        """Normalized heads have rows of norm g."""
        head = ClassifierHead.create(HeadKind.NORM_FC, 4, 6, g=3.0, rng=rng)
        np.testing.assert_allclose(np.linalg.norm(head.effective_weight(), axis=1), 3.0, rtol=1e-5)

    def test_dimension_mismatch(self, rng):
        """Embedding size must match the head."""
        head = ClassifierHead.create(HeadKind.LINEAR, 3, 4, rng=rng)
        with pytest.raises(InvalidArgumentError):
            head_score(as_tensor(np.zeros(5)), head, Stage.REPRESENTATION)

    @pytest.mark.parametrize("kind", list(HeadKind))
    def test_gradients(self, rng, kind):
        """Every head kind differentiates correctly in both stages."""
        with float64_mode():
            head = ClassifierHead.create(kind, 3, 4, g=2.0, rng=rng)
            x = parameter(rng.normal(size=(2, 4)))
            weights = rng.normal(size=(2, 3))
            params = [x] + head.parameters()
            for stage in Stage:
                gradcheck(lambda: (head_score(x, head, stage) * weights).sum(), params, h=1e-6, rtol=1e-5)


class TestNcm:
    """Tests for the nearest-class-mean classifier."""

    def test_predicts_closest_mean(self):
        """Cosine to class means decides."""
        ncm = ncm_fit([[np.array([1.0, 0.0])], [np.array([0.0, 1.0]), np.array([0.0, 3.0])]])
        assert ncm_predict(np.array([0.9, 0.1]), ncm) == 0
        np.testing.assert_array_equal(ncm_predict(np.array([[0.1, 2.0], [5.0, 0.0]]), ncm), [1, 0])

    def test_ties_go_to_lowest_index(self):
        """Equal cosines pick the lower class."""
        ncm = ncm_fit([[np.array([1.0, 0.0])], [np.array([1.0, 0.0])]])
        assert ncm_predict(np.array([1.0, 1.0]), ncm) == 0

    def test_zero_mean_is_finite(self):
        """An all-zero class mean never wins over a real match and yields no NaN."""
        ncm = ncm_fit([[np.zeros(2)], [np.array([1.0, 1.0])]])
        assert ncm_predict(np.array([1.0, 2.0]), ncm) == 1

    def test_empty_class(self):
        """Every class needs embeddings."""
        with pytest.raises(InvalidArgumentError):
            ncm_fit([[np.ones(2)], []])

    def test_labeled_fit(self):
        """ncm_fit_labeled groups rows by label."""
        ncm = ncm_fit_labeled(np.array([[1.0, 0.0], [3.0, 0.0], [0.0, 2.0]]), np.array([0, 0, 1]), 2)
        np.testing.assert_allclose(ncm.class_means, [[2.0, 0.0], [0.0, 2.0]])


def test_backbone_gradients(rng):
    """A one-stage backbone differentiates correctly end to end."""
    with float64_mode():
        backbone = Backbone.create([2], in_channels=1, rng=rng)
        images = rng.normal(size=(1, 1, 4, 4))
        weights = rng.normal(size=(1, 2))
        gradcheck(
            lambda: (backbone(images)[1] * weights).sum(),
            backbone.parameters(),
            h=1e-6,
            rtol=1e-4,
        )


def test_backbone_backward_fills_all_parameters(tiny_backbone, tiny_dataset):
    """Every backbone parameter receives a gradient."""
    _, embedding = tiny_backbone(np.asarray(tiny_dataset.images[:2]))
    backward(embedding.sum())
    assert all(p.grad is not None for p in tiny_backbone.parameters())
