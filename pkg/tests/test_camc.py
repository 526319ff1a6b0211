"""Tests for class activation maps and the calibration block."""

import numpy as np
import pytest

from camcal.core.camc import (
    CamcBlock,
    calibrated_feature_map,
    camc_forward,
    camc_score_all,
    camcpp_feature_grid,
    compute_cam_conv,
    compute_cam_weighted_sum,
    crop_windows,
    init_prototypes,
    select_prototype_indices,
    tail_classes_for,
)
from camcal.core.functional import global_avg_pool, resize_bilinear
from camcal.core.models import HeadKind, InvalidArgumentError, Stage
from camcal.core.network import Backbone, ClassifierHead, head_score
from camcal.core.tensor import as_tensor, float64_mode, gradcheck, parameter


def block_with(prototypes, k, weight=None, bias=0.0):
    """A calibration block with explicit fusion parameters."""
    block = CamcBlock.fresh_fusion({c: parameter(p) for c, p in prototypes.items()}, tau=10.0, k=k)
    if weight is not None:
        block.fusion_weight = parameter(np.asarray(weight, dtype=np.float64).reshape(1, k, 1, 1))
    block.fusion_bias = parameter([bias])
    return block


class TestCam:
    """Tests for vanilla CAMs."""

    def test_weighted_sum_and_conv_agree(self, rng):
        """The channel-weighted sum equals the 1x1-convolution map of the same class."""
        with float64_mode():
            feature_map = rng.normal(size=(6, 5, 4))
            weights = rng.normal(size=(3, 6))
            conv = compute_cam_conv(feature_map, weights)
            for c in range(3):
                cam = compute_cam_weighted_sum(feature_map, weights[c], c)
                np.testing.assert_allclose(cam.numpy(), conv.data[c], rtol=1e-12, atol=1e-12)

    def test_paths_agree_on_random_shapes(self):
        """100 random 32-bit instances up to [64,8,8] x [20,64] agree within 1e-5."""
        rng = np.random.default_rng(11)
        for _ in range(100):
            channels = int(rng.integers(1, 65))
            height, width = rng.integers(1, 9, size=2)
            classes = int(rng.integers(1, 21))
            feature_map = rng.uniform(size=(channels, height, width)).astype(np.float32)
            bound = np.sqrt(6.0 / channels)
            weights = rng.uniform(-bound, bound, size=(classes, channels)).astype(np.float32)
            conv = compute_cam_conv(feature_map, weights).data
            for c in range(classes):
                cam = compute_cam_weighted_sum(feature_map, weights[c], c).numpy()
                assert np.abs(cam - conv[c]).max() <= 1e-5

    def test_cam_mean_is_linear_score(self, rng):
        """Averaging a class map gives the bias-free linear score of the pooled features."""
        with float64_mode():
            feature_map = rng.normal(size=(4, 3, 3))
            w = rng.normal(size=4)
            cam = compute_cam_weighted_sum(feature_map, w)
            assert cam.numpy().mean() == pytest.approx(float(feature_map.mean(axis=(1, 2)) @ w))

    def test_channel_mismatch(self, rng):
        """Weights must match the feature channels."""
        with pytest.raises(InvalidArgumentError):
            compute_cam_weighted_sum(rng.normal(size=(4, 2, 2)), rng.normal(size=3))
        with pytest.raises(InvalidArgumentError):
            compute_cam_conv(rng.normal(size=(4, 2, 2)), rng.normal(size=(2, 5)))


class TestCalibration:
    """Tests for the prototype reweighting."""

    def test_zero_response_scales_by_one_and_a_half(self, rng):
        """A zero fused response gates every location by 1 + sigmoid(0)."""
        with float64_mode():
            feature_map = rng.uniform(size=(4, 3, 3))
            block = block_with({0: np.zeros((2, 4))}, k=2)
            out = calibrated_feature_map(feature_map, block, 0)
            np.testing.assert_allclose(out.data[0], 1.5 * feature_map, rtol=1e-12)

    def test_gate_bounds(self, rng):
        """The residual gate lies in [1, 2]."""
        with float64_mode():
            feature_map = rng.uniform(0.1, 1.0, size=(4, 3, 3))
            block = block_with({0: rng.normal(size=(3, 4)) * 50.0}, k=3)
            ratio = calibrated_feature_map(feature_map, block, 0).data[0] / feature_map
            assert ratio.min() >= 1.0 - 1e-12
            assert ratio.max() <= 2.0 + 1e-12

    def test_fusion_starts_as_average(self):
        """Fresh fusion weights are 1/K with zero bias."""
        block = CamcBlock.fresh_fusion({0: parameter(np.ones((4, 3)))}, tau=5.0, k=4)
        np.testing.assert_allclose(block.fusion_weight.data.reshape(-1), 0.25)
        assert block.fusion_bias.data[0] == 0.0

    def test_single_location_matches_formula(self):
        """On a 1x1 map the calibrated embedding is (1 + sigmoid(mean_k <p_k, f>)) f."""
        with float64_mode():
            f = np.array([1.0, 2.0])
            prototypes = np.array([[1.0, 0.0], [0.0, 1.0]])
            block = block_with({1: prototypes}, k=2)
            out = camc_forward(f.reshape(2, 1, 1), block, 1)
            response = (1.0 + 2.0) / 2.0
            expected = (1.0 + 1.0 / (1.0 + np.exp(-response))) * f
            np.testing.assert_allclose(out.data, expected, rtol=1e-12)

    def test_batched_and_single_agree(self, rng):
        """A [B,C,H,W] batch gives the per-image results."""
        with float64_mode():
            maps = rng.uniform(size=(2, 4, 3, 3))
            block = block_with({0: rng.normal(size=(2, 4))}, k=2, weight=[0.3, -0.7], bias=0.1)
            batched = camc_forward(maps, block, 0)
            for i in range(2):
                np.testing.assert_allclose(batched.data[i], camc_forward(maps[i], block, 0).data, rtol=1e-12)

    def test_head_class_has_no_bank(self, rng):
        """Calibrating a class without prototypes is an error."""
        block = block_with({0: np.zeros((1, 4))}, k=1)
        with pytest.raises(InvalidArgumentError):
            camc_forward(rng.uniform(size=(4, 2, 2)), block, 3)

    def test_gradients(self, rng):
        """Prototype and fusion gradients match finite differences."""
        with float64_mode():
            maps = rng.uniform(size=(2, 3, 2, 2))
            block = block_with({0: rng.normal(size=(2, 3))}, k=2, weight=[0.5, 0.5])
            weights = rng.normal(size=(2, 3))
            gradcheck(
                lambda: (camc_forward(maps, block, 0) * weights).sum(),
                block.parameters(),
                h=1e-6,
                rtol=1e-5,
            )


class TestScoring:
    """Tests for calibrated classifier-stage scores."""

    def test_tau_zero_equals_plain_head(self, rng):
        """Without tail classes the scores are the plain classifier-stage scores."""
        with float64_mode():
            maps = rng.uniform(size=(3, 4, 2, 2))
            embeddings = maps.mean(axis=(2, 3))
            head = ClassifierHead.create(HeadKind.NORM_FC, 5, 4, g=16.0, rng=rng)
            empty = CamcBlock.fresh_fusion({}, tau=0.0, k=2)
            calibrated = camc_score_all(maps, embeddings, empty, head)
            plain = head_score(embeddings, head, Stage.CLASSIFIER)
            np.testing.assert_array_equal(calibrated.data, plain.data)

    def test_only_tail_columns_change(self, rng):
        """Head-class scores are untouched; tail scores use the calibrated embedding."""
        with float64_mode():
            maps = rng.uniform(size=(2, 4, 2, 2))
            embeddings = maps.mean(axis=(2, 3))
            head = ClassifierHead.create(HeadKind.NORM_FC, 3, 4, g=16.0, rng=rng)
            block = block_with({2: rng.normal(size=(2, 4))}, k=2)
            calibrated = camc_score_all(maps, embeddings, block, head).data
            plain = head_score(embeddings, head, Stage.CLASSIFIER).data
            np.testing.assert_array_equal(calibrated[:, :2], plain[:, :2])
            tail = camc_forward(maps, block, 2).data
            tail = tail / np.linalg.norm(tail, axis=1, keepdims=True)
            np.testing.assert_allclose(calibrated[:, 2], tail @ head.effective_weight()[2], rtol=1e-10)

    def test_requires_norm_fc(self, rng):
        """Calibrated scoring is defined for norm_fc only."""
        head = ClassifierHead.create(HeadKind.LINEAR, 3, 4, rng=rng)
        with pytest.raises(InvalidArgumentError):
            camc_score_all(rng.uniform(size=(4, 2, 2)), rng.uniform(size=4), None, head)

    def test_score_gradients(self, rng):
        """Gradients flow to head weights, prototypes and fusion."""
        with float64_mode():
            maps = rng.uniform(size=(2, 3, 2, 2))
            embeddings = maps.mean(axis=(2, 3))
            head = ClassifierHead.create(HeadKind.NORM_FC, 3, 3, g=4.0, rng=rng)
            block = block_with({1: rng.normal(size=(2, 3))}, k=2)
            weights = rng.normal(size=(2, 3))
            gradcheck(
                lambda: (camc_score_all(maps, embeddings, block, head) * weights).sum(),
                head.parameters() + block.parameters(),
                h=1e-6,
                rtol=1e-5,
            )


class TestPrototypes:
    """Tests for prototype selection and initialization."""

    def test_tail_rule(self):
        """Strictly fewer than tau images; inf selects all, 0 none."""
        counts = [24, 12, 6, 3]
        assert tail_classes_for(counts, 12) == [2, 3]
        assert tail_classes_for(counts, float("inf")) == [0, 1, 2, 3]
        assert tail_classes_for(counts, 0) == []

    def test_short_class_repeats(self, tiny_dataset):
        """A class with fewer than K images repeats its picks cyclically."""
        picks = select_prototype_indices(tiny_dataset, 3, 5, seed=0)
        assert len(picks) == 5
        assert set(picks.tolist()) == set(tiny_dataset.indices_of(3).tolist())
        np.testing.assert_array_equal(picks[3:], picks[:2])

    def test_selection_is_seeded(self, tiny_dataset):
        """Same seed, same picks."""
        a = select_prototype_indices(tiny_dataset, 0, 5, seed=4)
        b = select_prototype_indices(tiny_dataset, 0, 5, seed=4)
        np.testing.assert_array_equal(a, b)

    def test_init_uses_embeddings(self, tiny_backbone, tiny_dataset):
        """Banks hold backbone embeddings of the chosen training images."""
        block = init_prototypes(tiny_backbone, tiny_dataset, tau=10, k=2, seed=0)
        assert block.tail_classes == [2, 3]
        picks = select_prototype_indices(tiny_dataset, 2, 2, seed=0)
        _, expected = tiny_backbone.encode(np.asarray(tiny_dataset.images[picks]))
        np.testing.assert_allclose(block.prototypes[2].data, expected, rtol=1e-5)

    def test_tau_zero_has_no_banks(self, tiny_backbone, tiny_dataset):
        """tau = 0 calibrates nothing."""
        assert init_prototypes(tiny_backbone, tiny_dataset, tau=0, k=2, seed=0).tail_classes == []

    def test_invalid_k(self, tiny_backbone, tiny_dataset):
        """K must be positive."""
        with pytest.raises(InvalidArgumentError):
            init_prototypes(tiny_backbone, tiny_dataset, tau=10, k=0, seed=0)


class TestCropGrid:
    """Tests for CAMC++ crop windows."""

    def test_single_window_is_whole_image(self):
        """M = 1 covers the full image."""
        assert crop_windows(32, 32, 1) == [(0, 32, 0, 32)]

    def test_two_by_two_windows(self):
        """M = 2 windows are centered at the quarter points and clipped."""
        assert crop_windows(32, 32, 2) == [(0, 24, 0, 24), (0, 24, 8, 32), (8, 32, 0, 24), (8, 32, 8, 32)]

    def test_invalid_m(self):
        """M must be at least 1."""
        with pytest.raises(InvalidArgumentError):
            crop_windows(8, 8, 0)

    def test_m_two_matches_per_patch_encoding(self, tiny_backbone, tiny_dataset):
        """Each grid vector is the embedding of its window resized to the input size."""
        image = np.asarray(tiny_dataset.images[5])
        _, height, width = image.shape
        grid = camcpp_feature_grid(image, tiny_backbone, 2).data
        for n, (top, bottom, left, right) in enumerate(crop_windows(height, width, 2)):
            patch = resize_bilinear(image[:, top:bottom, left:right], (height, width))
            _, embedding = tiny_backbone.encode(patch[None])
            np.testing.assert_allclose(grid[:, n // 2, n % 2], embedding[0], atol=1e-5)

    def test_grid_shape(self, tiny_backbone, tiny_dataset):
        """The grid is [C,M,M]."""
        grid = camcpp_feature_grid(tiny_dataset.images[0], tiny_backbone, 3)
        assert grid.shape == (8, 3, 3)

    def test_m_one_is_plain_embedding(self, tiny_backbone, tiny_dataset):
        """With M = 1 the grid holds the whole-image embedding."""
        image = np.asarray(tiny_dataset.images[0])
        grid = camcpp_feature_grid(image, tiny_backbone, 1)
        _, embedding = tiny_backbone.encode(image[None])
        np.testing.assert_allclose(grid.data[:, 0, 0], embedding[0], rtol=1e-6)

    def test_m_one_calibration_matches_camc(self, rng):
        """With M = 1 and a one-stage backbone on a 1x1 image, CAMC++ equals CAMC."""
        backbone = Backbone.create([4], in_channels=3, rng=rng)
        image = rng.uniform(size=(3, 1, 1)).astype(np.float32)
        block = block_with({0: rng.normal(size=(2, 4))}, k=2)
        feature_map, _ = backbone.forward(image[None])
        grid = camcpp_feature_grid(image, backbone, 1)
        np.testing.assert_allclose(grid.data, feature_map.data[0], rtol=1e-6)
        via_grid = camc_forward(grid, block, 0).data
        via_map = camc_forward(feature_map.data[0], block, 0).data
        np.testing.assert_allclose(via_grid, via_map, rtol=1e-6)
        np.testing.assert_allclose(
            global_avg_pool(as_tensor(grid.data)).data, feature_map.data[0].reshape(-1), rtol=1e-6
        )
