"""Tests for the optimizer, schedule and the two training stages."""

import dataclasses
import math

import numpy as np
import pytest

from camcal.core.camc import init_prototypes
from camcal.core.checkpoint import backbone_from_checkpoint
from camcal.core.models import (
    CamcVariant,
    HeadKind,
    InvalidArgumentError,
    NumericalError,
    Stage,
    TrainConfig,
)
from camcal.core.tensor import parameter
from camcal.core.training import (
    compare_heads,
    cosine_lr,
    head_variants,
    resolve_tau,
    run_parallel,
    sgd_step,
    sweep_g,
    sweep_m,
    sweep_tau,
    train_stage1,
    train_stage2,
)


def stage2_config(base, **changes):
    """Classifier-stage settings derived from a stage-1 config."""
    return dataclasses.replace(base, stage=Stage.CLASSIFIER.value, sampler=None, g=None, **changes)


class TestSgdStep:
    """Tests for heavy-ball SGD."""

    def test_first_step_is_plain_sgd(self):
        """Starting from zero velocity the first step is -lr * grad."""
        p = parameter([1.0, 2.0])
        velocity = sgd_step([p], [np.array([0.5, -1.0])], lr=0.1, momentum=0.9)
        np.testing.assert_allclose(p.data, [0.95, 2.1], rtol=1e-6)
        np.testing.assert_allclose(velocity[0], [0.5, -1.0])

    def test_momentum_recurrence(self):
        """v <- m v + g; p <- p - lr v over several steps."""
        p = parameter([0.0])
        velocity = None
        expected_p, expected_v = 0.0, 0.0
        for g in (1.0, 2.0, -1.0):
            velocity = sgd_step([p], [np.array([g])], lr=0.5, momentum=0.9, velocity=velocity)
            expected_v = 0.9 * expected_v + g
            expected_p -= 0.5 * expected_v
        assert p.data[0] == pytest.approx(expected_p, rel=1e-6)
        assert velocity[0][0] == pytest.approx(expected_v)

    def test_weight_decay_adds_to_gradient(self):
        """Decay adds wd * p to the gradient."""
        p = parameter([2.0])
        sgd_step([p], [np.array([0.0])], lr=1.0, momentum=0.0, weight_decay=0.1)
        assert p.data[0] == pytest.approx(1.8, rel=1e-6)

    def test_missing_gradient_is_zero(self):
        """A parameter without gradient does not move."""
        p = parameter([3.0])
        sgd_step([p], [None], lr=1.0, momentum=0.9)
        assert p.data[0] == 3.0

    def test_shape_mismatch(self):
        """Gradients must match their parameter."""
        with pytest.raises(InvalidArgumentError):
            sgd_step([parameter([1.0, 2.0])], [np.zeros(3)], lr=0.1, momentum=0.9)


class TestCosineLr:
    """Tests for the cosine schedule."""

    def test_values(self):
        """Peak at epoch 0, half at the midpoint."""
        assert cosine_lr(0, 10, 0.1) == pytest.approx(0.1)
        assert cosine_lr(5, 10, 0.1) == pytest.approx(0.05)
        assert cosine_lr(9, 10, 0.1) == pytest.approx(0.05 * (1 + math.cos(math.pi * 0.9)))

    def test_out_of_range(self):
        """Epochs outside [0, E) are rejected."""
        with pytest.raises(InvalidArgumentError):
            cosine_lr(10, 10, 0.1)


class TestStage1:
    """Tests for representation learning."""

    def test_history_and_checkpoint(self, tiny_dataset, tiny_config):
        """One record per epoch; the checkpoint holds backbone and head."""
        result = train_stage1(tiny_dataset, tiny_config, val=tiny_dataset)
        assert [r.epoch for r in result.history] == [0, 1]
        assert result.history[0].val is not None
        assert all(np.isfinite(result.losses))
        assert "backbone.stage2.weight" in result.checkpoint.tensors
        assert "head.weight" in result.checkpoint.tensors
        assert result.checkpoint.meta["class_counts"] == [24, 12, 6, 3]

    def test_zero_epochs_keeps_initialization(self, tiny_dataset, tiny_config):
        """With no epochs the checkpoint equals the seeded initialization."""
        a = train_stage1(tiny_dataset, dataclasses.replace(tiny_config, epochs=0))
        b = train_stage1(tiny_dataset, dataclasses.replace(tiny_config, epochs=0))
        assert a.history == []
        for name, tensor in a.checkpoint.tensors.items():
            np.testing.assert_array_equal(tensor, b.checkpoint.tensors[name])

    def test_deterministic(self, tiny_dataset, tiny_config):
        """Same seed, same weights."""
        a = train_stage1(tiny_dataset, tiny_config)
        b = train_stage1(tiny_dataset, tiny_config)
        assert a.losses == b.losses
        np.testing.assert_array_equal(a.checkpoint.tensors["head.weight"], b.checkpoint.tensors["head.weight"])

    def test_loss_decreases(self, tiny_dataset, tiny_config):
        """Training lowers the loss on a small set."""
        result = train_stage1(tiny_dataset, dataclasses.replace(tiny_config, epochs=6, lr_max=0.1))
        assert result.losses[-1] < result.losses[0]

    def test_rejects_classifier_config(self, tiny_dataset, tiny_config):
        """Stage 1 needs a representation config."""
        with pytest.raises(InvalidArgumentError):
            train_stage1(tiny_dataset, stage2_config(tiny_config))

    def test_nan_aborts(self, tiny_dataset, tiny_config):
        """A diverging run stops with the epoch, batch and learning rate."""
        config = dataclasses.replace(tiny_config, lr_max=1e30, head=HeadKind.LINEAR.value, epochs=3)
        with pytest.raises(NumericalError) as excinfo:
            train_stage1(tiny_dataset, config)
        assert excinfo.value.epoch >= 0
        assert excinfo.value.batch >= 0

    def test_labels_seen_follow_sampler(self, tiny_dataset, tiny_config):
        """Every sampled label of the epoch is counted."""
        result = train_stage1(tiny_dataset, dataclasses.replace(tiny_config, epochs=1))
        seen = result.history[0].labels_seen
        assert sum(seen) == 6 * tiny_config.batch_size


@pytest.fixture
def stage1(tiny_dataset, tiny_config):
    """A trained stage-1 result on the tiny dataset."""
    return train_stage1(tiny_dataset, tiny_config)


class TestStage2:
    """Tests for classifier re-training."""

    def test_backbone_is_frozen(self, stage1, tiny_dataset, tiny_config):
        """Stage 2 leaves every backbone tensor bit-identical."""
        result = train_stage2(stage1.checkpoint, tiny_dataset, stage2_config(tiny_config, epochs=2))
        for name, tensor in stage1.checkpoint.backbone_tensors().items():
            np.testing.assert_array_equal(result.checkpoint.tensors[name], tensor)
        live = result.model.backbone.named_parameters()
        for name, tensor in stage1.checkpoint.backbone_tensors().items():
            np.testing.assert_array_equal(live[name].data, tensor)
        assert backbone_from_checkpoint(result.checkpoint).num_stages == 2

    def test_class_balanced_batches(self, stage1, tiny_dataset, tiny_config):
        """The classifier stage samples classes uniformly."""
        config = stage2_config(tiny_config, epochs=1, batch_size=200)
        result = train_stage2(stage1.checkpoint, tiny_dataset, config)
        seen = np.array(result.history[0].labels_seen)
        assert seen.min() > 0.15 * seen.sum()

    def test_tau_zero_matches_plain_retraining(self, stage1, tiny_dataset, tiny_config):
        """Calibration with tau = 0 trains exactly like no calibration."""
        plain = train_stage2(stage1.checkpoint, tiny_dataset, stage2_config(tiny_config, epochs=2))
        calibrated = train_stage2(
            stage1.checkpoint,
            tiny_dataset,
            stage2_config(tiny_config, epochs=2, camc_variant=CamcVariant.CAMC.value, tau=0.0),
        )
        assert plain.losses == calibrated.losses
        np.testing.assert_array_equal(
            plain.checkpoint.tensors["head.weight"], calibrated.checkpoint.tensors["head.weight"]
        )

    def test_camc_trains_prototypes(self, stage1, tiny_dataset, tiny_config):
        """Calibrated tail classes get prototype banks that move during training."""
        config = stage2_config(tiny_config, epochs=2, camc_variant=CamcVariant.CAMC.value, tau=10.0, k=2)
        initial = init_prototypes(
            backbone_from_checkpoint(stage1.checkpoint), tiny_dataset, 10.0, 2, config.seed
        )
        result = train_stage2(stage1.checkpoint, tiny_dataset, config)
        assert result.model.camc.tail_classes == [2, 3]
        for c in (2, 3):
            before = initial.prototypes[c].data
            after = result.checkpoint.tensors[f"camc.prototypes.{c}"]
            assert after.shape == before.shape
            assert not np.array_equal(after, before)
        assert result.checkpoint.meta["tau"] == 10.0
        assert all(np.isfinite(result.losses))

    def test_camcpp_runs(self, stage1, tiny_dataset, tiny_config):
        """CAMC++ trains with a 2x2 crop grid."""
        config = stage2_config(
            tiny_config, epochs=1, camc_variant=CamcVariant.CAMCPP.value, tau=10.0, k=2, m=2
        )
        result = train_stage2(stage1.checkpoint, tiny_dataset, config)
        assert result.model.variant is CamcVariant.CAMCPP
        assert len(result.history) == 1

    def test_cold_start_head(self, stage1, tiny_dataset, tiny_config):
        """Without warm start the head is freshly initialized."""
        config = stage2_config(tiny_config, epochs=0, warm_start=False)
        result = train_stage2(stage1.checkpoint, tiny_dataset, config)
        assert result.checkpoint.tensors["head.weight"].shape == (4, 8)

    def test_rejects_representation_config(self, stage1, tiny_dataset, tiny_config):
        """Stage 2 needs a classifier config."""
        with pytest.raises(InvalidArgumentError):
            train_stage2(stage1.checkpoint, tiny_dataset, tiny_config)

    def test_resolve_tau_default(self, tiny_dataset, tiny_config):
        """Without an explicit tau synthetic data uses the median count."""
        assert resolve_tau(stage2_config(tiny_config), tiny_dataset) == 9.0


class TestSweeps:
    """Tests for the ablation sweeps."""

    def test_sweep_g_rows(self, tiny_dataset, tiny_config):
        """One run per g, in order, each with a validation report."""
        sweep = sweep_g(tiny_dataset, [0.25, 1.0, 4.0], dataclasses.replace(tiny_config, epochs=1), tiny_dataset)
        assert [r.key for r in sweep.runs] == [0.25, 1.0, 4.0]
        assert all(r.ok and r.report is not None for r in sweep.runs)
        assert sweep.best is not None

    def test_single_g_equals_single_run(self, tiny_dataset, tiny_config):
        """A one-value sweep reproduces the plain run."""
        config = dataclasses.replace(tiny_config, epochs=1, g=2.0)
        sweep = sweep_g(tiny_dataset, [2.0], config)
        single = train_stage1(tiny_dataset, config)
        assert sweep.runs[0].history[0].loss == single.history[0].loss

    def test_sweep_g_empty(self, tiny_dataset, tiny_config):
        """An empty grid is an error."""
        with pytest.raises(InvalidArgumentError):
            sweep_g(tiny_dataset, [], tiny_config)

    def test_sweep_tau(self, stage1, tiny_dataset, tiny_config):
        """tau = 0 and inf both produce reports."""
        config = stage2_config(tiny_config, epochs=1, camc_variant=CamcVariant.CAMC.value, k=2)
        outcomes = sweep_tau(stage1.checkpoint, tiny_dataset, [0.0, float("inf")], config, tiny_dataset)
        assert [o.key for o in outcomes] == [0.0, float("inf")]
        assert all(o.ok for o in outcomes)

    def test_sweep_m(self, stage1, tiny_dataset, tiny_config):
        """CAMC++ runs once per grid side."""
        config = stage2_config(tiny_config, epochs=1, tau=10.0, k=2)
        outcomes = sweep_m(stage1.checkpoint, tiny_dataset, [1, 2], config, tiny_dataset)
        assert [o.key for o in outcomes] == [1, 2]
        assert all(o.ok and o.report is not None for o in outcomes)

    def test_compare_heads(self, tiny_dataset, tiny_config):
        """Every head variant is scored as trained, after cRT and with NCM."""
        rows = compare_heads(
            tiny_dataset,
            tiny_dataset,
            dataclasses.replace(tiny_config, epochs=1),
            stage2_config(tiny_config, epochs=1),
            g_star=0.25,
        )
        assert [r.label for r in rows][-1] == "norm_fc g=0.25"
        assert len(rows) == 5
        for row in rows:
            assert row.error is None
            assert row.ncm.confusion.sum() == len(tiny_dataset)
            assert row.crt.top1_all is not None

    def test_run_parallel_keeps_order(self, monkeypatch):
        """Results come back in input order with several workers."""
        monkeypatch.setenv("CAMCAL_THREADS", "4")
        assert run_parallel([3, 1, 2], lambda x: x * 10, jobs=4) == [30, 10, 20]

    def test_head_variants(self):
        """Five head variants, the last using g*."""
        variants = head_variants(0.25)
        assert [v[1] for v in variants] == [
            HeadKind.LINEAR,
            HeadKind.WEIGHT_NORM,
            HeadKind.WEIGHT_NORM_SHARED_G,
            HeadKind.NORM_FC,
            HeadKind.NORM_FC,
        ]
        assert variants[-1][2] == 0.25


def test_train_config_validation():
    """Invalid fields are named one by one."""
    config = TrainConfig(momentum=1.5, batch_size=0)
    with pytest.raises(InvalidArgumentError) as excinfo:
        config.validate()
    assert "train.momentum" in str(excinfo.value)
    assert "train.batch_size" in str(excinfo.value)
