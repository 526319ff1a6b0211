"""End-to-end properties of the training pipeline.

The desk-scale trend runs take minutes and are marked slow; run them with
``pytest -m slow``.
"""

import dataclasses
from typing import Dict

import numpy as np
import pytest

from camcal.core.checkpoint import model_from_checkpoint, save_checkpoint
from camcal.core.data import build_datasets
from camcal.core.evaluation import SplitReport, evaluate, spearman, tail_to_head_mass
from camcal.core.models import G_GRID, DatasetSpec, HeadKind, Stage, TrainConfig
from camcal.core.network import ClassifierHead, head_score
from camcal.core.tensor import as_tensor, parameter
from camcal.core.training import sweep_g, sweep_tau, train_stage1, train_stage2
from camcal.utils.export import export_confusion_csv

SEEDS = [0, 1, 2]
SWEEP_EPOCHS = 10


class TestScoringProperties:
    """Properties of the heads that hold for any weights."""

    def test_norm_fc_argmax_ignores_g(self, rng):
        """g scales every score alike, so the prediction does not change."""
        weight = rng.normal(size=(6, 5))
        x = as_tensor(rng.normal(size=(20, 5)))
        predictions = [
            np.argmax(
                head_score(x, ClassifierHead.with_weight(HeadKind.NORM_FC, parameter(weight), g), stage).data,
                axis=1,
            )
            for g in (0.25, 1.0, 16.0)
            for stage in Stage
        ]
        for other in predictions[1:]:
            np.testing.assert_array_equal(other, predictions[0])

    def test_weight_norm_with_row_norms_is_linear(self, rng):
        """Magnitudes set to |w_c| reproduce the unbiased linear scores."""
        weight = rng.normal(size=(4, 6))
        x = as_tensor(rng.normal(size=(3, 6)))
        head = ClassifierHead.with_weight(HeadKind.WEIGHT_NORM, parameter(weight))
        head.g = parameter(np.linalg.norm(weight, axis=1))
        scores = head_score(x, head, Stage.REPRESENTATION)
        np.testing.assert_allclose(scores.data, x.data @ weight.T.astype(np.float32), rtol=1e-5, atol=1e-5)


class TestReproducibility:
    """Equal seeds give equal bytes."""

    def test_checkpoints_are_byte_identical(self, tiny_dataset, tiny_config):
        """Two stage-1 runs with one seed write the same checkpoint."""
        config = dataclasses.replace(tiny_config, epochs=1)
        first = save_checkpoint(train_stage1(tiny_dataset, config).checkpoint)
        second = save_checkpoint(train_stage1(tiny_dataset, config).checkpoint)
        assert first == second

    def test_confusion_exports_are_byte_identical(self, tmp_path, tiny_dataset, tiny_config):
        """Re-running training and evaluation reproduces the CSV."""
        config = dataclasses.replace(tiny_config, epochs=1)
        outputs = []
        for run in ("a", "b"):
            model = train_stage1(tiny_dataset, config).model
            report = evaluate(model, tiny_dataset, tiny_dataset.class_counts)
            outputs.append(export_confusion_csv(report, tmp_path / run / "confusion.csv").read_bytes())
        assert outputs[0] == outputs[1]


def desk_splits(seed):
    """Ten synthetic classes, counts 1000 down to 10, balanced held-out sets."""
    spec = DatasetSpec(
        source="synthetic", num_classes=10, base_per_class=1000, rho=100, image_size=16,
        seed=seed, val_per_class=20, test_per_class=50,
    )
    return build_datasets(spec)


def desk_config(seed, **changes):
    return TrainConfig(channels=[8, 16], batch_size=64, seed=seed, **changes)


@pytest.mark.slow
class TestDeskScaleTrends:
    """Directional reproductions on synthetic long-tailed data."""

    def test_linear_weight_norms_follow_counts(self):
        """A linear head learns larger weights for frequent classes."""
        correlations = []
        for seed in SEEDS:
            splits = desk_splits(seed)
            result = train_stage1(splits.train, desk_config(seed, head="linear", epochs=30))
            norms = np.linalg.norm(result.model.head.effective_weight(), axis=1)
            correlations.append(spearman(splits.train.class_counts, norms))
            assert result.losses[-1] < result.losses[0]
        assert np.mean(correlations) >= 0.5

    def test_classifier_retraining_helps_low_shot(self):
        """Class-balanced re-training raises low-shot accuracy over the stage-1 head."""
        gains = []
        for seed in SEEDS:
            splits = desk_splits(seed)
            stage1 = train_stage1(splits.train, desk_config(seed, head="linear", epochs=30))
            crt = train_stage2(
                stage1.checkpoint,
                splits.train,
                desk_config(seed, stage="classifier", head="linear", epochs=10, warm_start=False),
            )
            counts = splits.train.class_counts
            before = evaluate(stage1.model, splits.test, counts)
            after = evaluate(crt.model, splits.test, counts)
            gains.append(after.top1_low - before.top1_low)
        assert np.mean(gains) >= 5.0

    def test_normalized_head_beats_linear(self, g_sweeps):
        """norm_fc at the validation-selected g matches or beats the linear head overall."""
        normalized = [run.best_report.top1_all for run in g_sweeps]
        linear = [run.linear_report.top1_all for run in g_sweeps]
        assert np.mean(normalized) >= np.mean(linear)
        assert sum(n > l for n, l in zip(normalized, linear)) >= 2

    def test_extreme_g_hurts_low_shot(self, g_sweeps):
        """Both ends of the g grid lose low-shot accuracy; the smallest g pulls tail items to head classes."""
        best = np.mean([run.best_report.top1_low for run in g_sweeps])
        smallest = np.mean([run.reports[G_GRID[0]].top1_low for run in g_sweeps])
        largest = np.mean([run.reports[G_GRID[-1]].top1_low for run in g_sweeps])
        assert smallest < best
        assert largest < best
        mass = np.mean([tail_to_head_mass(run.reports[G_GRID[0]]) for run in g_sweeps])
        assert mass > 0.5

    def test_calibration_helps_low_shot(self):
        """CAMC over the bottom half of classes raises low-shot accuracy over tau = 0."""
        low_gains, overall_changes = [], []
        for seed in SEEDS:
            splits = desk_splits(seed)
            stage1 = train_stage1(splits.train, desk_config(seed, head="norm_fc", epochs=30))
            assert stage1.losses[-1] < stage1.losses[0]
            stage2 = desk_config(seed, stage="classifier", camc_variant="camc", epochs=10)
            outcomes = sweep_tau(stage1.checkpoint, splits.train, [0.0, 100.0], stage2, splits.test)
            assert all(o.ok for o in outcomes)
            plain, calibrated = outcomes[0].report, outcomes[1].report
            for outcome in outcomes:
                assert outcome.history[-1].loss < outcome.history[0].loss
            low_gains.append(calibrated.top1_low - plain.top1_low)
            overall_changes.append(calibrated.top1_all - plain.top1_all)
        assert np.mean(low_gains) >= 2.0
        assert np.mean(overall_changes) >= -1.0


@dataclasses.dataclass
class GSweepRun:
    """Test reports of one seed's g sweep plus its linear baseline."""
    reports: Dict[float, SplitReport]
    best_g: float
    linear_report: SplitReport

    @property
    def best_report(self) -> SplitReport:
        return self.reports[self.best_g]


@pytest.fixture(scope="module")
def g_sweeps():
    """Per seed: norm_fc stage 1 over the g grid and a linear stage 1, scored on test."""
    runs = []
    for seed in SEEDS:
        splits = desk_splits(seed)
        counts = splits.train.class_counts
        sweep = sweep_g(
            splits.train, G_GRID, desk_config(seed, head="norm_fc", epochs=SWEEP_EPOCHS), splits.val
        )
        assert all(r.ok for r in sweep.runs)
        reports = {
            r.key: evaluate(model_from_checkpoint(r.checkpoint), splits.test, counts) for r in sweep.runs
        }
        linear = train_stage1(splits.train, desk_config(seed, head="linear", epochs=SWEEP_EPOCHS))
        assert linear.losses[-1] < linear.losses[0]
        runs.append(
            GSweepRun(reports, sweep.best.key, evaluate(linear.model, splits.test, counts))
        )
    return runs
