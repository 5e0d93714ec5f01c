"""Tests for posekey.evaluation."""

import dataclasses
import json
import math

import numpy as np
import pytest
import torch

from posekey.dataset import Split, load_class_images
from posekey.errors import ArgumentError, CheckpointError
from posekey.evaluation import (
    PER_CLASS_COLUMNS,
    ClassMetrics,
    MetricReport,
    evaluate_images,
    evaluate_reference,
    evaluate_run,
    format_float,
    nearest_exemplars,
)
from posekey.pose_extract import ColorCodedExtractor
from posekey.training import load_trained


class ChannelStats:
    """Per-channel mean and spread: cheap, deterministic FID features."""

    feature_dim = 6
    source = "test-channel-stats"

    def __init__(self):
        self.calls = 0

    @property
    def identity(self) -> str:
        return "channel-stats"

    def features(self, images):
        self.calls += 1
        flat = images.double().flatten(2)
        return torch.cat([flat.mean(-1), flat.std(-1)], dim=1).numpy()


@pytest.fixture(scope="module")
def trained(tiny_cdiff_checkpoint):
    return load_trained(tiny_cdiff_checkpoint)


class TestFormatting:
    def test_six_decimals(self):
        assert format_float(1 / 3) == "0.333333"

    def test_nan(self):
        assert format_float(math.nan) == "nan"
        assert format_float(math.inf) == "nan"


class TestMetricReport:
    def _report(self):
        return MetricReport(
            label="cdiff-seed0", model_kind="cdiff", fid=1.5, ms_ssim=0.25,
            mean_kp_err=math.nan, kp_missing=2,
            per_class=[ClassMetrics(0, math.nan, 0.5, 1.25, 0, 4)],
            metadata={"seed": 0},
        )

    def test_json_roundtrip_keeps_nan(self):
        report = self._report()
        text = report.to_json()
        assert "NaN" not in text
        assert json.loads(text)["mean_kp_err"] is None
        again = MetricReport.from_json(text)
        assert math.isnan(again.mean_kp_err)
        assert math.isnan(again.per_class[0].fid)
        assert again.fid == 1.5 and again.per_class[0].n_generated == 4

    def test_family(self):
        assert self._report().family == "cdiff"
        assert dataclasses.replace(self._report(), model_kind="cgan_pose").family == "cgan"
        assert dataclasses.replace(self._report(), model_kind="reference").family == "reference"

    def test_write_and_load(self, tmp_path):
        report_path, csv_path = self._report().write(tmp_path)
        lines = csv_path.read_text().splitlines()
        assert lines[0] == ",".join(PER_CLASS_COLUMNS)
        assert lines[1] == "0,nan,0.500000,1.250000"
        assert MetricReport.load(tmp_path).label == "cdiff-seed0"
        assert MetricReport.load(report_path).kp_missing == 2

    def test_not_a_report(self):
        with pytest.raises(ArgumentError, match="not a metric report"):
            MetricReport.from_json('{"foo": 1}')

    def test_missing_file(self, tmp_path):
        with pytest.raises(ArgumentError, match="cannot read"):
            MetricReport.load(tmp_path / "nope.json")


class TestNearestExemplars:
    def test_picks_closest(self):
        real = torch.stack([torch.full((3, 4, 4), v) for v in (-1.0, 0.0, 1.0)])
        generated = torch.stack([torch.full((3, 4, 4), 0.9), torch.full((3, 4, 4), -0.2)])
        paired = nearest_exemplars(generated, real)
        assert paired[0, 0, 0, 0].item() == 1.0
        assert paired[1, 0, 0, 0].item() == 0.0

    def test_empty_real(self):
        with pytest.raises(ArgumentError):
            nearest_exemplars(torch.zeros(1, 3, 4, 4), torch.zeros(0, 3, 4, 4))


class TestReference:
    def test_train_split_against_itself(self, tiny_dataset):
        report = evaluate_reference(tiny_dataset, ColorCodedExtractor(), ChannelStats(), 32,
                                    split=Split.TRAIN)
        assert report.label == "reference-train"
        assert report.fid == pytest.approx(0.0, abs=1e-6)
        assert report.ms_ssim == pytest.approx(1.0, abs=1e-9)
        for c in report.per_class:
            assert c.fid == pytest.approx(0.0, abs=1e-6)
            assert c.n_generated == 9
        assert math.isfinite(report.mean_kp_err)
        assert report.metadata["ms_ssim_scales"] == 2
        assert "small_sample_caveat" in report.metadata

    def test_single_image_classes_have_undefined_fid(self, tiny_dataset):
        report = evaluate_reference(tiny_dataset, ColorCodedExtractor(), ChannelStats(), 32)
        assert all(math.isnan(c.fid) for c in report.per_class)
        assert math.isfinite(report.fid)


class TestEvaluateImages:
    def test_missing_reference_class(self, tiny_dataset):
        images = torch.zeros(2, 3, 32, 32)
        with pytest.raises(ArgumentError, match=r"\[7\]"):
            evaluate_images(images, torch.tensor([0, 7]), tiny_dataset, ColorCodedExtractor(),
                            ChannelStats(), "x", "cdiff")

    def test_real_stats_are_cached(self, tiny_dataset):
        images = torch.cat(list(load_class_images(tiny_dataset.subset(Split.TRAIN)).values()))
        labels = torch.arange(3).repeat_interleave(9)
        features = ChannelStats()
        args = (images, labels, tiny_dataset, ColorCodedExtractor(), features, "x", "cdiff",
                Split.TRAIN)
        first = evaluate_images(*args)
        calls_after_first = features.calls
        second = evaluate_images(*args)
        # 3 real classes + generated on the first pass, generated only on the second
        assert calls_after_first == 4
        assert features.calls == 5
        assert second.fid == first.fid

    def test_label_count_checked(self, tiny_dataset):
        with pytest.raises(ArgumentError):
            evaluate_images(torch.zeros(2, 3, 32, 32), torch.tensor([0]), tiny_dataset,
                            ColorCodedExtractor(), ChannelStats(), "x", "cdiff")


class TestEvaluateRun:
    def test_report_shape(self, trained, tiny_dataset):
        report = evaluate_run(trained, tiny_dataset, ColorCodedExtractor(), 2, ChannelStats())
        assert report.model_kind == "cdiff"
        assert [c.class_id for c in report.per_class] == [0, 1, 2]
        assert all(c.n_generated == 2 for c in report.per_class)
        assert (report.lambda_kp, report.lambda_pose) == (0.0, 0.0)
        assert report.metadata["n_samples_per_class"] == 2
        assert report.metadata["dataset_hash"] == tiny_dataset.hash()
        assert "config_hash" in report.metadata

    def test_deterministic_outputs(self, trained, tiny_dataset, tmp_path):
        for name in ("a", "b"):
            evaluate_run(trained, tiny_dataset, ColorCodedExtractor(), 2, ChannelStats(),
                         seed=3).write(tmp_path / name)
        for filename in ("metric_report.json", "per_class_metrics.csv"):
            assert (tmp_path / "a" / filename).read_bytes() == \
                (tmp_path / "b" / filename).read_bytes()

    def test_loads_checkpoint_path(self, tiny_cdiff_checkpoint, tiny_dataset):
        report = evaluate_run(tiny_cdiff_checkpoint, tiny_dataset, ColorCodedExtractor(), 2,
                              ChannelStats(), label="named")
        assert report.label == "named"

    def test_class_count_mismatch(self, trained, tiny_dataset):
        wrong = dataclasses.replace(trained, num_classes=5)
        with pytest.raises(CheckpointError, match="5 classes"):
            evaluate_run(wrong, tiny_dataset, ColorCodedExtractor(), 2, ChannelStats())

    def test_needs_two_samples(self, trained, tiny_dataset):
        with pytest.raises(ArgumentError, match="n_samples"):
            evaluate_run(trained, tiny_dataset, ColorCodedExtractor(), 1, ChannelStats())

    def test_scores_are_finite(self, trained, tiny_dataset):
        report = evaluate_run(trained, tiny_dataset, ColorCodedExtractor(), 2, ChannelStats())
        assert math.isfinite(report.fid)
        assert 0.0 <= report.ms_ssim <= 1.0
        assert np.isnan(report.per_class[0].fid)
