"""Tests for posekey.detector against the scripted stub process."""

import asyncio
import logging
import sys
from pathlib import Path
from unittest.mock import AsyncMock

import pytest
import torch

from posekey.detector import (
    MEDIAPIPE33_INDEX_MAP,
    AdapterConfig,
    DetectorHandle,
    ExternalPoseExtractor,
    detect_many,
    external_detect,
    map_record,
)
from posekey.errors import ArgumentError, DetectorError
from posekey.metrics import mean_keypoint_error
from posekey.skeleton import DEFAULT_TOPOLOGY

STUB = str(Path(__file__).parent / "stub_detector.py")


def _config(mode: str, joints: int = 15, timeout: float = 5.0) -> AdapterConfig:
    return AdapterConfig.from_command([sys.executable, STUB, mode, str(joints)], joints,
                                      timeout=timeout)


class TestAdapterConfig:
    def test_identity_map_for_matching_count(self):
        config = AdapterConfig.from_command("detector --fast", 15)
        assert config.command == ("detector", "--fast")
        assert dict(config.index_map) == {j: j for j in range(15)}

    def test_mediapipe_map_for_33(self):
        config = AdapterConfig.from_command("detector", 33)
        assert dict(config.index_map) == MEDIAPIPE33_INDEX_MAP

    def test_no_default_for_other_counts(self):
        with pytest.raises(ArgumentError, match="17-joint"):
            AdapterConfig.from_command("detector", 17)

    def test_explicit_map_validated(self):
        with pytest.raises(ArgumentError, match="exceeds"):
            AdapterConfig.from_command("detector", 17, index_map={0: 17})

    def test_empty_command(self):
        with pytest.raises(ArgumentError):
            AdapterConfig((), 15)


class TestMapRecord:
    def test_unmapped_joints_invisible(self):
        config = AdapterConfig.from_command("detector", 33)
        keypoints = [[float(i), 0.0, 1] for i in range(33)]
        pose = map_record({"keypoints": keypoints}, config)
        idx = DEFAULT_TOPOLOGY.index
        assert not bool(pose.visibility[idx("pelvis")])
        assert not bool(pose.visibility[idx("neck")])
        assert pose.coords[idx("l_wrist"), 0].item() == 15.0
        assert int(pose.visibility.sum()) == 13

    def test_wrong_count(self):
        config = AdapterConfig.from_command("detector", 15)
        with pytest.raises(DetectorError, match="15 keypoints") as exc_info:
            map_record({"keypoints": []}, config, raw_line="raw")
        assert exc_info.value.raw_line == "raw"

    def test_malformed_keypoint(self):
        config = AdapterConfig.from_command("detector", 15)
        with pytest.raises(DetectorError, match="malformed"):
            map_record({"keypoints": [["x", 0, 1]] * 15}, config)


class TestDetectorHandle:
    async def test_fixed_answer(self):
        async with DetectorHandle(_config("fixed")) as handle:
            pose = await handle.detect("a.png")
            again = await handle.detect("b.png")
        assert pose.coords[4].tolist() == [4.0, 8.0]
        assert bool(pose.visibility.all())
        assert torch.equal(pose.coords, again.coords)

    async def test_garbage_keeps_raw_line(self):
        async with DetectorHandle(_config("garbage")) as handle:
            with pytest.raises(DetectorError, match="malformed JSON") as exc_info:
                await handle.detect("a.png")
        assert exc_info.value.raw_line == "not json {"

    async def test_wrong_keypoint_count(self):
        async with DetectorHandle(_config("short")) as handle:
            with pytest.raises(DetectorError, match="15 keypoints"):
                await handle.detect("a.png")

    async def test_timeout_kills_process(self):
        handle = DetectorHandle(_config("hang", timeout=0.5))
        await handle.start()
        try:
            with pytest.raises(DetectorError, match="timed out"):
                await handle.detect("a.png")
            assert handle._proc.returncode is not None
        finally:
            await handle.close()

    async def test_exit_reports_code(self):
        async with DetectorHandle(_config("exit")) as handle:
            with pytest.raises(DetectorError, match="code 3"):
                await handle.detect("a.png")

    async def test_missing_binary(self):
        config = AdapterConfig.from_command(["/nonexistent/detector"], 15)
        with pytest.raises(DetectorError, match="cannot launch"):
            await DetectorHandle(config).start()

    async def test_not_started(self):
        with pytest.raises(DetectorError, match="not started"):
            await DetectorHandle(_config("fixed")).detect("a.png")


class TestDetectMany:
    async def test_order_and_progress(self):
        progress = AsyncMock()
        paths = [f"img_{i}.png" for i in range(5)]
        poses = await detect_many(paths, _config("fixed"), handles=2, on_progress=progress)
        assert len(poses) == 5
        assert progress.await_count == 5
        assert progress.await_args_list[-1].args[:2] == (5, 5)

    async def test_empty(self):
        assert await detect_many([], _config("fixed")) == []

    async def test_failure_propagates(self):
        with pytest.raises(DetectorError):
            await detect_many(["a.png", "b.png"], _config("garbage"), handles=2)


class TestBlockingSurface:
    def test_external_detect(self):
        pose = external_detect("a.png", _config("fixed"))
        assert pose.coords[1].tolist() == [1.0, 2.0]

    def test_extractor_writes_image(self):
        extractor = ExternalPoseExtractor(_config("fixed"))
        assert extractor.differentiable is False
        pose = extractor.extract(torch.zeros(3, 8, 8))
        assert pose.coords.shape == (15, 2)

    def test_extract_paths(self):
        poses = ExternalPoseExtractor(_config("fixed")).extract_paths(["a", "b", "c"])
        assert [p.coords[2].tolist() for p in poses] == [[2.0, 4.0]] * 3


class TestExtractBatch:
    @pytest.fixture
    def launches(self, monkeypatch):
        """Count adapter processes started through asyncio."""
        started = []
        original = asyncio.create_subprocess_exec

        async def counting(*args, **kwargs):
            started.append(args)
            return await original(*args, **kwargs)

        monkeypatch.setattr(asyncio, "create_subprocess_exec", counting)
        return started

    def test_one_process_per_batch(self, launches):
        coords, visibility = ExternalPoseExtractor(_config("fixed")).extract_batch(
            torch.zeros(6, 3, 16, 16))
        assert len(launches) == 1
        assert coords.shape == (6, 15, 2) and bool(visibility.all())
        assert coords[:, 3].tolist() == [[3.0, 6.0]] * 6

    def test_handles_bound_processes(self, launches):
        ExternalPoseExtractor(_config("fixed"), handles=2).extract_batch(torch.zeros(5, 3, 8, 8))
        assert len(launches) == 2

    def test_failed_images_are_invisible(self, caplog):
        caplog.set_level(logging.WARNING, logger="posekey.detector")
        coords, visibility = ExternalPoseExtractor(_config("garbage")).extract_batch(
            torch.zeros(3, 3, 8, 8))
        assert not bool(visibility.any())
        assert "malformed JSON" in caplog.text

    def test_dead_process_is_restarted(self, launches):
        _, visibility = ExternalPoseExtractor(_config("exit")).extract_batch(
            torch.zeros(3, 3, 8, 8))
        assert not bool(visibility.any())
        assert len(launches) == 4

    def test_empty_batch(self, launches):
        coords, visibility = ExternalPoseExtractor(_config("fixed")).extract_batch(
            torch.zeros(0, 3, 8, 8))
        assert coords.shape == (0, 15, 2) and visibility.shape == (0, 15)
        assert launches == []

    def test_keypoint_error_uses_batch_path(self, launches):
        images = torch.zeros(10, 3, 32, 32)
        canonical = torch.zeros(1, 15, 2, dtype=torch.float64)
        report = mean_keypoint_error(images, torch.zeros(10, dtype=torch.long),
                                     ExternalPoseExtractor(_config("fixed")), canonical)
        assert len(launches) == 1
        assert report.missing == 0
