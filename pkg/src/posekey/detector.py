"""External pose-detector adapter over a line-oriented subprocess protocol.

Wire protocol: for each request the adapter receives one image path followed
by ``\\n`` on stdin and answers with one JSON line
``{"image": ..., "keypoints": [[x, y, v], ...]}`` on stdout. Detector joints
are mapped onto the internal topology through a declared index map; internal
joints without a counterpart are invisible.

Each ``DetectorHandle`` owns one subprocess and must not be shared between
tasks; run several handles for concurrency (see ``detect_many``).
"""

import asyncio
import json
import logging
import shlex
import tempfile
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Coroutine

import torch
from PIL import Image

from posekey.errors import ArgumentError, DetectorError
from posekey.skeleton import DEFAULT_TOPOLOGY, CoordinateSpace, Pose, SkeletonTopology
from posekey.synth import tensor_to_pixels

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0
DEFAULT_HANDLES = 2

# 33-joint body-landmark layout -> DEFAULT_TOPOLOGY. Pelvis and neck are
# midpoints in that layout and have no landmark of their own.
MEDIAPIPE33_INDEX_MAP: dict[int, int] = {
    2: 0,    # head <- nose
    3: 11, 4: 13, 5: 15,     # left shoulder, elbow, wrist
    6: 12, 7: 14, 8: 16,     # right shoulder, elbow, wrist
    9: 23, 10: 25, 11: 27,   # left hip, knee, ankle
    12: 24, 13: 26, 14: 28,  # right hip, knee, ankle
}

ProgressCallback = Callable[[int, int, str], Coroutine[Any, Any, None]]


@dataclass(frozen=True)
class AdapterConfig:
    """Detector command line, its joint count and internal->detector index map."""

    command: tuple[str, ...]
    joint_count: int
    index_map: Mapping[int, int] = field(default_factory=dict)
    timeout: float = DEFAULT_TIMEOUT
    topology: SkeletonTopology = DEFAULT_TOPOLOGY

    def __post_init__(self) -> None:
        if not self.command:
            raise ArgumentError("adapter command is empty")
        if self.joint_count < 1 or self.timeout <= 0:
            raise ArgumentError("adapter joint_count and timeout must be positive")
        for internal, external in self.index_map.items():
            if not 0 <= internal < self.topology.num_joints:
                raise ArgumentError(f"index map joint {internal} is not in the topology")
            if not 0 <= external < self.joint_count:
                raise ArgumentError(f"index map target {external} exceeds {self.joint_count}")

    @classmethod
    def from_command(
        cls,
        command: str | list[str] | tuple[str, ...],
        joint_count: int,
        index_map: Mapping[int, int] | None = None,
        timeout: float = DEFAULT_TIMEOUT,
        topology: SkeletonTopology = DEFAULT_TOPOLOGY,
    ) -> "AdapterConfig":
        """Parse a shell-style command; the index map defaults by joint count.

        ``joint_count == K`` maps identically and 33 uses ``MEDIAPIPE33_INDEX_MAP``.
        """
        argv = tuple(shlex.split(command)) if isinstance(command, str) else tuple(command)
        if index_map is None:
            if joint_count == topology.num_joints:
                index_map = {j: j for j in range(joint_count)}
            elif joint_count == 33 and topology == DEFAULT_TOPOLOGY:
                index_map = MEDIAPIPE33_INDEX_MAP
            else:
                raise ArgumentError(f"no default index map for a {joint_count}-joint detector")
        return cls(argv, joint_count, dict(index_map), timeout, topology)


def map_record(record: Any, config: AdapterConfig, raw_line: str = "") -> Pose:
    """Convert one detector record to an internal pixel-space Pose."""
    keypoints = record.get("keypoints") if isinstance(record, dict) else None
    if not isinstance(keypoints, list) or len(keypoints) != config.joint_count:
        raise DetectorError(
            f"detector record must carry {config.joint_count} keypoints", raw_line
        )
    k = config.topology.num_joints
    coords = torch.zeros(k, 2, dtype=torch.float64)
    visibility = torch.zeros(k, dtype=torch.bool)
    try:
        for internal, external in config.index_map.items():
            x, y, v = keypoints[external]
            coords[internal] = torch.tensor([float(x), float(y)], dtype=torch.float64)
            visibility[internal] = bool(v)
    except (TypeError, ValueError) as exc:
        raise DetectorError(f"malformed keypoint in detector record: {exc}", raw_line) from exc
    return Pose(coords, visibility, CoordinateSpace.PIXEL)


class DetectorHandle:
    """One running adapter process; use as an async context manager."""

    def __init__(self, config: AdapterConfig):
        self.config = config
        self._proc: asyncio.subprocess.Process | None = None

    async def __aenter__(self) -> "DetectorHandle":
        await self.start()
        return self

    async def __aexit__(self, *exc_info) -> None:
        await self.close()

    async def start(self) -> None:
        try:
            self._proc = await asyncio.create_subprocess_exec(
                *self.config.command,
                stdin=asyncio.subprocess.PIPE,
                stdout=asyncio.subprocess.PIPE,
                stderr=asyncio.subprocess.DEVNULL,
            )
        except OSError as exc:
            raise DetectorError(f"cannot launch detector {self.config.command[0]}: {exc}") from exc

    async def detect(self, image_path: str | Path) -> Pose:
        proc = self._proc
        if proc is None or proc.stdin is None or proc.stdout is None:
            raise DetectorError("detector handle is not started")
        try:
            proc.stdin.write(f"{image_path}\n".encode())
            await asyncio.wait_for(proc.stdin.drain(), self.config.timeout)
            raw = await asyncio.wait_for(proc.stdout.readline(), self.config.timeout)
        except TimeoutError:
            await self._kill()
            raise DetectorError(
                f"detector timed out after {self.config.timeout:g}s on {image_path}"
            ) from None
        except (BrokenPipeError, ConnectionResetError) as exc:
            await self._exit_code()
            raise DetectorError(f"detector process exited: {exc}") from exc

        line = raw.decode(errors="replace").strip()
        if not raw:
            code = await self._exit_code()
            raise DetectorError(f"detector process exited (code {code}) on {image_path}")
        try:
            record = json.loads(line)
        except json.JSONDecodeError:
            raise DetectorError(f"detector sent malformed JSON for {image_path}", line) from None
        return map_record(record, self.config, line)

    @property
    def running(self) -> bool:
        return self._proc is not None and self._proc.returncode is None

    async def _exit_code(self) -> int | None:
        try:
            return await asyncio.wait_for(self._proc.wait(), 1.0)
        except TimeoutError:
            return None

    async def _kill(self) -> None:
        if self._proc is not None and self._proc.returncode is None:
            self._proc.kill()
            await self._proc.wait()

    async def close(self) -> None:
        proc, self._proc = self._proc, None
        if proc is None:
            return
        if proc.stdin is not None and not proc.stdin.is_closing():
            proc.stdin.close()
        try:
            await asyncio.wait_for(proc.wait(), self.config.timeout)
        except TimeoutError:
            proc.kill()
            await proc.wait()


async def detect_many(
    paths: list[str | Path],
    config: AdapterConfig,
    handles: int = DEFAULT_HANDLES,
    on_progress: ProgressCallback | None = None,
    skip_failures: bool = False,
) -> list[Pose | None]:
    """Detect poses for ``paths`` across ``handles`` adapter processes, in input order.

    With ``skip_failures`` a failed image yields None instead of aborting the
    batch, and a handle whose process died is restarted for the next image.
    """
    if not paths:
        return []
    handles = max(1, min(handles, len(paths)))
    chunks = [list(range(i, len(paths), handles)) for i in range(handles)]
    results: list[Pose | None] = [None] * len(paths)
    completed = 0
    lock = asyncio.Lock()

    async def _run_chunk(indices: list[int]) -> None:
        nonlocal completed
        async with DetectorHandle(config) as handle:
            for i in indices:
                try:
                    results[i] = await handle.detect(paths[i])
                except DetectorError as exc:
                    if not skip_failures:
                        raise
                    logger.warning("detection failed for %s: %s", paths[i], exc)
                    if not handle.running:
                        await handle.close()
                        await handle.start()
                async with lock:
                    completed += 1
                    if on_progress:
                        await on_progress(completed, len(paths),
                                          f"Detected {completed}/{len(paths)} images")

    await asyncio.gather(*[_run_chunk(c) for c in chunks])
    return results


def external_detect(image_path: str | Path, config: AdapterConfig) -> Pose:
    """Blocking one-shot detection with a fresh adapter process."""

    async def _once() -> Pose:
        async with DetectorHandle(config) as handle:
            return await handle.detect(image_path)

    return asyncio.run(_once())


class ExternalPoseExtractor:
    """PoseExtractor over the adapter; tensors are written to temporary PNGs.

    ``extract_batch`` sends a whole batch through ``handles`` adapter processes;
    images the detector fails on come back with every joint invisible.
    """

    differentiable = False

    def __init__(self, config: AdapterConfig, handles: int = 1):
        self.config = config
        self.topology = config.topology
        self.handles = handles

    def extract_batch(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        k = self.topology.num_joints
        coords = torch.zeros(images.shape[0], k, 2, dtype=torch.float64)
        visibility = torch.zeros(images.shape[0], k, dtype=torch.bool)
        if images.shape[0] == 0:
            return coords, visibility
        with tempfile.TemporaryDirectory(prefix="posekey-detect-") as tmp:
            paths = []
            for i, image in enumerate(images):
                path = Path(tmp) / f"{i:05d}.png"
                Image.fromarray(tensor_to_pixels(image)).save(path, format="PNG")
                paths.append(path)
            poses = asyncio.run(
                detect_many(paths, self.config, self.handles, skip_failures=True)
            )
        for i, pose in enumerate(poses):
            if pose is not None:
                coords[i], visibility[i] = pose.coords, pose.visibility
        return coords, visibility

    def extract(self, image: torch.Tensor) -> Pose:
        with tempfile.TemporaryDirectory(prefix="posekey-detect-") as tmp:
            path = Path(tmp) / "image.png"
            Image.fromarray(tensor_to_pixels(image)).save(path, format="PNG")
            return external_detect(path, self.config)

    def extract_paths(
        self, paths: list[str | Path], handles: int = DEFAULT_HANDLES
    ) -> list[Pose | None]:
        return asyncio.run(detect_many(paths, self.config, handles))
