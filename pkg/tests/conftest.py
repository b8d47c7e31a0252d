"""
Shared fixtures.
"""

from collections.abc import Callable

import numpy as np
import pytest

from chronoscene.config import EngineConfig
from chronoscene.embeddings import Embedding
from chronoscene.geometry import Bbox3D, DepthFrame, Intrinsics, Pose
from chronoscene.otm import ChangeSnapshot
from chronoscene.synth import SceneScript, build_script, write_location


def _intrinsics(width: int = 40, height: int = 30, focal: float = 30.0) -> Intrinsics:
    return Intrinsics(focal, focal, (width - 1) / 2, (height - 1) / 2, width, height)


@pytest.fixture
def intrinsics() -> Intrinsics:
    return _intrinsics()


@pytest.fixture
def make_frame() -> Callable[..., DepthFrame]:
    """Factory for flat depth frames facing +Z of the given pose."""

    def _make(
        depth: float | np.ndarray = 2.0,
        *,
        pose: Pose | None = None,
        timestamp: float = 0.0,
        frame_index: int = 0,
        width: int = 40,
        height: int = 30,
        confidence: np.ndarray | None = None,
    ) -> DepthFrame:
        grid = np.full((height, width), depth, dtype=np.float32) if np.isscalar(depth) else depth
        return DepthFrame(
            depth=grid,
            pose=pose or Pose.identity(),
            intrinsics=_intrinsics(width, height),
            timestamp=timestamp,
            frame_index=frame_index,
            confidence=confidence,
        )

    return _make


@pytest.fixture
def make_snapshot() -> Callable[..., ChangeSnapshot]:
    def _make(
        center: tuple[float, float, float] = (0.0, 0.0, 0.0),
        *,
        size: float = 1.0,
        vector: list[float] | None = None,
        status: str = "appeared",
        timestamp: float = 0.0,
        visit_id: str = "visit_01",
    ) -> ChangeSnapshot:
        return ChangeSnapshot(
            status=status,  # type: ignore[arg-type]
            description=f"{status} object",
            embedding=Embedding.from_raw(vector or [1.0, 0.0, 0.0]),
            box=Bbox3D.from_center_size(center, (size, size, size)),
            timestamp=timestamp,
            visit_id=visit_id,
            source_frame=f"{visit_id}/0",
        )

    return _make


@pytest.fixture
def config() -> EngineConfig:
    return EngineConfig()


@pytest.fixture(scope="session")
def office_script() -> SceneScript:
    return build_script("office", 7, visits=3)


@pytest.fixture(scope="session")
def office_location(tmp_path_factory, office_script):
    """A rendered three-visit office location on disk."""
    out = tmp_path_factory.mktemp("bench")
    return write_location(office_script, out)
