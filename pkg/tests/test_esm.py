"""
Tests for the esm module.
"""

import numpy as np
import pytest

from chronoscene.config import EngineConfig
from chronoscene.errors import FormatError, UsageError
from chronoscene.esm import ContextWindow, EpisodicSceneMemory, read_archive, stride_for
from chronoscene.geometry import Pose


def _walk(esm, make_frame, visit_id, visit_index, frames=4, start=0.0):
    esm.open_visit(visit_id, visit_index, start)
    for i in range(frames):
        pose = Pose.from_yaw_pitch((0.2 * i, 0.0, 1.4), 0.0)
        esm.ingest_frame(make_frame(2.0, pose=pose, timestamp=float(i), frame_index=i), start + i)
    esm.close_visit(visit_id)


def test_context_window_validation():
    with pytest.raises(UsageError):
        ContextWindow("last_k_visits", k=0)
    with pytest.raises(UsageError):
        ContextWindow("duration", span=None)
    assert ContextWindow.from_config(EngineConfig()).k == 1


def test_stride_for_limits():
    assert stride_for(160, 120, 256, 192) == 1
    assert stride_for(640, 480, 256, 192) == 3


def test_rate_limit_keeps_one_frame_per_bucket(make_frame):
    esm = EpisodicSceneMemory("lab")
    esm.open_visit("v0", 0, 0.0)
    assert esm.ingest_frame(make_frame(timestamp=0.0), 0.0) is not None
    assert esm.ingest_frame(make_frame(timestamp=0.4, frame_index=1), 0.4) is None
    assert esm.ingest_frame(make_frame(timestamp=1.0, frame_index=2), 1.0) is not None
    assert len(esm) == 2


def test_ingest_requires_open_visit(make_frame):
    esm = EpisodicSceneMemory("lab")
    with pytest.raises(UsageError):
        esm.ingest_frame(make_frame(), 0.0)
    esm.open_visit("v0", 0, 0.0)
    with pytest.raises(UsageError):
        esm.open_visit("v1", 1, 1.0)


def test_open_visit_is_not_queryable(make_frame):
    esm = EpisodicSceneMemory("lab")
    esm.open_visit("v0", 0, 0.0)
    esm.ingest_frame(make_frame(), 0.0)
    assert esm.queryable() == []
    assert esm.query_by_pose(Pose.identity(), 1.5, 40) == []
    esm.close_visit("v0")
    assert len(esm.query_by_pose(Pose.identity(), 1.5, 40)) == 1


def test_query_by_pose_thresholds(make_frame):
    esm = EpisodicSceneMemory("lab")
    _walk(esm, make_frame, "v0", 0, frames=10)
    near = esm.query_by_pose(Pose.from_yaw_pitch((0.0, 0.0, 1.4), 0.0), 0.5, 40)
    assert {r.frame.frame_index for r in near} == {0, 1, 2}
    turned = esm.query_by_pose(Pose.from_yaw_pitch((0.0, 0.0, 1.4), 90.0), 0.5, 40)
    assert turned == []


def test_single_visit_window_archives_older_visits(tmp_path, make_frame):
    esm = EpisodicSceneMemory("lab", root=tmp_path)
    _walk(esm, make_frame, "v0", 0)
    _walk(esm, make_frame, "v1", 1, start=100.0)
    statuses = {v.visit_id: v.status for v in esm.visits()}
    assert statuses == {"v0": "archived", "v1": "live"}
    assert len(esm) == 4
    archived = read_archive(esm.store_dir, "v0", "lab")
    assert [r.frame.frame_index for r in archived] == [0, 1, 2, 3]


def test_duration_window(make_frame):
    esm = EpisodicSceneMemory("lab", ContextWindow.duration(50.0))
    _walk(esm, make_frame, "v0", 0)
    _walk(esm, make_frame, "v1", 1, start=30.0)
    assert len(esm) == 8
    _walk(esm, make_frame, "v2", 2, start=100.0)
    assert {r.visit_id for r in esm.queryable()} == {"v2"}


def test_recent_frames_newest_first(make_frame):
    esm = EpisodicSceneMemory("lab")
    _walk(esm, make_frame, "v0", 0)
    assert [r.timestamp for r in esm.recent_frames(2)] == [3.0, 2.0]


def test_save_load_round_trip(tmp_path, make_frame):
    esm = EpisodicSceneMemory("lab", root=tmp_path)
    _walk(esm, make_frame, "v0", 0)
    esm.mark_announced([1])
    esm.save()
    again = EpisodicSceneMemory.load(tmp_path, "lab")
    assert len(again) == 4
    assert again.get(1).announced
    assert not again.get(2).announced
    assert np.array_equal(again.get(2).embedding.vector, esm.get(2).embedding.vector)
    assert np.array_equal(again.get(3).frame.depth, esm.get(3).frame.depth)


def test_load_missing_store_is_empty(tmp_path):
    assert len(EpisodicSceneMemory.load(tmp_path, "nowhere")) == 0


@pytest.mark.parametrize("index", ["{not json", "{\"visits\": []}", "{\"next_id\": 1, \"visits\": [{}], \"records\": []}"])
def test_load_rejects_malformed_index(tmp_path, index):
    store = tmp_path / "lab" / "esm"
    store.mkdir(parents=True)
    (store / "index.json").write_text(index, encoding="utf-8")
    with pytest.raises(FormatError, match="index.json"):
        EpisodicSceneMemory.load(tmp_path, "lab")


def test_rename_delete_restore(tmp_path, make_frame):
    esm = EpisodicSceneMemory("lab", root=tmp_path)
    _walk(esm, make_frame, "v0", 0)
    _walk(esm, make_frame, "v1", 1, start=100.0)

    esm.rename_visit("v1", "morning")
    assert {r.visit_id for r in esm.queryable()} == {"morning"}
    with pytest.raises(UsageError):
        esm.rename_visit("v0", "morning")

    assert esm.restore_visit("v0") == 4
    assert len(esm) == 8

    esm.delete_visit("morning")
    assert {r.visit_id for r in esm.queryable()} == {"v0"}
    assert not (esm.store_dir / "live" / "morning").exists()
    esm.save()
    again = EpisodicSceneMemory.load(tmp_path, "lab")
    assert [v.visit_id for v in again.visits()] == ["v0"]
    assert len(again) == 4


def test_unknown_visit_operations():
    esm = EpisodicSceneMemory("lab")
    for op in (esm.delete_visit, esm.restore_visit):
        with pytest.raises(UsageError):
            op("ghost")
