"""
Tests for the pipeline module.
"""

import numpy as np
import pytest

from chronoscene.config import EngineConfig
from chronoscene.detectors import DetectedChange
from chronoscene.errors import DetectorError
from chronoscene.esm import EpisodicSceneMemory
from chronoscene.geometry import Bbox2D, VisibilityMap
from chronoscene.otm import ObjectTemporalMemory
from chronoscene.pipeline import (
    TIMING_KEYS,
    BoxSegmenter,
    ChangePipeline,
    DepthLayerSegmenter,
    change_coverage,
    lift_to_3d,
    mask_coverage,
    process_frame,
)

RAMP = np.tile(np.linspace(2.0, 4.0, 40, dtype=np.float32), (30, 1))


def _change(change_type="appear", confidence="high", box=(100, 200, 600, 700), name="printer"):
    fields = {
        "object_name": name,
        "change_type": change_type,
        "change_description": "front changed from black to white" if change_type == "change" else f"{name} {change_type}",
        "confidence": confidence,
        "bbox_t0": list(box) if change_type != "appear" else [],
        "bbox_t1": list(box) if change_type != "disappear" else [],
    }
    return DetectedChange(**fields)


class StubDetector:
    def __init__(self, changes=(), error=None):
        self.changes = list(changes)
        self.error = error
        self.calls = 0

    def detect(self, reference, current):
        self.calls += 1
        if self.error is not None:
            raise self.error
        return list(self.changes)


def _scene(make_frame, current_depth=RAMP):
    esm = EpisodicSceneMemory("lab")
    esm.open_visit("v0", 0, 0.0)
    for i in range(4):
        esm.ingest_frame(make_frame(RAMP, timestamp=float(i), frame_index=i), float(i))
    esm.close_visit("v0")
    esm.open_visit("v1", 1, 1000.0)
    record = esm.ingest_frame(make_frame(current_depth), 1000.0)
    return esm, ObjectTemporalMemory("lab"), record


def _visibility(mask, reference_mask=None):
    reference_mask = mask if reference_mask is None else reference_mask
    return VisibilityMap(mask, reference_mask, 1.0, 1.0, 1.0)


def test_mask_coverage_sides():
    mask = np.zeros((10, 10), dtype=bool)
    mask[:, :5] = True
    visibility = _visibility(mask, ~mask)
    left = Bbox2D(0, 0, 1000, 500)
    assert mask_coverage(left, visibility) == 1.0
    assert mask_coverage(left, visibility, "reference") == 0.0
    assert mask_coverage(Bbox2D(0, 0, 1000, 1000), visibility) == 0.5


def test_change_coverage_by_type():
    mask = np.zeros((10, 10), dtype=bool)
    mask[:, :5] = True
    visibility = _visibility(mask, ~mask)
    box = (0, 0, 1000, 500)
    assert change_coverage(_change("appear", box=box), visibility) == 1.0
    assert change_coverage(_change("disappear", box=box), visibility) == 0.0
    assert change_coverage(_change("change", box=box), visibility) == 0.0


def test_segmenters(make_frame):
    depth = np.full((30, 40), 3.0, dtype=np.float32)
    depth[10:20, 15:25] = 1.0
    depth[0, 0] = 0.0
    frame = make_frame(depth)
    box = Bbox2D(0, 0, 1000, 1000)
    assert BoxSegmenter().segment(frame, box).sum() == 30 * 40 - 1
    layer = DepthLayerSegmenter().segment(frame, Bbox2D(300, 300, 700, 700))
    assert layer.sum() == 100
    assert np.all(depth[layer] == 1.0)


def test_lift_to_3d_bounds_segment(make_frame):
    box = lift_to_3d(Bbox2D(0, 0, 1000, 1000), make_frame(3.0))
    assert box is not None
    assert box.center[2] == pytest.approx(3.0, abs=0.01)
    assert lift_to_3d(Bbox2D(0, 0, 1000, 1000), make_frame(0.0)) is None


def test_appear_event_recorded(make_frame):
    esm, otm, record = _scene(make_frame)
    result = ChangePipeline(esm, otm, StubDetector([_change()])).process_frame(record)
    assert set(result.timings) == set(TIMING_KEYS)
    assert result.reference is not None
    [event] = result.events
    assert (event.label, event.status, event.object_id) == ("printer", "appeared", 1)
    assert event.visit_id == "v1" and event.timestamp == 1000.0
    assert 1 <= event.clock_direction <= 12
    assert event.coverage == 1.0
    assert len(otm) == 1
    assert all(esm.get(i).announced for i in result.reference.cluster.members)


@pytest.mark.parametrize(
    "change",
    [
        _change(confidence="low"),
        _change(box=(100, 100, 110, 130)),
    ],
    ids=["low-confidence", "small-box"],
)
def test_filters_drop_changes(make_frame, change):
    esm, otm, record = _scene(make_frame)
    assert process_frame(record, esm, otm, StubDetector([change])) == []
    assert len(otm) == 0


def test_duplicate_change_in_visit_is_skipped(make_frame):
    esm, otm, record = _scene(make_frame)
    events = process_frame(record, esm, otm, StubDetector([_change(), _change()]))
    assert len(events) == 1
    assert len(otm.get(1).snapshots) == 1


def test_disappear_lifts_from_reference(make_frame):
    esm, otm, record = _scene(make_frame, current_depth=np.full((30, 40), 1.0, dtype=np.float32))
    config = EngineConfig(overlap_min=0.0, x_mask=0.0)
    [event] = process_frame(record, esm, otm, StubDetector([_change("disappear")]), config)
    assert event.status == "removed"
    assert event.center[2] > 2.0


def test_detector_failure_keeps_cluster_open(make_frame):
    esm, otm, record = _scene(make_frame)
    detector = StubDetector(error=DetectorError("timeout"))
    result = ChangePipeline(esm, otm, detector).process_frame(record)
    assert result.events == []
    assert not any(esm.get(i).announced for i in result.reference.cluster.members)


def test_empty_detection_announces_cluster(make_frame):
    esm, otm, record = _scene(make_frame)
    pipeline = ChangePipeline(esm, otm, StubDetector())
    first = pipeline.process_frame(record)
    assert first.reference is not None
    second = pipeline.process_frame(record)
    assert second.reference is None
    assert pipeline.detector.calls == 1
