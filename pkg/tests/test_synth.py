"""
Tests for the synth module.
"""

from collections import Counter

import numpy as np
import pytest

from chronoscene import synth
from chronoscene.errors import UsageError
from chronoscene.frame_io import CHANGE_TYPES, GroundTruthChange, list_visit_dirs, read_jsonl, read_visit
from chronoscene.synth import (
    FRAMES_PER_VISIT,
    MAX_RANGE_M,
    MIN_CHANGES_PER_LOCATION,
    MIN_CHANGES_PER_TYPE,
    SCENE_KINDS,
    VISIT_SPACING_S,
    SceneScript,
    build_script,
    ground_truth,
    load_script,
    render_frame,
    validate_script,
    walk_plan,
    write_location,
)


def test_build_script_is_deterministic():
    assert build_script("grocery", 3, visits=4).to_json() == build_script("grocery", 3, visits=4).to_json()
    assert build_script("grocery", 3, visits=4).to_json() != build_script("grocery", 4, visits=4).to_json()


def test_full_script_cycles_every_change_type():
    script = build_script("office", 11)
    assert {c.change_type for c in script.changes} == set(CHANGE_TYPES)
    for visit_index in range(1, script.visits):
        assert len(script.changes_at(visit_index)) <= 3
    assert script.changes_at(0) == []


@pytest.mark.parametrize("seed", [0, 3, 7, 42])
@pytest.mark.parametrize("kind", SCENE_KINDS)
def test_full_script_meets_change_floor(kind, seed):
    script = build_script(kind, seed)
    counts = Counter(c.change_type for c in script.changes)
    assert len(script.changes) >= MIN_CHANGES_PER_LOCATION
    assert all(counts[t] >= MIN_CHANGES_PER_TYPE for t in CHANGE_TYPES), counts


def test_build_script_refuses_short_schedule():
    with pytest.raises(UsageError, match="need 20"):
        build_script("office", 1, changes_per_visit=(0, 0))
    assert build_script("office", 1, visits=4, changes_per_visit=(0, 0)).changes == []


def test_state_follows_changes(office_script):
    assert office_script.state_at(0) == {o.key: o for o in office_script.objects}
    for change in office_script.changes_at(1):
        after = office_script.state_at(1)
        if change.change_type == "removed":
            assert change.object_key not in after
        elif change.change_type == "appeared":
            assert change.object_key in after
        elif change.change_type == "replaced":
            assert change.object_key not in after and change.new_key in after
    with pytest.raises(UsageError):
        office_script.state_at(office_script.visits)


def test_script_json_round_trip(office_script):
    again = SceneScript.from_json(office_script.to_json())
    assert again.state_at(2) == office_script.state_at(2)


def test_visits_are_a_day_apart(office_script):
    assert office_script.start_time(1) - office_script.start_time(0) == VISIT_SPACING_S


def test_walk_plan_out_and_back():
    plan = walk_plan(FRAMES_PER_VISIT)
    assert len(plan) == FRAMES_PER_VISIT
    assert plan[0][1] == 90.0 and plan[-1][1] == 270.0
    assert plan[0][0] == pytest.approx(plan[-1][0])


def test_render_frame_is_deterministic(office_script):
    frame, rendered = render_frame(office_script, 1, 5)
    again, _ = render_frame(office_script, 1, 5)
    assert np.array_equal(frame.depth, again.depth)
    assert (frame.width, frame.height) == (160, 120)
    assert frame.timestamp == 5.0
    assert np.all((frame.depth >= 0) & (frame.depth <= MAX_RANGE_M))
    assert rendered.ids.shape == frame.depth.shape


def test_ground_truth_matches_changes(office_script):
    for visit_index in range(office_script.visits):
        rows = ground_truth(office_script, visit_index)
        changes = office_script.changes_at(visit_index)
        assert [r.change_type for r in rows] == [c.change_type for c in changes]
        for row in rows:
            assert 0 <= row.first_visible_frame < office_script.frames_per_visit
            assert (row.previous_label is not None) == (row.change_type == "replaced")
            assert (row.previous_center is not None) == (row.change_type == "relocated")


def test_scripted_changes_are_observable(office_script):
    assert validate_script(office_script) == []


def test_write_location_layout(office_location, office_script):
    assert [p.name for p in list_visit_dirs(office_location)] == ["visit_00", "visit_01", "visit_02"]
    assert load_script(office_location).to_json() == office_script.to_json()
    rows = read_jsonl(office_location / "gt.jsonl", GroundTruthChange)
    assert len(rows) == len(office_script.changes)
    manifest, frames = read_visit(office_location / "visit_01")
    assert manifest.visit_index == 1
    assert manifest.start_time == office_script.start_time(1)
    assert len(frames) == office_script.frames_per_visit
    assert frames[3].timestamp == 3.0


def test_write_location_rejects_unobservable_change(office_script, tmp_path, monkeypatch):
    assert office_script.changes
    monkeypatch.setattr(synth, "MIN_VISIBLE_FRAMES", FRAMES_PER_VISIT + 1)
    with pytest.raises(UsageError, match="unobservable"):
        write_location(office_script, tmp_path)
    assert not (tmp_path / office_script.location_id).exists()

    location_dir = write_location(office_script, tmp_path, validate=False)
    assert (location_dir / "gt.jsonl").exists()


def test_load_script_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_script(tmp_path)
