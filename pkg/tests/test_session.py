"""
Tests for the session module: full replays of the synthetic office location.
"""

import json

import pytest

from chronoscene.detectors import HttpChangeDetector
from chronoscene.errors import UsageError
from chronoscene.evalbench import evaluate_files
from chronoscene.frame_io import read_visit
from chronoscene.live_describe import DepthStatsDescriber
from chronoscene.synth import standard_benchmark, write_location
from chronoscene.session import (
    EVENTS_NAME,
    NARRATIONS_NAME,
    PREDICTIONS_NAME,
    LocationSession,
    make_describer,
    make_detector,
    replay_location,
)


pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def replayed(office_location, tmp_path_factory):
    root = tmp_path_factory.mktemp("store")
    session, summaries = replay_location(office_location, root=root, live="script")
    return root, session, summaries


def test_replay_summaries(replayed, office_script):
    _, session, summaries = replayed
    assert [s.visit_id for s in summaries] == ["visit_00", "visit_01", "visit_02"]
    assert summaries[0].events == 0
    assert sum(s.events for s in summaries) > 0
    assert all(s.frames == office_script.frames_per_visit for s in summaries)
    assert len(session.timings) == sum(s.records for s in summaries)


def test_replay_outputs(replayed, office_location):
    root, session, summaries = replayed
    out = root / "office"
    events = out.joinpath(EVENTS_NAME).read_text().splitlines()
    assert len(events) == sum(s.events for s in summaries)
    narrations = [json.loads(line) for line in out.joinpath(NARRATIONS_NAME).read_text().splitlines()]
    assert {"change", "live"} <= {n["kind"] for n in narrations}
    assert all(n["delivered_at"] >= n["created_at"] for n in narrations)
    report = evaluate_files(out / PREDICTIONS_NAME, office_location / "gt.jsonl")
    assert report.precision >= 0.95
    assert report.recall >= 0.95


def test_standard_benchmark_location_meets_oracle_bar(tmp_path):
    script = standard_benchmark(7)[0]
    location_dir = write_location(script, tmp_path / "bench")
    replay_location(location_dir, out_dir=tmp_path / "out")
    report = evaluate_files(tmp_path / "out" / PREDICTIONS_NAME, location_dir / "gt.jsonl")
    assert report.tp + report.fn >= 20
    assert report.precision >= 0.95
    assert report.recall >= 0.95


def test_replay_skips_ingested_visits(replayed, office_location):
    root, _, _ = replayed
    session, summaries = replay_location(office_location, root=root)
    assert summaries == []
    assert len(session.esm) > 0
    assert len(session.otm) > 0


def test_replay_is_deterministic(office_location, tmp_path):
    _, first = replay_location(office_location, out_dir=tmp_path / "a")
    _, second = replay_location(office_location, out_dir=tmp_path / "b")
    assert first == second
    assert (tmp_path / "a" / PREDICTIONS_NAME).read_text() == (tmp_path / "b" / PREDICTIONS_NAME).read_text()


def test_replay_rejects_other_location(office_location, office_script):
    manifest, frames = read_visit(office_location / "visit_00")
    session = LocationSession("lab", make_detector("oracle", office_location), sinks=[])
    with pytest.raises(UsageError):
        session.replay_visit(manifest, frames)


def test_replay_needs_visits(tmp_path):
    with pytest.raises(UsageError):
        replay_location(tmp_path)


def test_make_detector_and_describer(tmp_path):
    assert isinstance(make_detector("extern:http://localhost:9000"), HttpChangeDetector)
    for spec in ("bogus", "extern:", "oracle"):
        with pytest.raises(UsageError):
            make_detector(spec)
    assert isinstance(make_describer("depth"), DepthStatsDescriber)
    assert isinstance(make_describer("script", tmp_path), DepthStatsDescriber)
    with pytest.raises(UsageError):
        make_describer("poetry")
