"""
Tests for the qa module.
"""

import pytest

from chronoscene.errors import UsageError
from chronoscene.esm import EpisodicSceneMemory
from chronoscene.narration import NarrationScheduler
from chronoscene.otm import ObjectTemporalMemory
from chronoscene.qa import USAGE, QAService, parse_command, parse_duration


@pytest.mark.parametrize(
    ("text", "seconds"),
    [("90", 90.0), ("90s", 90.0), ("5m", 300.0), ("1.5m", 90.0), ("2h", 7200.0), ("1d", 86400.0)],
)
def test_parse_duration(text, seconds):
    assert parse_duration(text) == seconds


@pytest.mark.parametrize("text", ["abc", "-5", "5w", ""])
def test_parse_duration_rejects(text):
    with pytest.raises(UsageError):
        parse_duration(text)


def test_parse_command():
    assert parse_command("scene").name == "scene"
    assert parse_command("QUIT").name == "quit"
    command = parse_command("changes --since 5m --limit 2")
    assert (command.since, command.limit) == (300.0, 2)
    assert parse_command("where desk lamp").label == "desk lamp"
    assert parse_command("where 'desk lamp'").label == "desk lamp"


@pytest.mark.parametrize(
    "line",
    ["", "scene now", "where", "changes --limit 0", "changes --since", "changes --after 5", "dance", "where 'lamp"],
)
def test_parse_command_rejects(line):
    with pytest.raises(UsageError) as excinfo:
        parse_command(line)
    assert USAGE in str(excinfo.value) or "--limit" in str(excinfo.value)


@pytest.fixture
def service(make_frame, make_snapshot):
    esm = EpisodicSceneMemory("office")
    esm.open_visit("v0", 0, 0.0)
    for i in range(4):
        esm.ingest_frame(make_frame(timestamp=float(i), frame_index=i), float(i))
    esm.close_visit("v0")

    otm = ObjectTemporalMemory("office")
    otm.record(make_snapshot((0.0, 0.0, 3.0), timestamp=1.0), None, label="printer")
    otm.record(make_snapshot((5.0, 0.0, 5.0), vector=[0.0, 1.0, 0.0], timestamp=2.0), None, label="desk lamp")
    otm.record(make_snapshot((0.0, 0.0, 3.0), status="removed", timestamp=3.0), 1)
    return QAService(esm, otm)


def test_scene_answer(service):
    item = service.answer("scene")
    assert item.kind == "qa"
    assert item.text == "Latest view is frame 3 of v0; recent frames: v0/3, v0/2, v0/1."
    assert item.created_at == 3.0


def test_changes_answer(service):
    assert service.answer("changes --limit 1").text == "Printer was removed at your 12 o'clock, 10 feet away."
    assert service.answer("changes --since 1").text.count(" at your ") == 2
    assert service.answer("changes").text.count(" at your ") == 3


def test_where_answer(service):
    item = service.answer("where printer")
    assert item.text == "Printer is at your 12 o'clock, 10 feet away (was removed)."
    assert (item.clock_direction, round(item.distance_feet)) == (12, 10)
    missing = service.answer("where ghost")
    assert missing.text.startswith("No tracked object matches 'ghost'. Latest view")
    assert missing.clock_direction is None


def test_quit_has_no_answer(service):
    with pytest.raises(UsageError):
        service.answer("quit")


def test_answers_go_to_scheduler(service):
    service.scheduler = NarrationScheduler()
    service.answer("scene", now=10.0)
    [pending] = service.scheduler.queue.pending("qa")
    assert pending.created_at == 10.0


def test_empty_memories():
    service = QAService(EpisodicSceneMemory("empty"), ObjectTemporalMemory("empty"))
    assert service.answer("scene").text == "No frames yet."
    assert service.answer("changes").text == "No changes recorded."
    assert service.answer("where printer").text == "No tracked object matches 'printer'. No frames yet."
    assert service.tool_esm_retrieval() == []
    with pytest.raises(UsageError):
        service.tool_spatial("printer")
