"""
Tests for the narration module.
"""

import json
from unittest.mock import MagicMock

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chronoscene.config import EngineConfig
from chronoscene.embeddings import Embedding, TrigramEmbedder, cosine
from chronoscene.errors import ProviderError
from chronoscene.geometry import Bbox3D, Pose
from chronoscene.narration import (
    PRIORITY,
    ChangeAggregator,
    DeliveryChannel,
    JsonlSink,
    LiveHistory,
    MemorySink,
    NarrationItem,
    NarrationQueue,
    NarrationScheduler,
    aggregate,
    elapsed_phrase,
    event_text,
    filter_live,
    prior_state,
    schedule,
)
from chronoscene.otm import ChangeSnapshot, ObjectTemporalMemory
from chronoscene.pipeline import ChangeEvent

DAY = 86400.0


def _event(
    status="appeared",
    center=(0.0, 0.0, 0.0),
    *,
    timestamp=DAY,
    label="printer",
    vector=(1.0, 0.0, 0.0),
    object_id=1,
    visit_id="visit_01",
    description=None,
):
    return ChangeEvent(
        location_id="office",
        visit_id=visit_id,
        visit_index=1,
        timestamp=timestamp,
        reference_timestamp=timestamp - DAY,
        label=label,
        status=status,
        description=description or f"{label} {status}",
        confidence="high",
        coverage=1.0,
        box=Bbox3D.from_center_size(center, (0.5, 0.5, 0.5)).to_list(),
        clock_direction=3,
        distance_feet=6.4,
        observer_pose=Pose.identity().to_list(),
        reference_frame="visit_00/4",
        current_frame="visit_01/4",
        frame_index=4,
        object_id=object_id,
        embedding=list(vector),
    )


# ============================================================================
# Live filter
# ============================================================================


def test_filter_live_skips_similar_frame_before_describing():
    history = LiveHistory()
    embedder = TrigramEmbedder()
    frame = Embedding.from_raw([1.0, 0.0])
    options = {"tau_visual": 0.85, "tau_text": 0.8, "text_embedder": embedder}
    assert filter_live(frame, lambda: "A printer ahead.", history, **options) == "A printer ahead."
    describe = MagicMock(return_value="Something else.")
    assert filter_live(frame, describe, history, **options) is None
    describe.assert_not_called()


def test_filter_live_drops_repeated_text_without_advancing():
    history = LiveHistory()
    options = {"tau_visual": 0.85, "tau_text": 0.8, "text_embedder": TrigramEmbedder()}
    first = Embedding.from_raw([1.0, 0.0])
    filter_live(first, lambda: "A printer ahead.", history, **options)
    assert filter_live(Embedding.from_raw([0.0, 1.0]), lambda: "A printer ahead.", history, **options) is None
    assert history.last_frame is first
    assert len(history.texts) == 1


def test_filter_live_threshold_is_strict():
    first, second = Embedding.from_raw([1.0, 0.0]), Embedding.from_raw([1.0, 1.0])
    similarity = cosine(first, second)
    embedder = TrigramEmbedder()

    history = LiveHistory(last_frame=first)
    text = filter_live(second, lambda: "Door on the left.", history, tau_visual=similarity, tau_text=0.8, text_embedder=embedder)
    assert text == "Door on the left."

    history = LiveHistory(last_frame=first)
    text = filter_live(second, lambda: "Door on the left.", history, tau_visual=similarity - 1e-9, tau_text=0.8, text_embedder=embedder)
    assert text is None


def test_filter_live_provider_failure():
    def broken():
        raise ProviderError("offline")

    history = LiveHistory()
    result = filter_live(Embedding.from_raw([1.0]), broken, history, tau_visual=0.85, tau_text=0.8, text_embedder=TrigramEmbedder())
    assert result is None
    assert history.last_frame is None


# ============================================================================
# Scheduling
# ============================================================================


def _item(kind, created_at, text="something to say"):
    return NarrationItem(kind=kind, text=text, created_at=created_at)


def test_schedule_priority_and_staleness():
    queue = NarrationQueue()
    queue.push(_item("live", 0.0))
    queue.push(_item("change", 2.0))
    queue.push(_item("change", 1.0))
    queue.push(_item("qa", 3.0))
    assert schedule(queue, 3.0).kind == "qa"
    assert schedule(queue, 3.0).created_at == 1.0
    assert schedule(queue, 3.0).created_at == 2.0
    assert schedule(queue, 6.0).kind == "live"

    queue.push(_item("live", 0.0))
    assert schedule(queue, 6.5) is None
    assert queue.discarded[-1].created_at == 0.0


def test_live_queue_evicts_oldest():
    queue = NarrationQueue(live_capacity=3)
    for t in range(4):
        queue.push(_item("live", float(t)))
    assert [i.created_at for i in queue.pending("live")] == [1.0, 2.0, 3.0]
    assert queue.discarded[0].created_at == 0.0


scheduled_items = st.lists(
    st.tuples(st.sampled_from(sorted(PRIORITY)), st.integers(0, 20).map(float)), max_size=12
)


@settings(max_examples=300, deadline=None)
@given(items=scheduled_items, now=st.integers(0, 30).map(float))
def test_schedule_matches_rule_oracle(items, now):
    queue = NarrationQueue(live_capacity=100)
    pushed = [queue.push(_item(kind, created)) for kind, created in items]

    fresh = [i for i in pushed if not (i.kind == "live" and now - i.created_at > 6.0)]
    ordered = sorted(fresh, key=lambda i: (PRIORITY[i.kind], i.created_at, i.sequence))
    expected = ordered[0] if ordered else None

    got = schedule(queue, now, 6.0)
    assert (got and got.sequence) == (expected and expected.sequence)
    remaining = {i.sequence for i in fresh} - ({expected.sequence} if expected else set())
    assert {i.sequence for i in queue.pending()} == remaining


def test_channel_duration_from_word_count():
    channel = DeliveryChannel(words_per_second=2.5)
    assert channel.duration("one two three four five") == 2.0
    assert channel.occupy("one two three four five", 10.0) == 12.0
    assert not channel.is_free(11.9)
    assert channel.is_free(12.0)


def test_scheduler_waits_for_channel(tmp_path):
    memory = MemorySink()
    path = tmp_path / "out" / "narrations.jsonl"
    scheduler = NarrationScheduler([memory, JsonlSink(path)])
    scheduler.submit(_item("change", 0.0, "one two three four five"))
    assert scheduler.tick(0.0).kind == "change"
    scheduler.submit(_item("qa", 0.5, "yes"))
    assert scheduler.tick(1.0) is None
    delivered = scheduler.tick(2.0)
    assert delivered.kind == "qa" and delivered.delivered_at == 2.0
    lines = [json.loads(line) for line in path.read_text().splitlines()]
    assert [line["kind"] for line in lines] == ["change", "qa"]
    assert [d.text for d in memory.delivered] == ["one two three four five", "yes"]


def test_drain_advances_clock():
    scheduler = NarrationScheduler(staleness_s=100.0)
    for t in range(3):
        scheduler.submit(_item("change", float(t), "four words right here"))
    delivered = scheduler.drain(0.0)
    assert [d.delivered_at for d in delivered] == [0.0, 1.6, 3.2]
    assert len(scheduler.queue) == 0


# ============================================================================
# Change text and aggregation
# ============================================================================


@pytest.mark.parametrize(
    ("seconds", "phrase"),
    [
        (0.0, "1 second"),
        (45.0, "45 seconds"),
        (59.9, "59 seconds"),
        (90.0, "1 minute"),
        (3419.0, "56 minutes"),
        (3600.0, "1 hour"),
        (DAY - 1.0, "23 hours"),
        (DAY, "1 day"),
        (2 * DAY, "2 days"),
    ],
)
def test_elapsed_phrase(seconds, phrase):
    assert elapsed_phrase(seconds) == phrase


def test_event_text():
    assert event_text(_event()) == "Printer appeared at your 3 o'clock, 6 feet away; it was not there 1 day ago."
    assert event_text(_event("removed")).startswith("Printer is gone from your 3 o'clock")
    changed = _event("content_changed", description="front changed from black to white")
    assert event_text(changed).endswith("it was black 1 day ago.")
    assert prior_state("nothing here") is None


def test_replacement_merges_overlapping_pair():
    removed = _event("removed", label="monitor", object_id=1)
    appeared = _event("appeared", (0.05, 0.0, 0.0), label="printer", vector=(0.0, 1.0, 0.0), object_id=2)
    [item] = aggregate([removed, appeared])
    assert item.source == "replaced"
    assert "replaced the monitor" in item.text
    [prediction] = item.predictions
    assert prediction.change_type == "replaced"
    assert prediction.previous_label == "monitor"


def test_relocation_merges_similar_distant_pair():
    removed = _event("removed", (0.0, 0.0, 0.0), object_id=1)
    appeared = _event("appeared", (3.0, 0.0, 0.0), timestamp=DAY + 20, object_id=2)
    [item] = aggregate([removed, appeared])
    assert item.source == "relocated"
    assert item.text.startswith("Printer moved to your 3 o'clock")
    assert item.predictions[0].previous_center == pytest.approx(removed.center)


@pytest.mark.parametrize(
    "appeared",
    [
        _event("appeared", (3.0, 0.0, 0.0), label="desk lamp", object_id=2),
        _event("appeared", (3.0, 0.0, 0.0), timestamp=DAY + 61, object_id=2),
        _event("appeared", (3.0, 0.0, 0.0), vector=(0.0, 1.0, 0.0), object_id=2),
        _event("appeared", (3.0, 0.0, 0.0), visit_id="visit_02", object_id=2),
    ],
    ids=["label", "window", "embedding", "visit"],
)
def test_relocation_rejected(appeared):
    removed = _event("removed", object_id=1)
    items = aggregate([removed, appeared])
    assert [i.source for i in items] == ["event", "event"]


def test_every_event_narrated_once():
    events = [
        _event("removed", label="monitor", object_id=1),
        _event("appeared", (0.05, 0.0, 0.0), object_id=2),
        _event("removed", (5.0, 0.0, 0.0), label="speaker", object_id=3),
        _event("content_changed", (8.0, 0.0, 0.0), label="fan", object_id=4, description="from red to blue"),
    ]
    items = aggregate(events)
    narrated = [e.object_id for item in items for e in item.events]
    assert sorted(narrated) == [1, 2, 3, 4]
    assert aggregate([]) == []


def test_merge_is_recorded_in_object_memory():
    otm = ObjectTemporalMemory("office")
    appeared = _event("appeared", (0.05, 0.0, 0.0), object_id=1)
    otm.record(
        ChangeSnapshot(
            "appeared", "printer appeared", appeared.embedding_vector, appeared.bbox, appeared.timestamp, "visit_01", "visit_01/4"
        ),
        None,
        label="printer",
    )
    removed = _event("removed", label="monitor", object_id=2)
    aggregate([removed, appeared], otm=otm)
    assert [s.status for s in otm.get(1).snapshots] == ["appeared", "replaced"]


def test_aggregator_flushes_on_count_and_age():
    aggregator = ChangeAggregator(config=EngineConfig(buffer_n=3))
    changed = [_event("content_changed", (5.0 * i, 0, 0), object_id=i, description="from red to blue") for i in (1, 2, 3)]
    assert aggregator.add(changed[:2], DAY) == []
    assert len(aggregator.add(changed[2:], DAY)) == 3
    assert aggregator.pending == []

    aggregator.add([_event(object_id=4)], DAY)
    assert aggregator.poll(DAY + 59) == []
    assert len(aggregator.poll(DAY + 60)) == 1
    aggregator.add([_event(object_id=5)], DAY + 100)
    assert len(aggregator.flush(DAY + 100)) == 1


def test_aggregator_pairs_across_a_count_release():
    aggregator = ChangeAggregator(config=EngineConfig(buffer_n=3))
    removed = _event("removed", object_id=1)
    changed = [
        _event("content_changed", (5.0 * i, 0, 0), object_id=i, description="from red to blue") for i in (2, 3)
    ]
    released = aggregator.add([removed, *changed], DAY)
    assert [i.source for i in released] == ["event", "event"]
    assert aggregator.pending == [removed]

    appeared = _event("appeared", (3.0, 0.0, 0.0), timestamp=DAY + 20, object_id=4)
    aggregator.add([appeared], DAY + 20)
    [item] = aggregator.flush(DAY + 20)
    assert item.source == "relocated"
    assert [e.object_id for e in item.events] == [1, 4]


def test_aggregator_releases_unpaired_after_window():
    aggregator = ChangeAggregator(config=EngineConfig(buffer_n=3))
    removals = [_event("removed", (5.0 * i, 0, 0), label=f"box {i}", object_id=i) for i in (1, 2, 3)]
    assert aggregator.add(removals, DAY) == []
    assert len(aggregator.pending) == 3
    assert aggregator.poll(DAY + 59) == []
    released = aggregator.poll(DAY + 60)
    assert sorted(e.object_id for item in released for e in item.events) == [1, 2, 3]
    assert aggregator.pending == []
