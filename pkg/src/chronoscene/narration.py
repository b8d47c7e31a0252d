"""
Narration: live-description filtering, priority scheduling and change aggregation.

Producers submit ``NarrationItem``s; the scheduler delivers one at a time over a
speech channel in priority order qa > change > live, discarding live items that
went stale while the channel was busy. Detector events are buffered and merged
into replacement and relocation narrations before they are submitted.
"""

from __future__ import annotations

import logging
import math
import re
import sys
import threading
from collections import deque
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Protocol, TextIO

import typer
from pydantic import BaseModel, Field

from chronoscene.config import EngineConfig
from chronoscene.embeddings import Embedding, TextEmbedder, cosine
from chronoscene.errors import ProviderError
from chronoscene.frame_io import ChangePrediction, append_jsonl
from chronoscene.geometry import Pose, iou_3d, spatial_phrase
from chronoscene.otm import ChangeSnapshot, ObjectTemporalMemory
from chronoscene.pipeline import ChangeEvent
from chronoscene.utils import label_overlap

logger = logging.getLogger(__name__)

NarrationKind = Literal["qa", "change", "live"]
PRIORITY: dict[str, int] = {"qa": 0, "change": 1, "live": 2}

_UNITS = (("day", 86400.0), ("hour", 3600.0), ("minute", 60.0), ("second", 1.0))
_FROM_TO = re.compile(r"\bfrom\s+(?P<before>.+?)\s+to\s+(?P<after>.+)$", re.IGNORECASE)


class NarrationItem(BaseModel):
    kind: NarrationKind
    text: str = Field(min_length=1)
    created_at: float
    clock_direction: int | None = Field(None, ge=1, le=12)
    distance_feet: float | None = None
    source: str = ""
    sequence: int = 0
    events: list[ChangeEvent] = Field(default_factory=list, exclude=True)
    predictions: list[ChangePrediction] = Field(default_factory=list, exclude=True)

    @property
    def priority(self) -> int:
        return PRIORITY[self.kind]


class DeliveredNarration(BaseModel):
    """One line of narrations.jsonl."""

    kind: NarrationKind
    text: str
    created_at: float
    delivered_at: float
    clock_direction: int | None = None
    distance_feet: float | None = None


# ============================================================================
# Live-description filter
# ============================================================================


@dataclass
class LiveHistory:
    """Last described frame and the embeddings of recent delivered descriptions."""

    capacity: int = 3
    last_frame: Embedding | None = None
    texts: deque[Embedding] = field(init=False)

    def __post_init__(self) -> None:
        self.texts = deque(maxlen=self.capacity)


def filter_live(
    frame_embedding: Embedding,
    describe: Callable[[], str],
    history: LiveHistory,
    *,
    tau_visual: float,
    tau_text: float,
    text_embedder: TextEmbedder,
) -> str | None:
    """
    Two-stage redundancy filter for live descriptions.

    A frame too similar to the last described one is skipped before any text is
    generated; a generated text too similar to a recent delivery is dropped.
    Similarities strictly above the thresholds suppress. History only advances
    on delivery.
    """
    if history.last_frame is not None and cosine(frame_embedding, history.last_frame) > tau_visual:
        return None
    try:
        text = describe().strip()
    except ProviderError as exc:
        logger.warning("Live description skipped: %s", exc)
        return None
    if not text:
        return None
    text_embedding = text_embedder.embed_text(text)
    if any(cosine(text_embedding, prior) > tau_text for prior in history.texts):
        logger.debug("Suppressed repeated description: %s", text)
        return None
    history.last_frame = frame_embedding
    history.texts.append(text_embedding)
    return text


# ============================================================================
# Queue and scheduling
# ============================================================================


def _age_order(item: NarrationItem) -> tuple[float, int]:
    return (item.created_at, item.sequence)


class NarrationQueue:
    """Pending items per kind; live items are bounded and evicted oldest-first."""

    def __init__(self, live_capacity: int = 3) -> None:
        self.live_capacity = live_capacity
        self._pending: dict[str, list[NarrationItem]] = {kind: [] for kind in PRIORITY}
        self._lock = threading.Lock()
        self._sequence = 0
        self.discarded: list[NarrationItem] = []

    def push(self, item: NarrationItem) -> NarrationItem:
        with self._lock:
            self._sequence += 1
            item = item.model_copy(update={"sequence": self._sequence})
            bucket = self._pending[item.kind]
            bucket.append(item)
            bucket.sort(key=_age_order)
            if item.kind == "live" and len(bucket) > self.live_capacity:
                evicted = bucket.pop(0)
                self.discarded.append(evicted)
                logger.debug("Evicted live item: %s", evicted.text)
            return item

    def pending(self, kind: str | None = None) -> list[NarrationItem]:
        with self._lock:
            if kind is not None:
                return list(self._pending[kind])
            return [item for k in PRIORITY for item in self._pending[k]]

    def __len__(self) -> int:
        with self._lock:
            return sum(len(items) for items in self._pending.values())

    def take(self, now: float, staleness: float) -> NarrationItem | None:
        """Pop the next deliverable item, discarding live items older than ``staleness``."""
        with self._lock:
            live = self._pending["live"]
            stale = [item for item in live if now - item.created_at > staleness]
            if stale:
                self._pending["live"] = [item for item in live if now - item.created_at <= staleness]
                self.discarded.extend(stale)
                logger.debug("Discarded %d stale live items", len(stale))
            for kind in PRIORITY:
                if self._pending[kind]:
                    return self._pending[kind].pop(0)
            return None


def schedule(queue: NarrationQueue, now: float, staleness: float = 6.0) -> NarrationItem | None:
    """
    Next item to deliver at ``now``, removed from the queue.

    qa first, then the oldest change, then the oldest live item no older than
    ``staleness`` seconds. Live items older than that are discarded.
    """
    return queue.take(now, staleness)


@dataclass
class DeliveryChannel:
    """A single speech channel; an item keeps it busy for its spoken duration."""

    words_per_second: float = 2.5
    busy_until: float = -math.inf

    def is_free(self, now: float) -> bool:
        return now >= self.busy_until

    def duration(self, text: str) -> float:
        return len(text.split()) / self.words_per_second

    def occupy(self, text: str, now: float) -> float:
        self.busy_until = now + self.duration(text)
        return self.busy_until


class NarrationSink(Protocol):
    def deliver(self, narration: DeliveredNarration) -> None: ...


class StdoutSink:
    def __init__(self, stream: TextIO | None = None) -> None:
        self.stream = stream

    def deliver(self, narration: DeliveredNarration) -> None:
        typer.echo(f"[{narration.kind}] {narration.text}", file=self.stream or sys.stdout)


class JsonlSink:
    def __init__(self, path: Path) -> None:
        self.path = path
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def deliver(self, narration: DeliveredNarration) -> None:
        append_jsonl(self.path, narration)


class MemorySink:
    def __init__(self) -> None:
        self.delivered: list[DeliveredNarration] = []

    def deliver(self, narration: DeliveredNarration) -> None:
        self.delivered.append(narration)


class NarrationScheduler:
    """Owns the queue and the channel; ``tick`` is driven by the caller's clock."""

    def __init__(
        self,
        sinks: Sequence[NarrationSink] = (),
        *,
        staleness_s: float = 6.0,
        words_per_second: float = 2.5,
        live_capacity: int = 3,
    ) -> None:
        self.sinks = list(sinks)
        self.staleness_s = staleness_s
        self.queue = NarrationQueue(live_capacity)
        self.channel = DeliveryChannel(words_per_second)

    @classmethod
    def from_config(cls, config: EngineConfig, sinks: Sequence[NarrationSink] = ()) -> NarrationScheduler:
        return cls(
            sinks,
            staleness_s=config.staleness_s,
            words_per_second=config.words_per_second,
            live_capacity=config.buffer_n,
        )

    def submit(self, item: NarrationItem) -> NarrationItem:
        return self.queue.push(item)

    def tick(self, now: float) -> DeliveredNarration | None:
        """Deliver at most one item if the channel is free at ``now``."""
        if not self.channel.is_free(now):
            return None
        item = schedule(self.queue, now, self.staleness_s)
        if item is None:
            return None
        self.channel.occupy(item.text, now)
        delivered = DeliveredNarration(
            kind=item.kind,
            text=item.text,
            created_at=item.created_at,
            delivered_at=now,
            clock_direction=item.clock_direction,
            distance_feet=item.distance_feet,
        )
        for sink in self.sinks:
            sink.deliver(delivered)
        return delivered

    def drain(self, now: float) -> list[DeliveredNarration]:
        """Deliver everything still pending, advancing the clock past each busy period."""
        delivered: list[DeliveredNarration] = []
        clock = now
        while len(self.queue):
            clock = max(clock, self.channel.busy_until)
            item = self.tick(clock)
            if item is not None:
                delivered.append(item)
        return delivered


# ============================================================================
# Change narration
# ============================================================================


def elapsed_phrase(seconds: float) -> str:
    """Elapsed time in the largest whole unit, rounded down ("90 s" is "1 minute")."""
    # timestamp subtraction can land a hair under a whole unit
    seconds = max(0.0, seconds) + 1e-6
    for name, size in _UNITS:
        if seconds >= size or size == 1.0:
            count = max(1, math.floor(seconds / size))
            return f"{count} {name}" if count == 1 else f"{count} {name}s"
    raise AssertionError("unreachable")


def _label(text: str) -> str:
    return text[:1].upper() + text[1:]


def _where(clock: int, feet: float) -> str:
    return f"your {clock} o'clock, {round(feet)} feet away"


def prior_state(description: str) -> str | None:
    """The 'before' half of a 'from X to Y' description."""
    match = _FROM_TO.search(description)
    return match.group("before") if match else None


def event_text(event: ChangeEvent) -> str:
    where = _where(event.clock_direction, event.distance_feet)
    ago = elapsed_phrase(event.timestamp - event.reference_timestamp)
    label = _label(event.label)
    match event.status:
        case "appeared":
            return f"{label} appeared at {where}; it was not there {ago} ago."
        case "removed":
            return f"{label} is gone from {where}; it was there {ago} ago."
        case "content_changed":
            before = prior_state(event.description)
            if before is None:
                return f"{label} at {where} has changed; it looked different {ago} ago."
            return f"{label} at {where} has changed; it was {before} {ago} ago."
    return f"{label} at {where}: {event.description}."


def _prediction(event: ChangeEvent, **update: object) -> ChangePrediction:
    row = ChangePrediction(
        visit_index=event.visit_index,
        object_label=event.label,
        change_type=event.status,
        world_center=event.center,
        first_visible_frame=event.frame_index,
        detail=event.description,
        timestamp=event.timestamp,
        clock_direction=event.clock_direction,
        distance_feet=round(event.distance_feet, 1),
        observer_pose=event.observer_pose,
        object_id=event.object_id,
        source="event",
    )
    return row.model_copy(update=update)


def _event_item(event: ChangeEvent) -> NarrationItem:
    return NarrationItem(
        kind="change",
        text=event_text(event),
        created_at=event.timestamp,
        clock_direction=event.clock_direction,
        distance_feet=event.distance_feet,
        source="event",
        events=[event],
        predictions=[_prediction(event)],
    )


@dataclass(frozen=True)
class _Pair:
    removed: ChangeEvent
    appeared: ChangeEvent
    score: float


def _pairs(
    removed: Sequence[ChangeEvent],
    appeared: Sequence[ChangeEvent],
    score: Callable[[ChangeEvent, ChangeEvent], float | None],
) -> list[_Pair]:
    """Greedy one-to-one pairing by highest score, earlier timestamps first on ties."""
    candidates = []
    for r in removed:
        for a in appeared:
            if r.visit_id != a.visit_id:
                continue
            value = score(r, a)
            if value is not None:
                candidates.append(_Pair(r, a, value))
    candidates.sort(key=lambda p: (-p.score, min(p.removed.timestamp, p.appeared.timestamp), p.removed.timestamp))
    used: set[int] = set()
    chosen = []
    for pair in candidates:
        if id(pair.removed) in used or id(pair.appeared) in used:
            continue
        used.update((id(pair.removed), id(pair.appeared)))
        chosen.append(pair)
    return chosen


def _record_merge(
    otm: ObjectTemporalMemory, pair: _Pair, status: Literal["replaced", "relocated"], text: str, now: float
) -> float:
    appeared = pair.appeared
    latest = otm.get(appeared.object_id).latest.timestamp
    timestamp = max(now, latest + 1e-6)
    snapshot = ChangeSnapshot(
        status=status,
        description=text,
        embedding=appeared.embedding_vector,
        box=appeared.bbox,
        timestamp=timestamp,
        visit_id=appeared.visit_id,
        source_frame=appeared.current_frame,
        reference_frame=pair.removed.reference_frame,
    )
    otm.record(snapshot, appeared.object_id, label=appeared.label)
    return timestamp


def match_pairs(events: Sequence[ChangeEvent], config: EngineConfig) -> tuple[list[_Pair], list[_Pair]]:
    """
    Replacement and relocation pairs among ``events``.

    A removed and an appeared event overlapping in 3D (IoU > gamma) pair as a
    replacement; a non-overlapping pair within ``pairing_window_s`` with similar
    embeddings (cosine > y) pairs as a relocation. Every event is in at most one pair.
    """
    removed = [e for e in events if e.status == "removed"]
    appeared = [e for e in events if e.status == "appeared"]

    def replacement(r: ChangeEvent, a: ChangeEvent) -> float | None:
        iou = iou_3d(r.bbox, a.bbox)
        return iou if iou > config.gamma else None

    replacements = _pairs(removed, appeared, replacement)
    merged = {id(e) for p in replacements for e in (p.removed, p.appeared)}

    def relocation(r: ChangeEvent, a: ChangeEvent) -> float | None:
        if id(r) in merged or id(a) in merged:
            return None
        if abs(a.timestamp - r.timestamp) > config.pairing_window_s:
            return None
        if iou_3d(r.bbox, a.bbox) > config.gamma:
            return None
        if config.relocation_label_match and label_overlap(r.label, a.label) < 0.5:
            return None
        if not r.embedding or not a.embedding:
            return None
        similarity = cosine(r.embedding_vector, a.embedding_vector)
        return similarity if similarity > config.y_sim else None

    return replacements, _pairs(removed, appeared, relocation)


def aggregate(
    events: Iterable[ChangeEvent],
    *,
    otm: ObjectTemporalMemory | None = None,
    config: EngineConfig | None = None,
    now: float | None = None,
) -> list[NarrationItem]:
    """
    Turn a batch of buffered events into change narrations.

    Replacement and relocation pairs (see ``match_pairs``) become one narration
    each; every other event is narrated on its own. Each event ends up in exactly
    one narration. Merges are appended to ``otm`` when given.

    Args:
        events: Detector events of one buffer release
        otm: Object memory that receives the replaced or relocated snapshots
        config: Engine thresholds (gamma, y_sim, pairing_window_s)
        now: Time stamped on merge snapshots; the newest event time by default

    Returns:
        Change narrations ordered by creation time
    """
    config = config or EngineConfig()
    batch = sorted(events, key=lambda e: (e.timestamp, e.object_id, e.status))
    if not batch:
        return []
    now = max(e.timestamp for e in batch) if now is None else now

    replacements, relocations = match_pairs(batch, config)
    merged = {id(e) for p in (*replacements, *relocations) for e in (p.removed, p.appeared)}

    items: list[NarrationItem] = []
    for pair in replacements:
        a, r = pair.appeared, pair.removed
        ago = elapsed_phrase(a.timestamp - r.reference_timestamp)
        text = f"{_label(a.label)} at {_where(a.clock_direction, a.distance_feet)} replaced the {r.label} that was there {ago} ago."
        if otm is not None:
            _record_merge(otm, pair, "replaced", text, now)
        items.append(
            NarrationItem(
                kind="change",
                text=text,
                created_at=max(a.timestamp, r.timestamp),
                clock_direction=a.clock_direction,
                distance_feet=a.distance_feet,
                source="replaced",
                events=[r, a],
                predictions=[
                    _prediction(a, change_type="replaced", previous_label=r.label, detail=text, source="replaced")
                ],
            )
        )
    for pair in relocations:
        a, r = pair.appeared, pair.removed
        old_clock, old_feet = spatial_phrase(r.center, Pose.from_list(a.observer_pose))
        ago = elapsed_phrase(a.timestamp - r.reference_timestamp)
        text = (
            f"{_label(a.label)} moved to {_where(a.clock_direction, a.distance_feet)}; "
            f"{ago} ago it was at {_where(old_clock, old_feet)}."
        )
        if otm is not None:
            _record_merge(otm, pair, "relocated", text, now)
        items.append(
            NarrationItem(
                kind="change",
                text=text,
                created_at=max(a.timestamp, r.timestamp),
                clock_direction=a.clock_direction,
                distance_feet=a.distance_feet,
                source="relocated",
                events=[r, a],
                predictions=[
                    _prediction(
                        a, change_type="relocated", previous_center=r.center, detail=text, source="relocated"
                    )
                ],
            )
        )
    items.extend(_event_item(e) for e in batch if id(e) not in merged)
    items.sort(key=lambda item: (item.created_at, item.text))
    return items


class ChangeAggregator:
    """
    Holds detector events until a batch is worth aggregating.

    A batch is released once it holds ``buffer_n`` events or once its oldest
    event is ``pairing_window_s`` old. A removed or appeared event with no partner
    yet stays buffered while a partner could still arrive within the window, so a
    pair split across a release is still merged. ``flush`` at visit end releases
    everything.
    """

    def __init__(self, otm: ObjectTemporalMemory | None = None, config: EngineConfig | None = None) -> None:
        self.otm = otm
        self.config = config or EngineConfig()
        self.pending: list[ChangeEvent] = []

    def add(self, events: Iterable[ChangeEvent], now: float) -> list[NarrationItem]:
        self.pending.extend(events)
        return self.poll(now)

    def poll(self, now: float) -> list[NarrationItem]:
        if not self.pending:
            return []
        oldest = min(e.timestamp for e in self.pending)
        if len(self.pending) < self.config.buffer_n and now - oldest < self.config.pairing_window_s:
            return []

        replacements, relocations = match_pairs(self.pending, self.config)
        paired = {id(e) for p in (*replacements, *relocations) for e in (p.removed, p.appeared)}
        waiting = [
            e
            for e in self.pending
            if e.status in ("removed", "appeared")
            and id(e) not in paired
            and now - e.timestamp < self.config.pairing_window_s
        ]
        held = {id(e) for e in waiting}
        batch = [e for e in self.pending if id(e) not in held]
        self.pending = waiting
        if waiting:
            logger.debug("Holding %d unpaired events for a partner", len(waiting))
        return aggregate(batch, otm=self.otm, config=self.config, now=now)

    def flush(self, now: float) -> list[NarrationItem]:
        batch, self.pending = self.pending, []
        return aggregate(batch, otm=self.otm, config=self.config, now=now)
