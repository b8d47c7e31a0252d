"""
Replay of recorded visits through the full engine for one location.

A session owns the location's memories, the change pipeline, the aggregation
buffer and the narration scheduler. Visits are fed in order at their recorded
frame times; the narration clock is the frame clock, so replays are repeatable.
"""

from __future__ import annotations

import logging
import time
from collections.abc import Sequence
from pathlib import Path

from pydantic import BaseModel

from chronoscene.config import EngineConfig
from chronoscene.detectors import ChangeDetector, FrameView, HttpChangeDetector, OracleDetector
from chronoscene.embeddings import TextEmbedder, TrigramEmbedder, VisualEmbedder
from chronoscene.errors import UsageError
from chronoscene.esm import EpisodicSceneMemory, SceneRecord
from chronoscene.frame_io import (
    ChangePrediction,
    VisitManifest,
    append_jsonl,
    list_visit_dirs,
    read_visit,
)
from chronoscene.geometry import DepthFrame
from chronoscene.live_describe import DepthStatsDescriber, HttpDescriber, SceneDescriber, ScriptDescriber
from chronoscene.narration import (
    ChangeAggregator,
    JsonlSink,
    LiveHistory,
    NarrationItem,
    NarrationScheduler,
    NarrationSink,
    StdoutSink,
    filter_live,
)
from chronoscene.otm import ObjectTemporalMemory
from chronoscene.pipeline import ChangeEvent, ChangePipeline
from chronoscene.synth import load_script

logger = logging.getLogger(__name__)

EVENTS_NAME = "events.jsonl"
NARRATIONS_NAME = "narrations.jsonl"
PREDICTIONS_NAME = "pred.jsonl"
EXTERN_PREFIX = "extern:"


class FrameTiming(BaseModel):
    visit_id: str
    visit_index: int
    frame_index: int
    frame_queuing: float
    reference_matching: float = 0.0
    detector_inference: float = 0.0
    post_processing: float = 0.0

    @property
    def total(self) -> float:
        return self.frame_queuing + self.reference_matching + self.detector_inference + self.post_processing


class VisitSummary(BaseModel):
    location_id: str
    visit_id: str
    visit_index: int
    frames: int
    records: int
    events: int
    narrations: int
    predictions: int


def make_detector(spec: str, location_dir: Path | None = None) -> ChangeDetector:
    """``oracle`` (needs the location's script.json) or ``extern:<url>``."""
    if spec == "oracle":
        if location_dir is None:
            raise UsageError("The oracle detector needs a location directory with script.json")
        return OracleDetector(load_script(location_dir))
    if spec.startswith(EXTERN_PREFIX) and len(spec) > len(EXTERN_PREFIX):
        return HttpChangeDetector(spec[len(EXTERN_PREFIX) :])
    raise UsageError(f"Unknown detector {spec!r}; use 'oracle' or 'extern:<url>'")


def make_describer(spec: str, location_dir: Path | None = None) -> SceneDescriber:
    """``script`` (falls back to depth statistics without script.json), ``depth`` or ``extern:<url>``."""
    if spec == "script":
        if location_dir is not None and (location_dir / "script.json").exists():
            return ScriptDescriber(load_script(location_dir))
        return DepthStatsDescriber()
    if spec == "depth":
        return DepthStatsDescriber()
    if spec.startswith(EXTERN_PREFIX) and len(spec) > len(EXTERN_PREFIX):
        return HttpDescriber(spec[len(EXTERN_PREFIX) :])
    raise UsageError(f"Unknown describer {spec!r}; use 'script', 'depth' or 'extern:<url>'")


class LocationSession:
    """Engine state of one location, persisted under ``root`` when given."""

    def __init__(
        self,
        location_id: str,
        detector: ChangeDetector,
        *,
        config: EngineConfig | None = None,
        root: Path | None = None,
        out_dir: Path | None = None,
        describer: SceneDescriber | None = None,
        sinks: Sequence[NarrationSink] | None = None,
        echo: bool = False,
        embedder: VisualEmbedder | None = None,
        text_embedder: TextEmbedder | None = None,
        esm: EpisodicSceneMemory | None = None,
        otm: ObjectTemporalMemory | None = None,
    ) -> None:
        self.location_id = location_id
        self.config = config or EngineConfig()
        self.root = root
        if esm is None:
            if root is not None:
                esm = EpisodicSceneMemory.load(root, location_id, config=self.config, embedder=embedder)
            else:
                esm = EpisodicSceneMemory.from_config(location_id, self.config, embedder=embedder)
        if otm is None:
            otm = ObjectTemporalMemory.load(root, location_id) if root is not None else ObjectTemporalMemory(location_id)
        self.esm = esm
        self.otm = otm

        self.out_dir = out_dir if out_dir is not None else (root / location_id if root is not None else None)
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        if sinks is None:
            sinks = [JsonlSink(self.out_dir / NARRATIONS_NAME)] if self.out_dir is not None else []
        if echo:
            sinks = [*sinks, StdoutSink()]

        self.pipeline = ChangePipeline(self.esm, self.otm, detector, self.config)
        self.aggregator = ChangeAggregator(self.otm, self.config)
        self.scheduler = NarrationScheduler.from_config(self.config, sinks)
        self.describer = describer
        self.text_embedder = text_embedder or TrigramEmbedder()
        self.live_history = LiveHistory(self.config.buffer_n)

        self.events: list[ChangeEvent] = []
        self.predictions: list[ChangePrediction] = []
        self.timings: list[FrameTiming] = []

    # ------------------------------------------------------------------

    def _emit(self, items: Sequence[NarrationItem]) -> int:
        for item in items:
            self.scheduler.submit(item)
            for row in item.predictions:
                self.predictions.append(row)
                if self.out_dir is not None:
                    append_jsonl(self.out_dir / PREDICTIONS_NAME, row)
        return len(items)

    def _describe(self, record: SceneRecord, now: float) -> None:
        assert self.describer is not None
        describer = self.describer
        view = FrameView.from_record(record)
        text = filter_live(
            record.embedding,
            lambda: describer.describe(view),
            self.live_history,
            tau_visual=self.config.tau_visual,
            tau_text=self.config.tau_text,
            text_embedder=self.text_embedder,
        )
        if text is not None:
            self.scheduler.submit(NarrationItem(kind="live", text=text, created_at=now, source="live"))

    def replay_visit(self, manifest: VisitManifest, frames: Sequence[DepthFrame]) -> VisitSummary | None:
        """
        Feed one recorded visit through the engine.

        Returns None without touching the store when the visit was already ingested.
        """
        if manifest.location_id != self.location_id:
            raise UsageError(f"Visit of {manifest.location_id} replayed into {self.location_id}")
        if any(v.visit_id == manifest.visit_id for v in self.esm.visits()):
            logger.info("Skipping %s: already in the store", manifest.visit_id)
            return None

        self.esm.open_visit(manifest.visit_id, manifest.visit_index, manifest.start_time)
        records = events = narrations = 0
        predictions_before = len(self.predictions)
        now = manifest.start_time
        for frame in frames:
            now = manifest.start_time + frame.timestamp
            self.scheduler.tick(now)

            started = time.perf_counter()
            record = self.esm.ingest_frame(frame, now)
            queued = time.perf_counter() - started
            if record is None:
                continue
            records += 1

            result = self.pipeline.process_frame(record)
            self.timings.append(
                FrameTiming(
                    visit_id=manifest.visit_id,
                    visit_index=manifest.visit_index,
                    frame_index=frame.frame_index,
                    frame_queuing=queued,
                    **result.timings,
                )
            )
            for event in result.events:
                self.events.append(event)
                if self.out_dir is not None:
                    append_jsonl(self.out_dir / EVENTS_NAME, event)
            events += len(result.events)
            narrations += self._emit(self.aggregator.add(result.events, now))
            narrations += self._emit(self.aggregator.poll(now))

            if self.describer is not None:
                self._describe(record, now)
            self.scheduler.tick(now)

        narrations += self._emit(self.aggregator.flush(now))
        self.scheduler.drain(now)
        self.esm.close_visit(manifest.visit_id)
        self.esm.save()
        summary = VisitSummary(
            location_id=self.location_id,
            visit_id=manifest.visit_id,
            visit_index=manifest.visit_index,
            frames=len(frames),
            records=records,
            events=events,
            narrations=narrations,
            predictions=len(self.predictions) - predictions_before,
        )
        logger.info(
            "Replayed %s/%s: %d records, %d events, %d narrations",
            self.location_id,
            manifest.visit_id,
            records,
            events,
            narrations,
        )
        return summary


def replay_location(
    location_dir: Path,
    *,
    detector: str = "oracle",
    root: Path | None = None,
    out_dir: Path | None = None,
    config: EngineConfig | None = None,
    live: str | None = None,
    echo: bool = False,
) -> tuple[LocationSession, list[VisitSummary]]:
    """
    Replay every visit recorded under ``location_dir`` in visit order.

    Args:
        location_dir: Directory holding ``visit_%02d`` subdirectories
        detector: ``oracle`` or ``extern:<url>``
        root: Store directory; visits already in it are skipped
        out_dir: Where session outputs go; defaults to ``root/<location_id>``
        config: Engine thresholds
        live: Live describer name, or None to narrate changes only
        echo: Also print narrations to stdout

    Returns:
        The session and one summary per visit it replayed
    """
    visit_dirs = list_visit_dirs(location_dir)
    if not visit_dirs:
        raise UsageError(f"No visits under {location_dir}")
    first, _ = read_visit(visit_dirs[0])
    session = LocationSession(
        first.location_id,
        make_detector(detector, location_dir),
        config=config,
        root=root,
        out_dir=out_dir,
        describer=make_describer(live, location_dir) if live else None,
        echo=echo,
    )
    summaries = []
    for visit_dir in visit_dirs:
        manifest, frames = read_visit(visit_dir)
        summary = session.replay_visit(manifest, frames)
        if summary is not None:
            summaries.append(summary)
    return session, summaries
