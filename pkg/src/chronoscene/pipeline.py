"""
Per-frame change detection.

reference selection -> detector -> confidence/size filter -> visibility-mask filter
-> segmentation -> 3D lifting -> OTM association and recording -> change events.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Literal, Protocol

import numpy as np
from pydantic import BaseModel, Field

from chronoscene.config import EngineConfig
from chronoscene.detectors import CONFIDENCE_SCORES, ChangeDetector, DetectedChange, FrameView
from chronoscene.embeddings import Embedding
from chronoscene.errors import DetectorError, ProviderError, UsageError
from chronoscene.esm import EpisodicSceneMemory, SceneRecord, frame_image
from chronoscene.frame_io import ChangeType
from chronoscene.geometry import Bbox2D, Bbox3D, DepthFrame, VisibilityMap, back_project, iou_3d, spatial_phrase
from chronoscene.otm import ChangeSnapshot, ObjectTemporalMemory
from chronoscene.retriever import ReferenceSelection, mark_announced, select_reference

logger = logging.getLogger(__name__)

MIN_EXTENT_M = 0.01
TIMING_KEYS = ("reference_matching", "detector_inference", "post_processing")


class ChangeEvent(BaseModel):
    """One surviving detector change, anchored in the world and in OTM."""

    location_id: str
    visit_id: str
    visit_index: int
    timestamp: float
    reference_timestamp: float
    label: str
    status: ChangeType
    description: str
    context: str = ""
    confidence: str
    coverage: float
    box: list[float] = Field(min_length=6, max_length=6)
    clock_direction: int = Field(ge=1, le=12)
    distance_feet: float
    observer_pose: list[float] = Field(min_length=16, max_length=16)
    reference_frame: str
    current_frame: str
    frame_index: int
    object_id: int
    embedding: list[float] = Field(default_factory=list, exclude=True)

    @property
    def bbox(self) -> Bbox3D:
        return Bbox3D.from_list(self.box)

    @property
    def center(self) -> tuple[float, float, float]:
        return self.bbox.center

    @property
    def embedding_vector(self) -> Embedding:
        return Embedding.from_raw(self.embedding)


@dataclass
class FrameResult:
    events: list[ChangeEvent] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=lambda: dict.fromkeys(TIMING_KEYS, 0.0))
    reference: ReferenceSelection | None = None


# ============================================================================
# Masks, segmentation and lifting
# ============================================================================


def mask_coverage(
    box: Bbox2D, visibility: VisibilityMap, which: Literal["current", "reference"] = "current"
) -> float:
    """Fraction of the box's pixels covered by the visibility mask of one side."""
    mask = visibility.mask if which == "current" else visibility.reference_mask
    height, width = mask.shape
    row0, col0, row1, col1 = box.pixel_bounds(width, height)
    region = mask[row0:row1, col0:col1]
    return float(region.mean()) if region.size else 0.0


def change_coverage(change: DetectedChange, visibility: VisibilityMap) -> float:
    """
    Coverage used by the mask filter.

    Appearances are checked in the current frame, disappearances in the
    reference frame, content changes take the smaller of the two.
    """
    t0, t1 = change.box_t0, change.box_t1
    if change.change_type == "appear":
        assert t1 is not None
        return mask_coverage(t1, visibility, "current")
    if change.change_type == "disappear":
        assert t0 is not None
        return mask_coverage(t0, visibility, "reference")
    assert t0 is not None and t1 is not None
    return min(mask_coverage(t0, visibility, "reference"), mask_coverage(t1, visibility, "current"))


class Segmenter(Protocol):
    def segment(self, frame: DepthFrame, box: Bbox2D) -> np.ndarray: ...


class BoxSegmenter:
    """Box interior intersected with valid depth."""

    def segment(self, frame: DepthFrame, box: Bbox2D) -> np.ndarray:
        row0, col0, row1, col1 = box.pixel_bounds(frame.width, frame.height)
        mask = np.zeros((frame.height, frame.width), dtype=bool)
        mask[row0:row1, col0:col1] = True
        return mask & frame.valid_mask


@dataclass(frozen=True)
class DepthLayerSegmenter:
    """
    Box interior restricted to the depth layer of the boxed object.

    The layer is centred on the median depth of the box's central window and
    spans ``band`` meters either side.
    """

    band: float = 0.4
    window: float = 0.5

    def segment(self, frame: DepthFrame, box: Bbox2D) -> np.ndarray:
        mask = BoxSegmenter().segment(frame, box)
        row0, col0, row1, col1 = box.pixel_bounds(frame.width, frame.height)
        dr = int((row1 - row0) * (1 - self.window) / 2)
        dc = int((col1 - col0) * (1 - self.window) / 2)
        central = mask[row0 + dr : row1 - dr, col0 + dc : col1 - dc]
        depths = frame.depth[row0 + dr : row1 - dr, col0 + dc : col1 - dc][central]
        if depths.size == 0:
            return mask
        median = float(np.median(depths))
        return mask & (np.abs(frame.depth - median) <= self.band)


def lift_to_3d(
    box: Bbox2D,
    frame: DepthFrame,
    segmenter: Segmenter | None = None,
    *,
    min_points: int = 10,
    percentiles: tuple[float, float] = (5.0, 95.0),
) -> Bbox3D | None:
    """
    Lift a 2D detection box into a world-frame 3D box.

    Args:
        box: Normalized detection box in the frame
        frame: Depth frame the box was drawn on
        segmenter: Pixel mask inside the box; the whole box by default
        min_points: Fewest valid depth points needed
        percentiles: Lower and upper percentiles bounding the box on each axis

    Returns:
        The world box, or None when fewer than ``min_points`` points back-project
    """
    mask = (segmenter or BoxSegmenter()).segment(frame, box)
    points = back_project(frame, mask=mask, min_confidence=0.0).points
    if points.shape[0] < min_points:
        return None
    lo = np.percentile(points, percentiles[0], axis=0)
    hi = np.percentile(points, percentiles[1], axis=0)
    mid = (lo + hi) / 2
    thin = (hi - lo) < MIN_EXTENT_M
    lo = np.where(thin, mid - MIN_EXTENT_M / 2, lo)
    hi = np.where(thin, mid + MIN_EXTENT_M / 2, hi)
    return Bbox3D(tuple(lo), tuple(hi))  # type: ignore[arg-type]


# ============================================================================
# Pipeline
# ============================================================================


class ChangePipeline:
    """Change detection for one location, fed frames in capture order."""

    def __init__(
        self,
        esm: EpisodicSceneMemory,
        otm: ObjectTemporalMemory,
        detector: ChangeDetector,
        config: EngineConfig | None = None,
    ) -> None:
        self.esm = esm
        self.otm = otm
        self.detector = detector
        self.config = config or EngineConfig()
        self.segmenter: Segmenter = (
            DepthLayerSegmenter(self.config.segment_band_m) if self.config.segmenter == "layer" else BoxSegmenter()
        )

    def _current(self, current: SceneRecord | DepthFrame) -> tuple[FrameView, float]:
        if isinstance(current, SceneRecord):
            return FrameView.from_record(current), current.timestamp
        visit_id = self.esm.open_visit_id
        if visit_id is None:
            raise UsageError("Processing a bare frame needs an open visit")
        entry = next(v for v in self.esm.visits() if v.visit_id == visit_id)
        view = FrameView(self.esm.prepare_frame(current), self.esm.location_id, visit_id, entry.visit_index)
        return view, entry.start_time + current.timestamp

    def process_frame(self, current: SceneRecord | DepthFrame) -> FrameResult:
        """
        Compare an ingested frame with its reference and record what changed.

        Args:
            current: An ingested record, or a bare frame of the open visit with a
                visit-relative timestamp

        Returns:
            Events recorded in object memory, per-stage timings and the chosen reference
        """
        result = FrameResult()
        view, timestamp = self._current(current)

        started = time.perf_counter()
        selection = select_reference(view.frame, self.esm, self.config)
        result.timings["reference_matching"] = time.perf_counter() - started
        if selection is None:
            return result
        result.reference = selection
        reference = FrameView.from_record(selection.record)

        started = time.perf_counter()
        try:
            changes = self.detector.detect(reference, view)
        except (DetectorError, ProviderError) as exc:
            result.timings["detector_inference"] = time.perf_counter() - started
            logger.warning("Detector failed on %s against %s: %s", view.frame_ref, reference.frame_ref, exc)
            return result
        result.timings["detector_inference"] = time.perf_counter() - started

        started = time.perf_counter()
        for change in changes:
            event = self._record(change, selection, reference, view, timestamp)
            if event is not None:
                result.events.append(event)
        mark_announced(selection.cluster, self.esm)
        result.timings["post_processing"] = time.perf_counter() - started
        return result

    def _record(
        self,
        change: DetectedChange,
        selection: ReferenceSelection,
        reference: FrameView,
        current: FrameView,
        timestamp: float,
    ) -> ChangeEvent | None:
        config = self.config
        tag = f"{current.frame_ref} {change.change_type} {change.object_name!r}"
        if change.score < CONFIDENCE_SCORES[config.confidence_min]:
            logger.debug("Rejected %s: confidence %s", tag, change.confidence)
            return None
        area = min(box.area for box in (change.box_t0, change.box_t1) if box is not None)
        if area < config.area_min:
            logger.debug("Rejected %s: area %d", tag, area)
            return None
        coverage = change_coverage(change, selection.visibility)
        if coverage < config.x_mask:
            logger.debug("Rejected %s: mask coverage %.2f", tag, coverage)
            return None

        if change.change_type == "disappear":
            frame, box2d = reference.frame, change.box_t0
        else:
            frame, box2d = current.frame, change.box_t1
        assert box2d is not None
        box = lift_to_3d(
            box2d,
            frame,
            self.segmenter,
            min_points=config.lift_min_points,
            percentiles=config.lift_percentiles,
        )
        if box is None:
            logger.debug("Rejected %s: too few depth points", tag)
            return None

        embedding = self.esm.embedder.embed_visual(frame_image(frame), self.segmenter.segment(frame, box2d))
        status = change.status
        association = self.otm.associate(box, embedding, config.gamma, config.y_sim)
        if self._already_recorded(association, status, current.visit_id, box, change.object_name):
            logger.debug("Skipped %s: already recorded this visit", tag)
            return None
        if association is not None and self.otm.get(association).latest.timestamp >= timestamp:
            association = None

        snapshot = ChangeSnapshot(
            status=status,
            description=change.change_description,
            embedding=embedding,
            box=box,
            timestamp=timestamp,
            visit_id=current.visit_id,
            source_frame=current.frame_ref,
            reference_frame=reference.frame_ref,
        )
        object_id = self.otm.record(snapshot, association, label=change.object_name)
        clock, feet = spatial_phrase(box.center, current.frame.pose)
        logger.info("%s %s at %d o'clock, %.1f ft (object %d)", change.object_name, status, clock, feet, object_id)
        return ChangeEvent(
            location_id=current.location_id,
            visit_id=current.visit_id,
            visit_index=current.visit_index,
            timestamp=timestamp,
            reference_timestamp=selection.record.timestamp,
            label=change.object_name,
            status=status,
            description=change.change_description,
            context=change.context_description,
            confidence=change.confidence,
            coverage=coverage,
            box=box.to_list(),
            clock_direction=clock,
            distance_feet=feet,
            observer_pose=current.frame.pose.to_list(),
            reference_frame=reference.frame_ref,
            current_frame=current.frame_ref,
            frame_index=current.frame.frame_index,
            object_id=object_id,
            embedding=embedding.to_list(),
        )

    def _already_recorded(
        self, association: int | None, status: str, visit_id: str, box: Bbox3D, label: str
    ) -> bool:
        if association is not None and self.otm.has_status(association, status, visit_id):
            return True
        return any(
            seen.label == label and iou_3d(seen.snapshot.box, box) > self.config.gamma
            for seen in self.otm.visit_changes(visit_id, status)
        )


def process_frame(
    current: SceneRecord | DepthFrame,
    esm: EpisodicSceneMemory,
    otm: ObjectTemporalMemory,
    detector: ChangeDetector,
    config: EngineConfig | None = None,
) -> list[ChangeEvent]:
    """Single-call form of ``ChangePipeline.process_frame`` returning only the events."""
    return ChangePipeline(esm, otm, detector, config).process_frame(current).events
