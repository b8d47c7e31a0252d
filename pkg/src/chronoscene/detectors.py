"""
Change detectors: the reference/current comparison contract and its implementations.

A detector receives two frame views and returns at most three object-level
changes in the detector JSON schema (``{"changes": [...]}``) with normalized
``[ymin, xmin, ymax, xmax]`` boxes in [0, 1000].
"""

from __future__ import annotations

import logging
import math
import re
from collections.abc import Callable
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Literal, Protocol, runtime_checkable

import httpx
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from chronoscene.errors import DetectorError, UsageError
from chronoscene.esm import SceneRecord, frame_image
from chronoscene.frame_io import ChangeType
from chronoscene.geometry import Bbox2D, DepthFrame, Intrinsics, Pose, project
from chronoscene.synth import PALETTE, Rendered, SceneObject, SceneScript, render_view
from chronoscene.utils import encode_png_base64

logger = logging.getLogger(__name__)

DETECTOR_SCHEMA = "prompt1-v1"
MAX_CHANGES = 3
MIN_ORACLE_PIXELS = 20

DetectorChangeType = Literal["appear", "disappear", "change"]
Confidence = Literal["low", "med", "high"]

CONFIDENCE_SCORES: dict[str, float] = {"low": 0.3, "med": 0.6, "high": 0.9}
STATUS_FOR: dict[str, ChangeType] = {
    "appear": "appeared",
    "disappear": "removed",
    "change": "content_changed",
}

_FROM_TO = re.compile(r"\bfrom\b.+\bto\b", re.IGNORECASE | re.DOTALL)


class DetectedChange(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, strict=True)

    object_name: str = Field(min_length=1)
    change_type: DetectorChangeType
    change_description: str = Field(min_length=1)
    context_description: str = ""
    confidence: Confidence
    bbox_t0: list[int] = Field(default_factory=list)
    bbox_t1: list[int] = Field(default_factory=list)

    @field_validator("bbox_t0", "bbox_t1")
    @classmethod
    def _check_box(cls, value: list[int]) -> list[int]:
        if value:
            Bbox2D.from_list(value)
        return value

    @model_validator(mode="after")
    def _check_type_rules(self) -> DetectedChange:
        has_t0, has_t1 = bool(self.bbox_t0), bool(self.bbox_t1)
        if self.change_type == "appear" and (has_t0 or not has_t1):
            raise ValueError("appear needs bbox_t1 only; bbox_t0 must be []")
        if self.change_type == "disappear" and (has_t1 or not has_t0):
            raise ValueError("disappear needs bbox_t0 only; bbox_t1 must be []")
        if self.change_type == "change":
            if not (has_t0 and has_t1):
                raise ValueError("change needs both bbox_t0 and bbox_t1")
            text = self.change_description.lower()
            if not (_FROM_TO.search(text) or ("before" in text and "after" in text)):
                raise ValueError("change_description must state both before and after")
        return self

    @property
    def box_t0(self) -> Bbox2D | None:
        return Bbox2D.from_list(self.bbox_t0) if self.bbox_t0 else None

    @property
    def box_t1(self) -> Bbox2D | None:
        return Bbox2D.from_list(self.bbox_t1) if self.bbox_t1 else None

    @property
    def status(self) -> ChangeType:
        return STATUS_FOR[self.change_type]

    @property
    def score(self) -> float:
        return CONFIDENCE_SCORES[self.confidence]


class DetectorResponse(BaseModel):
    model_config = ConfigDict(extra="forbid")

    changes: list[DetectedChange] = Field(max_length=MAX_CHANGES)


def parse_detector_response(payload: str | bytes | dict[str, Any]) -> list[DetectedChange]:
    """Validate a detector reply; any schema violation is a ``DetectorError``."""
    try:
        if isinstance(payload, (str, bytes)):
            response = DetectorResponse.model_validate_json(payload)
        else:
            response = DetectorResponse.model_validate(payload)
    except ValidationError as exc:
        raise DetectorError(f"Malformed detector response: {exc}") from exc
    return list(response.changes)


@dataclass(frozen=True, eq=False)
class FrameView:
    """A frame together with where and when it was captured."""

    frame: DepthFrame
    location_id: str
    visit_id: str
    visit_index: int

    @property
    def image(self) -> np.ndarray:
        return frame_image(self.frame)

    @property
    def frame_ref(self) -> str:
        return f"{self.visit_id}/{self.frame.frame_index}"

    @classmethod
    def from_record(cls, record: SceneRecord) -> FrameView:
        return cls(record.frame, record.location_id, record.visit_id, record.visit_index)


@runtime_checkable
class ChangeDetector(Protocol):
    def detect(self, reference: FrameView, current: FrameView) -> list[DetectedChange]: ...


# ============================================================================
# Oracle detector
# ============================================================================


class OracleDetector:
    """
    Reports the scripted differences between two visits of a synthetic location.

    Pixels are ignored; objects are located with id buffers ray-cast from each
    view's pose. A change is reported only when the object is fully visible
    (at least ``min_pixels`` pixels, none on the border) in the view where it is
    present, and the box center is in view and unoccluded in the other view.
    Moves are reported as a disappearance plus an appearance.
    """

    def __init__(
        self,
        script: SceneScript,
        *,
        max_changes: int = MAX_CHANGES,
        min_pixels: int = MIN_ORACLE_PIXELS,
        cache_size: int = 256,
    ) -> None:
        self.script = script
        self.max_changes = max_changes
        self.min_pixels = min_pixels
        self._render: Callable[[int, bytes, Intrinsics], Rendered] = lru_cache(maxsize=cache_size)(
            self._render_uncached
        )

    def _render_uncached(self, visit_index: int, pose_bytes: bytes, intrinsics: Intrinsics) -> Rendered:
        pose = Pose(np.frombuffer(pose_bytes, dtype=np.float64).reshape(4, 4))
        return render_view(self.script, visit_index, pose, intrinsics)

    def render(self, view: FrameView) -> Rendered:
        if view.location_id != self.script.location_id:
            raise UsageError(f"Frame from {view.location_id} has no script provenance for {self.script.location_id}")
        if not 0 <= view.visit_index < self.script.visits:
            raise UsageError(f"Frame visit {view.visit_index} is outside the script")
        return self._render(view.visit_index, view.frame.pose.matrix.tobytes(), view.frame.intrinsics)

    def detect(self, reference: FrameView, current: FrameView) -> list[DetectedChange]:
        ref_view, cur_view = self.render(reference), self.render(current)
        before = self.script.state_at(reference.visit_index)
        after = self.script.state_at(current.visit_index)

        found: list[tuple[int, DetectedChange]] = []
        for key in sorted(set(before) | set(after)):
            old, new = before.get(key), after.get(key)
            if old is not None and new is not None:
                if old.box != new.box:
                    found += self._disappear(old, ref_view, current, cur_view)
                    found += self._appear(new, cur_view, reference, ref_view)
                elif old.front_appearance != new.front_appearance:
                    found += self._change(old, new, ref_view, cur_view)
            elif old is not None:
                found += self._disappear(old, ref_view, current, cur_view)
            elif new is not None:
                found += self._appear(new, cur_view, reference, ref_view)

        found.sort(key=lambda item: (-item[0], item[1].object_name))
        if len(found) > self.max_changes:
            logger.debug("Oracle deferred %d changes beyond the first %d", len(found) - self.max_changes, self.max_changes)
        return [change for _, change in found[: self.max_changes]]

    def _covisible(self, obj: SceneObject, other: FrameView, other_view: Rendered) -> bool:
        box = obj.bbox
        pixel = project(box.center, other.frame.pose, other.frame.intrinsics)
        if pixel is None:
            return False
        col, row = (math.floor(c + 0.5) for c in pixel)
        row = min(max(row, 0), other.frame.height - 1)
        col = min(max(col, 0), other.frame.width - 1)
        depth = float(other_view.depth[row, col])
        if depth <= 0:
            return True
        z = float(other.frame.pose.world_to_camera(np.asarray([box.center]))[0, 2])
        half_diagonal = float(np.linalg.norm(box.size)) / 2
        return depth >= z - half_diagonal

    def _pixel_box(self, view: Rendered, key: int) -> tuple[int, Bbox2D]:
        rows, cols = np.nonzero(view.ids == key)
        height, width = view.ids.shape
        box = Bbox2D.from_pixels(int(rows.min()), int(cols.min()), int(rows.max()) + 1, int(cols.max()) + 1, width, height)
        return int(rows.size), box

    def _context(self, obj: SceneObject) -> str:
        return "" if obj.slot is None else self.script.slot(obj.slot).context

    def _appear(
        self, obj: SceneObject, rendered: Rendered, other: FrameView, other_rendered: Rendered
    ) -> list[tuple[int, DetectedChange]]:
        if not rendered.fully_visible(obj.key, self.min_pixels) or not self._covisible(obj, other, other_rendered):
            return []
        area, box = self._pixel_box(rendered, obj.key)
        change = DetectedChange(
            object_name=obj.label,
            change_type="appear",
            change_description=f"{obj.label} appeared",
            context_description=self._context(obj),
            confidence="high",
            bbox_t1=box.to_list(),
        )
        return [(area, change)]

    def _disappear(
        self, obj: SceneObject, rendered: Rendered, other: FrameView, other_rendered: Rendered
    ) -> list[tuple[int, DetectedChange]]:
        if not rendered.fully_visible(obj.key, self.min_pixels) or not self._covisible(obj, other, other_rendered):
            return []
        area, box = self._pixel_box(rendered, obj.key)
        change = DetectedChange(
            object_name=obj.label,
            change_type="disappear",
            change_description=f"{obj.label} is gone",
            context_description=self._context(obj),
            confidence="high",
            bbox_t0=box.to_list(),
        )
        return [(area, change)]

    def _change(
        self, old: SceneObject, new: SceneObject, ref_view: Rendered, cur_view: Rendered
    ) -> list[tuple[int, DetectedChange]]:
        if not (ref_view.fully_visible(old.key, self.min_pixels) and cur_view.fully_visible(new.key, self.min_pixels)):
            return []
        _, box_t0 = self._pixel_box(ref_view, old.key)
        area, box_t1 = self._pixel_box(cur_view, new.key)
        before = PALETTE[old.front_appearance].name
        after = PALETTE[new.front_appearance].name
        change = DetectedChange(
            object_name=new.label,
            change_type="change",
            change_description=f"front changed from {before} to {after}",
            context_description=self._context(new),
            confidence="high",
            bbox_t0=box_t0.to_list(),
            bbox_t1=box_t1.to_list(),
        )
        return [(area, change)]


# ============================================================================
# External detector
# ============================================================================


class HttpChangeDetector:
    """Posts both views to an external vision-language service."""

    def __init__(self, url: str, *, client: httpx.Client | None = None, timeout: float = 60.0) -> None:
        self.url = url
        self._client = client or httpx.Client(timeout=timeout)

    def detect(self, reference: FrameView, current: FrameView) -> list[DetectedChange]:
        request = {
            "schema": DETECTOR_SCHEMA,
            "reference_image": encode_png_base64(reference.image),
            "current_image": encode_png_base64(current.image),
        }
        try:
            response = self._client.post(self.url, json=request)
            response.raise_for_status()
            payload = response.json()
        except (httpx.HTTPError, ValueError) as exc:
            raise DetectorError(f"Detector request to {self.url} failed: {exc}") from exc
        return parse_detector_response(payload)
