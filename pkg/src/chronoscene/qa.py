"""
Q&A over scene and object memory.

Three read-only tools (recent frames, recent changes, object lookup) composed by a
small command grammar:

    scene | changes [--since <seconds|Nm|Nh|Nd>] [--limit <k>] | where <label> | quit
"""

from __future__ import annotations

import logging
import re
import shlex
from typing import Literal

from pydantic import BaseModel

from chronoscene.errors import UsageError
from chronoscene.esm import EpisodicSceneMemory
from chronoscene.frame_io import ChangeType
from chronoscene.geometry import Pose, spatial_phrase
from chronoscene.narration import NarrationItem, NarrationScheduler
from chronoscene.otm import ObjectTemporalMemory

logger = logging.getLogger(__name__)

USAGE = "usage: scene | changes [--since <seconds|Nm|Nh|Nd>] [--limit <k>] | where <label> | quit"

_DURATION = re.compile(r"^(?P<value>\d+(?:\.\d+)?)(?P<unit>[smhd]?)$")
_UNIT_SECONDS = {"": 1.0, "s": 1.0, "m": 60.0, "h": 3600.0, "d": 86400.0}

STATUS_PHRASES: dict[str, str] = {
    "appeared": "appeared",
    "removed": "was removed",
    "content_changed": "changed",
    "replaced": "was replaced",
    "relocated": "was moved",
}


class QACommand(BaseModel):
    name: Literal["scene", "changes", "where", "quit"]
    since: float | None = None
    limit: int | None = None
    label: str | None = None


class FrameSummary(BaseModel):
    record_id: int
    visit_id: str
    frame_index: int
    timestamp: float
    pose: list[float]


class ChangeReport(BaseModel):
    object_id: int
    label: str
    status: ChangeType
    description: str
    timestamp: float
    visit_id: str
    clock_direction: int
    distance_feet: float


class ObjectLocation(BaseModel):
    object_id: int
    label: str
    status: ChangeType
    timestamp: float
    clock_direction: int
    distance_feet: float


def parse_duration(text: str) -> float:
    """Seconds from ``90``, ``90s``, ``5m``, ``2h`` or ``1d``."""
    match = _DURATION.match(text.strip().lower())
    if match is None:
        raise UsageError(f"Invalid duration: {text!r}")
    return float(match["value"]) * _UNIT_SECONDS[match["unit"]]


def parse_command(line: str) -> QACommand:
    try:
        tokens = shlex.split(line)
    except ValueError as exc:
        raise UsageError(f"{exc}\n{USAGE}") from exc
    if not tokens:
        raise UsageError(USAGE)

    name, args = tokens[0].lower(), tokens[1:]
    if name in ("scene", "quit"):
        if args:
            raise UsageError(USAGE)
        return QACommand(name=name)
    if name == "where":
        if not args:
            raise UsageError(USAGE)
        return QACommand(name="where", label=" ".join(args))
    if name == "changes":
        command = QACommand(name="changes")
        while args:
            flag = args.pop(0)
            if flag not in ("--since", "--limit") or not args:
                raise UsageError(USAGE)
            value = args.pop(0)
            if flag == "--since":
                command.since = parse_duration(value)
            else:
                if not value.isdigit() or int(value) < 1:
                    raise UsageError(f"--limit must be a positive integer\n{USAGE}")
                command.limit = int(value)
        return command
    raise UsageError(USAGE)


def _where(clock: int, feet: float) -> str:
    return f"your {clock} o'clock, {round(feet)} feet away"


class QAService:
    """Answers commands from the memories of one location."""

    def __init__(
        self,
        esm: EpisodicSceneMemory,
        otm: ObjectTemporalMemory,
        observer_pose: Pose | None = None,
        scheduler: NarrationScheduler | None = None,
        qa_n: int = 3,
    ) -> None:
        self.esm = esm
        self.otm = otm
        self._observer_pose = observer_pose
        self.scheduler = scheduler
        self.qa_n = qa_n

    @property
    def observer_pose(self) -> Pose | None:
        if self._observer_pose is not None:
            return self._observer_pose
        newest = self.esm.recent_frames(1)
        return newest[0].frame.pose if newest else None

    @observer_pose.setter
    def observer_pose(self, pose: Pose | None) -> None:
        self._observer_pose = pose

    def _require_pose(self) -> Pose:
        pose = self.observer_pose
        if pose is None:
            raise UsageError("No observer pose: set one or ingest a frame first")
        return pose

    def latest_time(self) -> float | None:
        newest = self.esm.recent_frames(1)
        if newest:
            return newest[0].timestamp
        changes = self.otm.recent_changes(limit=1)
        return changes[0].snapshot.timestamp if changes else None

    # ------------------------------------------------------------------
    # Tools

    def tool_esm_retrieval(self, n: int | None = None) -> list[FrameSummary]:
        return [
            FrameSummary(
                record_id=r.record_id,
                visit_id=r.visit_id,
                frame_index=r.frame.frame_index,
                timestamp=r.timestamp,
                pose=r.frame.pose.to_list(),
            )
            for r in self.esm.recent_frames(n or self.qa_n)
        ]

    def tool_otm_retrieval(self, limit: int | None = None, since: float | None = None) -> list[ChangeReport]:
        """Recent snapshots, newest first, placed relative to the observer."""
        pose = self._require_pose()
        reports = []
        for change in self.otm.recent_changes(limit=limit, since=since):
            snap = change.snapshot
            clock, feet = spatial_phrase(snap.box.center, pose)
            reports.append(
                ChangeReport(
                    object_id=change.object_id,
                    label=change.label,
                    status=snap.status,
                    description=snap.description,
                    timestamp=snap.timestamp,
                    visit_id=snap.visit_id,
                    clock_direction=clock,
                    distance_feet=feet,
                )
            )
        return reports

    def tool_spatial(self, label: str) -> list[ObjectLocation]:
        pose = self._require_pose()
        needle = label.strip().lower()
        found = []
        for obj in self.otm.objects:
            if needle not in obj.label.lower():
                continue
            latest = obj.latest
            clock, feet = spatial_phrase(latest.box.center, pose)
            found.append(
                ObjectLocation(
                    object_id=obj.object_id,
                    label=obj.label,
                    status=latest.status,
                    timestamp=latest.timestamp,
                    clock_direction=clock,
                    distance_feet=feet,
                )
            )
        return found

    # ------------------------------------------------------------------
    # Commands

    def answer(self, query: str | QACommand, now: float | None = None) -> NarrationItem:
        """Run a command and return its qa narration, submitting it when a scheduler is attached."""
        command = parse_command(query) if isinstance(query, str) else query
        if command.name == "quit":
            raise UsageError("quit ends the session and has no answer")
        created_at = now if now is not None else (self.latest_time() or 0.0)
        spatial: tuple[int, float] | None = None

        if command.name == "scene":
            text = self._scene_text()
        elif command.name == "changes":
            since = None
            if command.since is not None:
                reference = self.latest_time()
                since = None if reference is None else reference - command.since
            if self.observer_pose is None:
                text = "No changes recorded."
            else:
                reports = self.tool_otm_retrieval(limit=command.limit, since=since)
                text = self._changes_text(reports)
                if reports:
                    spatial = (reports[0].clock_direction, reports[0].distance_feet)
        else:
            assert command.label is not None
            matches = self.tool_spatial(command.label) if self.observer_pose is not None else []
            if matches:
                text = " ".join(
                    f"{m.label[:1].upper()}{m.label[1:]} is at {_where(m.clock_direction, m.distance_feet)} "
                    f"({STATUS_PHRASES[m.status]})."
                    for m in matches
                )
                spatial = (matches[0].clock_direction, matches[0].distance_feet)
            else:
                text = f"No tracked object matches {command.label!r}. {self._scene_text()}"

        item = NarrationItem(
            kind="qa",
            text=text,
            created_at=created_at,
            clock_direction=spatial[0] if spatial else None,
            distance_feet=spatial[1] if spatial else None,
            source=command.name,
        )
        if self.scheduler is not None:
            item = self.scheduler.submit(item)
        return item

    def _scene_text(self) -> str:
        frames = self.tool_esm_retrieval()
        if not frames:
            return "No frames yet."
        latest = frames[0]
        recent = ", ".join(f"{f.visit_id}/{f.frame_index}" for f in frames)
        return f"Latest view is frame {latest.frame_index} of {latest.visit_id}; recent frames: {recent}."

    @staticmethod
    def _changes_text(reports: list[ChangeReport]) -> str:
        if not reports:
            return "No changes recorded."
        return " ".join(
            f"{r.label[:1].upper()}{r.label[1:]} {STATUS_PHRASES[r.status]} at {_where(r.clock_direction, r.distance_feet)}."
            for r in reports
        )
