"""
On-disk visit logs.

A visit directory holds ``manifest.json`` and one binary record per frame
(``frame_%06d.bin``), plus optional 8-bit PNG intensity sidecars
(``frame_%06d.png``). Ground truth and predictions are JSON Lines.

Frame record layout, little-endian:

    magic "SSFR" | u32 version=1 | u32 width | u32 height | f64 timestamp
    | 16 x f64 row-major camera-to-world pose | u8 has_confidence
    | width*height f32 depth | width*height u8 confidence (iff has_confidence)
"""

from __future__ import annotations

import json
import struct
from collections.abc import Iterable, Iterator, Sequence
from pathlib import Path
from typing import Literal, TypeVar, overload

import cv2
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from chronoscene.errors import FormatError, UsageError
from chronoscene.geometry import DepthFrame, Intrinsics, Pose

FRAME_MAGIC = b"SSFR"
FRAME_VERSION = 1
HEADER = struct.Struct("<4sIIId16dB")

MANIFEST_NAME = "manifest.json"
FRAME_PATTERN = "frame_{:06d}.bin"
SIDECAR_PATTERN = "frame_{:06d}.png"

ChangeType = Literal["appeared", "removed", "content_changed", "replaced", "relocated"]
CHANGE_TYPES: tuple[ChangeType, ...] = (
    "appeared",
    "removed",
    "content_changed",
    "replaced",
    "relocated",
)


class VisitManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    location_id: str = Field(min_length=1)
    visit_id: str = Field(min_length=1)
    visit_index: int = Field(ge=0)
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    fx: float
    fy: float
    cx: float
    cy: float
    fps: float = Field(1.0, gt=0)
    start_time: float

    @model_validator(mode="after")
    def _check_intrinsics(self) -> VisitManifest:
        # UsageError is a ValueError, so pydantic reports it as a validation error.
        self.intrinsics  # noqa: B018
        return self

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)


class GroundTruthChange(BaseModel):
    model_config = ConfigDict(extra="forbid")

    visit_index: int = Field(ge=0)
    object_label: str = Field(min_length=1)
    change_type: ChangeType
    world_center: tuple[float, float, float]
    first_visible_frame: int = Field(ge=0)
    detail: str = ""
    previous_label: str | None = None
    previous_center: tuple[float, float, float] | None = None


class ChangePrediction(GroundTruthChange):
    """A narrated change as written to pred.jsonl."""

    timestamp: float
    clock_direction: int = Field(ge=1, le=12)
    distance_feet: float = Field(ge=0)
    observer_pose: list[float] = Field(min_length=16, max_length=16)
    object_id: int | None = None
    source: Literal["event", "replaced", "relocated"] = "event"


# ============================================================================
# Frame records
# ============================================================================


def encode_frame(frame: DepthFrame) -> bytes:
    """Serialize one frame to its binary record."""
    has_conf = frame.confidence is not None
    header = HEADER.pack(
        FRAME_MAGIC,
        FRAME_VERSION,
        frame.width,
        frame.height,
        float(frame.timestamp),
        *frame.pose.to_list(),
        1 if has_conf else 0,
    )
    parts = [header, frame.depth.astype("<f4", copy=False).tobytes()]
    if has_conf:
        quantized = np.round(frame.confidence * 255.0).astype(np.uint8)  # type: ignore[operator]
        parts.append(quantized.tobytes())
    return b"".join(parts)


def record_length(header: bytes) -> int:
    """Total record size in bytes given its header."""
    _, _, width, height, _, *rest = HEADER.unpack(header[: HEADER.size])
    has_conf = rest[-1]
    pixels = width * height
    return HEADER.size + pixels * 4 + (pixels if has_conf else 0)


def decode_frame(
    data: bytes,
    *,
    frame_index: int,
    intrinsics: Intrinsics | None = None,
    source: str = "<memory>",
) -> DepthFrame:
    """Parse one binary record. ``intrinsics`` defaults to a unit camera when omitted."""
    where = f"{source}: frame {frame_index}"
    if len(data) < HEADER.size:
        raise FormatError(f"{where}: truncated header ({len(data)} bytes)")
    magic, version, width, height, timestamp, *rest = HEADER.unpack(data[: HEADER.size])
    pose_values, has_conf = rest[:16], rest[16]
    if magic != FRAME_MAGIC:
        raise FormatError(f"{where}: bad magic {magic!r}")
    if version != FRAME_VERSION:
        raise FormatError(f"{where}: unsupported version {version}")
    if has_conf not in (0, 1):
        raise FormatError(f"{where}: invalid has_confidence flag {has_conf}")

    expected = record_length(data[: HEADER.size])
    if len(data) < expected:
        raise FormatError(f"{where}: truncated record ({len(data)} of {expected} bytes)")
    if len(data) > expected:
        raise FormatError(f"{where}: {len(data) - expected} trailing bytes")

    if intrinsics is None:
        intrinsics = Intrinsics(1.0, 1.0, 0.0, 0.0, width, height)
    if (width, height) != (intrinsics.width, intrinsics.height):
        raise FormatError(
            f"{where}: record is {width}x{height}, manifest says "
            f"{intrinsics.width}x{intrinsics.height}"
        )

    pixels = width * height
    offset = HEADER.size
    depth = np.frombuffer(data, dtype="<f4", count=pixels, offset=offset).reshape(height, width)
    confidence = None
    if has_conf:
        raw = np.frombuffer(data, dtype=np.uint8, count=pixels, offset=offset + pixels * 4)
        confidence = (raw.astype(np.float32) / np.float32(255.0)).reshape(height, width)

    try:
        pose = Pose.from_list(pose_values)
    except UsageError as exc:
        raise FormatError(f"{where}: invalid pose: {exc}") from exc

    return DepthFrame(
        depth=depth.astype(np.float32),
        pose=pose,
        intrinsics=intrinsics,
        timestamp=timestamp,
        frame_index=frame_index,
        confidence=confidence,
    )


def iter_records(blob: bytes, *, source: str = "<memory>") -> Iterator[bytes]:
    """Split concatenated frame records using only their headers."""
    offset = 0
    index = 0
    while offset < len(blob):
        if len(blob) - offset < HEADER.size:
            raise FormatError(f"{source}: record {index}: truncated header")
        length = record_length(blob[offset : offset + HEADER.size])
        if offset + length > len(blob):
            raise FormatError(f"{source}: record {index}: truncated record")
        yield blob[offset : offset + length]
        offset += length
        index += 1


# ============================================================================
# Visit directories
# ============================================================================


def write_visit(manifest: VisitManifest, frames: Sequence[DepthFrame], destination: Path) -> None:
    """Write a manifest and its frame records (plus intensity sidecars when present)."""
    intrinsics = manifest.intrinsics
    previous = None
    for position, frame in enumerate(frames):
        if (frame.width, frame.height) != (intrinsics.width, intrinsics.height):
            raise FormatError(
                f"Frame {position} is {frame.width}x{frame.height}, manifest says "
                f"{intrinsics.width}x{intrinsics.height}"
            )
        if previous is not None and frame.timestamp < previous:
            raise UsageError(f"Frames must be sorted by timestamp (frame {position})")
        previous = frame.timestamp

    destination.mkdir(parents=True, exist_ok=True)
    (destination / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    for position, frame in enumerate(frames):
        (destination / FRAME_PATTERN.format(position)).write_bytes(encode_frame(frame))
        if frame.intensity is not None:
            sidecar = destination / SIDECAR_PATTERN.format(position)
            if not cv2.imwrite(str(sidecar), frame.intensity):
                raise OSError(f"Could not write {sidecar}")


def read_manifest(source: Path) -> VisitManifest:
    path = source / MANIFEST_NAME
    if not path.exists():
        raise FormatError(f"{path}: manifest not found")
    try:
        return VisitManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as exc:
        raise FormatError(f"{path}: invalid manifest:\n{exc}") from exc


class VisitFrames(Sequence[DepthFrame]):
    """Frames of one visit directory, decoded lazily in index order."""

    def __init__(self, source: Path, manifest: VisitManifest) -> None:
        self.source = source
        self.manifest = manifest
        self._count = len(list(source.glob("frame_*.bin")))
        for index in range(self._count):
            if not (source / FRAME_PATTERN.format(index)).exists():
                raise FormatError(f"{source}: frame records are not numbered contiguously (missing {index})")

    def __len__(self) -> int:
        return self._count

    @overload
    def __getitem__(self, index: int) -> DepthFrame: ...

    @overload
    def __getitem__(self, index: slice) -> list[DepthFrame]: ...

    def __getitem__(self, index: int | slice) -> DepthFrame | list[DepthFrame]:
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(self._count))]
        if index < 0:
            index += self._count
        if not 0 <= index < self._count:
            raise IndexError(index)
        path = self.source / FRAME_PATTERN.format(index)
        frame = decode_frame(
            path.read_bytes(),
            frame_index=index,
            intrinsics=self.manifest.intrinsics,
            source=str(path),
        )
        sidecar = self.source / SIDECAR_PATTERN.format(index)
        if sidecar.exists():
            image = cv2.imread(str(sidecar), cv2.IMREAD_GRAYSCALE)
            if image is None or image.shape != frame.depth.shape:
                raise FormatError(f"{sidecar}: unreadable or mis-sized intensity sidecar")
            frame = DepthFrame(
                depth=frame.depth,
                pose=frame.pose,
                intrinsics=frame.intrinsics,
                timestamp=frame.timestamp,
                frame_index=frame.frame_index,
                confidence=frame.confidence,
                intensity=image,
            )
        return frame


def read_visit(source: Path) -> tuple[VisitManifest, VisitFrames]:
    """Open a visit directory; frames are decoded on access."""
    if not source.is_dir():
        raise FileNotFoundError(f"Visit directory not found: {source}")
    manifest = read_manifest(source)
    return manifest, VisitFrames(source, manifest)


def list_visit_dirs(location_dir: Path) -> list[Path]:
    """Visit directories under a location, ordered by manifest visit_index."""
    dirs = [p for p in location_dir.iterdir() if p.is_dir() and (p / MANIFEST_NAME).exists()]
    return sorted(dirs, key=lambda p: read_manifest(p).visit_index)


# ============================================================================
# JSON Lines
# ============================================================================

RowT = TypeVar("RowT", bound=BaseModel)


def write_jsonl(path: Path, rows: Iterable[BaseModel]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row.model_dump(mode="json"), ensure_ascii=False) + "\n")


def append_jsonl(path: Path, row: BaseModel) -> None:
    with path.open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(row.model_dump(mode="json"), ensure_ascii=False) + "\n")


def read_jsonl(path: Path, model: type[RowT]) -> list[RowT]:
    """Parse and validate every line; errors name the line number."""
    rows: list[RowT] = []
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append(model.model_validate_json(line))
            except ValidationError as exc:
                raise FormatError(f"{path}:{line_no}: invalid {model.__name__} row:\n{exc}") from exc
    return rows
