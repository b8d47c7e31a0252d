"""
Episodic Scene Memory: per-location store of recent frames.

Records live in a pose-hashed index restricted to a context window (the last k
closed visits, or a time span). Records that fall out of the window are written
to a per-visit zstd archive and dropped from the index.

Store layout under ``<root>/<location_id>/esm/``::

    index.json                    visits and live record metadata
    live/<visit_id>/record_%06d.bin (+ .png intensity sidecar)
    archive/<visit_id>.zst        concatenated frame records
    archive/<visit_id>.json       record metadata for the archive
"""

from __future__ import annotations

import json
import logging
import math
import shutil
from collections import defaultdict
from collections.abc import Iterable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

import cv2
import numpy as np
import zstandard

from chronoscene.config import EngineConfig
from chronoscene.embeddings import Embedding, GridGradientEmbedder, VisualEmbedder
from chronoscene.errors import FormatError, UsageError
from chronoscene.frame_io import decode_frame, encode_frame, iter_records
from chronoscene.geometry import DepthFrame, Intrinsics, Pose, refine_depth
from chronoscene.utils import depth_to_intensity

logger = logging.getLogger(__name__)

INDEX_NAME = "index.json"
RECORD_PATTERN = "record_{:06d}.bin"
RECORD_SIDECAR = "record_{:06d}.png"
ZSTD_LEVEL = 10


@dataclass
class SceneRecord:
    record_id: int
    location_id: str
    visit_id: str
    visit_index: int
    frame: DepthFrame
    embedding: Embedding
    timestamp: float
    ingest_time: float
    announced: bool = False

    def mark_announced(self) -> None:
        self.announced = True

    @property
    def frame_ref(self) -> str:
        return f"{self.visit_id}/{self.frame.frame_index}"

    def metadata(self) -> dict[str, Any]:
        k = self.frame.intrinsics
        return {
            "record_id": self.record_id,
            "visit_id": self.visit_id,
            "visit_index": self.visit_index,
            "frame_index": self.frame.frame_index,
            "timestamp": self.timestamp,
            "ingest_time": self.ingest_time,
            "announced": self.announced,
            "intrinsics": [k.fx, k.fy, k.cx, k.cy, k.width, k.height],
            "embedding": self.embedding.to_list(),
        }


@dataclass(frozen=True)
class ContextWindow:
    mode: Literal["last_k_visits", "duration"]
    k: int | None = None
    span: float | None = None

    def __post_init__(self) -> None:
        if self.mode == "last_k_visits":
            if self.k is None or self.k < 1 or self.span is not None:
                raise UsageError("last_k_visits window needs a positive k and no span")
        elif self.mode == "duration":
            if self.span is None or self.span <= 0 or self.k is not None:
                raise UsageError("duration window needs a positive span and no k")
        else:
            raise UsageError(f"Unknown context window mode: {self.mode}")

    @classmethod
    def last_visits(cls, k: int = 1) -> ContextWindow:
        return cls("last_k_visits", k=k)

    @classmethod
    def duration(cls, span: float) -> ContextWindow:
        return cls("duration", span=span)

    @classmethod
    def from_config(cls, config: EngineConfig) -> ContextWindow:
        if config.esm_window_mode == "duration":
            return cls.duration(float(config.esm_window_span_s))  # type: ignore[arg-type]
        return cls.last_visits(int(config.esm_window_k))  # type: ignore[arg-type]


@dataclass
class VisitEntry:
    visit_id: str
    visit_index: int
    start_time: float
    status: Literal["open", "live", "archived"] = "open"
    record_ids: list[int] = field(default_factory=list)
    archived_records: int = 0

    def summary(self) -> dict[str, Any]:
        return {
            "visit_id": self.visit_id,
            "visit_index": self.visit_index,
            "start_time": self.start_time,
            "status": self.status,
            "live_records": len(self.record_ids),
            "archived_records": self.archived_records,
        }


def stride_for(width: int, height: int, max_width: int, max_height: int) -> int:
    """Smallest pixel stride bringing a grid within the size limits."""
    return max(1, math.ceil(width / max_width), math.ceil(height / max_height))


def frame_image(frame: DepthFrame) -> np.ndarray:
    """The frame's intensity sidecar, or its depth rendered to intensity."""
    return frame.intensity if frame.intensity is not None else depth_to_intensity(frame.depth)


class EpisodicSceneMemory:
    """Scene records of one location within a bounded context window."""

    def __init__(
        self,
        location_id: str,
        window: ContextWindow | None = None,
        *,
        root: Path | None = None,
        cell_size: float = 1.5,
        fps: float = 1.0,
        max_size: tuple[int, int] = (256, 192),
        confidence_threshold: float = 0.5,
        embedder: VisualEmbedder | None = None,
    ) -> None:
        self.location_id = location_id
        self.window = window or ContextWindow.last_visits(1)
        self.root = root
        self.cell_size = cell_size
        self.fps = fps
        self.max_size = max_size
        self.confidence_threshold = confidence_threshold
        self.embedder = embedder or GridGradientEmbedder()

        self._records: dict[int, SceneRecord] = {}
        self._grid: dict[tuple[int, int, int], list[int]] = defaultdict(list)
        self._visits: dict[str, VisitEntry] = {}
        self._open_visit: str | None = None
        self._buckets: set[int] = set()
        self._next_id = 1

    @classmethod
    def from_config(
        cls,
        location_id: str,
        config: EngineConfig,
        *,
        root: Path | None = None,
        embedder: VisualEmbedder | None = None,
    ) -> EpisodicSceneMemory:
        return cls(
            location_id,
            ContextWindow.from_config(config),
            root=root,
            cell_size=config.d_thres,
            fps=config.fps,
            max_size=(config.esm_max_width, config.esm_max_height),
            confidence_threshold=config.confidence_refine,
            embedder=embedder,
        )

    # ------------------------------------------------------------------
    # Paths

    @property
    def store_dir(self) -> Path | None:
        return None if self.root is None else self.root / self.location_id / "esm"

    def _live_dir(self, visit_id: str) -> Path:
        assert self.store_dir is not None
        return self.store_dir / "live" / visit_id

    def _archive_paths(self, visit_id: str) -> tuple[Path, Path]:
        assert self.store_dir is not None
        base = self.store_dir / "archive"
        return base / f"{visit_id}.zst", base / f"{visit_id}.json"

    # ------------------------------------------------------------------
    # Visits and ingestion

    @property
    def open_visit_id(self) -> str | None:
        return self._open_visit

    def open_visit(self, visit_id: str, visit_index: int, start_time: float) -> None:
        if self._open_visit is not None:
            raise UsageError(f"Visit {self._open_visit} is still open")
        if visit_id in self._visits:
            raise UsageError(f"Visit {visit_id} already exists at {self.location_id}")
        self._visits[visit_id] = VisitEntry(visit_id, visit_index, start_time)
        self._open_visit = visit_id
        self._buckets = set()
        logger.info("Opened visit %s at %s", visit_id, self.location_id)

    def ingest(self, record: SceneRecord) -> bool:
        """
        Append a record to the open visit.

        Returns False when the record falls in an already-filled 1/fps bucket.
        """
        if record.location_id != self.location_id:
            raise UsageError(f"Record for {record.location_id} ingested into {self.location_id}")
        if self._open_visit is None or record.visit_id != self._open_visit:
            raise UsageError(f"Visit {record.visit_id} is not open")
        if record.record_id in self._records:
            raise UsageError(f"Duplicate record id {record.record_id}")

        bucket = math.floor(record.frame.timestamp * self.fps)
        if bucket in self._buckets:
            logger.debug("Dropped frame %s (rate limit)", record.frame_ref)
            return False
        self._buckets.add(bucket)

        self._records[record.record_id] = record
        self._grid[self._cell(record.frame.pose.translation)].append(record.record_id)
        self._visits[record.visit_id].record_ids.append(record.record_id)
        self._next_id = max(self._next_id, record.record_id + 1)
        if self.store_dir is not None:
            self._write_record(record)
        return True

    def prepare_frame(self, frame: DepthFrame) -> DepthFrame:
        """Resize by stride to the size limits, then apply confidence refinement."""
        stride = stride_for(frame.width, frame.height, *self.max_size)
        return refine_depth(frame.subsampled(stride), self.confidence_threshold)

    def ingest_frame(self, frame: DepthFrame, timestamp: float) -> SceneRecord | None:
        """
        Resize, refine, embed and ingest a raw frame of the open visit.

        Args:
            frame: Frame as captured, timestamp relative to the visit start
            timestamp: Absolute capture time in seconds

        Returns:
            The stored record, or None when the rate limit dropped the frame

        Raises:
            UsageError: No visit is open
        """
        if self._open_visit is None:
            raise UsageError("No visit is open")
        entry = self._visits[self._open_visit]
        prepared = self.prepare_frame(frame)
        record = SceneRecord(
            record_id=self._next_id,
            location_id=self.location_id,
            visit_id=entry.visit_id,
            visit_index=entry.visit_index,
            frame=prepared,
            embedding=self.embedder.embed_visual(frame_image(prepared)),
            timestamp=timestamp,
            ingest_time=timestamp,
        )
        return record if self.ingest(record) else None

    def close_visit(self, visit_id: str) -> list[str]:
        """Close the open visit and archive whatever left the context window."""
        if self._open_visit != visit_id:
            raise UsageError(f"Visit {visit_id} is not open")
        self._visits[visit_id].status = "live"
        self._open_visit = None

        if self.window.mode == "last_k_visits":
            live = [v for v in self._visits.values() if v.status == "live"]
            expired = live[: max(0, len(live) - int(self.window.k))]  # type: ignore[arg-type]
            for entry in expired:
                self._archive(entry.visit_id, list(entry.record_ids))
            archived = [e.visit_id for e in expired]
        else:
            records = [self._records[i] for i in self._visits[visit_id].record_ids]
            if not records:
                return []
            horizon = max(r.timestamp for r in records) - float(self.window.span)  # type: ignore[arg-type]
            archived = []
            for entry in list(self._visits.values()):
                if entry.status != "live":
                    continue
                stale = [i for i in entry.record_ids if self._records[i].timestamp < horizon]
                if stale:
                    self._archive(entry.visit_id, stale)
                    archived.append(entry.visit_id)
        if archived:
            logger.info("Archived visits %s at %s", ", ".join(archived), self.location_id)
        return archived

    # ------------------------------------------------------------------
    # Queries

    def _cell(self, translation: np.ndarray) -> tuple[int, int, int]:
        return tuple(int(math.floor(c / self.cell_size)) for c in translation)  # type: ignore[return-value]

    def queryable(self) -> list[SceneRecord]:
        """Records inside the context window, excluding the open visit."""
        return [r for r in self._records.values() if r.visit_id != self._open_visit]

    def query_by_pose(self, pose: Pose, d_thres: float, theta_thres: float) -> list[SceneRecord]:
        """Records within ``d_thres`` meters and ``theta_thres`` degrees of ``pose``."""
        reach = max(1, math.ceil(d_thres / self.cell_size))
        cx, cy, cz = self._cell(pose.translation)
        found: list[SceneRecord] = []
        for dx in range(-reach, reach + 1):
            for dy in range(-reach, reach + 1):
                for dz in range(-reach, reach + 1):
                    for record_id in self._grid.get((cx + dx, cy + dy, cz + dz), ()):
                        record = self._records[record_id]
                        if record.visit_id == self._open_visit:
                            continue
                        if record.frame.pose.distance_to(pose) > d_thres:
                            continue
                        if record.frame.pose.rotation_angle_to(pose) > theta_thres:
                            continue
                        found.append(record)
        return sorted(found, key=lambda r: r.record_id)

    def recent_frames(self, n: int) -> list[SceneRecord]:
        """Up to ``n`` live records, newest first."""
        ordered = sorted(self._records.values(), key=lambda r: (r.timestamp, r.record_id), reverse=True)
        return ordered[:n]

    def get(self, record_id: int) -> SceneRecord:
        return self._records[record_id]

    def __len__(self) -> int:
        return len(self._records)

    def mark_announced(self, record_ids: Iterable[int]) -> None:
        for record_id in record_ids:
            record = self._records.get(record_id)
            if record is not None:
                record.mark_announced()

    # ------------------------------------------------------------------
    # Visit management

    def visits(self) -> list[VisitEntry]:
        return list(self._visits.values())

    def rename_visit(self, old: str, new: str) -> None:
        if old not in self._visits:
            raise UsageError(f"Unknown visit: {old}")
        if new in self._visits:
            raise UsageError(f"Visit {new} already exists")
        entry = self._visits.pop(old)
        entry.visit_id = new
        self._visits[new] = entry
        for record_id in entry.record_ids:
            self._records[record_id].visit_id = new
        if self._open_visit == old:
            self._open_visit = new
        if self.store_dir is not None:
            if self._live_dir(old).exists():
                self._live_dir(old).rename(self._live_dir(new))
            for src, dst in zip(self._archive_paths(old), self._archive_paths(new), strict=True):
                if src.exists():
                    src.rename(dst)
        logger.info("Renamed visit %s to %s", old, new)

    def delete_visit(self, visit_id: str) -> None:
        entry = self._visits.get(visit_id)
        if entry is None:
            raise UsageError(f"Unknown visit: {visit_id}")
        if self._open_visit == visit_id:
            raise UsageError(f"Visit {visit_id} is open")
        self._drop_records(entry.record_ids)
        del self._visits[visit_id]
        if self.store_dir is not None:
            shutil.rmtree(self._live_dir(visit_id), ignore_errors=True)
            for path in self._archive_paths(visit_id):
                path.unlink(missing_ok=True)
        logger.info("Deleted visit %s", visit_id)

    def restore_visit(self, visit_id: str) -> int:
        """Bring an archived visit back into the live index; returns records restored."""
        entry = self._visits.get(visit_id)
        if entry is None:
            raise UsageError(f"Unknown visit: {visit_id}")
        if self.store_dir is None:
            raise UsageError("Restoring needs an on-disk store")
        records = read_archive(self.store_dir, visit_id, self.location_id)
        for record in records:
            if record.record_id in self._records:
                continue
            self._records[record.record_id] = record
            self._grid[self._cell(record.frame.pose.translation)].append(record.record_id)
            entry.record_ids.append(record.record_id)
            self._write_record(record)
        entry.record_ids.sort()
        entry.status = "live"
        entry.archived_records = 0
        for path in self._archive_paths(visit_id):
            path.unlink(missing_ok=True)
        logger.info("Restored %d records of visit %s", len(records), visit_id)
        return len(records)

    # ------------------------------------------------------------------
    # Archival and persistence

    def _drop_records(self, record_ids: Iterable[int]) -> None:
        for record_id in list(record_ids):
            record = self._records.pop(record_id, None)
            if record is None:
                continue
            cell = self._grid.get(self._cell(record.frame.pose.translation))
            if cell is not None and record_id in cell:
                cell.remove(record_id)

    def _archive(self, visit_id: str, record_ids: list[int]) -> None:
        entry = self._visits[visit_id]
        records = [self._records[i] for i in record_ids]
        if self.store_dir is not None and records:
            blob_path, meta_path = self._archive_paths(visit_id)
            blob_path.parent.mkdir(parents=True, exist_ok=True)
            existing: list[dict[str, Any]] = []
            raw = b""
            if blob_path.exists():
                raw = zstandard.ZstdDecompressor().decompress(blob_path.read_bytes())
                existing = json.loads(meta_path.read_text(encoding="utf-8"))["records"]
            raw += b"".join(encode_frame(r.frame) for r in records)
            blob_path.write_bytes(zstandard.ZstdCompressor(level=ZSTD_LEVEL).compress(raw))
            meta = {
                "location_id": self.location_id,
                "visit_id": visit_id,
                "records": existing + [r.metadata() for r in records],
            }
            meta_path.write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
            for record in records:
                self._record_path(record).unlink(missing_ok=True)
                self._record_path(record).with_suffix(".png").unlink(missing_ok=True)

        self._drop_records(record_ids)
        dropped = set(record_ids)
        entry.record_ids = [i for i in entry.record_ids if i not in dropped]
        entry.archived_records += len(records)
        if not entry.record_ids:
            entry.status = "archived"

    def _record_path(self, record: SceneRecord) -> Path:
        return self._live_dir(record.visit_id) / RECORD_PATTERN.format(record.record_id)

    def _write_record(self, record: SceneRecord) -> None:
        path = self._record_path(record)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_frame(record.frame))
        if record.frame.intensity is not None:
            cv2.imwrite(str(path.with_suffix(".png")), record.frame.intensity)

    def save(self) -> None:
        """Write index.json; record files are written as they are ingested."""
        if self.store_dir is None:
            return
        self.store_dir.mkdir(parents=True, exist_ok=True)
        index = {
            "location_id": self.location_id,
            "window": {"mode": self.window.mode, "k": self.window.k, "span": self.window.span},
            "next_id": self._next_id,
            "visits": [
                {
                    "visit_id": v.visit_id,
                    "visit_index": v.visit_index,
                    "start_time": v.start_time,
                    "status": v.status,
                    "archived_records": v.archived_records,
                }
                for v in self._visits.values()
            ],
            "records": [r.metadata() for r in sorted(self._records.values(), key=lambda r: r.record_id)],
        }
        (self.store_dir / INDEX_NAME).write_text(json.dumps(index, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(
        cls,
        root: Path,
        location_id: str,
        *,
        config: EngineConfig | None = None,
        embedder: VisualEmbedder | None = None,
    ) -> EpisodicSceneMemory:
        """Reopen a persisted store. A missing store opens empty."""
        esm = cls.from_config(location_id, config or EngineConfig(), root=root, embedder=embedder)
        index_path = esm.store_dir / INDEX_NAME  # type: ignore[operator]
        if not index_path.exists():
            return esm
        try:
            index = json.loads(index_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{index_path}: invalid JSON: {exc}") from exc

        try:
            esm._next_id = int(index["next_id"])
            for v in index["visits"]:
                status = "live" if v["status"] == "open" else v["status"]
                esm._visits[v["visit_id"]] = VisitEntry(
                    v["visit_id"], v["visit_index"], v["start_time"], status, [], v["archived_records"]
                )
            metas = list(index["records"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{index_path}: malformed index: {exc!r}") from exc
        for meta in metas:
            path = esm._live_dir(meta["visit_id"]) / RECORD_PATTERN.format(meta["record_id"])
            record = _record_from_metadata(meta, path.read_bytes(), location_id, str(path))
            sidecar = path.with_suffix(".png")
            if sidecar.exists():
                record.frame = _with_intensity(record.frame, cv2.imread(str(sidecar), cv2.IMREAD_GRAYSCALE))
            esm._records[record.record_id] = record
            esm._grid[esm._cell(record.frame.pose.translation)].append(record.record_id)
            esm._visits[record.visit_id].record_ids.append(record.record_id)
        return esm


def _with_intensity(frame: DepthFrame, image: np.ndarray | None) -> DepthFrame:
    if image is None or image.shape != frame.depth.shape:
        return frame
    return DepthFrame(
        depth=frame.depth,
        pose=frame.pose,
        intrinsics=frame.intrinsics,
        timestamp=frame.timestamp,
        frame_index=frame.frame_index,
        confidence=frame.confidence,
        intensity=image,
    )


def _record_from_metadata(meta: dict[str, Any], data: bytes, location_id: str, source: str) -> SceneRecord:
    fx, fy, cx, cy, width, height = meta["intrinsics"]
    frame = decode_frame(
        data,
        frame_index=int(meta["frame_index"]),
        intrinsics=Intrinsics(fx, fy, cx, cy, int(width), int(height)),
        source=source,
    )
    return SceneRecord(
        record_id=int(meta["record_id"]),
        location_id=location_id,
        visit_id=meta["visit_id"],
        visit_index=int(meta["visit_index"]),
        frame=frame,
        embedding=Embedding(np.asarray(meta["embedding"], dtype=np.float64)),
        timestamp=float(meta["timestamp"]),
        ingest_time=float(meta["ingest_time"]),
        announced=bool(meta["announced"]),
    )


def read_archive(store_dir: Path, visit_id: str, location_id: str) -> list[SceneRecord]:
    """Decode the archived records of one visit."""
    blob_path = store_dir / "archive" / f"{visit_id}.zst"
    meta_path = store_dir / "archive" / f"{visit_id}.json"
    if not blob_path.exists() or not meta_path.exists():
        raise FileNotFoundError(f"No archive for visit {visit_id} in {store_dir}")
    try:
        raw = zstandard.ZstdDecompressor().decompress(blob_path.read_bytes())
    except zstandard.ZstdError as exc:
        raise FormatError(f"{blob_path}: corrupt archive: {exc}") from exc
    metas = json.loads(meta_path.read_text(encoding="utf-8"))["records"]
    blobs = list(iter_records(raw, source=str(blob_path)))
    if len(blobs) != len(metas):
        raise FormatError(f"{blob_path}: {len(blobs)} records but {len(metas)} metadata entries")
    return [
        _record_from_metadata({**meta, "visit_id": visit_id}, blob, location_id, str(blob_path))
        for meta, blob in zip(metas, blobs, strict=True)
    ]
