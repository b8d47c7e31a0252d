"""
Object-Centric Temporal Memory: append-only chronological snapshots per tracked object.

Persisted under ``<root>/<location_id>/otm/`` as ``snapshots.jsonl`` plus
``embeddings.bin`` (u32 dimension, then dimension x f32 per snapshot in file order).
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np

from chronoscene.embeddings import Embedding, cosine
from chronoscene.errors import FormatError, UsageError
from chronoscene.frame_io import ChangeType
from chronoscene.geometry import Bbox3D, iou_3d

logger = logging.getLogger(__name__)

SNAPSHOTS_NAME = "snapshots.jsonl"
EMBEDDINGS_NAME = "embeddings.bin"
DIM_HEADER = struct.Struct("<I")


@dataclass(frozen=True, eq=False)
class ChangeSnapshot:
    status: ChangeType
    description: str
    embedding: Embedding
    box: Bbox3D
    timestamp: float
    visit_id: str
    source_frame: str
    reference_frame: str | None = None


@dataclass
class TrackedObject:
    object_id: int
    label: str
    snapshots: list[ChangeSnapshot] = field(default_factory=list)

    @property
    def latest(self) -> ChangeSnapshot:
        return self.snapshots[-1]


class ObjectChange(NamedTuple):
    object_id: int
    label: str
    snapshot: ChangeSnapshot


class Footprint(NamedTuple):
    object_count: int
    snapshot_count: int
    serialized_bytes: int


def _snapshot_line(object_id: int, label: str, snapshot: ChangeSnapshot) -> str:
    row = {
        "object_id": object_id,
        "label": label,
        "status": snapshot.status,
        "description": snapshot.description,
        "box": snapshot.box.to_list(),
        "timestamp": snapshot.timestamp,
        "visit_id": snapshot.visit_id,
        "source_frame": snapshot.source_frame,
        "reference_frame": snapshot.reference_frame,
    }
    return json.dumps(row, ensure_ascii=False) + "\n"


class ObjectTemporalMemory:
    """Tracked objects of one location."""

    def __init__(self, location_id: str, *, root: Path | None = None) -> None:
        self.location_id = location_id
        self.root = root
        self._objects: dict[int, TrackedObject] = {}
        self._order: list[tuple[int, int]] = []  # (object_id, snapshot index) in record order
        self._by_visit: dict[tuple[str, str], list[ObjectChange]] = {}
        self._dim = 0
        self._jsonl_bytes = 0
        if self.store_dir is not None:
            self.store_dir.mkdir(parents=True, exist_ok=True)
            snapshots = self.store_dir / SNAPSHOTS_NAME
            if not snapshots.exists():
                snapshots.write_text("", encoding="utf-8")
                (self.store_dir / EMBEDDINGS_NAME).write_bytes(DIM_HEADER.pack(0))

    @property
    def store_dir(self) -> Path | None:
        return None if self.root is None else self.root / self.location_id / "otm"

    # ------------------------------------------------------------------
    # Association and recording

    def associate(self, box: Bbox3D, embedding: Embedding, gamma: float, y: float) -> int | None:
        """
        Find the existing object a new observation belongs to.

        Candidates are objects whose latest box has IoU > gamma; among them the
        most similar latest embedding wins (lowest id on ties) if similarity > y.

        Args:
            box: World-frame box of the observation
            embedding: Visual embedding of the observation
            gamma: 3D IoU threshold in (0, 1]
            y: Embedding similarity threshold in (0, 1]

        Returns:
            The matching object id, or None when the observation is a new object

        Raises:
            UsageError: A threshold is out of range or the embedding dimension
                differs from the store's
        """
        if not (0 < gamma <= 1 and 0 < y <= 1):
            raise UsageError(f"Thresholds must lie in (0, 1], got gamma={gamma}, y={y}")
        if self._dim and embedding.dimension != self._dim:
            raise UsageError(f"Embedding dimension {embedding.dimension} differs from store dimension {self._dim}")
        best: tuple[float, int] | None = None
        for object_id in sorted(self._objects):
            latest = self._objects[object_id].latest
            if iou_3d(box, latest.box) <= gamma:
                continue
            similarity = cosine(embedding, latest.embedding)
            if best is None or similarity > best[0]:
                best = (similarity, object_id)
        if best is None or best[0] <= y:
            return None
        return best[1]

    def record(self, change: ChangeSnapshot, association: int | None, label: str = "object") -> int:
        """
        Append a snapshot to an existing object or start a new one.

        Args:
            change: The snapshot to append
            association: Object id from ``associate``, or None for a new object
            label: Label of a new object; ignored when appending

        Returns:
            The id of the object the snapshot was appended to
        """
        if self._dim and change.embedding.dimension != self._dim:
            raise UsageError(
                f"Embedding dimension {change.embedding.dimension} differs from store dimension {self._dim}"
            )
        if association is None:
            object_id = max(self._objects, default=0) + 1
            obj = TrackedObject(object_id, label)
            self._objects[object_id] = obj
        else:
            obj = self._objects.get(association)
            if obj is None:
                raise UsageError(f"Unknown object id {association}")
            if change.timestamp <= obj.latest.timestamp:
                raise UsageError(
                    f"Snapshot at {change.timestamp} is not after object {association}'s "
                    f"latest snapshot at {obj.latest.timestamp}"
                )
        self._append(obj, change)
        logger.debug("Recorded %s for object %d (%s)", change.status, obj.object_id, obj.label)
        return obj.object_id

    def _append(self, obj: TrackedObject, change: ChangeSnapshot, *, persist: bool = True) -> None:
        first = not self._order
        obj.snapshots.append(change)
        self._order.append((obj.object_id, len(obj.snapshots) - 1))
        entry = ObjectChange(obj.object_id, obj.label, change)
        self._by_visit.setdefault((change.visit_id, change.status), []).append(entry)
        self._dim = change.embedding.dimension
        line = _snapshot_line(obj.object_id, obj.label, change)
        self._jsonl_bytes += len(line.encode("utf-8"))
        if persist and self.store_dir is not None:
            with (self.store_dir / SNAPSHOTS_NAME).open("a", encoding="utf-8") as fh:
                fh.write(line)
            emb_path = self.store_dir / EMBEDDINGS_NAME
            if first:
                emb_path.write_bytes(DIM_HEADER.pack(self._dim))
            with emb_path.open("ab") as fh:
                fh.write(change.embedding.vector.astype("<f4").tobytes())

    # ------------------------------------------------------------------
    # Queries

    @property
    def objects(self) -> list[TrackedObject]:
        return [self._objects[i] for i in sorted(self._objects)]

    def get(self, object_id: int) -> TrackedObject:
        return self._objects[object_id]

    def __len__(self) -> int:
        return len(self._objects)

    def visit_changes(self, visit_id: str, status: str) -> list[ObjectChange]:
        """Snapshots of one status recorded during one visit, in record order."""
        return list(self._by_visit.get((visit_id, status), ()))

    def has_status(self, object_id: int, status: str, visit_id: str) -> bool:
        return any(c.object_id == object_id for c in self._by_visit.get((visit_id, status), ()))

    def recent_changes(self, limit: int | None = None, since: float | None = None) -> list[ObjectChange]:
        """Snapshots across all objects, newest first, optionally at or after ``since``."""
        changes = [
            ObjectChange(obj.object_id, obj.label, snap)
            for obj in self._objects.values()
            for snap in obj.snapshots
            if since is None or snap.timestamp >= since
        ]
        changes.sort(key=lambda c: (-c.snapshot.timestamp, c.object_id))
        return changes if limit is None else changes[:limit]

    def footprint(self) -> Footprint:
        snapshot_count = len(self._order)
        size = self._jsonl_bytes + DIM_HEADER.size + snapshot_count * self._dim * 4
        return Footprint(len(self._objects), snapshot_count, size)

    # ------------------------------------------------------------------
    # Persistence

    @classmethod
    def load(cls, root: Path, location_id: str) -> ObjectTemporalMemory:
        """Rebuild a persisted store; a missing store opens empty."""
        otm = cls(location_id, root=root)
        store = otm.store_dir
        assert store is not None
        lines = (store / SNAPSHOTS_NAME).read_text(encoding="utf-8").splitlines()
        raw = (store / EMBEDDINGS_NAME).read_bytes()
        if len(raw) < DIM_HEADER.size:
            raise FormatError(f"{store / EMBEDDINGS_NAME}: missing dimension header")
        (dim,) = DIM_HEADER.unpack(raw[: DIM_HEADER.size])
        vectors = np.frombuffer(raw, dtype="<f4", offset=DIM_HEADER.size)
        rows = [line for line in lines if line.strip()]
        if dim == 0 and rows or dim and vectors.size != dim * len(rows):
            raise FormatError(f"{store}: {len(rows)} snapshots do not match embeddings.bin")

        for position, line in enumerate(rows):
            try:
                row: dict[str, Any] = json.loads(line)
                snapshot = ChangeSnapshot(
                    status=row["status"],
                    description=row["description"],
                    embedding=Embedding.from_raw(vectors[position * dim : (position + 1) * dim]),
                    box=Bbox3D.from_list(row["box"]),
                    timestamp=float(row["timestamp"]),
                    visit_id=row["visit_id"],
                    source_frame=row["source_frame"],
                    reference_frame=row.get("reference_frame"),
                )
                object_id, label = int(row["object_id"]), str(row["label"])
            except (KeyError, ValueError, TypeError) as exc:
                raise FormatError(f"{store / SNAPSHOTS_NAME}:{position + 1}: {exc}") from exc
            obj = otm._objects.setdefault(object_id, TrackedObject(object_id, label))
            otm._append(obj, snapshot, persist=False)
        return otm
