"""
Camera geometry: pinhole intrinsics, rigid poses, depth frames, back-projection,
projection, bidirectional visibility overlap, 3D boxes and clock-direction phrasing.

Camera convention: +Z forward, x right, y down. Pixel centers sit at integer
coordinates, so the image domain of a W x H camera is [-0.5, W-0.5) x [-0.5, H-0.5).
All functions here are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import NamedTuple

import cv2
import numpy as np

from chronoscene.errors import UsageError

METERS_TO_FEET = 3.28084
MAX_OVERLAP_POINTS = 4096
DEFAULT_MIN_CONFIDENCE = 0.5
NORMALIZED_EXTENT = 1000

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise UsageError(f"Image size must be positive, got {self.width}x{self.height}")
        if not (self.fx > 0 and self.fy > 0):
            raise UsageError(f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise UsageError(
                f"Principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]], dtype=np.float64
        )

    def subsampled(self, stride: int) -> Intrinsics:
        """Intrinsics of the grid obtained by keeping every ``stride``-th pixel."""
        if stride == 1:
            return self
        return Intrinsics(
            fx=self.fx / stride,
            fy=self.fy / stride,
            cx=self.cx / stride,
            cy=self.cy / stride,
            width=len(range(0, self.width, stride)),
            height=len(range(0, self.height, stride)),
        )


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid camera-to-world transform stored as a 4x4 row-major matrix."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (4, 4) or not np.all(np.isfinite(m)):
            raise UsageError("Pose must be a finite 4x4 matrix")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise UsageError(f"Pose last row must be [0, 0, 0, 1], got {m[3].tolist()}")
        r = m[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=_ORTHO_TOL, rtol=0.0):
            raise UsageError("Pose rotation block is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise UsageError("Pose rotation block must have determinant +1")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(4))

    @classmethod
    def from_rt(cls, rotation: np.ndarray, translation: np.ndarray) -> Pose:
        m = np.eye(4)
        m[:3, :3] = rotation
        m[:3, 3] = translation
        return cls(m)

    @classmethod
    def look_at(
        cls,
        eye: np.ndarray | tuple[float, float, float],
        target: np.ndarray | tuple[float, float, float],
        up: tuple[float, float, float] = (0.0, 0.0, 1.0),
    ) -> Pose:
        """Camera at ``eye`` looking at ``target`` with world ``up`` pointing up in the image."""
        eye_v = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye_v
        norm = np.linalg.norm(forward)
        if norm == 0:
            raise UsageError("look_at target coincides with eye")
        forward /= norm
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-12:
            raise UsageError("look_at direction is parallel to up")
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        return cls.from_rt(np.column_stack([right, down, forward]), eye_v)

    @classmethod
    def from_yaw_pitch(
        cls, eye: np.ndarray | tuple[float, float, float], yaw_deg: float, pitch_deg: float = 0.0
    ) -> Pose:
        """Camera at ``eye`` heading ``yaw_deg`` (from world +x toward +y), tilted up by ``pitch_deg``."""
        yaw, pitch = math.radians(yaw_deg), math.radians(pitch_deg)
        forward = np.array(
            [math.cos(pitch) * math.cos(yaw), math.cos(pitch) * math.sin(yaw), math.sin(pitch)]
        )
        eye_v = np.asarray(eye, dtype=np.float64)
        return cls.look_at(eye_v, eye_v + forward)

    @classmethod
    def from_list(cls, values: list[float] | tuple[float, ...]) -> Pose:
        if len(values) != 16:
            raise UsageError(f"Pose needs 16 values, got {len(values)}")
        return cls(np.asarray(values, dtype=np.float64).reshape(4, 4))

    def to_list(self) -> list[float]:
        return [float(v) for v in self.matrix.reshape(-1)]

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        """Transform (N, 3) world points into this camera's frame."""
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def rotation_angle_to(self, other: Pose) -> float:
        """Geodesic angle in degrees between the two orientations."""
        relative = self.rotation @ other.rotation.T
        cos_angle = (np.trace(relative) - 1.0) / 2.0
        return math.degrees(math.acos(min(1.0, max(-1.0, cos_angle))))

    def distance_to(self, other: Pose) -> float:
        return float(np.linalg.norm(self.translation - other.translation))


@dataclass(frozen=True, eq=False)
class PointSet:
    """World points with the (row, col) pixel each came from."""

    points: np.ndarray
    pixels: np.ndarray

    def __len__(self) -> int:
        return int(self.points.shape[0])


@dataclass(frozen=True, eq=False)
class DepthFrame:
    depth: np.ndarray
    pose: Pose
    intrinsics: Intrinsics
    timestamp: float
    frame_index: int = 0
    confidence: np.ndarray | None = None
    intensity: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        shape = (self.intrinsics.height, self.intrinsics.width)
        depth = np.asarray(self.depth, dtype=np.float32)
        if depth.shape != shape:
            raise UsageError(f"Depth grid {depth.shape} does not match intrinsics {shape}")
        object.__setattr__(self, "depth", depth)
        if self.confidence is not None:
            conf = np.asarray(self.confidence, dtype=np.float32)
            if conf.shape != shape:
                raise UsageError(f"Confidence grid {conf.shape} does not match intrinsics {shape}")
            if np.any(conf < 0) or np.any(conf > 1):
                raise UsageError("Confidence values must lie in [0, 1]")
            object.__setattr__(self, "confidence", conf)
        if self.intensity is not None:
            img = np.asarray(self.intensity)
            if img.shape != shape or img.dtype != np.uint8:
                raise UsageError("Intensity must be a uint8 grid matching the depth grid")

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    @cached_property
    def valid_mask(self) -> np.ndarray:
        """Pixels with finite, positive depth."""
        with np.errstate(invalid="ignore"):
            return np.isfinite(self.depth) & (self.depth > 0)

    @cached_property
    def overlap_points(self) -> PointSet:
        """Stride-subsampled world points used for overlap scoring."""
        return back_project(self, max_points=MAX_OVERLAP_POINTS)

    def subsampled(self, stride: int) -> DepthFrame:
        if stride == 1:
            return self
        return replace(
            self,
            depth=self.depth[::stride, ::stride],
            intrinsics=self.intrinsics.subsampled(stride),
            confidence=None if self.confidence is None else self.confidence[::stride, ::stride],
            intensity=None if self.intensity is None else self.intensity[::stride, ::stride].copy(),
        )


@dataclass(frozen=True)
class Bbox2D:
    """Box in normalized integer coordinates, [ymin, xmin, ymax, xmax] in [0, 1000]."""

    ymin: int
    xmin: int
    ymax: int
    xmax: int

    def __post_init__(self) -> None:
        values = (self.ymin, self.xmin, self.ymax, self.xmax)
        if not all(0 <= v <= NORMALIZED_EXTENT for v in values):
            raise UsageError(f"Box coordinates must lie in [0, 1000], got {list(values)}")
        if not (self.ymin < self.ymax and self.xmin < self.xmax):
            raise UsageError(f"Box must satisfy ymin < ymax and xmin < xmax, got {list(values)}")

    @classmethod
    def from_list(cls, values: list[int] | tuple[int, ...]) -> Bbox2D:
        if len(values) != 4:
            raise UsageError(f"Box needs 4 values, got {len(values)}")
        return cls(*(int(v) for v in values))

    @classmethod
    def from_pixels(cls, row0: int, col0: int, row1: int, col1: int, width: int, height: int) -> Bbox2D:
        """Tightest normalized box enclosing pixel rows [row0, row1) and columns [col0, col1)."""
        return cls(
            ymin=math.floor(row0 * NORMALIZED_EXTENT / height),
            xmin=math.floor(col0 * NORMALIZED_EXTENT / width),
            ymax=min(NORMALIZED_EXTENT, math.ceil(row1 * NORMALIZED_EXTENT / height)),
            xmax=min(NORMALIZED_EXTENT, math.ceil(col1 * NORMALIZED_EXTENT / width)),
        )

    def to_list(self) -> list[int]:
        return [self.ymin, self.xmin, self.ymax, self.xmax]

    @property
    def area(self) -> int:
        return (self.ymax - self.ymin) * (self.xmax - self.xmin)

    def pixel_bounds(self, width: int, height: int) -> tuple[int, int, int, int]:
        """(row0, col0, row1, col1) half-open pixel bounds at the given resolution."""
        row0 = math.floor(self.ymin * height / NORMALIZED_EXTENT)
        col0 = math.floor(self.xmin * width / NORMALIZED_EXTENT)
        row1 = max(row0 + 1, math.ceil(self.ymax * height / NORMALIZED_EXTENT))
        col1 = max(col0 + 1, math.ceil(self.xmax * width / NORMALIZED_EXTENT))
        return row0, col0, min(row1, height), min(col1, width)


@dataclass(frozen=True)
class Bbox3D:
    """Axis-aligned world box in meters."""

    min_corner: tuple[float, float, float]
    max_corner: tuple[float, float, float]

    def __post_init__(self) -> None:
        lo = tuple(float(v) for v in self.min_corner)
        hi = tuple(float(v) for v in self.max_corner)
        if len(lo) != 3 or len(hi) != 3:
            raise UsageError("Box corners must be 3D")
        if not all(a < b for a, b in zip(lo, hi, strict=True)):
            raise UsageError(f"Box min corner {lo} must be below max corner {hi} on every axis")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    @classmethod
    def from_center_size(cls, center: tuple[float, float, float], size: tuple[float, float, float]) -> Bbox3D:
        return cls(
            tuple(c - s / 2 for c, s in zip(center, size, strict=True)),  # type: ignore[arg-type]
            tuple(c + s / 2 for c, s in zip(center, size, strict=True)),  # type: ignore[arg-type]
        )

    @classmethod
    def from_list(cls, values: list[float]) -> Bbox3D:
        if len(values) != 6:
            raise UsageError(f"3D box needs 6 values, got {len(values)}")
        return cls(tuple(values[:3]), tuple(values[3:]))  # type: ignore[arg-type]

    def to_list(self) -> list[float]:
        return [*self.min_corner, *self.max_corner]

    @property
    def center(self) -> tuple[float, float, float]:
        return tuple((a + b) / 2 for a, b in zip(self.min_corner, self.max_corner, strict=True))  # type: ignore[return-value]

    @property
    def size(self) -> tuple[float, float, float]:
        return tuple(b - a for a, b in zip(self.min_corner, self.max_corner, strict=True))  # type: ignore[return-value]

    @property
    def volume(self) -> float:
        sx, sy, sz = self.size
        return sx * sy * sz

    def corners(self) -> np.ndarray:
        lo, hi = self.min_corner, self.max_corner
        return np.array(
            [[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])],
            dtype=np.float64,
        )


@dataclass(frozen=True, eq=False)
class VisibilityMap:
    """
    Result of projecting a reference frame into the current frame and back.

    ``mask`` is at current-frame resolution and marks pixels hit by reference points;
    ``reference_mask`` is the mirror image at reference resolution.
    """

    mask: np.ndarray
    reference_mask: np.ndarray
    o_ref_to_cur: float
    o_cur_to_ref: float
    s_overlap: float


class SpatialPhrase(NamedTuple):
    clock_direction: int
    distance_feet: float


def back_project(
    frame: DepthFrame,
    *,
    max_points: int | None = None,
    mask: np.ndarray | None = None,
    min_confidence: float = DEFAULT_MIN_CONFIDENCE,
) -> PointSet:
    """
    Lift valid depth pixels to world points: pose * (depth * K^-1 * [u, v, 1]).

    Pixels with invalid depth, or confidence below ``min_confidence``, are skipped.
    ``max_points`` picks the smallest regular pixel stride keeping at most that many points.
    """
    valid = frame.valid_mask
    if frame.confidence is not None:
        valid = valid & (frame.confidence >= min_confidence)
    if mask is not None:
        valid = valid & mask

    stride = 1
    if max_points is not None:
        while int(valid[::stride, ::stride].sum()) > max_points:
            stride += 1

    strided = np.zeros_like(valid)
    strided[::stride, ::stride] = valid[::stride, ::stride]
    rows, cols = np.nonzero(strided)
    if rows.size == 0:
        return PointSet(np.empty((0, 3)), np.empty((0, 2), dtype=np.int64))

    k = frame.intrinsics
    z = frame.depth[rows, cols].astype(np.float64)
    cam = np.column_stack([(cols - k.cx) * z / k.fx, (rows - k.cy) * z / k.fy, z])
    return PointSet(frame.pose.camera_to_world(cam), np.column_stack([rows, cols]))


def project_points(
    points: np.ndarray, pose: Pose, intrinsics: Intrinsics
) -> tuple[np.ndarray, np.ndarray]:
    """
    Project (N, 3) world points.

    Returns (uv, in_domain): uv is (N, 2) as (u, v) floats, and in_domain marks
    points in front of the camera that land on the pixel grid.
    """
    cam = pose.world_to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = cam[:, 2]
    front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * cam[:, 0] / z + intrinsics.cx
        v = intrinsics.fy * cam[:, 1] / z + intrinsics.cy
    in_domain = (
        front
        & (u >= -0.5)
        & (u < intrinsics.width - 0.5)
        & (v >= -0.5)
        & (v < intrinsics.height - 0.5)
    )
    return np.column_stack([u, v]), in_domain


def project(point: np.ndarray | tuple[float, float, float], pose: Pose, intrinsics: Intrinsics) -> tuple[float, float] | None:
    """Pixel (u, v) of a world point, or None when it is behind the camera or off the grid."""
    uv, in_domain = project_points(np.asarray(point, dtype=np.float64), pose, intrinsics)
    if not in_domain[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1])


def _coverage(points: PointSet, target: DepthFrame) -> tuple[float, np.ndarray]:
    """Fraction of points landing on ``target``'s grid, plus the 3x3-splatted hit mask."""
    hit = np.zeros((target.height, target.width), dtype=np.uint8)
    if len(points) == 0:
        return 0.0, hit.astype(bool)
    uv, in_domain = project_points(points.points, target.pose, target.intrinsics)
    cols = np.clip(np.floor(uv[in_domain, 0] + 0.5).astype(np.int64), 0, target.width - 1)
    rows = np.clip(np.floor(uv[in_domain, 1] + 0.5).astype(np.int64), 0, target.height - 1)
    hit[rows, cols] = 1
    splatted = cv2.dilate(hit, np.ones((3, 3), dtype=np.uint8))
    return float(in_domain.sum()) / len(points), splatted.astype(bool)


def harmonic_mean(a: float, b: float) -> float:
    """2ab / (a + b), defined as 0 when both are 0."""
    if a + b == 0:
        return 0.0
    return 2.0 * a * b / (a + b)


def overlap_score(
    reference: DepthFrame, current: DepthFrame, *, max_points: int = MAX_OVERLAP_POINTS
) -> VisibilityMap:
    """Bidirectional visibility between a reference frame and the current frame."""
    if max_points == MAX_OVERLAP_POINTS:
        ref_points, cur_points = reference.overlap_points, current.overlap_points
    else:
        ref_points = back_project(reference, max_points=max_points)
        cur_points = back_project(current, max_points=max_points)

    if len(ref_points) == 0 or len(cur_points) == 0:
        return VisibilityMap(
            mask=np.zeros((current.height, current.width), dtype=bool),
            reference_mask=np.zeros((reference.height, reference.width), dtype=bool),
            o_ref_to_cur=0.0,
            o_cur_to_ref=0.0,
            s_overlap=0.0,
        )

    o_rc, mask = _coverage(ref_points, current)
    o_cr, reference_mask = _coverage(cur_points, reference)
    return VisibilityMap(
        mask=mask,
        reference_mask=reference_mask,
        o_ref_to_cur=o_rc,
        o_cur_to_ref=o_cr,
        s_overlap=harmonic_mean(o_rc, o_cr),
    )


def iou_3d(a: Bbox3D, b: Bbox3D) -> float:
    """Intersection over union of two axis-aligned boxes."""
    inter = 1.0
    for lo_a, hi_a, lo_b, hi_b in zip(a.min_corner, a.max_corner, b.min_corner, b.max_corner, strict=True):
        extent = min(hi_a, hi_b) - max(lo_a, lo_b)
        if extent <= 0:
            return 0.0
        inter *= extent
    union = a.volume + b.volume - inter
    return inter / union


def spatial_phrase(point: np.ndarray | tuple[float, float, float], observer: Pose) -> SpatialPhrase:
    """Clock direction (1-12) and distance in feet of a world point from the observer."""
    p = np.asarray(point, dtype=np.float64)
    x, _, z = observer.world_to_camera(p.reshape(1, 3))[0]
    distance = float(np.linalg.norm(p - observer.translation)) * METERS_TO_FEET
    if x == 0 and z == 0:
        return SpatialPhrase(12, distance)
    bearing = math.degrees(math.atan2(x, z))
    clock = math.floor(bearing / 30.0 + 0.5) % 12
    return SpatialPhrase(clock or 12, distance)


def refine_depth(frame: DepthFrame, threshold: float = DEFAULT_MIN_CONFIDENCE) -> DepthFrame:
    """Invalidate pixels whose confidence is below ``threshold`` and drop the confidence grid."""
    if frame.confidence is None:
        return frame
    depth = np.where(frame.confidence < threshold, np.float32(0.0), frame.depth)
    return replace(frame, depth=depth, confidence=None)
