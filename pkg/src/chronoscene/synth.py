"""
Deterministic synthetic locations and visits.

A location is a room (office, grocery) or open ground (outdoor) with support
fixtures along both sides of a walkway and object slots on top of them. Each
visit walks the walkway facing one side, turns in place, and walks back facing
the other side at 1 FPS. Changes between visits are scripted from the seed and
frames are ray-cast analytically against axis-aligned boxes.

World frame is z-up; the walkway runs along x at ``y = WALKWAY_Y``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr

from chronoscene.errors import UsageError
from chronoscene.frame_io import (
    CHANGE_TYPES,
    ChangeType,
    GroundTruthChange,
    VisitManifest,
    write_jsonl,
    write_visit,
)
from chronoscene.geometry import Bbox3D, DepthFrame, Intrinsics, Pose

logger = logging.getLogger(__name__)

SceneKind = Literal["office", "grocery", "outdoor"]
SCENE_KINDS: tuple[SceneKind, ...] = ("office", "grocery", "outdoor")

FRAME_WIDTH = 160
FRAME_HEIGHT = 120
FOCAL_PX = 125.0
CAMERA_HEIGHT_M = 1.4
CAMERA_PITCH_DEG = -20.0
MAX_RANGE_M = 8.0
FRAMES_PER_VISIT = 40
VISITS_PER_LOCATION = 11
VISIT_SPACING_S = 86400.0
BASE_TIME = 1_700_000_000.0

WALKWAY_Y = 3.0
ROOM_SIZE = (10.0, 6.0, 3.0)
WALK_START_X = 1.5
WALK_END_X = 8.5
LEG_FRAMES = 18
TURN_FRAMES = 4
POSITION_JITTER_M = 0.05
YAW_JITTER_DEG = 2.0
PITCH_JITTER_DEG = 1.0

MIN_OBJECT_PIXELS = 20
MIN_VISIBLE_FRAMES = 3
MIN_RELOCATION_M = 1.5
OCCUPANCY = 0.6
MIN_CHANGES_PER_LOCATION = 20
MIN_CHANGES_PER_TYPE = 2
MAX_SCHEDULE_DRAWS = 8

FLOOR_SHADE = 110
WALL_SHADE = 150
CEILING_SHADE = 185
GROUND_SHADE = 120
SKY_SHADE = 225
FIXTURE_SHADE = 95

NO_HIT_ID = -1
STATIC_ID = 0


class Appearance(BaseModel):
    """Two-tone face pattern: ``split`` is a horizontal band, vertical halves or a checker."""

    model_config = ConfigDict(frozen=True)

    name: str
    base: int
    accent: int
    split: Literal["h", "v", "c"]


PALETTE: tuple[Appearance, ...] = (
    Appearance(name="black with a white band", base=30, accent=235, split="h"),
    Appearance(name="white with a black band", base=235, accent=30, split="h"),
    Appearance(name="dark grey checkered", base=60, accent=170, split="c"),
    Appearance(name="light grey checkered", base=200, accent=90, split="c"),
    Appearance(name="black and white halves", base=25, accent=225, split="v"),
    Appearance(name="white and black halves", base=225, accent=25, split="v"),
    Appearance(name="grey with a dark band", base=180, accent=45, split="h"),
    Appearance(name="charcoal with a pale band", base=45, accent=200, split="h"),
    Appearance(name="silver and charcoal halves", base=205, accent=55, split="v"),
    Appearance(name="charcoal checkered", base=40, accent=150, split="c"),
)
_SPLIT_CODES = {"h": 0, "v": 1, "c": 2}
_PALETTE_BASE = np.array([a.base for a in PALETTE], dtype=np.float64)
_PALETTE_ACCENT = np.array([a.accent for a in PALETTE], dtype=np.float64)
_PALETTE_SPLIT = np.array([_SPLIT_CODES[a.split] for a in PALETTE], dtype=np.int64)

# label -> (size x, size y, size z) in meters
CATALOG: dict[SceneKind, dict[str, tuple[float, float, float]]] = {
    "office": {
        "printer": (0.45, 0.40, 0.30),
        "monitor": (0.50, 0.20, 0.40),
        "desk lamp": (0.25, 0.25, 0.45),
        "box of paper": (0.35, 0.30, 0.25),
        "potted plant": (0.30, 0.30, 0.50),
        "backpack": (0.35, 0.25, 0.45),
        "speaker": (0.25, 0.25, 0.35),
        "stack of binders": (0.35, 0.30, 0.30),
        "desk fan": (0.30, 0.25, 0.40),
        "coffee maker": (0.30, 0.30, 0.40),
    },
    "grocery": {
        "cereal box": (0.30, 0.15, 0.40),
        "soda crate": (0.45, 0.35, 0.25),
        "promo sign": (0.45, 0.10, 0.35),
        "bread basket": (0.45, 0.35, 0.22),
        "water pack": (0.40, 0.30, 0.28),
        "juice display": (0.35, 0.30, 0.40),
        "snack carton": (0.40, 0.30, 0.30),
        "price board": (0.50, 0.10, 0.40),
        "fruit crate": (0.45, 0.35, 0.25),
        "coffee tin stack": (0.30, 0.30, 0.35),
    },
    "outdoor": {
        "traffic cone": (0.40, 0.40, 0.70),
        "bench": (0.90, 0.45, 0.50),
        "recycle bin": (0.55, 0.55, 0.90),
        "road sign": (0.60, 0.12, 1.00),
        "planter": (0.60, 0.60, 0.50),
        "delivery box": (0.55, 0.45, 0.45),
        "scooter": (0.80, 0.30, 0.85),
        "trash can": (0.50, 0.50, 0.85),
        "barrier": (0.80, 0.25, 0.80),
        "bike rack": (0.80, 0.40, 0.75),
    },
}

# kind -> (support height, slot x positions, context phrase)
LAYOUT: dict[SceneKind, tuple[float, tuple[float, ...], str]] = {
    "office": (0.75, (2.5, 3.5, 4.5, 5.5, 6.5, 7.5), "on the desk"),
    "grocery": (0.90, (2.5, 3.5, 4.5, 5.5, 6.5, 7.5), "on the shelf"),
    "outdoor": (0.0, (2.5, 4.2, 5.8, 7.5), "on the sidewalk"),
}
SIDE_Y = {1: 5.0, -1: 1.0}
SUPPORT_DEPTH_M = 1.2
SUPPORT_X = (1.0, 9.0)


# ============================================================================
# Script model
# ============================================================================


class SceneObject(BaseModel):
    key: int
    label: str
    box: list[float] = Field(min_length=6, max_length=6)
    appearance: int = Field(0, ge=0, lt=len(PALETTE))
    front_appearance: int = Field(0, ge=0, lt=len(PALETTE))
    front_face: int = Field(2, ge=0, le=5)
    slot: int | None = None
    fixture: bool = False

    @property
    def bbox(self) -> Bbox3D:
        return Bbox3D.from_list(self.box)


class Slot(BaseModel):
    slot_id: int
    side: Literal[1, -1]
    x: float
    y: float
    z: float
    context: str


class ScriptChange(BaseModel):
    """One scripted difference between a visit and the visit before it."""

    visit_index: int = Field(ge=1)
    change_type: ChangeType
    object_key: int
    new_key: int | None = None
    slot: int
    to_slot: int | None = None
    appearance_before: int | None = None
    appearance_after: int | None = None


class SceneScript(BaseModel):
    seed: int
    location_id: str
    kind: SceneKind
    visits: int = Field(VISITS_PER_LOCATION, ge=1)
    frames_per_visit: int = Field(FRAMES_PER_VISIT, ge=1)
    width: int = FRAME_WIDTH
    height: int = FRAME_HEIGHT
    focal: float = FOCAL_PX
    base_time: float = BASE_TIME
    depth_noise_sigma: float = Field(0.0, ge=0)
    slots: list[Slot]
    fixtures: list[SceneObject] = Field(default_factory=list)
    objects: list[SceneObject] = Field(default_factory=list)
    introduced: list[SceneObject] = Field(default_factory=list)
    changes: list[ScriptChange] = Field(default_factory=list)

    _states: dict[int, dict[int, SceneObject]] = PrivateAttr(default_factory=dict)

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.focal, self.focal, self.width / 2, self.height / 2, self.width, self.height)

    @property
    def has_room(self) -> bool:
        return self.kind != "outdoor"

    def slot(self, slot_id: int) -> Slot:
        return self.slots[slot_id]

    def visit_id(self, visit_index: int) -> str:
        return f"visit_{visit_index:02d}"

    def start_time(self, visit_index: int) -> float:
        return self.base_time + visit_index * VISIT_SPACING_S

    def introduced_object(self, key: int) -> SceneObject:
        for obj in self.introduced:
            if obj.key == key:
                return obj
        raise UsageError(f"Script introduces no object {key}")

    def changes_at(self, visit_index: int) -> list[ScriptChange]:
        return [c for c in self.changes if c.visit_index == visit_index]

    def state_at(self, visit_index: int) -> dict[int, SceneObject]:
        """Objects present during a visit, keyed by object key."""
        self._check_visit(visit_index)
        if visit_index not in self._states:
            state = {o.key: o for o in self.objects}
            for change in self.changes:
                if change.visit_index > visit_index:
                    break
                state = apply_change(self, state, change)
            self._states[visit_index] = state
        return self._states[visit_index]

    def trajectory(self, visit_index: int) -> list[tuple[float, Pose]]:
        """(timestamp relative to visit start, camera pose) per frame."""
        self._check_visit(visit_index)
        rng = np.random.default_rng([self.seed, visit_index, 7])
        out = []
        for frame_index, (x, yaw) in enumerate(walk_plan(self.frames_per_visit)):
            jx, jy = rng.uniform(-POSITION_JITTER_M, POSITION_JITTER_M, size=2)
            dyaw = rng.uniform(-YAW_JITTER_DEG, YAW_JITTER_DEG)
            dpitch = rng.uniform(-PITCH_JITTER_DEG, PITCH_JITTER_DEG)
            eye = (x + jx, WALKWAY_Y + jy, CAMERA_HEIGHT_M)
            out.append((float(frame_index), Pose.from_yaw_pitch(eye, yaw + dyaw, CAMERA_PITCH_DEG + dpitch)))
        return out

    def _check_visit(self, visit_index: int) -> None:
        if not 0 <= visit_index < self.visits:
            raise UsageError(f"Visit {visit_index} outside script of {self.visits} visits")

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)

    @classmethod
    def from_json(cls, text: str) -> SceneScript:
        return cls.model_validate_json(text)


def walk_plan(frames: int) -> list[tuple[float, float]]:
    """(x, yaw) per frame: out facing +y, turn in place, back facing -y."""
    plan = []
    step = (WALK_END_X - WALK_START_X) / (LEG_FRAMES - 1)
    for i in range(frames):
        if i < LEG_FRAMES:
            plan.append((WALK_START_X + i * step, 90.0))
        elif i < LEG_FRAMES + TURN_FRAMES:
            turn = (i - LEG_FRAMES + 1) * 180.0 / (TURN_FRAMES + 1)
            plan.append((WALK_END_X, 90.0 + turn))
        else:
            j = min(i - LEG_FRAMES - TURN_FRAMES, LEG_FRAMES - 1)
            plan.append((WALK_END_X - j * step, 270.0))
    return plan


def object_box(slot: Slot, size: tuple[float, float, float]) -> list[float]:
    sx, sy, sz = size
    return [slot.x - sx / 2, slot.y - sy / 2, slot.z, slot.x + sx / 2, slot.y + sy / 2, slot.z + sz]


def front_face(side: int) -> int:
    # face index is axis * 2 + (0 for the min side, 1 for the max side)
    return 2 if side == 1 else 3


def apply_change(
    script: SceneScript, state: dict[int, SceneObject], change: ScriptChange
) -> dict[int, SceneObject]:
    """State after one scripted change; the input mapping is left untouched."""
    state = dict(state)
    if change.change_type == "appeared":
        state[change.object_key] = script.introduced_object(change.object_key)
        return state
    obj = state.get(change.object_key)
    if obj is None:
        raise UsageError(f"Change at visit {change.visit_index} references absent object {change.object_key}")
    if change.change_type == "removed":
        del state[obj.key]
    elif change.change_type == "content_changed":
        state[obj.key] = obj.model_copy(update={"front_appearance": change.appearance_after})
    elif change.change_type == "replaced":
        del state[obj.key]
        assert change.new_key is not None
        state[change.new_key] = script.introduced_object(change.new_key)
    elif change.change_type == "relocated":
        assert change.to_slot is not None
        slot = script.slot(change.to_slot)
        box = object_box(slot, obj.bbox.size)
        state[obj.key] = obj.model_copy(
            update={"box": box, "slot": slot.slot_id, "front_face": front_face(slot.side)}
        )
    return state


# ============================================================================
# Ray casting
# ============================================================================


@dataclass(frozen=True, eq=False)
class Rendered:
    """One rendered view: metric depth (0 = no return), object id buffer and intensity."""

    depth: np.ndarray
    ids: np.ndarray
    intensity: np.ndarray

    def object_pixels(self, key: int) -> np.ndarray:
        return self.ids == key

    def fully_visible(self, key: int, min_pixels: int = MIN_OBJECT_PIXELS) -> bool:
        """At least ``min_pixels`` pixels and none on the image border."""
        mask = self.ids == key
        if int(mask.sum()) < min_pixels:
            return False
        border = mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any()
        return not border


@lru_cache(maxsize=8)
def _pixel_rays(intrinsics: Intrinsics) -> np.ndarray:
    """Camera-frame ray per pixel with unit z, so the ray parameter equals depth."""
    rows, cols = np.mgrid[0 : intrinsics.height, 0 : intrinsics.width].astype(np.float64)
    rays = np.stack(
        [(cols - intrinsics.cx) / intrinsics.fx, (rows - intrinsics.cy) / intrinsics.fy, np.ones_like(rows)],
        axis=-1,
    ).reshape(-1, 3)
    rays.setflags(write=False)
    return rays


def _screen_rect(box: Bbox3D, pose: Pose, k: Intrinsics) -> tuple[int, int, int, int] | None:
    """Pixel rectangle (r0, r1, c0, c1) that can contain the box, or None."""
    cam = pose.world_to_camera(box.corners())
    z = cam[:, 2]
    if np.all(z <= 1e-6):
        return None
    if np.any(z <= 1e-6):
        return 0, k.height, 0, k.width
    u = k.fx * cam[:, 0] / z + k.cx
    v = k.fy * cam[:, 1] / z + k.cy
    c0, c1 = max(0, math.floor(u.min()) - 1), min(k.width, math.ceil(u.max()) + 2)
    r0, r1 = max(0, math.floor(v.min()) - 1), min(k.height, math.ceil(v.max()) + 2)
    if c0 >= c1 or r0 >= r1:
        return None
    return r0, r1, c0, c1


def _face_pattern(
    appearance: np.ndarray, frac: np.ndarray, axis: np.ndarray
) -> np.ndarray:
    """Intensity of hits on patterned faces; ``frac`` is the hit position inside the box per axis."""
    horizontal = np.where(axis == 0, frac[:, 1], frac[:, 0])
    vertical = np.where(axis == 2, frac[:, 1], frac[:, 2])
    split = _PALETTE_SPLIT[appearance]
    accent = np.where(
        split == 0,
        vertical > 0.5,
        np.where(split == 1, horizontal > 0.5, (horizontal > 0.5) ^ (vertical > 0.5)),
    )
    return np.where(accent, _PALETTE_ACCENT[appearance], _PALETTE_BASE[appearance])


def _cast_static(script: SceneScript, origin: np.ndarray, rays: np.ndarray, depth, ids, shade) -> None:
    if script.has_room:
        hi = np.asarray(ROOM_SIZE)
        with np.errstate(divide="ignore", invalid="ignore"):
            t_axis = np.where(rays > 0, (hi - origin) / rays, np.where(rays < 0, -origin / rays, np.inf))
        axis = np.argmin(t_axis, axis=1)
        t = t_axis[np.arange(len(rays)), axis]
        depth[:] = t
        ids[:] = STATIC_ID
        vertical = axis == 2
        shade[:] = np.where(
            vertical, np.where(rays[:, 2] < 0, FLOOR_SHADE, CEILING_SHADE), WALL_SHADE
        )
    else:
        down = rays[:, 2] < 0
        with np.errstate(divide="ignore"):
            t = -origin[2] / rays[down, 2]
        depth[down] = t
        ids[down] = STATIC_ID
        shade[down] = GROUND_SHADE


def _cast_box(
    obj: SceneObject,
    pose: Pose,
    k: Intrinsics,
    rays: np.ndarray,
    depth: np.ndarray,
    ids: np.ndarray,
    shade: np.ndarray,
) -> None:
    box = obj.bbox
    rect = _screen_rect(box, pose, k)
    if rect is None:
        return
    r0, r1, c0, c1 = rect
    idx = (np.arange(r0, r1)[:, None] * k.width + np.arange(c0, c1)[None, :]).reshape(-1)
    d = rays[idx]
    d = np.where(d == 0, 1e-12, d)
    origin = pose.translation
    lo, hi = np.asarray(box.min_corner), np.asarray(box.max_corner)
    t1 = (lo - origin) / d
    t2 = (hi - origin) / d
    t_near = np.minimum(t1, t2)
    t_in = t_near.max(axis=1)
    t_out = np.maximum(t1, t2).min(axis=1)
    hit = (t_in <= t_out) & (t_in > 1e-9) & (t_in < depth[idx])
    if not hit.any():
        return

    sel = idx[hit]
    t_hit = t_in[hit]
    depth[sel] = t_hit
    if obj.fixture:
        ids[sel] = STATIC_ID
        shade[sel] = FIXTURE_SHADE
        return
    ids[sel] = obj.key
    axis = t_near[hit].argmax(axis=1)
    d_hit = d[hit]
    entered_min = d_hit[np.arange(len(axis)), axis] > 0
    face = axis * 2 + np.where(entered_min, 0, 1)
    points = origin + d_hit * t_hit[:, None]
    frac = np.clip((points - lo) / (hi - lo), 0.0, 1.0)
    appearance = np.where(face == obj.front_face, obj.front_appearance, obj.appearance)
    shade[sel] = _face_pattern(appearance, frac, axis)


def render_view(
    script: SceneScript,
    visit_index: int,
    pose: Pose,
    intrinsics: Intrinsics | None = None,
    *,
    noise_seed: tuple[int, ...] | None = None,
) -> Rendered:
    """Ray-cast the scene state of a visit from ``pose``."""
    k = intrinsics or script.intrinsics
    rays = _pixel_rays(k) @ pose.rotation.T
    n = rays.shape[0]
    depth = np.full(n, np.inf)
    ids = np.full(n, NO_HIT_ID, dtype=np.int32)
    shade = np.full(n, SKY_SHADE, dtype=np.float64)

    _cast_static(script, pose.translation, rays, depth, ids, shade)
    state = script.state_at(visit_index)
    for obj in [*script.fixtures, *(state[key] for key in sorted(state))]:
        _cast_box(obj, pose, k, rays, depth, ids, shade)

    no_return = ~np.isfinite(depth) | (depth > MAX_RANGE_M)
    depth[no_return] = 0.0
    ids[no_return] = NO_HIT_ID
    if script.depth_noise_sigma > 0 and noise_seed is not None:
        rng = np.random.default_rng(list(noise_seed))
        valid = ~no_return
        depth[valid] = np.maximum(depth[valid] + rng.normal(0.0, script.depth_noise_sigma, int(valid.sum())), 1e-3)

    shape = (k.height, k.width)
    return Rendered(
        depth=depth.reshape(shape).astype(np.float32),
        ids=ids.reshape(shape),
        intensity=np.clip(np.round(shade), 0, 255).astype(np.uint8).reshape(shape),
    )


def render_frame(script: SceneScript, visit_index: int, frame_index: int) -> tuple[DepthFrame, Rendered]:
    timestamp, pose = script.trajectory(visit_index)[frame_index]
    rendered = render_view(script, visit_index, pose, noise_seed=(script.seed, visit_index, frame_index, 11))
    frame = DepthFrame(
        depth=rendered.depth,
        pose=pose,
        intrinsics=script.intrinsics,
        timestamp=timestamp,
        frame_index=frame_index,
        intensity=rendered.intensity,
    )
    return frame, rendered


# ============================================================================
# Visits and ground truth
# ============================================================================


def box_in_view(box: Bbox3D, pose: Pose, k: Intrinsics, margin: float = 2.0) -> bool:
    """All eight corners project in front of the camera, ``margin`` pixels inside the grid."""
    cam = pose.world_to_camera(box.corners())
    z = cam[:, 2]
    if np.any(z <= 0.1):
        return False
    u = k.fx * cam[:, 0] / z + k.cx
    v = k.fy * cam[:, 1] / z + k.cy
    return bool(
        np.all(u >= margin) and np.all(u <= k.width - 1 - margin)
        and np.all(v >= margin) and np.all(v <= k.height - 1 - margin)
    )


def _visible_count(box: Bbox3D, poses: list[Pose], k: Intrinsics) -> int:
    return sum(box_in_view(box, pose, k) for pose in poses)


def change_boxes(script: SceneScript, change: ScriptChange) -> tuple[SceneObject | None, SceneObject | None]:
    """(object before the change, object after the change); None on the absent side."""
    before = script.state_at(change.visit_index - 1).get(change.object_key)
    after_state = script.state_at(change.visit_index)
    if change.change_type == "replaced":
        assert change.new_key is not None
        return before, after_state[change.new_key]
    return before, after_state.get(change.object_key)


def ground_truth(script: SceneScript, visit_index: int) -> list[GroundTruthChange]:
    """Ground-truth rows for the changes introduced at ``visit_index``."""
    poses = [pose for _, pose in script.trajectory(visit_index)]
    k = script.intrinsics
    rows = []
    for change in script.changes_at(visit_index):
        before, after = change_boxes(script, change)
        present = after if after is not None else before
        assert present is not None
        slot = script.slot(change.slot)
        first = next((i for i, pose in enumerate(poses) if box_in_view(present.bbox, pose, k)), 0)
        row = GroundTruthChange(
            visit_index=visit_index,
            object_label=present.label,
            change_type=change.change_type,
            world_center=present.bbox.center,
            first_visible_frame=first,
            detail=_detail(change, before, after, slot.context),
        )
        if change.change_type == "replaced" and before is not None:
            row.previous_label = before.label
        if change.change_type == "relocated" and before is not None:
            row.previous_center = before.bbox.center
        rows.append(row)
    return rows


def _detail(change: ScriptChange, before: SceneObject | None, after: SceneObject | None, context: str) -> str:
    match change.change_type:
        case "appeared":
            return f"{after.label} appeared {context}" if after else ""
        case "removed":
            return f"{before.label} removed from {context.split(' ', 1)[1]}" if before else ""
        case "content_changed":
            old = PALETTE[change.appearance_before or 0].name
            new = PALETTE[change.appearance_after or 0].name
            return f"front changed from {old} to {new}"
        case "replaced":
            return f"{before.label} replaced by {after.label}" if before and after else ""
        case "relocated":
            assert before is not None and after is not None
            moved = math.dist(before.bbox.center, after.bbox.center)
            return f"{after.label} moved {moved:.1f} m {context}"
    return ""


def render_visit(
    script: SceneScript, visit_index: int
) -> tuple[VisitManifest, list[DepthFrame], list[GroundTruthChange]]:
    """Frames and ground truth of one visit."""
    frames, _ = _render_visit_frames(script, visit_index)
    return _manifest(script, visit_index), frames, ground_truth(script, visit_index)


def _render_visit_frames(script: SceneScript, visit_index: int) -> tuple[list[DepthFrame], list[Rendered]]:
    trajectory = script.trajectory(visit_index)
    if not trajectory:
        raise UsageError(f"Visit {visit_index} of {script.location_id} has an empty trajectory")
    pairs = [render_frame(script, visit_index, i) for i in range(len(trajectory))]
    return [f for f, _ in pairs], [r for _, r in pairs]


def _manifest(script: SceneScript, visit_index: int) -> VisitManifest:
    k = script.intrinsics
    return VisitManifest(
        location_id=script.location_id,
        visit_id=script.visit_id(visit_index),
        visit_index=visit_index,
        width=k.width,
        height=k.height,
        fx=k.fx,
        fy=k.fy,
        cx=k.cx,
        cy=k.cy,
        fps=1.0,
        start_time=script.start_time(visit_index),
    )


def visible_objects(script: SceneScript, visit_index: int, rendered: Rendered) -> list[tuple[SceneObject, int]]:
    """Scripted objects with their pixel counts in a view, most pixels first, then label."""
    state = script.state_at(visit_index)
    keys, counts = np.unique(rendered.ids[rendered.ids > STATIC_ID], return_counts=True)
    found = [(state[int(key)], int(count)) for key, count in zip(keys, counts, strict=True) if int(key) in state]
    return sorted(found, key=lambda item: (-item[1], item[0].label))


def validate_script(script: SceneScript, rendered: dict[int, list[Rendered]] | None = None) -> list[str]:
    """
    Check that every scripted change is observable.

    The object carrying the change must be fully visible (enough pixels, clear of
    the border) in at least ``MIN_VISIBLE_FRAMES`` rendered frames of the visit in
    which it is present, and its box must be in view in the other visit.
    Returns human-readable problems; an empty list means the script is usable.
    """
    rendered = dict(rendered or {})

    def views(visit_index: int) -> list[Rendered]:
        if visit_index not in rendered:
            rendered[visit_index] = _render_visit_frames(script, visit_index)[1]
        return rendered[visit_index]

    problems = []
    k = script.intrinsics
    for change in script.changes:
        before, after = change_boxes(script, change)
        sides = [(change.visit_index - 1, before), (change.visit_index, after)]
        for visit_index, obj in sides:
            if obj is None:
                continue
            visible = sum(view.fully_visible(obj.key) for view in views(visit_index))
            if visible < MIN_VISIBLE_FRAMES:
                problems.append(
                    f"{script.location_id} visit {change.visit_index}: {change.change_type} of "
                    f"{obj.label} fully visible in {visible} frames of visit {visit_index}"
                )
            other = change.visit_index if visit_index != change.visit_index else change.visit_index - 1
            poses = [pose for _, pose in script.trajectory(other)]
            if _visible_count(obj.bbox, poses, k) == 0:
                problems.append(
                    f"{script.location_id} visit {change.visit_index}: {obj.label} never in view in visit {other}"
                )
    return problems


# ============================================================================
# Script generation
# ============================================================================


class _ScriptBuilder:
    """Schedules changes visit by visit, keeping every change co-visible."""

    def __init__(self, kind: SceneKind, seed: int, visits: int, location_id: str, draw: int = 0) -> None:
        self.kind = kind
        entropy = [seed, SCENE_KINDS.index(kind)] + ([draw] if draw else [])
        self.rng = np.random.default_rng(entropy)
        self.catalog = CATALOG[kind]
        support_z, xs, context = LAYOUT[kind]
        slots = [
            Slot(slot_id=i, side=side, x=x, y=SIDE_Y[side], z=support_z, context=context)
            for i, (side, x) in enumerate((side, x) for side in (1, -1) for x in xs)
        ]
        fixtures = []
        if support_z > 0:
            for side in (1, -1):
                y = SIDE_Y[side]
                fixtures.append(
                    SceneObject(
                        key=STATIC_ID,
                        label="desk" if kind == "office" else "shelf",
                        box=[SUPPORT_X[0], y - SUPPORT_DEPTH_M / 2, 0.0, SUPPORT_X[1], y + SUPPORT_DEPTH_M / 2, support_z],
                        fixture=True,
                    )
                )
        self.script = SceneScript(
            seed=seed, location_id=location_id, kind=kind, visits=visits, slots=slots, fixtures=fixtures
        )
        self.next_key = 1
        self.poses = {v: [pose for _, pose in self.script.trajectory(v)] for v in range(visits)}

    def _new_object(self, slot: Slot, taken_labels: set[str], exclude: str | None = None) -> SceneObject:
        labels = sorted(self.catalog)
        free = [label for label in labels if label not in taken_labels and label != exclude]
        pool = free or [label for label in labels if label != exclude]
        label = pool[int(self.rng.integers(len(pool)))]
        appearance = int(self.rng.integers(len(PALETTE)))
        obj = SceneObject(
            key=self.next_key,
            label=label,
            box=object_box(slot, self.catalog[label]),
            appearance=appearance,
            front_appearance=appearance,
            front_face=front_face(slot.side),
            slot=slot.slot_id,
        )
        self.next_key += 1
        return obj

    def _observable(self, box: Bbox3D, visit_index: int) -> bool:
        k = self.script.intrinsics
        return all(
            _visible_count(box, self.poses[v], k) >= MIN_VISIBLE_FRAMES for v in (visit_index - 1, visit_index)
        )

    def populate(self) -> None:
        slots = self.script.slots
        count = round(OCCUPANCY * len(slots))
        chosen = sorted(int(i) for i in self.rng.choice(len(slots), size=count, replace=False))
        labels: set[str] = set()
        for slot_id in chosen:
            obj = self._new_object(slots[slot_id], labels)
            labels.add(obj.label)
            self.script.objects.append(obj)

    def schedule(self, per_visit: tuple[int, int] = (2, 3), floor: tuple[int, int] = (0, 0)) -> None:
        """
        Draw changes visit by visit, cycling through the change types.

        ``floor`` is (minimum total, minimum per type). Types still short of their
        minimum are tried first, and a visit takes extra changes when the total
        would otherwise fall short.
        """
        min_total, min_per_type = floor
        counts = dict.fromkeys(CHANGE_TYPES, 0)
        cursor = 0
        for visit_index in range(1, self.script.visits):
            state = dict(self.script.state_at(visit_index - 1))
            touched_slots: set[int] = set()
            touched_keys: set[int] = set()
            wanted = int(self.rng.integers(per_visit[0], per_visit[1] + 1))
            visits_left = self.script.visits - visit_index
            needed = math.ceil((min_total - len(self.script.changes)) / visits_left)
            wanted = max(wanted, min(needed, per_visit[1]))
            made = 0
            attempts = 0
            limit = len(CHANGE_TYPES) * (4 if min_total or min_per_type else 2)
            while made < wanted and attempts < limit:
                short = [t for t in CHANGE_TYPES if counts[t] < min_per_type]
                if short and attempts < len(short):
                    change_type = short[attempts]
                else:
                    change_type = CHANGE_TYPES[cursor % len(CHANGE_TYPES)]
                    cursor += 1
                attempts += 1
                change = self._make(change_type, visit_index, state, touched_slots, touched_keys)
                if change is None:
                    continue
                self.script.changes.append(change)
                counts[change.change_type] += 1
                state = apply_change(self.script, state, change)
                made += 1
            self.script._states.clear()

    def shortfall(self, floor: tuple[int, int]) -> list[str]:
        min_total, min_per_type = floor
        problems = []
        if len(self.script.changes) < min_total:
            problems.append(f"{len(self.script.changes)} changes, need {min_total}")
        for change_type in CHANGE_TYPES:
            count = sum(c.change_type == change_type for c in self.script.changes)
            if count < min_per_type:
                problems.append(f"{count} {change_type} changes, need {min_per_type}")
        return problems

    def _make(
        self,
        change_type: ChangeType,
        visit_index: int,
        state: dict[int, SceneObject],
        touched_slots: set[int],
        touched_keys: set[int],
    ) -> ScriptChange | None:
        occupied = {obj.slot: obj for obj in state.values() if obj.slot is not None}
        labels = {obj.label for obj in state.values()}
        empty = [s for s in self.script.slots if s.slot_id not in occupied and s.slot_id not in touched_slots]
        movable = [
            obj for slot_id, obj in sorted(occupied.items())
            if slot_id not in touched_slots and obj.key not in touched_keys
        ]
        movable = [obj for obj in movable if self._observable(obj.bbox, visit_index)]

        if change_type == "appeared":
            self.rng.shuffle(empty)  # type: ignore[arg-type]
            for slot in empty:
                obj = self._new_object(slot, labels)
                if self._observable(obj.bbox, visit_index):
                    self.script.introduced.append(obj)
                    touched_slots.add(slot.slot_id)
                    touched_keys.add(obj.key)
                    return ScriptChange(
                        visit_index=visit_index, change_type="appeared", object_key=obj.key, slot=slot.slot_id
                    )
                self.next_key -= 1
            return None

        if not movable:
            return None
        obj = movable[int(self.rng.integers(len(movable)))]
        assert obj.slot is not None
        slot = self.script.slot(obj.slot)

        if change_type == "removed":
            touched_slots.add(slot.slot_id)
            touched_keys.add(obj.key)
            return ScriptChange(visit_index=visit_index, change_type="removed", object_key=obj.key, slot=slot.slot_id)

        if change_type == "content_changed":
            choices = [i for i in range(len(PALETTE)) if i != obj.front_appearance]
            after = choices[int(self.rng.integers(len(choices)))]
            touched_slots.add(slot.slot_id)
            touched_keys.add(obj.key)
            return ScriptChange(
                visit_index=visit_index,
                change_type="content_changed",
                object_key=obj.key,
                slot=slot.slot_id,
                appearance_before=obj.front_appearance,
                appearance_after=after,
            )

        if change_type == "replaced":
            new = self._new_object(slot, labels, exclude=obj.label)
            if not self._observable(new.bbox, visit_index):
                self.next_key -= 1
                return None
            self.script.introduced.append(new)
            touched_slots.add(slot.slot_id)
            touched_keys.update((obj.key, new.key))
            return ScriptChange(
                visit_index=visit_index,
                change_type="replaced",
                object_key=obj.key,
                new_key=new.key,
                slot=slot.slot_id,
            )

        # relocated: same side, far enough to read as a move
        targets = [s for s in empty if s.side == slot.side and abs(s.x - slot.x) >= MIN_RELOCATION_M]
        targets = [s for s in targets if self._observable(Bbox3D.from_list(object_box(s, obj.bbox.size)), visit_index)]
        if not targets:
            return None
        target = targets[int(self.rng.integers(len(targets)))]
        touched_slots.update((slot.slot_id, target.slot_id))
        touched_keys.add(obj.key)
        return ScriptChange(
            visit_index=visit_index,
            change_type="relocated",
            object_key=obj.key,
            slot=slot.slot_id,
            to_slot=target.slot_id,
        )


def change_floor(visits: int) -> tuple[int, int]:
    """Minimum total changes and changes per type for a script of ``visits`` visits."""
    if visits < VISITS_PER_LOCATION:
        return (0, 0)
    return (MIN_CHANGES_PER_LOCATION, MIN_CHANGES_PER_TYPE)


def build_script(
    kind: SceneKind,
    seed: int,
    *,
    visits: int = VISITS_PER_LOCATION,
    location_id: str | None = None,
    changes_per_visit: tuple[int, int] = (2, 3),
) -> SceneScript:
    """
    Generate a location script with changes cycling through every change type.

    Full-length scripts carry at least ``MIN_CHANGES_PER_LOCATION`` changes and
    ``MIN_CHANGES_PER_TYPE`` of each type; the schedule is redrawn from a derived
    seed until it does, and ``UsageError`` is raised if no draw does.
    """
    floor = change_floor(visits)
    problems: list[str] = []
    for draw in range(MAX_SCHEDULE_DRAWS):
        builder = _ScriptBuilder(kind, seed, visits, location_id or kind, draw=draw)
        builder.populate()
        builder.schedule(changes_per_visit, floor)
        problems = builder.shortfall(floor)
        if not problems:
            script = builder.script
            logger.info("Scripted %d changes over %d visits for %s", len(script.changes), visits, script.location_id)
            return script
        logger.debug("Redrawing %s schedule (draw %d): %s", kind, draw, "; ".join(problems))
    raise UsageError(f"Could not schedule a {kind} script for seed {seed}: {'; '.join(problems)}")


def standard_benchmark(seed: int) -> list[SceneScript]:
    """Office, grocery and outdoor locations, eleven visits each."""
    return [build_script(kind, seed) for kind in SCENE_KINDS]


def write_location(script: SceneScript, out: Path, *, validate: bool = True) -> Path:
    """
    Write ``script.json``, ``gt.jsonl`` and one ``visit_%02d`` directory per visit under ``out/<location_id>``.

    With ``validate`` every scripted change is checked for observability before
    anything is written; a script with an unobservable change raises ``UsageError``.
    """
    rendered: dict[int, list[Rendered]] = {}
    frames: dict[int, list[DepthFrame]] = {}
    for visit_index in range(script.visits):
        frames[visit_index], rendered[visit_index] = _render_visit_frames(script, visit_index)
    if validate:
        problems = validate_script(script, rendered)
        if problems:
            raise UsageError(f"{script.location_id} has unobservable changes:\n" + "\n".join(problems))

    location_dir = out / script.location_id
    location_dir.mkdir(parents=True, exist_ok=True)
    (location_dir / "script.json").write_text(script.to_json() + "\n", encoding="utf-8")
    gt: list[GroundTruthChange] = []
    for visit_index in range(script.visits):
        write_visit(_manifest(script, visit_index), frames[visit_index], location_dir / script.visit_id(visit_index))
        gt.extend(ground_truth(script, visit_index))
    write_jsonl(location_dir / "gt.jsonl", gt)
    logger.info("Wrote %s: %d visits, %d changes", location_dir, script.visits, len(gt))
    return location_dir


def write_benchmark(seed: int, out: Path, *, validate: bool = True) -> list[SceneScript]:
    """Render the standard benchmark under ``out``, one directory per location."""
    scripts = standard_benchmark(seed)
    for script in scripts:
        write_location(script, out, validate=validate)
    return scripts


def load_script(location_dir: Path) -> SceneScript:
    """Read ``script.json`` from a location directory."""
    path = location_dir / "script.json"
    if not path.exists():
        raise FileNotFoundError(f"No script.json in {location_dir}")
    return SceneScript.from_json(path.read_text(encoding="utf-8"))
