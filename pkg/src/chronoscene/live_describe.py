"""
Live scene describers.

Candidate descriptions are produced here and passed through
``narration.filter_live`` before anything is spoken.
"""

from __future__ import annotations

import logging
from typing import Protocol, runtime_checkable

import httpx
import numpy as np
from pydantic import BaseModel, Field, ValidationError

from chronoscene.detectors import FrameView
from chronoscene.errors import ProviderError
from chronoscene.geometry import METERS_TO_FEET, spatial_phrase
from chronoscene.synth import PALETTE, SceneObject, SceneScript, render_view, visible_objects
from chronoscene.utils import encode_png_base64

logger = logging.getLogger(__name__)

CLOSE_UP_SHARE = 0.4
MAX_MENTIONED = 2


@runtime_checkable
class SceneDescriber(Protocol):
    def describe(self, view: FrameView) -> str: ...


def _article(label: str) -> str:
    return f"an {label}" if label[:1].lower() in "aeiou" else f"a {label}"


class DepthStatsDescriber:
    """Describes free space from depth alone."""

    def describe(self, view: FrameView) -> str:
        frame = view.frame
        valid = frame.valid_mask
        if not valid.any():
            return "Open space all around, nothing within range."
        nearest = float(frame.depth[valid].min()) * METERS_TO_FEET
        height, width = valid.shape
        center = frame.depth[height // 3 : 2 * height // 3, width // 3 : 2 * width // 3]
        ahead = center[np.isfinite(center) & (center > 0)]
        if ahead.size == 0:
            return f"Open space ahead; the nearest surface is {round(nearest)} feet away."
        clear = float(np.median(ahead)) * METERS_TO_FEET
        return f"Open space ahead for about {round(clear)} feet; the nearest surface is {round(nearest)} feet away."


class ScriptDescriber:
    """
    Names the most prominent scripted objects in view.

    Frames without provenance in the script fall back to ``DepthStatsDescriber``.
    """

    def __init__(self, script: SceneScript, *, close_up_share: float = CLOSE_UP_SHARE) -> None:
        self.script = script
        self.close_up_share = close_up_share
        self.fallback = DepthStatsDescriber()

    def describe(self, view: FrameView) -> str:
        if view.location_id != self.script.location_id or not 0 <= view.visit_index < self.script.visits:
            return self.fallback.describe(view)
        frame = view.frame
        rendered = render_view(self.script, view.visit_index, frame.pose, frame.intrinsics)
        visible = visible_objects(self.script, view.visit_index, rendered)
        if not visible:
            return self.fallback.describe(view)

        top, pixels = visible[0]
        valid_pixels = int((rendered.depth > 0).sum())
        if valid_pixels and pixels / valid_pixels > self.close_up_share:
            return self._close_up(top)

        parts = []
        for obj, _ in visible[:MAX_MENTIONED]:
            clock, _ = spatial_phrase(obj.bbox.center, frame.pose)
            parts.append(f"{_article(obj.label)} at your {clock} o'clock")
        return "I see " + " and ".join(parts) + "."

    def _close_up(self, obj: SceneObject) -> str:
        front = PALETTE[obj.front_appearance].name
        return f"You are very close to {_article(obj.label)}; its front is {front}."


class DescribeResponse(BaseModel):
    text: str = Field(min_length=1)


class HttpDescriber:
    """External describer using the same adapter wire shape as the detector."""

    def __init__(self, url: str, *, client: httpx.Client | None = None, timeout: float = 30.0) -> None:
        self.url = url
        self._client = client or httpx.Client(timeout=timeout)

    def describe(self, view: FrameView) -> str:
        try:
            response = self._client.post(self.url, json={"kind": "describe", "image": encode_png_base64(view.image)})
            response.raise_for_status()
            return DescribeResponse.model_validate(response.json()).text
        except (httpx.HTTPError, ValueError, ValidationError) as exc:
            raise ProviderError(f"Describe request to {self.url} failed: {exc}") from exc
