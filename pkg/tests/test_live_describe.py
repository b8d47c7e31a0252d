"""
Tests for the live_describe module.
"""

from unittest.mock import MagicMock

import httpx
import numpy as np
import pytest

from chronoscene.detectors import FrameView
from chronoscene.errors import ProviderError
from chronoscene.live_describe import DepthStatsDescriber, HttpDescriber, ScriptDescriber
from chronoscene.synth import render_frame


def _view(frame, location_id="lab", visit_index=0):
    return FrameView(frame, location_id, f"visit_{visit_index:02d}", visit_index)


def test_depth_stats_describer(make_frame):
    assert DepthStatsDescriber().describe(_view(make_frame(3.0))) == (
        "Open space ahead for about 10 feet; the nearest surface is 10 feet away."
    )
    assert DepthStatsDescriber().describe(_view(make_frame(0.0))) == "Open space all around, nothing within range."


def test_depth_stats_without_center_return(make_frame):
    depth = np.full((30, 40), 2.0, dtype=np.float32)
    depth[10:20, 13:26] = 0.0
    text = DepthStatsDescriber().describe(_view(make_frame(depth)))
    assert text == "Open space ahead; the nearest surface is 7 feet away."


def test_script_describer_names_objects(office_script):
    describer = ScriptDescriber(office_script)
    texts = set()
    for frame_index in range(0, office_script.frames_per_visit, 4):
        frame, _ = render_frame(office_script, 0, frame_index)
        texts.add(describer.describe(_view(frame, office_script.location_id)))
    assert any(t.startswith(("I see ", "You are very close to ")) for t in texts)
    labels = {o.label for o in office_script.state_at(0).values()}
    assert any(label in t for t in texts for label in labels)


def test_script_describer_falls_back_for_foreign_frames(office_script, make_frame):
    text = ScriptDescriber(office_script).describe(_view(make_frame(3.0), "elsewhere"))
    assert text.startswith("Open space ahead")


def test_http_describer(make_frame):
    client = MagicMock()
    client.post.return_value = httpx.Response(
        200, json={"text": "A hallway."}, request=httpx.Request("POST", "http://describe")
    )
    assert HttpDescriber("http://describe", client=client).describe(_view(make_frame())) == "A hallway."
    assert client.post.call_args.kwargs["json"]["kind"] == "describe"


@pytest.mark.parametrize(
    "response",
    [
        httpx.Response(500, json={}, request=httpx.Request("POST", "http://describe")),
        httpx.Response(200, json={"text": ""}, request=httpx.Request("POST", "http://describe")),
        httpx.Response(200, content=b"oops", request=httpx.Request("POST", "http://describe")),
    ],
    ids=["server-error", "empty-text", "not-json"],
)
def test_http_describer_failures(make_frame, response):
    client = MagicMock()
    client.post.return_value = response
    with pytest.raises(ProviderError):
        HttpDescriber("http://describe", client=client).describe(_view(make_frame()))
