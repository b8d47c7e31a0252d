"""
Shared utilities: logging setup, image payload helpers and label matching.
"""

from __future__ import annotations

import base64
import logging
import re

import cv2
import numpy as np

from chronoscene.errors import FormatError

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# Depth beyond this renders black in intensity previews.
PREVIEW_MAX_DEPTH_M = 8.0


def setup_logging(verbosity: int = 0) -> None:
    """
    Configure root logging from a CLI verbosity count.

    0 -> WARNING, 1 -> INFO, 2 or more -> DEBUG.
    """
    if verbosity >= 2:
        level = logging.DEBUG
    elif verbosity == 1:
        level = logging.INFO
    else:
        level = logging.WARNING
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


def depth_to_intensity(depth: np.ndarray) -> np.ndarray:
    """Render a depth grid as an 8-bit image, near is bright and invalid is black."""
    valid = np.isfinite(depth) & (depth > 0)
    scaled = np.zeros(depth.shape, dtype=np.float64)
    scaled[valid] = 255.0 * (1.0 - np.clip(depth[valid] / PREVIEW_MAX_DEPTH_M, 0.0, 1.0))
    return np.round(scaled).astype(np.uint8)


def encode_png_base64(image: np.ndarray) -> str:
    """Encode an 8-bit grayscale image as base64 PNG."""
    ok, buffer = cv2.imencode(".png", image)
    if not ok:
        raise FormatError("PNG encoding failed")
    return base64.b64encode(buffer.tobytes()).decode("ascii")


def decode_png_base64(payload: str) -> np.ndarray:
    """Decode a base64 PNG into an 8-bit grayscale image."""
    try:
        raw = base64.b64decode(payload, validate=True)
    except ValueError as exc:
        raise FormatError(f"Invalid base64 image payload: {exc}") from exc
    image = cv2.imdecode(np.frombuffer(raw, dtype=np.uint8), cv2.IMREAD_GRAYSCALE)
    if image is None:
        raise FormatError("Image payload is not a decodable PNG")
    return image


def label_tokens(label: str) -> set[str]:
    return set(re.findall(r"[a-z0-9]+", label.lower()))


def label_overlap(a: str, b: str) -> float:
    """Token Jaccard overlap of two object labels, case-insensitive."""
    ta, tb = label_tokens(a), label_tokens(b)
    if not ta or not tb:
        return 0.0
    return len(ta & tb) / len(ta | tb)
