"""
Visual and text embedding providers.

The engine only depends on the ``VisualEmbedder`` / ``TextEmbedder`` protocols.
Two deterministic providers ship in-process; ``HttpEmbeddingProvider`` talks to an
external model server using the ``{kind, payload}`` -> ``{vector}`` wire format.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Any, Protocol, runtime_checkable

import cv2
import httpx
import numpy as np
from pydantic import BaseModel, ValidationError

from chronoscene.errors import ProviderError, UsageError
from chronoscene.utils import encode_png_base64

logger = logging.getLogger(__name__)

GRID_SIZE = 8
ORIENTATION_BINS = 8
VISUAL_DIM = GRID_SIZE * GRID_SIZE + ORIENTATION_BINS
TEXT_DIM = 128

_GRADIENT_SIZE = 32
_NORM_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class Embedding:
    """An L2-normalized vector, or the all-zero vector for degenerate inputs."""

    vector: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if v.size == 0:
            raise UsageError("Embedding must have a positive dimension")
        norm = float(np.linalg.norm(v))
        if norm != 0.0 and abs(norm - 1.0) > _NORM_TOL:
            raise UsageError(f"Embedding is not normalized (norm={norm})")
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)

    @classmethod
    def from_raw(cls, values: Any) -> Embedding:
        """Normalize an arbitrary vector; all-zero stays zero."""
        v = np.asarray(values, dtype=np.float64).reshape(-1)
        norm = float(np.linalg.norm(v))
        return cls(v / norm if norm > 0 else v)

    @classmethod
    def zeros(cls, dimension: int) -> Embedding:
        return cls(np.zeros(dimension))

    @property
    def dimension(self) -> int:
        return int(self.vector.size)

    @property
    def is_zero(self) -> bool:
        return not np.any(self.vector)

    def to_list(self) -> list[float]:
        return [float(v) for v in self.vector]


@runtime_checkable
class VisualEmbedder(Protocol):
    def embed_visual(self, image: np.ndarray, mask: np.ndarray | None = None) -> Embedding: ...


@runtime_checkable
class TextEmbedder(Protocol):
    def embed_text(self, text: str) -> Embedding: ...


def cosine(a: Embedding, b: Embedding) -> float:
    """Cosine similarity; 0 when either side is the zero vector."""
    if a.dimension != b.dimension:
        raise UsageError(f"Embedding dimensions differ: {a.dimension} vs {b.dimension}")
    na, nb = float(np.linalg.norm(a.vector)), float(np.linalg.norm(b.vector))
    if na == 0.0 or nb == 0.0:
        return 0.0
    value = float(np.dot(a.vector, b.vector)) / (na * nb)
    return min(1.0, max(-1.0, value))


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


class GridGradientEmbedder:
    """
    Mean-centered 8x8 intensity grid plus an 8-bin gradient-orientation histogram.

    Pixels outside the mask take the masked mean before resampling, so the
    background does not leak into either half. Each half is normalized before
    the halves are concatenated and normalized again.
    """

    def embed_visual(self, image: np.ndarray, mask: np.ndarray | None = None) -> Embedding:
        img = np.asarray(image, dtype=np.float32)
        if img.ndim != 2 or img.size == 0:
            raise UsageError("Visual region must be a non-empty 2D grid")
        if mask is None:
            mask = np.ones(img.shape, dtype=bool)
        elif mask.shape != img.shape:
            raise UsageError(f"Mask {mask.shape} does not match image {img.shape}")
        if not mask.any():
            return Embedding.zeros(VISUAL_DIM)

        rows, cols = np.nonzero(mask)
        r0, r1, c0, c1 = rows.min(), rows.max() + 1, cols.min(), cols.max() + 1
        region = img[r0:r1, c0:c1].copy()
        region_mask = mask[r0:r1, c0:c1]
        region[~region_mask] = float(region[region_mask].mean())
        region /= 255.0

        grid = cv2.resize(region, (GRID_SIZE, GRID_SIZE), interpolation=cv2.INTER_AREA)
        grid = grid.reshape(-1).astype(np.float64)
        grid -= grid.mean()

        resampled = cv2.resize(region, (_GRADIENT_SIZE, _GRADIENT_SIZE), interpolation=cv2.INTER_LINEAR)
        gx = cv2.Sobel(resampled, cv2.CV_32F, 1, 0, ksize=3)
        gy = cv2.Sobel(resampled, cv2.CV_32F, 0, 1, ksize=3)
        magnitude, angle = cv2.cartToPolar(gx, gy, angleInDegrees=True)
        bins = (angle.reshape(-1) // (360.0 / ORIENTATION_BINS)).astype(np.int64) % ORIENTATION_BINS
        histogram = np.bincount(bins, weights=magnitude.reshape(-1).astype(np.float64), minlength=ORIENTATION_BINS)

        return Embedding.from_raw(np.concatenate([_unit(grid), _unit(histogram)]))


class TrigramEmbedder:
    """Hashed bag of lowercased, space-padded character trigrams (BLAKE2b)."""

    def __init__(self, dimension: int = TEXT_DIM) -> None:
        self.dimension = dimension

    def _bucket(self, trigram: str) -> int:
        digest = hashlib.blake2b(trigram.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.dimension

    def embed_text(self, text: str) -> Embedding:
        normalized = " ".join(text.lower().split())
        if not normalized:
            return Embedding.zeros(self.dimension)
        padded = f" {normalized} "
        counts = np.zeros(self.dimension)
        for i in range(len(padded) - 2):
            counts[self._bucket(padded[i : i + 3])] += 1.0
        return Embedding.from_raw(counts)


class EmbeddingResponse(BaseModel):
    vector: list[float]


class HttpEmbeddingProvider:
    """Adapter for an external embedding server."""

    def __init__(self, url: str, *, client: httpx.Client | None = None, timeout: float = 30.0) -> None:
        self.url = url
        self._client = client or httpx.Client(timeout=timeout)

    def _request(self, kind: str, payload: Any) -> Embedding:
        try:
            response = self._client.post(self.url, json={"kind": kind, "payload": payload})
            response.raise_for_status()
            body = EmbeddingResponse.model_validate(response.json())
        except (httpx.HTTPError, ValueError, ValidationError) as exc:
            raise ProviderError(f"Embedding request to {self.url} failed: {exc}") from exc
        if not body.vector:
            raise ProviderError(f"Embedding server at {self.url} returned an empty vector")
        return Embedding.from_raw(body.vector)

    def embed_visual(self, image: np.ndarray, mask: np.ndarray | None = None) -> Embedding:
        payload = {
            "image": encode_png_base64(np.asarray(image, dtype=np.uint8)),
            "mask": None if mask is None else encode_png_base64(mask.astype(np.uint8) * 255),
        }
        return self._request("visual", payload)

    def embed_text(self, text: str) -> Embedding:
        return self._request("text", text)
