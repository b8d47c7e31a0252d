"""
Engine configuration.

Every threshold the engine uses lives on ``EngineConfig``. Defaults are the
published operating point; a TOML file of ``key = value`` lines overrides any of them.
"""

from __future__ import annotations

import os
import sys
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from chronoscene.errors import FormatError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

CONFIG_ENV_VAR = "CHRONOSCENE_CONFIG"

ConfidenceLevel = Literal["low", "med", "high"]


class EngineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    # Reference retrieval
    d_thres: float = Field(1.5, gt=0, description="Pose filter translation threshold (m).")
    theta_thres: float = Field(40.0, gt=0, le=180, description="Pose filter rotation threshold (deg).")
    overlap_min: float = Field(0.3, ge=0, le=1, description="Minimum bidirectional overlap.")
    epsilon: float = Field(10.0, gt=0, description="Temporal DBSCAN radius (s).")
    n_c: int = Field(2, ge=1, description="Temporal DBSCAN minimum cluster size.")
    cluster_order: Literal["newest", "oldest"] = "newest"
    max_overlap_points: int = Field(4096, gt=0)

    # Change filtering and lifting
    x_mask: float = Field(0.45, ge=0, le=1, description="Minimum visibility-mask coverage.")
    confidence_min: ConfidenceLevel = "med"
    area_min: float = Field(400.0, ge=0, description="Minimum box area, normalized units squared.")
    segmenter: Literal["box", "layer"] = "layer"
    segment_band_m: float = Field(0.4, gt=0)
    lift_min_points: int = Field(10, ge=1)
    lift_percentiles: tuple[float, float] = (5.0, 95.0)

    # Object association
    gamma: float = Field(0.08, gt=0, le=1, description="3D IoU association threshold.")
    y_sim: float = Field(0.7, gt=0, le=1, description="Embedding similarity threshold.")

    # Narration
    tau_visual: float = Field(0.85, ge=0, le=1)
    tau_text: float = Field(0.80, ge=0, le=1)
    buffer_n: int = Field(3, ge=1)
    staleness_s: float = Field(6.0, gt=0)
    pairing_window_s: float = Field(60.0, gt=0)
    relocation_label_match: bool = True
    words_per_second: float = Field(2.5, gt=0)

    # Scene memory
    fps: float = Field(1.0, gt=0)
    confidence_refine: float = Field(0.5, ge=0, le=1)
    esm_window_mode: Literal["last_k_visits", "duration"] = "last_k_visits"
    esm_window_k: int | None = Field(1, ge=1)
    esm_window_span_s: float | None = Field(None, gt=0)
    esm_max_width: int = Field(256, gt=0)
    esm_max_height: int = Field(192, gt=0)

    # Q&A
    qa_n: int = Field(3, ge=1)

    @model_validator(mode="after")
    def _check_window(self) -> EngineConfig:
        if self.esm_window_mode == "last_k_visits" and self.esm_window_k is None:
            raise ValueError("esm_window_k is required when esm_window_mode = 'last_k_visits'")
        if self.esm_window_mode == "duration" and self.esm_window_span_s is None:
            raise ValueError("esm_window_span_s is required when esm_window_mode = 'duration'")
        lo, hi = self.lift_percentiles
        if not 0 <= lo < hi <= 100:
            raise ValueError("lift_percentiles must satisfy 0 <= low < high <= 100")
        return self

    def with_overrides(self, **overrides: Any) -> EngineConfig:
        """Return a validated copy with some fields replaced."""
        return EngineConfig.model_validate({**self.model_dump(), **overrides})


def load_config(path: Path | None = None) -> EngineConfig:
    """
    Load configuration from a TOML file.

    Falls back to the file named by ``CHRONOSCENE_CONFIG`` when no path is given,
    and to the defaults when neither exists.
    """
    if path is None:
        env_path = os.getenv(CONFIG_ENV_VAR)
        if not env_path:
            return EngineConfig()
        path = Path(env_path)

    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")

    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise FormatError(f"{path}: invalid TOML: {exc}") from exc

    try:
        return EngineConfig.model_validate(data)
    except ValidationError as exc:
        raise FormatError(f"{path}: invalid configuration:\n{exc}") from exc
