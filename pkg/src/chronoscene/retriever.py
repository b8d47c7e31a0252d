"""
Hierarchical reference-frame retrieval.

pose filter -> bidirectional overlap -> temporal DBSCAN -> skip announced clusters
-> best-overlap member of the first surviving cluster.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, replace

import numpy as np
from sklearn.cluster import DBSCAN

from chronoscene.config import EngineConfig
from chronoscene.errors import UsageError
from chronoscene.esm import EpisodicSceneMemory, SceneRecord
from chronoscene.geometry import DepthFrame, VisibilityMap, overlap_score

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TemporalCluster:
    members: tuple[int, ...]
    start: float
    end: float
    announced: bool = False

    def __len__(self) -> int:
        return len(self.members)


@dataclass(frozen=True, eq=False)
class ReferenceSelection:
    record: SceneRecord
    visibility: VisibilityMap
    cluster: TemporalCluster
    candidates: int


def dbscan_temporal(
    points: Sequence[tuple[float, int]], epsilon: float, min_size: int
) -> list[TemporalCluster]:
    """
    One-dimensional DBSCAN over (timestamp, id) pairs.

    A point is core when at least ``min_size`` points, itself included, lie within
    ``epsilon`` (inclusive). Noise is dropped. A border point reachable from two
    clusters joins the earlier one. Clusters come back ordered by start time.
    """
    if epsilon <= 0 or min_size < 1:
        raise UsageError(f"epsilon must be > 0 and min_size >= 1, got {epsilon}, {min_size}")
    if not points:
        return []

    ordered = sorted(points, key=lambda p: (p[0], p[1]))
    times = np.array([t for t, _ in ordered], dtype=np.float64).reshape(-1, 1)
    labels = DBSCAN(eps=epsilon, min_samples=min_size, metric="manhattan").fit_predict(times)

    clusters = []
    for label in sorted(set(labels.tolist()) - {-1}):
        idx = np.flatnonzero(labels == label)
        members = tuple(ordered[i][1] for i in idx)
        clusters.append(TemporalCluster(members, float(times[idx[0], 0]), float(times[idx[-1], 0])))
    clusters.sort(key=lambda c: (c.start, c.members))
    return clusters


def select_reference(
    current: DepthFrame, esm: EpisodicSceneMemory, config: EngineConfig
) -> ReferenceSelection | None:
    """
    Pick the prior-visit frame to compare ``current`` against.

    Candidates come from the pose index, must reach ``overlap_min`` bidirectional
    overlap, and are grouped into temporal clusters. The first cluster not yet
    announced supplies its best-overlapping member.

    Args:
        current: The frame just captured
        esm: Scene memory holding the prior visits
        config: Engine thresholds (d_thres, theta_thres, overlap_min, epsilon, n_c)

    Returns:
        The chosen record with its visibility map and cluster, or None when no
        candidate qualifies
    """
    candidates = esm.query_by_pose(current.pose, config.d_thres, config.theta_thres)
    if not candidates:
        return None

    scored: dict[int, tuple[SceneRecord, VisibilityMap]] = {}
    for record in candidates:
        visibility = overlap_score(record.frame, current, max_points=config.max_overlap_points)
        if visibility.s_overlap >= config.overlap_min:
            scored[record.record_id] = (record, visibility)
    if not scored:
        logger.debug("No candidate reaches overlap %.2f", config.overlap_min)
        return None

    clusters = dbscan_temporal(
        [(record.timestamp, record_id) for record_id, (record, _) in scored.items()],
        config.epsilon,
        config.n_c,
    )
    if config.cluster_order == "newest":
        clusters.sort(key=lambda c: (c.end, c.start), reverse=True)

    for cluster in clusters:
        announced = all(scored[i][0].announced for i in cluster.members)
        if announced:
            continue
        best_id = max(cluster.members, key=lambda i: (scored[i][1].s_overlap, -i))
        record, visibility = scored[best_id]
        return ReferenceSelection(record, visibility, replace(cluster, announced=False), len(candidates))
    return None


def mark_announced(cluster: TemporalCluster, esm: EpisodicSceneMemory) -> None:
    """Flag every member record; later selections skip the cluster."""
    esm.mark_announced(cluster.members)
