"""
Tests for the retriever module.
"""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chronoscene.config import EngineConfig
from chronoscene.errors import UsageError
from chronoscene.esm import EpisodicSceneMemory
from chronoscene.geometry import Pose
from chronoscene.retriever import dbscan_temporal, mark_announced, select_reference


def _oracle_clusters(points, epsilon, min_size):
    """Brute-force DBSCAN on a line: core points, reachability, earliest-cluster border rule."""
    ordered = sorted(points)
    times = [t for t, _ in ordered]
    n = len(ordered)
    neighbours = [[j for j in range(n) if abs(times[i] - times[j]) <= epsilon] for i in range(n)]
    core = [len(neighbours[i]) >= min_size for i in range(n)]
    label = [None] * n
    cluster = 0
    for i in range(n):
        if not core[i] or label[i] is not None:
            continue
        stack = [i]
        label[i] = cluster
        while stack:
            p = stack.pop()
            if not core[p]:
                continue
            for q in neighbours[p]:
                if label[q] is None:
                    label[q] = cluster
                    stack.append(q)
        cluster += 1
    groups = {}
    for i, lab in enumerate(label):
        if lab is not None:
            groups.setdefault(lab, set()).add(ordered[i][1])
    return {frozenset(g) for g in groups.values()}


def test_dbscan_defaults_split_on_gaps():
    points = [(0.0, 1), (5.0, 2), (9.0, 3), (40.0, 4), (45.0, 5), (100.0, 6)]
    clusters = dbscan_temporal(points, 10.0, 2)
    assert [c.members for c in clusters] == [(1, 2, 3), (4, 5)]
    assert clusters[0].start == 0.0 and clusters[0].end == 9.0


def test_dbscan_epsilon_is_inclusive():
    assert [c.members for c in dbscan_temporal([(0.0, 1), (10.0, 2)], 10.0, 2)] == [(1, 2)]


def test_dbscan_validation_and_empty():
    assert dbscan_temporal([], 10.0, 2) == []
    with pytest.raises(UsageError):
        dbscan_temporal([(0.0, 1)], 0.0, 2)


timestamps = st.lists(st.integers(0, 200).map(float), min_size=0, max_size=20)


@settings(max_examples=300, deadline=None)
@given(times=timestamps, epsilon=st.sampled_from([2.0, 5.0, 10.0]), min_size=st.integers(1, 4))
def test_dbscan_matches_reachability_oracle(times, epsilon, min_size):
    points = [(t, i) for i, t in enumerate(times)]
    got = {frozenset(c.members) for c in dbscan_temporal(points, epsilon, min_size)}
    assert got == _oracle_clusters(points, epsilon, min_size)


def _memory_with_visit(make_frame, visits=1):
    esm = EpisodicSceneMemory("lab")
    for v in range(visits):
        start = 1000.0 * v
        esm.open_visit(f"v{v}", v, start)
        for i in range(4):
            esm.ingest_frame(make_frame(3.0, timestamp=float(i), frame_index=i), start + i)
        esm.close_visit(f"v{v}")
    return esm


def test_select_reference_picks_best_overlap(make_frame):
    esm = _memory_with_visit(make_frame)
    selection = select_reference(make_frame(3.0), esm, EngineConfig())
    assert selection is not None
    assert selection.visibility.s_overlap == pytest.approx(1.0)
    assert selection.record.record_id == 1
    assert set(selection.cluster.members) == {1, 2, 3, 4}
    assert selection.candidates == 4


def test_select_reference_none_without_candidates(make_frame):
    esm = _memory_with_visit(make_frame)
    far = Pose.from_rt(Pose.identity().rotation, [10.0, 0.0, 0.0])
    assert select_reference(make_frame(3.0, pose=far), esm, EngineConfig()) is None
    assert select_reference(make_frame(3.0), EpisodicSceneMemory("lab"), EngineConfig()) is None


def test_announced_cluster_is_skipped(make_frame):
    esm = _memory_with_visit(make_frame)
    config = EngineConfig()
    selection = select_reference(make_frame(3.0), esm, config)
    mark_announced(selection.cluster, esm)
    assert all(esm.get(i).announced for i in selection.cluster.members)
    assert select_reference(make_frame(3.0), esm, config) is None


def test_singleton_candidates_are_noise(make_frame):
    esm = EpisodicSceneMemory("lab")
    esm.open_visit("v0", 0, 0.0)
    esm.ingest_frame(make_frame(3.0), 0.0)
    esm.close_visit("v0")
    assert select_reference(make_frame(3.0), esm, EngineConfig()) is None
    assert select_reference(make_frame(3.0), esm, EngineConfig(n_c=1)) is not None
