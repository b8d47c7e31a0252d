"""
Evaluation and extended-use benchmarking.

``match`` scores change predictions against scripted ground truth without a
language-model judge: a prediction counts when its change type, world position
and label agree with a ground-truth row of the same visit. ``bench_extended``
replays a location many times over and records per-frame latency and memory
footprint.
"""

from __future__ import annotations

import csv
import logging
import math
import statistics
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, Field
from scipy import stats

from chronoscene.config import EngineConfig
from chronoscene.detectors import OracleDetector
from chronoscene.frame_io import (
    CHANGE_TYPES,
    ChangePrediction,
    GroundTruthChange,
    list_visit_dirs,
    read_jsonl,
    read_visit,
)
from chronoscene.geometry import Pose, spatial_phrase
from chronoscene.session import LocationSession
from chronoscene.synth import VISIT_SPACING_S, load_script
from chronoscene.utils import label_overlap

logger = logging.getLogger(__name__)

LATENCY_FIELDS = (
    "visit",
    "visit_id",
    "frame",
    "frame_queuing",
    "reference_matching",
    "detector_inference",
    "post_processing",
    "total",
)
FOOTPRINT_FIELDS = ("visit", "visit_id", "objects", "snapshots", "bytes", "esm_records")
WINDOW_VISITS = 11


class MatchTolerances(BaseModel):
    distance_m: float = Field(0.5, gt=0)
    label_overlap: float = Field(0.5, gt=0, le=1)


class CategoryStats(BaseModel):
    tp: int = 0
    fp: int = 0
    fn: int = 0
    repetitive: int = 0
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0


class MatchRecord(BaseModel):
    gt_index: int
    prediction_indices: list[int]
    clock_error: float
    distance_error: float


class EvalReport(BaseModel):
    tp: int
    fp: int
    fn: int
    repetitive: int
    precision: float
    recall: float
    f1: float
    clock_error_mean: float
    clock_error_sd: float
    distance_error_mean: float
    distance_error_sd: float
    per_category: dict[str, CategoryStats]
    distribution: dict[str, float]
    matches: list[MatchRecord] = Field(default_factory=list)


def ratios(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Precision, recall and F1 with zero for empty denominators."""
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def clock_difference(a: int, b: int) -> int:
    diff = abs(a - b) % 12
    return min(diff, 12 - diff)


def canonical_order(predictions: Sequence[ChangePrediction]) -> list[int]:
    """Prediction indices in a content-defined order, independent of file order."""
    return sorted(
        range(len(predictions)),
        key=lambda i: (predictions[i].timestamp, predictions[i].visit_index, predictions[i].model_dump_json()),
    )


@dataclass
class _Matcher:
    predictions: Sequence[ChangePrediction]
    truth: Sequence[GroundTruthChange]
    tol: MatchTolerances

    def __post_init__(self) -> None:
        self.order = canonical_order(self.predictions)
        self.gt_match: dict[int, list[int]] = {}
        self.used: set[int] = set()

    def _near(self, a: Sequence[float], b: Sequence[float] | None) -> float | None:
        if b is None:
            return None
        distance = math.dist(a, b)
        return distance if distance <= self.tol.distance_m else None

    def _label(self, a: str, b: str | None) -> bool:
        return b is not None and label_overlap(a, b) >= self.tol.label_overlap

    def exact(self, pred: ChangePrediction, gt: GroundTruthChange) -> float | None:
        if pred.visit_index != gt.visit_index or pred.change_type != gt.change_type:
            return None
        if not self._label(pred.object_label, gt.object_label):
            return None
        return self._near(pred.world_center, gt.world_center)

    def half(self, pred: ChangePrediction, gt: GroundTruthChange) -> float | None:
        """Distance when ``pred`` is one side of a removed+appeared pair explaining ``gt``."""
        if pred.visit_index != gt.visit_index or gt.change_type not in ("replaced", "relocated"):
            return None
        if pred.change_type == "appeared":
            if self._label(pred.object_label, gt.object_label):
                return self._near(pred.world_center, gt.world_center)
            return None
        if pred.change_type == "removed":
            if gt.change_type == "replaced":
                if self._label(pred.object_label, gt.previous_label):
                    return self._near(pred.world_center, gt.world_center)
                return None
            if self._label(pred.object_label, gt.object_label):
                return self._near(pred.world_center, gt.previous_center)
        return None

    def _best(self, pred_index: int, score: Callable[[ChangePrediction, GroundTruthChange], float | None]) -> int | None:
        best: tuple[float, int] | None = None
        for g, gt in enumerate(self.truth):
            if g in self.gt_match:
                continue
            d = score(self.predictions[pred_index], gt)
            if d is not None and (best is None or (d, g) < best):
                best = (d, g)
        return None if best is None else best[1]

    def run(self) -> tuple[dict[int, list[int]], list[int], list[int]]:
        for i in self.order:
            g = self._best(i, self.exact)
            if g is not None:
                self.gt_match[g] = [i]
                self.used.add(i)

        for g, gt in enumerate(self.truth):
            if g in self.gt_match or gt.change_type not in ("replaced", "relocated"):
                continue
            sides: dict[str, int] = {}
            for kind in ("removed", "appeared"):
                options = [
                    (d, rank, i)
                    for rank, i in enumerate(self.order)
                    if i not in self.used
                    and self.predictions[i].change_type == kind
                    and (d := self.half(self.predictions[i], gt)) is not None
                ]
                if options:
                    sides[kind] = min(options)[2]
            if len(sides) == 2:
                self.gt_match[g] = [sides["appeared"], sides["removed"]]
                self.used.update(sides.values())

        repetitive = [
            i
            for i in self.order
            if i not in self.used
            and any(
                self.exact(self.predictions[i], self.truth[g]) is not None
                or self.half(self.predictions[i], self.truth[g]) is not None
                for g in self.gt_match
            )
        ]
        false_positives = [i for i in self.order if i not in self.used and i not in set(repetitive)]
        return self.gt_match, repetitive, false_positives


def _spread(values: list[float]) -> tuple[float, float]:
    if not values:
        return 0.0, 0.0
    return statistics.fmean(values), statistics.pstdev(values)


def match(
    predictions: Sequence[ChangePrediction],
    ground_truth: Sequence[GroundTruthChange],
    tolerances: MatchTolerances | None = None,
) -> EvalReport:
    """
    Score predictions against ground truth.

    Exact-type matches are taken first, nearest center wins. Replaced and
    relocated rows left over may then be explained by a removed plus an appeared
    prediction. Extra predictions that would have matched an already-matched row
    are repetitive, neither true nor false positives.
    """
    tol = tolerances or MatchTolerances()
    gt_match, repetitive, false_positives = _Matcher(predictions, ground_truth, tol).run()

    records = []
    for g in sorted(gt_match):
        pred = predictions[gt_match[g][0]]
        gt = ground_truth[g]
        expected = spatial_phrase(gt.world_center, Pose.from_list(pred.observer_pose))
        records.append(
            MatchRecord(
                gt_index=g,
                prediction_indices=gt_match[g],
                clock_error=float(clock_difference(pred.clock_direction, expected.clock_direction)),
                distance_error=abs(pred.distance_feet - expected.distance_feet),
            )
        )

    per_category = {kind: CategoryStats() for kind in CHANGE_TYPES}
    for g, gt in enumerate(ground_truth):
        if g in gt_match:
            per_category[gt.change_type].tp += 1
        else:
            per_category[gt.change_type].fn += 1
    for i in false_positives:
        per_category[predictions[i].change_type].fp += 1
    for i in repetitive:
        per_category[predictions[i].change_type].repetitive += 1
    for cat in per_category.values():
        cat.precision, cat.recall, cat.f1 = ratios(cat.tp, cat.fp, cat.fn)

    tp, fp, fn = len(gt_match), len(false_positives), len(ground_truth) - len(gt_match)
    precision, recall, f1 = ratios(tp, fp, fn)
    clock_mean, clock_sd = _spread([r.clock_error for r in records])
    dist_mean, dist_sd = _spread([r.distance_error for r in records])
    total = len(predictions)
    correct = sum(len(v) for v in gt_match.values())
    distribution = {
        "correct": correct / total if total else 0.0,
        "repetitive": len(repetitive) / total if total else 0.0,
        "incorrect": fp / total if total else 0.0,
    }
    return EvalReport(
        tp=tp,
        fp=fp,
        fn=fn,
        repetitive=len(repetitive),
        precision=precision,
        recall=recall,
        f1=f1,
        clock_error_mean=clock_mean,
        clock_error_sd=clock_sd,
        distance_error_mean=dist_mean,
        distance_error_sd=dist_sd,
        per_category=per_category,
        distribution=distribution,
        matches=records,
    )


def evaluate_files(pred_path: Path, gt_path: Path, tolerances: MatchTolerances | None = None) -> EvalReport:
    return match(read_jsonl(pred_path, ChangePrediction), read_jsonl(gt_path, GroundTruthChange), tolerances)


# ============================================================================
# Extended-use benchmark
# ============================================================================


class BenchResult(BaseModel):
    location_id: str
    visits: int
    frames: int
    reference_median_first: float
    reference_median_last: float
    r_squared: float | None
    max_esm_records: int
    max_visit_frames: int
    snapshots_monotonic: bool


def _write_csv(path: Path, rows: Sequence[dict[str, Any]], fieldnames: Sequence[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames))
        writer.writeheader()
        writer.writerows(rows)


def _median(values: list[float]) -> float:
    return float(np.median(values)) if values else 0.0


def bench_extended(
    location_dir: Path,
    repeat: int = 10,
    out: Path | None = None,
    config: EngineConfig | None = None,
) -> BenchResult:
    """
    Replay a location's visits ``repeat`` times back to back with the oracle detector.

    Frames are loaded up front so timings cover the engine only. Repetition ``r``
    shifts visit start times past the previous repetition and prefixes visit ids
    with ``rNN_``; the scripted visit index is kept so the oracle still applies.

    Args:
        location_dir: A generated location with ``script.json``
        repeat: Number of back-to-back repetitions
        out: Directory for the CSV outputs; nothing is written when None
        config: Engine thresholds

    Returns:
        Reference-matching medians over the first and last visits, memory
        bounds and the fit of object-memory size against snapshot count
    """
    script = load_script(location_dir)
    visits = [read_visit(d) for d in list_visit_dirs(location_dir)]
    loaded = [(manifest, list(frames)) for manifest, frames in visits]
    if not loaded:
        raise FileNotFoundError(f"No visits under {location_dir}")
    span = loaded[-1][0].start_time - loaded[0][0].start_time + VISIT_SPACING_S

    session = LocationSession(script.location_id, OracleDetector(script), config=config, sinks=[])
    latency: list[dict[str, Any]] = []
    footprint: list[dict[str, Any]] = []
    reference_by_visit: list[list[float]] = []
    counter = 0
    for rep in range(repeat):
        for manifest, frames in loaded:
            counter += 1
            shifted = manifest.model_copy(
                update={"visit_id": f"r{rep:02d}_{manifest.visit_id}", "start_time": manifest.start_time + rep * span}
            )
            done = len(session.timings)
            session.replay_visit(shifted, frames)
            visit_timings = session.timings[done:]
            reference_by_visit.append([t.reference_matching for t in visit_timings])
            for t in visit_timings:
                latency.append(
                    {
                        "visit": counter,
                        "visit_id": shifted.visit_id,
                        "frame": t.frame_index,
                        "frame_queuing": t.frame_queuing,
                        "reference_matching": t.reference_matching,
                        "detector_inference": t.detector_inference,
                        "post_processing": t.post_processing,
                        "total": t.total,
                    }
                )
            fp = session.otm.footprint()
            footprint.append(
                {
                    "visit": counter,
                    "visit_id": shifted.visit_id,
                    "objects": fp.object_count,
                    "snapshots": fp.snapshot_count,
                    "bytes": fp.serialized_bytes,
                    "esm_records": len(session.esm),
                }
            )
        logger.info("Benchmark repetition %d/%d done for %s", rep + 1, repeat, script.location_id)

    if out is not None:
        _write_csv(out / "latency.csv", latency, LATENCY_FIELDS)
        _write_csv(out / "footprint.csv", footprint, FOOTPRINT_FIELDS)

    snapshots = [row["snapshots"] for row in footprint]
    sizes = [row["bytes"] for row in footprint]
    r_squared = None
    if len(set(snapshots)) > 1:
        r_squared = float(stats.linregress(snapshots, sizes).rvalue ** 2)
    first = [v for visit in reference_by_visit[:WINDOW_VISITS] for v in visit]
    last = [v for visit in reference_by_visit[-WINDOW_VISITS:] for v in visit]
    return BenchResult(
        location_id=script.location_id,
        visits=counter,
        frames=len(latency),
        reference_median_first=_median(first),
        reference_median_last=_median(last),
        r_squared=r_squared,
        max_esm_records=max((row["esm_records"] for row in footprint), default=0),
        max_visit_frames=max(len(frames) for _, frames in loaded),
        snapshots_monotonic=all(a <= b for a, b in zip(snapshots, snapshots[1:])),
    )
