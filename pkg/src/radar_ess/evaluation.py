"""Place recognition evaluation: revisit ground truth and top-1 metrics.

Every query contributes exactly one decision, its nearest candidate, which
is accepted when the cosine distance is within the swept threshold.  At a
given threshold a query is

* TP  - accepted and the candidate is a ground-truth revisit,
* FP  - accepted and the candidate is not a revisit,
* FN  - has a revisit but was not answered correctly (rejected, or an
        accepted wrong candidate, which then also counts as FP),
* TN  - has no revisit and was rejected.
"""

from __future__ import annotations

import csv
import functools
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .descriptor import DescriptorConfig, EssDescriptor, default_max_range, describe_frame, image_center
from .frame_io import Pose, RadarFrame, binarize
from .retrieval import DbConfig, DescriptorDb, ExclusionWindow

logger = logging.getLogger(__name__)

Key = tuple[str, int]

DEFAULT_GRID = tuple(float(t) for t in np.linspace(0.0, 1.0, 200))
CURVE_FIELDS = ("threshold", "precision", "recall", "f1", "tpr", "fpr")
SUMMARY_FIELDS = ("method", "sequence", "pr_auc", "f1_max", "roc_auc", "recall_at_1", "mean_query_ms")
# ROC is reported but flagged when fewer true-negative queries than this exist
LOW_TN_QUERIES = 5


@dataclass
class EvalConfig:
    revisit_distance: float = 100.0  # meters
    frame_stride: int = 5
    threshold_grid: Sequence[float] = DEFAULT_GRID
    mode: str = "intra"
    exclusion_frames: int = 50  # frame-id span hidden before an intra-session query; <= 0 disables

    def __post_init__(self):
        if not self.revisit_distance > 0:
            raise ValueError("revisit_distance must be positive")
        if self.frame_stride < 1:
            raise ValueError("frame_stride must be >= 1")
        if self.mode not in ("intra", "inter"):
            raise ValueError(f"mode must be 'intra' or 'inter', got {self.mode!r}")

    def exclusion_for(self, key: Key) -> Optional[ExclusionWindow]:
        if self.mode != "intra" or self.exclusion_frames <= 0:
            return None
        return ExclusionWindow(key[0], key[1], self.exclusion_frames)


@dataclass
class GroundTruth:
    positives: dict[Key, frozenset]

    def has_positive(self, key: Key) -> bool:
        return bool(self.positives.get(key))

    @property
    def queries(self) -> list[Key]:
        return list(self.positives)

    def num_with_positive(self) -> int:
        return sum(1 for v in self.positives.values() if v)


@dataclass
class CurvePoint:
    threshold: float
    precision: float
    recall: float
    f1: float
    tpr: float
    fpr: float


@dataclass
class QueryOutcome:
    query: Key
    candidate: Optional[Key]
    distance: float
    candidates_examined: int = 0
    elapsed_ms: float = 0.0


def build_ground_truth(
    query_poses: Sequence[tuple[Key, Optional[Pose]]],
    db_poses: Sequence[tuple[Key, Optional[Pose]]],
    config: EvalConfig,
    excluded_pairs: Iterable[tuple[Key, Key]] = (),
) -> GroundTruth:
    """Revisits are database frames within ``revisit_distance`` of the query.

    In intra-session mode frames hidden by the exclusion window are never
    revisits.  ``excluded_pairs`` removes user-curated ``(query, db)`` pairs.
    Frames without a pose are dropped with a warning.
    """
    db = [(k, p) for k, p in db_poses if p is not None]
    skipped = len(db_poses) - len(db)
    queries = [(k, p) for k, p in query_poses if p is not None]
    skipped += len(query_poses) - len(queries)
    if skipped:
        logger.warning("ground truth: %d frame(s) without pose excluded", skipped)
    banned = set(excluded_pairs)

    positives: dict[Key, frozenset] = {}
    if not db:
        return GroundTruth({k: frozenset() for k, _ in queries})
    tree = cKDTree(np.array([[p.x, p.y] for _, p in db]))
    for key, pose in queries:
        hits = tree.query_ball_point([pose.x, pose.y], config.revisit_distance)
        excl = config.exclusion_for(key)
        keep = set()
        for i in hits:
            dkey, dpose = db[i]
            # exact test, the tree radius check is inclusive only up to rounding
            if pose.distance(dpose) > config.revisit_distance:
                continue
            if excl is not None and dkey[0] == excl.session_id and dkey[1] > excl.frame_id - excl.span:
                continue
            if (key, dkey) in banned:
                continue
            keep.add(dkey)
        positives[key] = frozenset(keep)
    return GroundTruth(positives)


def confusion(outcomes: Sequence[QueryOutcome], gt: GroundTruth, threshold: float) -> tuple[int, int, int, int]:
    tp = fp = fn = tn = 0
    for o in outcomes:
        pos = gt.positives.get(o.query, frozenset())
        accepted = o.candidate is not None and o.distance <= threshold
        correct = accepted and o.candidate in pos
        if correct:
            tp += 1
            continue
        if accepted:
            fp += 1
        if pos:
            fn += 1
        elif not accepted:
            tn += 1
    return tp, fp, fn, tn


def _ratio(num: int, den: int, empty: float) -> float:
    return num / den if den else empty


def sweep(outcomes: Sequence[QueryOutcome], gt: GroundTruth, grid: Sequence[float] = DEFAULT_GRID) -> list[CurvePoint]:
    if len(grid) == 0:
        raise ValueError("threshold grid is empty")
    outcomes = [o for o in outcomes if o.query in gt.positives]
    points = []
    for t in grid:
        tp, fp, fn, tn = confusion(outcomes, gt, t)
        precision = _ratio(tp, tp + fp, 1.0)  # no accepted matches: nothing wrong yet
        recall = _ratio(tp, tp + fn, 0.0)
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        fpr = _ratio(fp, fp + tn, 0.0)
        points.append(CurvePoint(float(t), precision, recall, f1, recall, fpr))
    return points


def auc(points: Sequence[CurvePoint], axis: str = "pr") -> float:
    """Trapezoidal area under a PR (precision over recall) or ROC curve.

    Points are ordered by x, ties keeping their threshold order, and the
    curve is held constant out to x = 0 and x = 1.
    """
    if len(points) < 2:
        raise ValueError("need at least two curve points")
    if axis == "pr":
        xy = [(p.recall, p.precision) for p in points]
    elif axis == "roc":
        xy = [(p.fpr, p.tpr) for p in points]
    else:
        raise ValueError(f"axis must be 'pr' or 'roc', got {axis!r}")
    order = sorted(range(len(xy)), key=lambda i: (xy[i][0], points[i].threshold))
    xs = [0.0] + [xy[i][0] for i in order] + [1.0]
    ys = [xy[order[0]][1]] + [xy[i][1] for i in order] + [xy[order[-1]][1]]
    return float(sum((xs[i + 1] - xs[i]) * (ys[i + 1] + ys[i]) / 2.0 for i in range(len(xs) - 1)))


def f1_max(points: Sequence[CurvePoint]) -> float:
    return max((p.f1 for p in points), default=0.0)


def recall_at_1(outcomes: Sequence[QueryOutcome], gt: GroundTruth) -> float:
    """Share of queries with a revisit whose top candidate is a revisit."""
    total = hits = 0
    for o in outcomes:
        pos = gt.positives.get(o.query)
        if not pos:
            continue
        total += 1
        hits += o.candidate in pos
    if total == 0:
        raise ValueError("no query has a ground-truth revisit")
    return hits / total


@functools.lru_cache(maxsize=16)
def _ring_index(width: int, height: int, size: int, max_range: float) -> tuple[np.ndarray, np.ndarray]:
    x0, y0 = image_center(width, height)
    ys, xs = np.mgrid[0:height, 0:width]
    ring = np.floor(np.hypot(xs - x0, ys - y0) * (size / max_range)).astype(np.int64)
    ring[ring >= size] = -1
    totals = np.bincount(ring[ring >= 0], minlength=size)
    return ring, totals


def ringkey_descriptor(
    frame: RadarFrame, size: int, max_range: Optional[float] = None, threshold: int = 0
) -> np.ndarray:
    """Per-ring occupancy ratio of the binarized frame (RingKey baseline)."""
    if size < 1:
        raise ValueError("size must be >= 1")
    max_range = default_max_range(frame.width, frame.height) if max_range is None else float(max_range)
    ring, totals = _ring_index(frame.width, frame.height, size, max_range)
    mask = binarize(frame, threshold).mask
    sel = mask & (ring >= 0)
    occupied = np.bincount(ring[sel], minlength=size)
    out = np.zeros(size)
    nz = totals > 0
    out[nz] = occupied[nz] / totals[nz]
    return out


@dataclass
class MethodSettings:
    """What to run for one evaluation: descriptor, retrieval and protocol."""

    method: str = "ess"
    descriptor: DescriptorConfig = field(default_factory=DescriptorConfig)
    cluster_threshold: float = 10
    verify_threshold: float = 0.2
    eval: EvalConfig = field(default_factory=EvalConfig)


def db_config(settings: MethodSettings) -> DbConfig:
    d = settings.descriptor
    return DbConfig(
        size=d.size,
        max_range=d.max_range,
        cluster_threshold=settings.cluster_threshold,
        verify_threshold=settings.verify_threshold,
        method=settings.method,
        binarize_threshold=d.binarize_threshold,
        min_cluster_area=d.min_cluster_area,
    )


METHODS = ("ess", "ringkey")


def describe_one(frame: RadarFrame, session_id: str, settings: MethodSettings) -> EssDescriptor:
    """Descriptor of one frame under ``settings.method``."""
    if settings.method == "ess":
        return describe_frame(frame, settings.descriptor, session_id=session_id).descriptor
    if settings.method == "ringkey":
        d = settings.descriptor
        v = ringkey_descriptor(frame, d.size, d.max_range, d.binarize_threshold)
        return EssDescriptor(v=v, cluster_count=0, frame_id=frame.frame_id, session_id=session_id)
    raise ValueError(f"unknown method {settings.method!r}; choose from {METHODS}")


def describe_frames(frames: Sequence[RadarFrame], session_id: str, settings: MethodSettings) -> list[EssDescriptor]:
    return [describe_one(f, session_id, settings) for f in frames]


def run_queries(
    db: DescriptorDb,
    queries: Sequence[EssDescriptor],
    settings: MethodSettings,
) -> list[QueryOutcome]:
    gap = math.inf if settings.method == "ringkey" else settings.cluster_threshold
    outcomes = []
    for q in queries:
        key = (q.session_id, q.frame_id)
        start = time.perf_counter()
        res = db.query(q, cluster_threshold=gap, verify_threshold=settings.verify_threshold, exclusion=settings.eval.exclusion_for(key))
        elapsed = (time.perf_counter() - start) * 1000.0
        outcomes.append(QueryOutcome(key, res.candidate_frame, res.distance, res.candidates_examined, elapsed))
    return outcomes


@dataclass
class EvalResult:
    method: str
    sequence: str
    curve: list[CurvePoint]
    outcomes: list[QueryOutcome]
    gt: GroundTruth
    pr_auc: float
    roc_auc: float
    f1_max: float
    recall_at_1: float
    mean_query_ms: float
    mean_candidates: float
    low_tn: bool

    def summary_row(self) -> dict:
        return {
            "method": self.method,
            "sequence": self.sequence,
            "pr_auc": self.pr_auc,
            "f1_max": self.f1_max,
            "roc_auc": self.roc_auc,
            "recall_at_1": self.recall_at_1,
            "mean_query_ms": self.mean_query_ms,
        }


def evaluate(
    target: Sequence[RadarFrame],
    target_id: str,
    settings: MethodSettings,
    query: Optional[Sequence[RadarFrame]] = None,
    query_id: Optional[str] = None,
    sequence: Optional[str] = None,
    target_descriptors: Optional[Sequence[EssDescriptor]] = None,
    query_descriptors: Optional[Sequence[EssDescriptor]] = None,
    excluded_pairs: Iterable[tuple[Key, Key]] = (),
) -> EvalResult:
    """Index ``target``, query it and score the top-1 decisions.

    Intra-session mode queries the target with itself under the exclusion
    window; inter-session mode queries it with ``query``.  Frames are used as
    given (apply the frame stride before calling).
    """
    cfg = settings.eval
    if cfg.mode == "inter":
        if query is None:
            raise ValueError("inter-session evaluation needs a query session")
        query_id = query_id or "query"
        if query_id == target_id:
            query_id = f"{query_id}#query"
    else:
        query, query_id = target, target_id

    missing = [f.frame_id for f in list(target) + list(query) if f.pose is None]
    if len(missing) == len(target) + len(query):
        raise ValueError("evaluation needs ground-truth poses")

    db_desc = list(target_descriptors) if target_descriptors is not None else describe_frames(target, target_id, settings)
    if query_descriptors is not None:
        q_desc = list(query_descriptors)
    elif query is target:
        q_desc = db_desc
    else:
        q_desc = describe_frames(query, query_id, settings)
    # query keys must match the ground truth even when the session was renamed
    q_desc = [d if d.session_id == query_id else replace(d, session_id=query_id) for d in q_desc]
    db = DescriptorDb(db_config(settings)).extend(db_desc)
    outcomes = run_queries(db, q_desc, settings)

    gt = build_ground_truth(
        [((query_id, f.frame_id), f.pose) for f in query],
        [((target_id, f.frame_id), f.pose) for f in target],
        cfg,
        excluded_pairs,
    )
    outcomes = [o for o in outcomes if o.query in gt.positives]
    curve = sweep(outcomes, gt, cfg.threshold_grid)
    n_pos = gt.num_with_positive()
    tn_queries = len(outcomes) - n_pos
    low_tn = tn_queries < LOW_TN_QUERIES
    if low_tn:
        logger.warning("%s/%s: only %d queries without a revisit; ROC-AUC is unreliable",
                       settings.method, sequence or target_id, tn_queries)
    r1 = recall_at_1(outcomes, gt) if n_pos else 0.0
    return EvalResult(
        method=settings.method,
        sequence=sequence or target_id,
        curve=curve,
        outcomes=outcomes,
        gt=gt,
        pr_auc=auc(curve, "pr"),
        roc_auc=auc(curve, "roc"),
        f1_max=f1_max(curve),
        recall_at_1=r1,
        mean_query_ms=float(np.mean([o.elapsed_ms for o in outcomes])) if outcomes else 0.0,
        mean_candidates=float(np.mean([o.candidates_examined for o in outcomes])) if outcomes else 0.0,
        low_tn=low_tn,
    )


def write_curve_csv(path, points: Sequence[CurvePoint]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_FIELDS)
        for p in points:
            w.writerow([f"{getattr(p, k):.6f}" for k in CURVE_FIELDS])
    return path


def write_summary_csv(path, rows: Sequence[dict], extra_fields: Sequence[str] = ()) -> Path:
    """Summary table; ``extra_fields`` (e.g. swept parameters) go after the fixed columns."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(SUMMARY_FIELDS) + [f for f in extra_fields if f not in SUMMARY_FIELDS]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return path
