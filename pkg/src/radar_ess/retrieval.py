"""Two-stage place retrieval over ESS descriptors.

Stage one keeps only frames whose cluster count is within ``p`` of the
query's.  Stage two finds the cosine-nearest of those candidates.  Vectors
are L2-normalised so that Euclidean nearest neighbour in a KD-tree ranks
the same as cosine distance (``|u - w|^2 = 2 (1 - cos)``); one tree is kept
per cluster count and rebuilt lazily after inserts.
"""

from __future__ import annotations

import bisect
import json
import math
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from scipy.spatial import cKDTree

from .descriptor import EssDescriptor, cosine_distance, read_jsonl, write_jsonl

DEFAULT_CLUSTER_THRESHOLD = 10
DEFAULT_VERIFY_THRESHOLD = 0.2
# slack on the Euclidean radius when collecting near-ties for exact re-ranking
_TIE_SLACK = 1e-9


@dataclass
class DbConfig:
    """Retrieval settings plus the descriptor settings the stored vectors were built with."""

    size: int = 100
    max_range: Optional[float] = None
    cluster_threshold: float = DEFAULT_CLUSTER_THRESHOLD
    verify_threshold: float = DEFAULT_VERIFY_THRESHOLD
    method: str = "ess"
    binarize_threshold: int = 0
    min_cluster_area: int = 1


@dataclass(frozen=True)
class ExclusionWindow:
    """Hides same-session frames with ``frame_id > frame_id - span``.

    Used for loop closure within one session: frames recorded shortly before
    the query (and any after it) are not eligible.
    """

    session_id: str
    frame_id: int
    span: int

    def excludes(self, d: EssDescriptor) -> bool:
        return d.session_id == self.session_id and d.frame_id > self.frame_id - self.span


@dataclass
class MatchResult:
    matched: bool
    candidate_frame: Optional[tuple[str, int]]
    distance: float
    candidates_examined: int
    index: Optional[int] = None  # position of the candidate in the database


class _Bucket:
    __slots__ = ("indices", "tree", "tree_rows", "stale")

    def __init__(self):
        self.indices: list[int] = []
        self.tree: Optional[cKDTree] = None
        self.tree_rows = np.empty(0, dtype=np.int64)  # db indices of tree points
        self.stale = True


class DescriptorDb:
    """Ordered descriptor store with a cluster-count index.

    Inserts must not run concurrently with anything else; queries may run
    concurrently with each other.
    """

    def __init__(self, config: DbConfig = None):
        self.config = config or DbConfig()
        self.descriptors: list[EssDescriptor] = []
        self.count_index: dict[int, list[int]] = {}
        self._buckets: dict[int, _Bucket] = {}
        self._counts: list[int] = []  # sorted keys of _buckets
        self._keys: set[tuple[str, int]] = set()
        self._units: list[Optional[np.ndarray]] = []
        self._session_codes: dict[str, int] = {}
        self._sess_list: list[int] = []
        self._fid_list: list[int] = []
        self._arrays = None  # cached (session codes, frame ids)
        self._lock = threading.Lock()

    def __len__(self):
        return len(self.descriptors)

    @property
    def size(self) -> int:
        return self.config.size

    def insert(self, d: EssDescriptor) -> "DescriptorDb":
        if d.size != self.config.size:
            raise ValueError(f"descriptor length {d.size} does not match database size {self.config.size}")
        key = (d.session_id, int(d.frame_id))
        with self._lock:
            if key in self._keys:
                raise ValueError(f"duplicate frame {key}")
            idx = len(self.descriptors)
            self._keys.add(key)
            self.descriptors.append(d)
            norm = math.sqrt(float(d.v @ d.v))
            self._units.append(d.v / norm if norm > 0 else None)
            code = self._session_codes.setdefault(d.session_id, len(self._session_codes))
            self._sess_list.append(code)
            self._fid_list.append(int(d.frame_id))
            self._arrays = None
            count = int(d.cluster_count)
            bucket = self._buckets.get(count)
            if bucket is None:
                bucket = self._buckets[count] = _Bucket()
                bisect.insort(self._counts, count)
                self.count_index[count] = bucket.indices
            bucket.indices.append(idx)
            bucket.stale = True
        return self

    def extend(self, descriptors: Iterable[EssDescriptor]) -> "DescriptorDb":
        for d in descriptors:
            self.insert(d)
        return self

    def _selected_counts(self, query_count: int, cluster_threshold: float) -> list[int]:
        if cluster_threshold < 0:
            raise ValueError("cluster_threshold must be >= 0")
        lo = bisect.bisect_left(self._counts, query_count - cluster_threshold)
        hi = bisect.bisect_right(self._counts, query_count + cluster_threshold)
        return self._counts[lo:hi]

    def candidate_filter(self, query_count: int, cluster_threshold: float) -> list[int]:
        """Indices of stored frames with ``|cluster_count - query_count| <= cluster_threshold``."""
        out: list[int] = []
        for c in self._selected_counts(query_count, cluster_threshold):
            out.extend(self._buckets[c].indices)
        out.sort()
        return out

    def _tree(self, count: int) -> _Bucket:
        bucket = self._buckets[count]
        if bucket.stale:
            with self._lock:
                if bucket.stale:
                    rows = [i for i in bucket.indices if self._units[i] is not None]
                    bucket.tree_rows = np.asarray(rows, dtype=np.int64)
                    bucket.tree = cKDTree(np.stack([self._units[i] for i in rows])) if rows else None
                    bucket.stale = False
        return bucket

    def _excluded_mask(self, rows: np.ndarray, exclusion: Optional[ExclusionWindow]) -> np.ndarray:
        if exclusion is None or len(rows) == 0:
            return np.zeros(len(rows), dtype=bool)
        code = self._session_codes.get(exclusion.session_id)
        if code is None:
            return np.zeros(len(rows), dtype=bool)
        arrays = self._arrays
        if arrays is None:
            arrays = self._arrays = (np.asarray(self._sess_list), np.asarray(self._fid_list))
        sess, fid = arrays
        return (sess[rows] == code) & (fid[rows] > exclusion.frame_id - exclusion.span)

    def _nearest_allowed(self, bucket: _Bucket, unit: np.ndarray, exclusion) -> float:
        """Euclidean distance to the nearest non-excluded point of a bucket."""
        n = len(bucket.tree_rows)
        k = 1
        while True:
            dist, pos = bucket.tree.query(unit, k=k)
            dist, pos = np.atleast_1d(dist), np.atleast_1d(pos)
            valid = pos < n
            dist, pos = dist[valid], pos[valid]
            allowed = ~self._excluded_mask(bucket.tree_rows[pos], exclusion)
            if allowed.any():
                return float(dist[np.argmax(allowed)])
            if k >= n:
                return math.inf
            k = min(2 * k, n)

    def query(
        self,
        q: EssDescriptor,
        cluster_threshold: Optional[float] = None,
        verify_threshold: Optional[float] = None,
        exclusion: Optional[ExclusionWindow] = None,
    ) -> MatchResult:
        """Nearest stored frame among the cluster-count candidates.

        ``candidate_frame`` reports the nearest candidate even when it fails
        verification; ``matched`` is set only if its cosine distance is within
        ``verify_threshold``.  Ties go to the lowest frame id.
        """
        if cluster_threshold is None:
            cluster_threshold = self.config.cluster_threshold
        verify_threshold = self.config.verify_threshold if verify_threshold is None else verify_threshold
        if q.size != self.config.size:
            raise ValueError(f"query length {q.size} does not match database size {self.config.size}")

        counts = self._selected_counts(int(q.cluster_count), cluster_threshold)
        examined = 0
        for c in counts:
            rows = np.asarray(self._buckets[c].indices, dtype=np.int64)
            examined += int(len(rows) - self._excluded_mask(rows, exclusion).sum())
        no_match = MatchResult(False, None, math.inf, examined)
        norm = math.sqrt(float(q.v @ q.v))
        if examined == 0 or norm == 0.0:
            return no_match
        unit = q.v / norm

        nearest = {}
        for c in counts:
            bucket = self._tree(c)
            if bucket.tree is not None:
                nearest[c] = self._nearest_allowed(bucket, unit, exclusion)
        if not nearest or min(nearest.values()) == math.inf:
            return no_match

        radius = min(nearest.values()) + _TIE_SLACK
        best = None
        for c, e in nearest.items():
            if e > radius:
                continue
            bucket = self._buckets[c]
            pos = np.asarray(bucket.tree.query_ball_point(unit, radius), dtype=np.int64)
            rows = bucket.tree_rows[pos]
            rows = rows[~self._excluded_mask(rows, exclusion)]
            for i in rows.tolist():
                d = self.descriptors[i]
                key = (cosine_distance(q.v, d.v), d.frame_id, d.session_id, i)
                if best is None or key < best:
                    best = key
        dist, _, _, i = best
        d = self.descriptors[i]
        return MatchResult(
            matched=dist <= verify_threshold,
            candidate_frame=(d.session_id, d.frame_id),
            distance=dist,
            candidates_examined=examined,
            index=i,
        )

    def save(self, path) -> Path:
        path = Path(path)
        write_jsonl(path, self.descriptors)
        sidecar_path(path).write_text(json.dumps(asdict(self.config), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "DescriptorDb":
        path = Path(path)
        side = sidecar_path(path)
        if side.is_file():
            config = DbConfig(**json.loads(side.read_text()))
            db = cls(config)
            db.extend(read_jsonl(path))
            return db
        descriptors = list(read_jsonl(path))
        size = descriptors[0].size if descriptors else DbConfig.size
        return cls(DbConfig(size=size)).extend(descriptors)


def sidecar_path(db_path) -> Path:
    db_path = Path(db_path)
    return db_path.with_name(db_path.stem + ".config.json")

