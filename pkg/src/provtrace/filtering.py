"""Provenance image filtering: vote aggregation over feature-level ANN
results, RCMM near-duplicate scoring, and iterative re-querying."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, NamedTuple

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator

from .detector import FeatureSet, read_features
from .imaging import GrayImage
from .index import IvfAdcIndex, SENTINEL_FEATURE


class RankEntry(NamedTuple):
    image_id: int
    votes: int
    score: float


@dataclass
class RankedList:
    """Retrieval output ordered best-first; no duplicate image ids."""

    entries: list[RankEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def image_ids(self) -> list[int]:
        return [e.image_id for e in self.entries]

    def truncated(self, k: int) -> "RankedList":
        return RankedList(self.entries[: max(0, k)])

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rank", "image_id", "votes", "rcmm_score"])
            for rank, e in enumerate(self.entries, start=1):
                writer.writerow([rank, e.image_id, e.votes, f"{e.score:.6f}"])

    @classmethod
    def read_csv(cls, path: str | Path) -> "RankedList":
        entries = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                entries.append(RankEntry(int(row["image_id"]), int(row["votes"]),
                                         float(row["rcmm_score"])))
        return cls(entries)


def aggregate_votes(image_ids: np.ndarray,
                    valid: np.ndarray | None = None) -> RankedList:
    """Tally ANN result cells per image id; order by votes descending, ties
    by ascending image id."""
    image_ids = np.asarray(image_ids, dtype=np.int64)
    if valid is None:
        valid = image_ids >= 0
    ids = image_ids[valid]
    if ids.size == 0:
        return RankedList()
    uniq, counts = np.unique(ids, return_counts=True)
    order = np.lexsort((uniq, -counts))
    return RankedList([RankEntry(int(uniq[i]), int(counts[i]), float(counts[i]))
                       for i in order])


def rcmm(A: FeatureSet, B: FeatureSet, nndr_t: float = 0.8) -> float:
    """Reciprocal condition matching measure: the fraction of reciprocal
    ratio-test matches, normalized by the smaller set size. Symmetric."""
    if len(A) == 0 or len(B) == 0:
        raise ValueError("rcmm requires non-empty feature sets")
    d2 = cdist(A.descriptors, B.descriptors, "sqeuclidean")
    t2 = nndr_t * nndr_t

    def forward(dist):
        best = np.argmin(dist, axis=1)
        rows = np.arange(dist.shape[0])
        d1 = dist[rows, best]
        if dist.shape[1] == 1:
            return best, np.ones(dist.shape[0], dtype=bool)
        tmp = dist.copy()
        tmp[rows, best] = np.inf
        second = tmp.min(axis=1)
        return best, (d1 <= t2 * second) & (second > 0)

    a2b, ok_a = forward(d2)
    b2a, ok_b = forward(d2.T)
    rows = np.arange(len(A))
    reciprocal = ok_a & (b2a[a2b] == rows) & ok_b[a2b]
    return float(np.count_nonzero(reciprocal)) / float(min(len(A), len(B)))


def feature_path(directory: str | Path, image_id: int) -> Path:
    return Path(directory) / f"{image_id:08d}.pvf"


class FeatureStore:
    """Lookup of per-image feature sets, backed by a directory of feature
    files or an in-memory mapping. Caches loads."""

    def __init__(self, loader: Callable[[int], FeatureSet], cache_size: int = 512):
        self._loader = loader
        self._cache: dict[int, FeatureSet] = {}
        self._cache_size = cache_size

    @classmethod
    def from_dir(cls, directory: str | Path) -> "FeatureStore":
        directory = Path(directory)
        return cls(lambda image_id: read_features(feature_path(directory, image_id)))

    @classmethod
    def from_sets(cls, sets: Iterable[FeatureSet]) -> "FeatureStore":
        table = {fs.image_id: fs for fs in sets}
        return cls(table.__getitem__)

    def get(self, image_id: int) -> FeatureSet:
        if image_id not in self._cache:
            if len(self._cache) >= self._cache_size:
                self._cache.pop(next(iter(self._cache)))
            self._cache[image_id] = self._loader(image_id)
        return self._cache[image_id]


class ProvenanceFilter(BaseEstimator):
    """Query-side filtering over a populated index.

    ``query`` runs one search + vote aggregation; ``iterative`` re-queries
    through non-near-duplicate seeds and re-ranks the union by best RCMM
    against the query set.
    """

    def __init__(
        self,
        index: IvfAdcIndex,
        detector=None,
        store: FeatureStore | None = None,
        rank_k: int = 50,
        iterations: int = 2,
        nd_threshold: float = 0.3,
        max_seeds: int = 5,
        nndr_t: float = 0.8,
        nprobe: int | None = None,
        knn_k: int | None = None,
    ):
        self.index = index
        self.detector = detector
        self.store = store
        self.rank_k = rank_k
        self.iterations = iterations
        self.nd_threshold = nd_threshold
        self.max_seeds = max_seeds
        self.nndr_t = nndr_t
        self.nprobe = nprobe
        self.knn_k = knn_k

    def _check(self) -> None:
        if self.rank_k < 1:
            raise ValueError("rank_k must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    def extract(self, img: GrayImage) -> FeatureSet:
        if self.detector is None:
            raise ValueError("no detector configured for image queries")
        return self.detector.extract(img)

    def _search_rank(self, fs: FeatureSet, exclude_id: int | None) -> RankedList:
        dists, _, img_ids = self.index.kneighbors(
            fs.descriptors, n_neighbors=self.knn_k, nprobe=self.nprobe
        )
        rank = aggregate_votes(img_ids, np.isfinite(dists))
        if exclude_id is not None:
            rank = RankedList([e for e in rank if e.image_id != exclude_id])
        return rank

    def query(
        self,
        img: GrayImage | None = None,
        features: FeatureSet | None = None,
        exclude_id: int | None = None,
    ) -> RankedList:
        """Single-pass filtering: search, vote, truncate to rank_k."""
        self._check()
        fs = features if features is not None else self.extract(img)
        return self._search_rank(fs, exclude_id).truncated(self.rank_k)

    def iterative(
        self,
        img: GrayImage | None = None,
        features: FeatureSet | None = None,
        exclude_id: int | None = None,
    ) -> RankedList:
        """Iterative filtering: non-near-duplicates of the query set seed new
        searches; the flattened union is re-ranked by best RCMM."""
        self._check()
        fs = features if features is not None else self.extract(img)
        round0 = self._search_rank(fs, exclude_id).truncated(self.rank_k)
        if self.iterations == 0:
            return round0

        if self.store is None:
            raise ValueError("iterative filtering needs a feature store")
        query_set: list[FeatureSet] = [fs]
        votes: dict[int, int] = {e.image_id: e.votes for e in round0}
        candidates: list[int] = round0.image_ids()
        used_seeds: set[int] = set() if exclude_id is None else {exclude_id}
        rcmm_cache: dict[tuple[int, int], float] = {}
        any_seeded = False

        def best_rcmm(image_id: int) -> float:
            target = self.store.get(image_id)
            best = 0.0
            for qi, qfs in enumerate(query_set):
                key = (qi, image_id)
                if key not in rcmm_cache:
                    rcmm_cache[key] = rcmm(qfs, target, self.nndr_t)
                best = max(best, rcmm_cache[key])
            return best

        for _ in range(self.iterations):
            seeds = []
            for image_id in candidates:
                if len(seeds) >= self.max_seeds:
                    break
                if image_id in used_seeds:
                    continue
                if best_rcmm(image_id) >= self.nd_threshold:
                    used_seeds.add(image_id)  # near duplicate: suppressed
                    continue
                seeds.append(image_id)
            if not seeds:
                break
            any_seeded = True
            new_candidates: list[int] = []
            for image_id in seeds:
                used_seeds.add(image_id)
                seed_fs = self.store.get(image_id)
                query_set.append(seed_fs)
                sub = self._search_rank(seed_fs, exclude_id=image_id)
                sub = sub.truncated(self.rank_k)
                for e in sub:
                    if e.image_id == exclude_id:
                        continue
                    if e.image_id not in votes:
                        new_candidates.append(e.image_id)
                    votes[e.image_id] = votes.get(e.image_id, 0) + e.votes
            candidates = new_candidates

        if not any_seeded:
            # nothing was re-queried (e.g. every candidate was a near
            # duplicate): there is only one rank, so keep its order
            return round0
        scored = [
            RankEntry(image_id, votes[image_id], best_rcmm(image_id))
            for image_id in votes
        ]
        scored.sort(key=lambda e: (-e.score, -e.votes, e.image_id))
        return RankedList(scored).truncated(self.rank_k)
