"""Pairwise image analysis: feature matching, geometric consistency,
homography registration, and GCM/MI dissimilarity matrices."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator

from .detector import FeatureSet
from .imaging import GrayImage, ensure_gray, match_histograms, warp


class NoHomographyError(ValueError):
    """Raised when too few matches support a homography estimate."""


@dataclass
class Matches:
    """Index pairs into two point sets plus descriptor distances."""

    a_idx: np.ndarray
    b_idx: np.ndarray
    dist: np.ndarray

    def __post_init__(self) -> None:
        self.a_idx = np.asarray(self.a_idx, dtype=np.int64).reshape(-1)
        self.b_idx = np.asarray(self.b_idx, dtype=np.int64).reshape(-1)
        self.dist = np.asarray(self.dist, dtype=np.float64).reshape(-1)

    def __len__(self) -> int:
        return len(self.a_idx)

    def take(self, mask: np.ndarray) -> "Matches":
        return Matches(self.a_idx[mask], self.b_idx[mask], self.dist[mask])


@dataclass
class HomographyFit:
    H: np.ndarray
    inliers: np.ndarray
    rms: float


@dataclass
class PairwiseAnalysis:
    """Match-count/dissimilarity matrices and the non-distractor mask for
    one query's candidate set. ``mi`` stores raw mutual information, a
    similarity: larger means more related."""

    query: int
    match_counts: np.ndarray
    gcm_d: np.ndarray
    mi: np.ndarray
    active: np.ndarray
    pair_computations: int

    @property
    def n(self) -> int:
        return len(self.active)


def nndr_match(A: FeatureSet, B: FeatureSet, nndr_t: float = 0.8,
               chunk: int = 2048) -> Matches:
    """Best-match candidates passing Lowe's ratio test (d1/d2 <= t).

    A single candidate in B counts as d2 = +inf, so it is always kept.
    """
    if not 0 < nndr_t < 1:
        raise ValueError("nndr_t must be in (0, 1)")
    na, nb = len(A), len(B)
    if na == 0 or nb == 0:
        return Matches([], [], [])
    t2 = nndr_t * nndr_t
    a_idx, b_idx, dists = [], [], []
    for lo in range(0, na, chunk):
        d2 = cdist(A.descriptors[lo : lo + chunk], B.descriptors, "sqeuclidean")
        best = np.argmin(d2, axis=1)
        rows = np.arange(len(d2))
        d1 = d2[rows, best]
        if nb == 1:
            keep = np.ones(len(d2), dtype=bool)
        else:
            d2c = d2.copy()
            d2c[rows, best] = np.inf
            second = d2c.min(axis=1)
            with np.errstate(invalid="ignore", divide="ignore"):
                keep = (d1 <= t2 * second) & (second > 0)
        a_idx.append(rows[keep] + lo)
        b_idx.append(best[keep])
        dists.append(np.sqrt(d1[keep]))
    return Matches(np.concatenate(a_idx), np.concatenate(b_idx),
                   np.concatenate(dists))


def _pair_samples(n: int, trials: int, rng: np.random.Generator) -> np.ndarray:
    total = n * (n - 1) // 2
    if total <= trials:
        i, j = np.triu_indices(n, k=1)
        return np.stack([i, j], axis=1)
    flat = rng.choice(total, size=trials, replace=False)
    # invert the row-major upper-triangle enumeration
    i = (n - 2 - np.floor(
        np.sqrt(-8.0 * flat + 4.0 * n * (n - 1) - 7.0) / 2.0 - 0.5)).astype(np.int64)
    j = flat + i + 1 - (n * (n - 1) - (n - i) * (n - i - 1)) // 2
    return np.stack([i, j.astype(np.int64)], axis=1)


def geometric_consistency(
    matches: Matches,
    pts_a: np.ndarray,
    pts_b: np.ndarray,
    gc_epsilon: float = 5.0,
    gc_trials: int = 512,
    seed: int = 0,
) -> Matches:
    """Keep the matches agreeing with the best two-point similarity model
    (scale, rotation, translation derived from a match pair)."""
    n = len(matches)
    if n < 2:
        return matches
    pa = pts_a[matches.a_idx, :2].astype(np.float64)
    pb = pts_b[matches.b_idx, :2].astype(np.float64)
    rng = np.random.default_rng(seed)
    pairs = _pair_samples(n, gc_trials, rng)

    vp = pa[pairs[:, 1]] - pa[pairs[:, 0]]
    vq = pb[pairs[:, 1]] - pb[pairs[:, 0]]
    lp = np.hypot(vp[:, 0], vp[:, 1])
    lq = np.hypot(vq[:, 0], vq[:, 1])
    ok = (lp > 1e-9) & (lq > 1e-9)
    if not ok.any():
        return matches
    pairs, vp, vq, lp, lq = pairs[ok], vp[ok], vq[ok], lp[ok], lq[ok]

    scale = lq / lp
    theta = np.arctan2(vq[:, 1], vq[:, 0]) - np.arctan2(vp[:, 1], vp[:, 0])
    cos = scale * np.cos(theta)
    sin = scale * np.sin(theta)

    eps2 = gc_epsilon * gc_epsilon
    best_count, best_res, best_mask = -1, np.inf, None
    for t0 in range(0, len(pairs), 64):
        sl = slice(t0, min(t0 + 64, len(pairs)))
        c, s = cos[sl, None], sin[sl, None]
        anchor_a = pa[pairs[sl, 0]]
        anchor_b = pb[pairs[sl, 0]]
        rel_x = pa[None, :, 0] - anchor_a[:, None, 0]
        rel_y = pa[None, :, 1] - anchor_a[:, None, 1]
        tx = anchor_b[:, None, 0] + c * rel_x - s * rel_y
        ty = anchor_b[:, None, 1] + s * rel_x + c * rel_y
        res2 = (tx - pb[None, :, 0]) ** 2 + (ty - pb[None, :, 1]) ** 2
        inl = res2 <= eps2
        counts = inl.sum(axis=1)
        sums = np.where(inl, np.sqrt(res2), 0.0).sum(axis=1)
        for k in range(len(counts)):
            cnt = int(counts[k])
            if cnt == 0:
                continue
            mean_res = sums[k] / cnt
            if cnt > best_count or (cnt == best_count and mean_res < best_res):
                best_count, best_res, best_mask = cnt, mean_res, inl[k].copy()
    if best_mask is None:
        return matches
    return matches.take(best_mask)


def gcm_pair(
    A: FeatureSet,
    B: FeatureSet,
    nndr_t: float = 0.8,
    gc_epsilon: float = 5.0,
    gc_trials: int = 512,
    seed: int = 0,
) -> tuple[int, float]:
    """Geometrically-consistent match count and its inverse dissimilarity
    (+inf when no matches survive)."""
    count = len(consistent_matches(A, B, nndr_t, gc_epsilon, gc_trials, seed))
    return count, (1.0 / count if count else np.inf)


def consistent_matches(
    A: FeatureSet,
    B: FeatureSet,
    nndr_t: float = 0.8,
    gc_epsilon: float = 5.0,
    gc_trials: int = 512,
    seed: int = 0,
) -> Matches:
    m = nndr_match(A, B, nndr_t)
    return geometric_consistency(m, A.points, B.points, gc_epsilon, gc_trials, seed)


def _dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Direct linear transform with Hartley normalization."""

    def normalizer(p):
        centroid = p.mean(axis=0)
        scale = np.sqrt(2.0) / max(np.mean(np.linalg.norm(p - centroid, axis=1)), 1e-12)
        T = np.array([[scale, 0, -scale * centroid[0]],
                      [0, scale, -scale * centroid[1]],
                      [0, 0, 1.0]])
        return T

    Ta, Tb = normalizer(src), normalizer(dst)
    sh = (src @ Ta[:2, :2].T) + Ta[:2, 2]
    dh = (dst @ Tb[:2, :2].T) + Tb[:2, 2]
    n = len(src)
    A = np.zeros((2 * n, 9))
    A[0::2, 0] = -sh[:, 0]
    A[0::2, 1] = -sh[:, 1]
    A[0::2, 2] = -1.0
    A[0::2, 6] = dh[:, 0] * sh[:, 0]
    A[0::2, 7] = dh[:, 0] * sh[:, 1]
    A[0::2, 8] = dh[:, 0]
    A[1::2, 3] = -sh[:, 0]
    A[1::2, 4] = -sh[:, 1]
    A[1::2, 5] = -1.0
    A[1::2, 6] = dh[:, 1] * sh[:, 0]
    A[1::2, 7] = dh[:, 1] * sh[:, 1]
    A[1::2, 8] = dh[:, 1]
    _, _, vt = np.linalg.svd(A)
    H = vt[-1].reshape(3, 3)
    H = np.linalg.inv(Tb) @ H @ Ta
    if abs(H[2, 2]) > 1e-12:
        H = H / H[2, 2]
    return H


def _project(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    ph = pts @ H[:2, :2].T + H[:2, 2]
    w = pts @ H[2, :2] + H[2, 2]
    w = np.where(np.abs(w) < 1e-12, 1e-12, w)
    return ph / w[:, None]


def estimate_homography(
    matches: Matches,
    pts_a: np.ndarray,
    pts_b: np.ndarray,
    gc_epsilon: float = 5.0,
    gc_trials: int = 512,
    seed: int = 0,
) -> HomographyFit:
    """RANSAC homography over 4-point DLT samples, refit on the inliers."""
    n = len(matches)
    if n < 4:
        raise NoHomographyError(f"need at least 4 matches, got {n}")
    src = pts_a[matches.a_idx, :2].astype(np.float64)
    dst = pts_b[matches.b_idx, :2].astype(np.float64)

    if n == 4:
        best_mask = np.ones(4, dtype=bool)
    else:
        rng = np.random.default_rng(seed)
        eps2 = gc_epsilon * gc_epsilon
        best_count, best_err, best_mask = -1, np.inf, None
        for _ in range(gc_trials):
            pick = rng.choice(n, size=4, replace=False)
            try:
                H = _dlt(src[pick], dst[pick])
            except np.linalg.LinAlgError:
                continue
            if not np.isfinite(H).all() or abs(np.linalg.det(H)) < 1e-12:
                continue
            res2 = np.sum((_project(H, src) - dst) ** 2, axis=1)
            mask = res2 <= eps2
            count = int(mask.sum())
            if count < 4:
                continue
            err = float(res2[mask].mean())
            if count > best_count or (count == best_count and err < best_err):
                best_count, best_err, best_mask = count, err, mask
                if count == n:
                    break
        if best_mask is None:
            raise NoHomographyError("no RANSAC sample produced a valid model")

    H = _dlt(src[best_mask], dst[best_mask])
    if abs(np.linalg.det(H)) < 1e-12 or not np.isfinite(H).all():
        raise NoHomographyError("degenerate homography fit")
    res2 = np.sum((_project(H, src) - dst) ** 2, axis=1)
    inliers = res2 <= gc_epsilon * gc_epsilon
    if not inliers.any():
        raise NoHomographyError("refit lost all inliers")
    rms = float(np.sqrt(res2[inliers].mean()))
    return HomographyFit(H, inliers, rms)


def mutual_information(R1: GrayImage, R2: GrayImage) -> float:
    """MI in bits from the 256x256 joint histogram of corresponding pixels."""
    R1 = ensure_gray(R1)
    R2 = ensure_gray(R2)
    if R1.shape != R2.shape:
        raise ValueError(f"patch shapes differ: {R1.shape} vs {R2.shape}")
    joint = np.bincount(
        (R1.ravel().astype(np.int64) << 8) | R2.ravel().astype(np.int64),
        minlength=65536,
    ).reshape(256, 256)
    p = joint / joint.sum()
    px = p.sum(axis=1)
    py = p.sum(axis=0)
    nz = p > 0
    denom = np.outer(px, py)
    return float(np.sum(p[nz] * np.log2(p[nz] / denom[nz])))


def mi_pair(
    img_a: GrayImage,
    feats_a: FeatureSet,
    img_b: GrayImage,
    feats_b: FeatureSet,
    matches: Matches,
    gc_epsilon: float = 5.0,
    gc_trials: int = 512,
    seed: int = 0,
) -> float:
    """MI between the histogram-matched registration of image A onto image B
    and image B itself, over the matched points' bounding box. Returns 0
    when no homography is supported (no shared-content evidence)."""
    img_b = ensure_gray(img_b)
    try:
        fit = estimate_homography(matches, feats_a.points, feats_b.points,
                                  gc_epsilon, gc_trials, seed)
    except NoHomographyError:
        return 0.0
    h, w = img_b.shape
    warped = warp(ensure_gray(img_a), fit.H, out_w=w, out_h=h)

    anchor = feats_b.points[matches.b_idx, :2]
    x0 = max(0, int(np.floor(anchor[:, 0].min())))
    y0 = max(0, int(np.floor(anchor[:, 1].min())))
    x1 = min(w, int(np.ceil(anchor[:, 0].max())) + 1)
    y1 = min(h, int(np.ceil(anchor[:, 1].max())) + 1)
    if x1 <= x0 or y1 <= y0:
        return 0.0
    r1 = warped[y0:y1, x0:x1]
    r2 = img_b[y0:y1, x0:x1]
    return mutual_information(match_histograms(r1, r2), r2)


class PairwiseAnalyzer(BaseEstimator):
    """Builds the match-count, GCM and MI matrices for a candidate set,
    skipping distractor-distractor pairs via query-seeded frontier expansion.
    """

    def __init__(
        self,
        nndr_t: float = 0.8,
        gc_epsilon: float = 5.0,
        gc_trials: int = 512,
        min_matches: int = 4,
        connect_min: int = 4,
        with_mi: bool = True,
        seed: int = 0,
    ):
        self.nndr_t = nndr_t
        self.gc_epsilon = gc_epsilon
        self.gc_trials = gc_trials
        self.min_matches = min_matches
        self.connect_min = connect_min
        self.with_mi = with_mi
        self.seed = seed

    def analyze(
        self,
        images: list[GrayImage],
        features: list[FeatureSet],
        query: int,
    ) -> PairwiseAnalysis:
        n = len(features)
        if len(images) != n:
            raise ValueError("images and features must align")
        if not 0 <= query < n:
            raise ValueError("query index out of range")

        counts = np.zeros((n, n), dtype=np.int32)
        computed = np.zeros((n, n), dtype=bool)
        np.fill_diagonal(computed, True)
        match_cache: dict[tuple[int, int], Matches] = {}
        connected = np.zeros(n, dtype=bool)
        connected[query] = True
        frontier = [query]
        pair_computations = 0

        while frontier:
            for f in frontier:
                for u in range(n):
                    if computed[f, u]:
                        continue
                    i, j = (f, u) if f < u else (u, f)
                    m = consistent_matches(
                        features[i], features[j], self.nndr_t,
                        self.gc_epsilon, self.gc_trials, self.seed,
                    )
                    match_cache[(i, j)] = m
                    counts[i, j] = counts[j, i] = len(m)
                    computed[i, j] = computed[j, i] = True
                    pair_computations += 1
            reachable = (counts >= self.connect_min) & connected[None, :]
            newly = [u for u in range(n)
                     if not connected[u] and reachable[u].any()]
            for u in newly:
                connected[u] = True
            frontier = newly

        gcm_d = np.where(counts > 0, 1.0 / np.maximum(counts, 1), np.inf)
        np.fill_diagonal(gcm_d, np.inf)

        mi = np.zeros((n, n), dtype=np.float64)
        if self.with_mi:
            active_ids = np.nonzero(connected)[0]
            for i in active_ids:
                for j in active_ids:
                    if i >= j:
                        continue
                    m = match_cache.get((i, j))
                    if m is None or len(m) == 0:
                        continue
                    mi[i, j] = mi_pair(images[i], features[i], images[j],
                                       features[j], m, self.gc_epsilon,
                                       self.gc_trials, self.seed)
                    mi[j, i] = mi_pair(images[j], features[j], images[i],
                                       features[i],
                                       Matches(m.b_idx, m.a_idx, m.dist),
                                       self.gc_epsilon, self.gc_trials,
                                       self.seed)
        return PairwiseAnalysis(
            query=query,
            match_counts=counts,
            gcm_d=gcm_d,
            mi=mi,
            active=connected,
            pair_computations=pair_computations,
        )
