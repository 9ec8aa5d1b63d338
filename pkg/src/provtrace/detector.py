"""Hessian blob detection, upright 64-d descriptors, distributed point selection."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from numba import njit
from sklearn.base import BaseEstimator

from .imaging import GrayImage, ensure_gray, integral_build

# Interest points are (n, 4) float32 rows of [x, y, scale, response];
# descriptors are (n, 64) float32 with unit L2 norm (or all-zero).
PT_X, PT_Y, PT_SCALE, PT_RESPONSE = 0, 1, 2, 3

FEATURE_MAGIC = b"PVF1"
FEATURE_VERSION = 1


@dataclass
class FeatureSet:
    """One image's interest points and descriptors; the unit of indexing."""

    image_id: int
    points: np.ndarray = field(default_factory=lambda: np.empty((0, 4), np.float32))
    descriptors: np.ndarray = field(
        default_factory=lambda: np.empty((0, 64), np.float32)
    )

    def __post_init__(self) -> None:
        self.points = np.ascontiguousarray(self.points, dtype=np.float32).reshape(-1, 4)
        self.descriptors = np.ascontiguousarray(
            self.descriptors, dtype=np.float32
        ).reshape(-1, 64)
        if len(self.points) != len(self.descriptors):
            raise ValueError("points and descriptors must have equal length")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xy(self) -> np.ndarray:
        return self.points[:, :2]


class Selection(NamedTuple):
    points: np.ndarray
    n_top: int
    n_greedy: int


def _filter_size(octave: int, layer: int) -> int:
    return 3 * ((2 ** (octave + 1)) * (layer + 1) + 1)


def _det_hessian_map(
    ii: np.ndarray, size: int, step: int, margin: int, ny: int, nx: int
) -> np.ndarray:
    """Box-filter det-of-Hessian responses on the octave's sampling grid."""
    lobe = size // 3
    half = size // 2

    def grid(dr: int, dc: int) -> np.ndarray:
        r0 = margin + dr
        c0 = margin + dc
        return ii[r0 : r0 + (ny - 1) * step + 1 : step,
                  c0 : c0 + (nx - 1) * step + 1 : step]

    def box(dx: int, dy: int, bw: int, bh: int) -> np.ndarray:
        return (grid(dy + bh, dx + bw) - grid(dy, dx + bw)
                - grid(dy + bh, dx) + grid(dy, dx))

    wing = lobe - 1
    dyy = (box(-wing, -half, 2 * lobe - 1, size)
           - 3 * box(-wing, -(lobe - 1) // 2, 2 * lobe - 1, lobe))
    dxx = (box(-half, -wing, size, 2 * lobe - 1)
           - 3 * box(-(lobe - 1) // 2, -wing, lobe, 2 * lobe - 1))
    dxy = (box(-lobe, -lobe, lobe, lobe) + box(1, 1, lobe, lobe)
           - box(1, -lobe, lobe, lobe) - box(-lobe, 1, lobe, lobe))

    inv_area = 1.0 / (size * size)
    fxx = dxx * inv_area
    fyy = dyy * inv_area
    fxy = dxy * (0.9 * inv_area)
    return fxx * fyy - fxy * fxy


def _local_maxima(stack: np.ndarray, layer: int, threshold: float) -> np.ndarray:
    """Strict 3x3x3 maxima of stack[layer] over (row, col) interior cells."""
    center = stack[layer, 1:-1, 1:-1]
    keep = center > threshold
    for dl in (-1, 0, 1):
        plane = stack[layer + dl]
        for dr in (0, 1, 2):
            for dc in (0, 1, 2):
                if dl == 0 and dr == 1 and dc == 1:
                    continue
                keep &= center > plane[dr : dr + center.shape[0],
                                       dc : dc + center.shape[1]]
    rows, cols = np.nonzero(keep)
    return np.stack([rows + 1, cols + 1], axis=1) if len(rows) else np.empty((0, 2), np.int64)


def _refine(stack: np.ndarray, layer: int, cand: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Quadratic sub-pixel/scale interpolation; drops candidates whose
    extremum falls more than half a grid cell away."""
    r, c = cand[:, 0], cand[:, 1]
    d0, d1, d2 = stack[layer - 1], stack[layer], stack[layer + 1]
    gx = 0.5 * (d1[r, c + 1] - d1[r, c - 1])
    gy = 0.5 * (d1[r + 1, c] - d1[r - 1, c])
    gs = 0.5 * (d2[r, c] - d0[r, c])
    hxx = d1[r, c + 1] - 2 * d1[r, c] + d1[r, c - 1]
    hyy = d1[r + 1, c] - 2 * d1[r, c] + d1[r - 1, c]
    hss = d2[r, c] - 2 * d1[r, c] + d0[r, c]
    hxy = 0.25 * (d1[r + 1, c + 1] - d1[r + 1, c - 1] - d1[r - 1, c + 1] + d1[r - 1, c - 1])
    hxs = 0.25 * (d2[r, c + 1] - d2[r, c - 1] - d0[r, c + 1] + d0[r, c - 1])
    hys = 0.25 * (d2[r + 1, c] - d2[r - 1, c] - d0[r + 1, c] + d0[r - 1, c])

    H = np.empty((len(cand), 3, 3))
    H[:, 0, 0], H[:, 0, 1], H[:, 0, 2] = hxx, hxy, hxs
    H[:, 1, 0], H[:, 1, 1], H[:, 1, 2] = hxy, hyy, hys
    H[:, 2, 0], H[:, 2, 1], H[:, 2, 2] = hxs, hys, hss
    g = np.stack([gx, gy, gs], axis=1)

    offsets = np.zeros_like(g)
    solvable = np.abs(np.linalg.det(H)) > 1e-30
    if solvable.any():
        offsets[solvable] = np.linalg.solve(H[solvable], -g[solvable, :, None])[..., 0]
    ok = solvable & (np.abs(offsets) <= 0.5).all(axis=1)
    return offsets[ok], cand[ok]


class SurfDetector(BaseEstimator):
    """Hessian box-filter interest point detector with upright descriptors.

    Parameters
    ----------
    n_points : total points kept per image (p).
    n_top : strongest-response points kept unconditionally (m); the rest are
        chosen by the non-overlap scan. ``n_top == n_points`` disables it.
    octaves, layers : scale-space shape.
    hessian_threshold : minimum det-of-Hessian response.
    overlap_radius : overlap-disk radius as a multiple of point scale.
    """

    def __init__(
        self,
        n_points: int = 5000,
        n_top: int = 2500,
        octaves: int = 3,
        layers: int = 4,
        hessian_threshold: float = 100.0,
        overlap_radius: float = 3.0,
    ):
        self.n_points = n_points
        self.n_top = n_top
        self.octaves = octaves
        self.layers = layers
        self.hessian_threshold = hessian_threshold
        self.overlap_radius = overlap_radius

    def _check_params(self) -> None:
        if not 0 < self.n_top <= self.n_points:
            raise ValueError("need 0 < n_top <= n_points")
        if self.layers < 3 or self.octaves < 1:
            raise ValueError("need layers >= 3 and octaves >= 1")
        if self.overlap_radius <= 0:
            raise ValueError("overlap_radius must be positive")

    def detect(self, img: GrayImage) -> np.ndarray:
        """All scale-space maxima above threshold, strongest response first."""
        self._check_params()
        img = ensure_gray(img)
        h, w = img.shape
        ii = integral_build(img)

        found: list[np.ndarray] = []
        for octave in range(self.octaves):
            step = 2 ** octave
            sizes = [_filter_size(octave, l) for l in range(self.layers)]
            margin = sizes[-1] // 2
            ny = (h - 1 - 2 * margin) // step + 1
            nx = (w - 1 - 2 * margin) // step + 1
            if ny < 3 or nx < 3:
                continue
            stack = np.stack([
                _det_hessian_map(ii, size, step, margin, ny, nx) for size in sizes
            ])
            for layer in range(1, self.layers - 1):
                cand = _local_maxima(stack, layer, self.hessian_threshold)
                if not len(cand):
                    continue
                offsets, cand = _refine(stack, layer, cand)
                if not len(cand):
                    continue
                size = sizes[layer]
                dsize = sizes[layer + 1] - sizes[layer]
                pts = np.empty((len(cand), 4), np.float32)
                pts[:, PT_X] = margin + (cand[:, 1] + offsets[:, 0]) * step
                pts[:, PT_Y] = margin + (cand[:, 0] + offsets[:, 1]) * step
                pts[:, PT_SCALE] = 1.2 * (size + offsets[:, 2] * dsize) / 9.0
                pts[:, PT_RESPONSE] = stack[layer][cand[:, 0], cand[:, 1]]
                found.append(pts)

        if not found:
            return np.empty((0, 4), np.float32)
        pts = np.concatenate(found)
        order = np.lexsort((pts[:, PT_SCALE], pts[:, PT_X], pts[:, PT_Y],
                            -pts[:, PT_RESPONSE]))
        return np.ascontiguousarray(pts[order])

    def select_distributed(self, points: np.ndarray) -> Selection:
        """Top-m points plus greedily chosen non-overlapping ones, topped up
        with the strongest skipped points when fewer than p fit."""
        self._check_params()
        return select_distributed(
            points, self.n_points, self.n_top, self.overlap_radius
        )

    def describe(self, img: GrayImage, points: np.ndarray, image_id: int = 0) -> FeatureSet:
        """Upright 64-d descriptors (4x4 subregions of Haar sums over a
        20*scale window, Gaussian weighted, L2 normalized)."""
        img = ensure_gray(img)
        points = np.asarray(points, dtype=np.float32).reshape(-1, 4)
        if not len(points):
            return FeatureSet(image_id)
        descs = _describe_points(integral_build(img), img.shape, points)
        return FeatureSet(image_id, points, descs)

    def extract(self, img: GrayImage, image_id: int = 0) -> FeatureSet:
        """detect -> select_distributed -> describe."""
        pts = self.select_distributed(self.detect(img)).points
        return self.describe(img, pts, image_id)


def select_distributed(
    points: np.ndarray, n_points: int, n_top: int, overlap_radius: float
) -> Selection:
    """Greedy distributed selection over response-sorted points.

    Returns the selected points ordered [top-m, non-overlapping, fill] with
    the section sizes; output size is min(n_points, len(points)).
    """
    points = np.asarray(points, dtype=np.float32).reshape(-1, 4)
    order = np.lexsort((points[:, PT_X], points[:, PT_Y], -points[:, PT_RESPONSE]))
    points = points[order]
    n = len(points)
    if n == 0:
        return Selection(points, 0, 0)
    tags = _greedy_tags(
        points[:, PT_X].astype(np.float64),
        points[:, PT_Y].astype(np.float64),
        (points[:, PT_SCALE] * overlap_radius).astype(np.float64),
        min(n_top, n_points, n),
        min(n_points, n),
    )
    parts = [points[tags == t] for t in (1, 2, 3)]
    return Selection(np.concatenate(parts), len(parts[0]), len(parts[1]))


@njit(cache=True)
def _greedy_tags(x, y, radius, n_top, n_out):  # pragma: no cover - jit
    n = len(x)
    tags = np.zeros(n, dtype=np.uint8)
    for i in range(n_top):
        tags[i] = 1
    taken = n_top
    for i in range(n_top, n):
        if taken >= n_out:
            break
        ok = True
        for j in range(i):
            if tags[j] == 0:
                continue
            dx = x[i] - x[j]
            dy = y[i] - y[j]
            rr = radius[i] + radius[j]
            if dx * dx + dy * dy < rr * rr:
                ok = False
                break
        if ok:
            tags[i] = 2
            taken += 1
    for i in range(n_top, n):
        if taken >= n_out:
            break
        if tags[i] == 0:
            tags[i] = 3
            taken += 1
    return tags


def _describe_points(
    ii: np.ndarray, shape: tuple[int, int], points: np.ndarray, chunk: int = 512
) -> np.ndarray:
    h, w = shape
    out = np.empty((len(points), 64), np.float32)
    for lo in range(0, len(points), chunk):
        out[lo : lo + chunk] = _describe_chunk(ii, h, w, points[lo : lo + chunk])
    return out


def _describe_chunk(ii: np.ndarray, h: int, w: int, pts: np.ndarray) -> np.ndarray:
    n = len(pts)
    sigma = pts[:, PT_SCALE].astype(np.float64)[:, None, None]
    cx = pts[:, PT_X].astype(np.float64)[:, None, None]
    cy = pts[:, PT_Y].astype(np.float64)[:, None, None]

    # 20x20 sample lattice, spacing = scale, centered on the point.
    rel = (np.arange(20) - 9.5)
    u = rel[None, None, :] * sigma          # column offsets (n, 1->20 broadcast)
    v = rel[None, :, None] * sigma          # row offsets
    px = np.rint(cx + u).astype(np.int64)
    py = np.rint(cy + v).astype(np.int64)
    px, py = np.broadcast_arrays(px, py)

    hs = np.maximum(1, np.rint(sigma)).astype(np.int64)
    hs = np.broadcast_to(hs, px.shape)
    valid = ((px - hs >= 0) & (px + hs <= w) & (py - hs >= 0) & (py + hs <= h))

    x0 = np.where(valid, px - hs, 0)
    x1 = np.where(valid, px, 0)
    x2 = np.where(valid, px + hs, 0)
    y0 = np.where(valid, py - hs, 0)
    y1 = np.where(valid, py, 0)
    y2 = np.where(valid, py + hs, 0)

    def box(ya, yb, xa, xb):
        return (ii[yb, xb] - ii[ya, xb] - ii[yb, xa] + ii[ya, xa]).astype(np.float64)

    dx = box(y0, y2, x1, x2) - box(y0, y2, x0, x1)
    dy = box(y1, y2, x0, x2) - box(y0, y1, x0, x2)

    weight = np.exp(-(u * u + v * v) / (2.0 * (3.3 * sigma) ** 2))
    weight = np.where(valid, np.broadcast_to(weight, px.shape), 0.0)
    dx *= weight
    dy *= weight

    def pool(a):
        return a.reshape(n, 4, 5, 4, 5).sum(axis=(2, 4))

    comp = np.stack([pool(dx), pool(np.abs(dx)), pool(dy), pool(np.abs(dy))], axis=-1)
    desc = comp.reshape(n, 64)
    norms = np.linalg.norm(desc, axis=1, keepdims=True)
    np.divide(desc, norms, out=desc, where=norms > 1e-12)
    desc[norms[:, 0] <= 1e-12] = 0.0
    return desc.astype(np.float32)


def write_features(fs: FeatureSet, path: str | Path) -> None:
    """Write the per-image binary feature file (magic PVF1, little-endian)."""
    n = len(fs)
    rows = np.empty((n, 68), dtype="<f4")
    rows[:, :4] = fs.points
    rows[:, 4:] = fs.descriptors
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIQI", FEATURE_MAGIC, FEATURE_VERSION, fs.image_id, n))
        fh.write(rows.tobytes())


def read_features(path: str | Path) -> FeatureSet:
    with open(path, "rb") as fh:
        header = fh.read(struct.calcsize("<4sIQI"))
        magic, version, image_id, n = struct.unpack("<4sIQI", header)
        if magic != FEATURE_MAGIC:
            raise ValueError(f"{path}: bad feature-file magic {magic!r}")
        if version != FEATURE_VERSION:
            raise ValueError(f"{path}: unsupported feature-file version {version}")
        rows = np.frombuffer(fh.read(n * 68 * 4), dtype="<f4").reshape(n, 68)
    return FeatureSet(image_id, rows[:, :4].copy(), rows[:, 4:].copy())
