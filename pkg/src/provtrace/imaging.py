"""Pixel-level primitives: integral images, warping, histogram matching."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

# A grayscale image is a 2-D uint8 array (rows, cols); an integral image is
# the (rows+1, cols+1) int64 cumulative-sum table with a zero first row/col.
GrayImage = np.ndarray
IntegralImage = np.ndarray

_BT601 = np.array([0.299, 0.587, 0.114])


def ensure_gray(img: np.ndarray) -> GrayImage:
    """Validate and return a 2-D uint8 grayscale image."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"expected 2-D grayscale image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"image must be at least 1x1, got shape {img.shape}")
    if img.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {img.dtype}")
    return img


def rgb_to_gray(rgb: np.ndarray) -> GrayImage:
    """BT.601 luma (0.299 R + 0.587 G + 0.114 B), rounded half-up."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected HxWx3 RGB array, got shape {rgb.shape}")
    y = rgb @ _BT601
    return np.floor(y + 0.5).clip(0, 255).astype(np.uint8)


def load_image(path: str | Path) -> GrayImage:
    """Decode a PNG/JPEG file to 8-bit grayscale."""
    with Image.open(path) as im:
        if im.mode == "L":
            return np.asarray(im, dtype=np.uint8)
        return rgb_to_gray(np.asarray(im.convert("RGB")))


def save_image(img: GrayImage, path: str | Path) -> None:
    """Write a grayscale image as PNG (deterministic encoder settings)."""
    Image.fromarray(ensure_gray(img), mode="L").save(path, format="PNG")


def integral_build(img: GrayImage) -> IntegralImage:
    """Cumulative-sum table: entry (i, j) is the sum of all pixels above/left."""
    img = ensure_gray(img)
    h, w = img.shape
    table = np.zeros((h + 1, w + 1), dtype=np.int64)
    np.cumsum(np.cumsum(img, axis=0, dtype=np.int64), axis=1, out=table[1:, 1:])
    return table


def box_sum(ii: IntegralImage, x: int, y: int, w: int, h: int) -> int:
    """Sum of the w x h pixel rectangle with top-left corner (x, y).

    The rectangle must lie fully inside the image; out-of-bounds requests
    raise instead of clamping.
    """
    rows, cols = ii.shape[0] - 1, ii.shape[1] - 1
    if w < 0 or h < 0 or x < 0 or y < 0 or x + w > cols or y + h > rows:
        raise ValueError(
            f"rectangle ({x},{y},{w},{h}) outside {cols}x{rows} image bounds"
        )
    return int(ii[y + h, x + w] - ii[y, x + w] - ii[y + h, x] + ii[y, x])


def is_invertible(H: np.ndarray) -> bool:
    return abs(np.linalg.det(np.asarray(H, dtype=np.float64))) > 1e-12


def normalize_homography(H: np.ndarray) -> np.ndarray:
    """Scale a 3x3 matrix so the bottom-right entry is 1 when nonzero."""
    H = np.asarray(H, dtype=np.float64)
    if H.shape != (3, 3):
        raise ValueError(f"homography must be 3x3, got shape {H.shape}")
    if abs(H[2, 2]) > 1e-12:
        H = H / H[2, 2]
    return H


def warp(img: GrayImage, H: np.ndarray, out_w: int, out_h: int) -> GrayImage:
    """Warp `img` by the homography `H` into an (out_h, out_w) frame.

    Output pixels are inverse-mapped through H and bilinearly interpolated;
    samples falling outside the source contribute 0.
    """
    img = ensure_gray(img)
    H = normalize_homography(H)
    if out_w < 1 or out_h < 1:
        raise ValueError("output dimensions must be positive")
    if not is_invertible(H):
        raise ValueError("homography is singular")
    Hinv = np.linalg.inv(H)

    xs, ys = np.meshgrid(np.arange(out_w, dtype=np.float64),
                         np.arange(out_h, dtype=np.float64))
    denom = Hinv[2, 0] * xs + Hinv[2, 1] * ys + Hinv[2, 2]
    denom[denom == 0] = np.finfo(np.float64).tiny
    sx = (Hinv[0, 0] * xs + Hinv[0, 1] * ys + Hinv[0, 2]) / denom
    sy = (Hinv[1, 0] * xs + Hinv[1, 1] * ys + Hinv[1, 2]) / denom

    h, w = img.shape
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0

    out = np.zeros((out_h, out_w), dtype=np.float64)
    for dy in (0, 1):
        wy = fy if dy else 1.0 - fy
        yy = y0 + dy
        for dx in (0, 1):
            wx = fx if dx else 1.0 - fx
            xx = x0 + dx
            inside = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
            vals = img[yy.clip(0, h - 1), xx.clip(0, w - 1)].astype(np.float64)
            out += np.where(inside, wx * wy * vals, 0.0)
    return np.floor(out + 0.5).clip(0, 255).astype(np.uint8)


def match_histograms(src: GrayImage, ref: GrayImage) -> GrayImage:
    """Map `src` values so their empirical CDF follows `ref`'s (256-bin
    histogram specification; CDF inversion breaks ties toward the smaller
    target value)."""
    src = ensure_gray(src)
    ref = ensure_gray(ref)
    src_cdf = np.cumsum(np.bincount(src.ravel(), minlength=256)) / src.size
    ref_cdf = np.cumsum(np.bincount(ref.ravel(), minlength=256)) / ref.size
    mapping = np.searchsorted(ref_cdf, src_cdf, side="left").clip(0, 255)
    return mapping.astype(np.uint8)[src]
