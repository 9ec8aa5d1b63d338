"""Synthetic provenance dataset generator: transformation chains and splice
composites over seed photos, plus a disjoint distractor pool."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .graphs import Edge, ProvenanceGraph
from .imaging import GrayImage, load_image, save_image, warp
from .metrics import GroundTruthCase

# Transforms that destroy pixel information; their edge directions are
# recoverable from content, unlike reversible edits.
IRREVERSIBLE = frozenset({"clip", "blur"})
PALETTE = ("crop", "scale", "rotate", "brightness", "contrast", "clip",
           "blur", "splice")

_MIN_DIM = 112


@dataclass
class SynthSpec:
    seeds_dir: str | Path
    graphs: int = 20
    depth: tuple[int, int] = (4, 7)
    branching: tuple[int, int] = (1, 3)
    transforms: tuple[str, ...] = PALETTE
    distractors: int = 5000
    seed: int = 0
    base_size: int = 256
    distractor_size: int = 160
    max_nodes: int = 12

    def __post_init__(self) -> None:
        unknown = set(self.transforms) - set(PALETTE)
        if unknown:
            raise ValueError(f"unknown transforms: {sorted(unknown)}")
        if self.depth[0] < 1:
            raise ValueError("depth must be at least 1")

    @classmethod
    def from_file(cls, path: str | Path) -> "SynthSpec":
        """Parse a plain-text `key = value` spec file."""
        values: dict[str, str] = {}
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
        kwargs: dict = {"seeds_dir": values.pop("seeds_dir")}
        for key in ("graphs", "distractors", "seed", "base_size",
                    "distractor_size", "max_nodes"):
            if key in values:
                kwargs[key] = int(values.pop(key))
        if "depth" in values:
            lo, hi = values.pop("depth").split("-")
            kwargs["depth"] = (int(lo), int(hi))
        if "branching" in values:
            lo, hi = values.pop("branching").split("-")
            kwargs["branching"] = (int(lo), int(hi))
        if "transforms" in values:
            kwargs["transforms"] = tuple(
                t.strip() for t in values.pop("transforms").split(",") if t.strip()
            )
        if values:
            raise ValueError(f"unknown spec keys: {sorted(values)}")
        return cls(**kwargs)


def _to_uint8(a: np.ndarray) -> GrayImage:
    return np.floor(np.clip(a, 0, 255) + 0.5).astype(np.uint8)


def _scale_to(img: GrayImage, out_w: int, out_h: int) -> GrayImage:
    h, w = img.shape
    H = np.diag([out_w / w, out_h / h, 1.0])
    return warp(img, H, out_w, out_h)


def _t_crop(img: GrayImage, rng: np.random.Generator) -> GrayImage | None:
    h, w = img.shape
    fh, fw = rng.uniform(0.65, 0.85, size=2)
    ch, cw = int(h * fh), int(w * fw)
    if ch < _MIN_DIM or cw < _MIN_DIM:
        return None
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    return img[y0 : y0 + ch, x0 : x0 + cw].copy()


def _t_scale(img: GrayImage, rng: np.random.Generator) -> GrayImage | None:
    f = float(rng.uniform(0.7, 1.35))
    h, w = img.shape
    out_h, out_w = int(round(h * f)), int(round(w * f))
    if min(out_h, out_w) < _MIN_DIM:
        return None
    return _scale_to(img, out_w, out_h)


def _t_rotate(img: GrayImage, rng: np.random.Generator) -> GrayImage:
    angle = float(rng.uniform(8.0, 25.0)) * (1 if rng.random() < 0.5 else -1)
    h, w = img.shape
    theta = np.deg2rad(angle)
    c, s = np.cos(theta), np.sin(theta)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    H = (np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1.0]])
         @ np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
         @ np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]]))
    return warp(img, H, w, h)


def _t_brightness(img: GrayImage, rng: np.random.Generator) -> GrayImage:
    delta = float(rng.uniform(15.0, 45.0)) * (1 if rng.random() < 0.5 else -1)
    return _to_uint8(img.astype(np.float64) + delta)


def _t_contrast(img: GrayImage, rng: np.random.Generator) -> GrayImage:
    c = float(rng.uniform(1.15, 1.35))
    if rng.random() < 0.5:
        c = 1.0 / c
    return _to_uint8((img.astype(np.float64) - 128.0) * c + 128.0)


def _t_clip(img: GrayImage, rng: np.random.Generator) -> GrayImage:
    threshold = int(rng.integers(150, 201))
    out = img.copy()
    out[out >= threshold] = 255
    return out


def _t_blur(img: GrayImage, rng: np.random.Generator) -> GrayImage:
    sigma = float(rng.uniform(1.0, 2.0))
    return _to_uint8(gaussian_filter(img.astype(np.float64), sigma))


_TRANSFORMS = {
    "crop": _t_crop,
    "scale": _t_scale,
    "rotate": _t_rotate,
    "brightness": _t_brightness,
    "contrast": _t_contrast,
    "clip": _t_clip,
    "blur": _t_blur,
}


def apply_transform(name: str, img: GrayImage,
                    rng: np.random.Generator) -> GrayImage:
    """Apply one palette transform; degenerate parameter draws (e.g. an
    undersized crop) are re-sampled."""
    if name == "splice":
        raise ValueError("splice needs a donor; use _splice")
    fn = _TRANSFORMS[name]
    for _ in range(16):
        out = fn(img, rng)
        if out is not None:
            return out
    return img.copy()  # image too small to crop/scale down further


def _splice(host: GrayImage, donor: GrayImage,
            rng: np.random.Generator) -> GrayImage:
    """Paste a random donor region into the host."""
    hh, hw = host.shape
    dh, dw = donor.shape
    fh, fw = rng.uniform(0.3, 0.5, size=2)
    rh = max(16, min(int(hh * fh), dh))
    rw = max(16, min(int(hw * fw), dw))
    sy = int(rng.integers(0, dh - rh + 1))
    sx = int(rng.integers(0, dw - rw + 1))
    region = donor[sy : sy + rh, sx : sx + rw]
    ty = int(rng.integers(0, hh - rh + 1))
    tx = int(rng.integers(0, hw - rw + 1))
    out = host.copy()
    out[ty : ty + rh, tx : tx + rw] = region
    return out


def _prepare_base(img: GrayImage, rng: np.random.Generator,
                  base_size: int) -> GrayImage:
    """Random square-ish working view of a seed photo."""
    h, w = img.shape
    side = int(min(h, w) * rng.uniform(0.7, 1.0))
    y0 = int(rng.integers(0, h - side + 1))
    x0 = int(rng.integers(0, w - side + 1))
    view = img[y0 : y0 + side, x0 : x0 + side]
    return _scale_to(view, base_size, base_size)


def _distractor(rng: np.random.Generator, size: int) -> GrayImage:
    base = gaussian_filter(rng.uniform(0, 255, (size, size)), 6.0)
    base = (base - base.min()) / max(float(np.ptp(base)), 1e-9) * 180 + 30
    canvas = base
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(6, 14))):
        cx, cy = rng.uniform(0, size, size=2)
        ax = rng.uniform(size * 0.04, size * 0.25)
        ay = rng.uniform(size * 0.04, size * 0.25)
        angle = rng.uniform(0, np.pi)
        ca, sa = np.cos(angle), np.sin(angle)
        u = (xx - cx) * ca + (yy - cy) * sa
        v = -(xx - cx) * sa + (yy - cy) * ca
        mask = (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
        canvas = np.where(mask, rng.uniform(0, 255), canvas)
    canvas = gaussian_filter(canvas, 1.0) + rng.normal(0, 4.0, canvas.shape)
    return _to_uint8(canvas)


def generate(spec: SynthSpec, out_dir: str | Path) -> list[GroundTruthCase]:
    """Emit corpus images, per-case ground truth and a distractor pool.

    Every graph edge corresponds to exactly one applied transformation;
    composite nodes carry one incoming edge per parent (host and donor).
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    truth_dir = out_dir / "truth"
    img_dir.mkdir(parents=True, exist_ok=True)
    truth_dir.mkdir(parents=True, exist_ok=True)

    seed_files = sorted(
        p for p in Path(spec.seeds_dir).iterdir()
        if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    )
    if not seed_files:
        raise ValueError(f"no seed images in {spec.seeds_dir}")
    if "splice" in spec.transforms and len(seed_files) < 2:
        raise ValueError("splice requires at least 2 seed images")
    seeds = [load_image(p) for p in seed_files]

    rng = np.random.default_rng(spec.seed)
    chain_palette = [t for t in spec.transforms if t != "splice"]
    # deterministic coverage: the first draws cycle a shuffled palette copy
    pending = list(rng.permutation(chain_palette))

    def next_transform() -> str:
        if pending:
            return pending.pop()
        return chain_palette[int(rng.integers(len(chain_palette)))]

    next_id = 0
    manifest: list[dict] = []
    cases: list[GroundTruthCase] = []

    def emit(img: GrayImage) -> int:
        nonlocal next_id
        image_id = next_id
        next_id += 1
        name = f"img_{image_id:06d}.png"
        save_image(img, img_dir / name)
        manifest.append({"id": image_id, "file": f"images/{name}"})
        return image_id

    for case_no in range(spec.graphs):
        images: dict[int, GrayImage] = {}
        edges: list[Edge] = []
        labels: dict[tuple[int, int], str] = {}

        seed_no = int(rng.integers(len(seeds)))
        root_img = _prepare_base(seeds[seed_no], rng, spec.base_size)
        root = emit(root_img)
        images[root] = root_img

        def grow(parent: int, name: str, img: GrayImage) -> int:
            child = emit(img)
            images[child] = img
            edges.append(Edge(parent, child, True, 1.0))
            labels[(parent, child)] = name
            return child

        depth = int(rng.integers(spec.depth[0], spec.depth[1] + 1))
        chain = [root]
        for _ in range(depth):
            name = next_transform()
            chain.append(grow(chain[-1], name,
                              apply_transform(name, images[chain[-1]], rng)))

        do_splice = ("splice" in spec.transforms and len(seeds) > 1
                     and (case_no == 0 or rng.random() < 0.5))
        composite = None
        if do_splice:
            donor_seed = int(rng.integers(len(seeds)))
            donor_img = _prepare_base(seeds[donor_seed], rng, spec.base_size)
            donor = emit(donor_img)
            images[donor] = donor_img
            host = chain[int(rng.integers(1, len(chain)))]
            composite = grow(host, "splice",
                             _splice(images[host], images[donor], rng))
            edges.append(Edge(donor, composite, True, 1.0))
            labels[(donor, composite)] = "splice"

        branches = int(rng.integers(spec.branching[0], spec.branching[1] + 1))
        branches = min(branches, spec.max_nodes - len(images))
        existing = sorted(images)
        for _ in range(max(0, branches)):
            parent = existing[int(rng.integers(len(existing)))]
            name = next_transform()
            grow(parent, name, apply_transform(name, images[parent], rng))

        query = composite if composite is not None else chain[-1]
        graph = ProvenanceGraph(query, sorted(images), edges)
        case = GroundTruthCase(query, set(images), graph, labels)
        case.write_json(truth_dir / f"case_{case_no:03d}.json")
        cases.append(case)

    for _ in range(spec.distractors):
        emit(_distractor(rng, spec.distractor_size))

    with open(out_dir / "manifest.json", "w") as fh:
        json.dump({"images": manifest}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return cases
