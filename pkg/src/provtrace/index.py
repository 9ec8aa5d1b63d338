"""OPQ-rotated product-quantization index with inverted lists (IVFADC)."""

from __future__ import annotations

import queue
import struct
import threading
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numba import njit
from sklearn.base import BaseEstimator

from .detector import FeatureSet, read_features

DIM = 64
INDEX_MAGIC = b"PVIX"
INDEX_VERSION = 1
SENTINEL_FEATURE = np.iinfo(np.int64).max


def kmeans(
    X: np.ndarray,
    k: int,
    iters: int,
    rng: np.random.Generator,
    init: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's k-means; empty clusters are re-seeded from the farthest point.

    Returns (centroids (k, d), assignments (n,)).
    """
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    if n < k:
        raise ValueError(f"k-means needs at least k={k} points, got {n}")
    if init is None:
        centroids = X[rng.choice(n, size=k, replace=False)].copy()
    else:
        centroids = np.asarray(init, dtype=np.float64).copy()

    assign = np.full(n, -1, dtype=np.int64)
    for _ in range(max(1, iters)):
        d2 = _sq_dists(X, centroids)
        new_assign = np.argmin(d2, axis=1)
        dist_to_own = d2[np.arange(n), new_assign]
        for c in range(k):
            mask = new_assign == c
            if mask.any():
                centroids[c] = X[mask].mean(axis=0)
            else:
                far = int(np.argmax(dist_to_own))
                centroids[c] = X[far]
                new_assign[far] = c
                dist_to_own[far] = 0.0
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return centroids, assign


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    x2 = np.sum(X * X, axis=1, keepdims=True)
    c2 = np.sum(C * C, axis=1)
    return np.maximum(x2 + c2[None, :] - 2.0 * (X @ C.T), 0.0)


class IvfAdcIndex(BaseEstimator):
    """Inverted-file index over OPQ-rotated 64-d descriptors with ADC search.

    ``fit`` learns the rotation, the coarse codebook and the residual
    sub-codebooks from a training sample; ``add`` ingests descriptors;
    ``kneighbors`` returns per-query (distance, feature id, image id) rows.
    """

    def __init__(
        self,
        coarse_k: int = 32,
        subq_m: int = 8,
        subq_k: int = 96,
        nprobe: int = 4,
        knn_k: int = 20,
        batch_size: int = 65536,
        opq_iters: int = 10,
        kmeans_iters: int = 25,
        seed: int = 0,
    ):
        self.coarse_k = coarse_k
        self.subq_m = subq_m
        self.subq_k = subq_k
        self.nprobe = nprobe
        self.knn_k = knn_k
        self.batch_size = batch_size
        self.opq_iters = opq_iters
        self.kmeans_iters = kmeans_iters
        self.seed = seed

    # -- training ----------------------------------------------------------

    def _check_params(self) -> None:
        if DIM % self.subq_m != 0:
            raise ValueError(f"subq_m must divide {DIM}")
        if not 1 <= self.nprobe <= self.coarse_k:
            raise ValueError("need 1 <= nprobe <= coarse_k")
        if self.knn_k < 1:
            raise ValueError("knn_k must be >= 1")
        if self.subq_k > 256:
            raise ValueError("subq_k must fit in one byte")

    def fit(self, X: np.ndarray, y=None) -> "IvfAdcIndex":
        """Train rotation and codebooks on a descriptor sample."""
        self._check_params()
        X = np.asarray(X, dtype=np.float64).reshape(-1, DIM)
        min_sample = 10 * max(self.coarse_k, self.subq_k)
        if len(X) < min_sample:
            raise ValueError(
                f"training sample too small: {len(X)} < {min_sample}"
            )
        rng = np.random.default_rng(self.seed)

        rotation = np.eye(DIM)
        coarse = subcodes = None
        for _ in range(max(0, self.opq_iters)):
            coarse, subcodes, recon = self._quantize_pass(X @ rotation.T, rng,
                                                          coarse, subcodes)
            u, _, vt = np.linalg.svd(X.T @ recon)
            rotation = (u @ vt).T
        coarse, subcodes, _ = self._quantize_pass(X @ rotation.T, rng,
                                                  coarse, subcodes)

        self.rotation_ = rotation.astype(np.float32)
        self.coarse_ = coarse.astype(np.float32)
        self.codebooks_ = subcodes.astype(np.float32)
        self._reset_lists()
        return self

    def _quantize_pass(self, Xr, rng, coarse, subcodes):
        coarse, assign = kmeans(Xr, self.coarse_k, self.kmeans_iters, rng,
                                init=coarse)
        residuals = Xr - coarse[assign]
        d = DIM // self.subq_m
        new_codes = np.empty((self.subq_m, self.subq_k, d))
        recon = np.empty_like(Xr)
        for m in range(self.subq_m):
            sub = residuals[:, m * d : (m + 1) * d]
            init = None if subcodes is None else subcodes[m]
            cents, sub_assign = kmeans(sub, self.subq_k, self.kmeans_iters,
                                       rng, init=init)
            new_codes[m] = cents
            recon[:, m * d : (m + 1) * d] = cents[sub_assign]
        recon += coarse[assign]
        return coarse, new_codes, recon

    def _reset_lists(self) -> None:
        self.n_images_ = 0
        self.n_features_ = 0
        self._list_codes = [[] for _ in range(self.coarse_k)]
        self._list_feats = [[] for _ in range(self.coarse_k)]
        self._list_imgs = [[] for _ in range(self.coarse_k)]
        self._flat = None

    def _require_trained(self) -> None:
        if not hasattr(self, "rotation_"):
            raise ValueError("index is not trained; call fit() first")

    # -- ingestion ---------------------------------------------------------

    def encode(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Coarse assignment and PQ residual codes for rotated descriptors."""
        self._require_trained()
        X = np.asarray(X, dtype=np.float64).reshape(-1, DIM)
        Xr = X @ self.rotation_.T.astype(np.float64)
        assign = np.argmin(_sq_dists(Xr, self.coarse_.astype(np.float64)), axis=1)
        residuals = Xr - self.coarse_[assign]
        d = DIM // self.subq_m
        codes = np.empty((len(X), self.subq_m), dtype=np.uint8)
        for m in range(self.subq_m):
            sub = residuals[:, m * d : (m + 1) * d]
            codes[:, m] = np.argmin(
                _sq_dists(sub, self.codebooks_[m].astype(np.float64)), axis=1
            )
        return assign, codes

    def add(self, X: np.ndarray, image_ids: np.ndarray) -> dict:
        """Append descriptors; feature ids are assigned in arrival order."""
        self._require_trained()
        X = np.asarray(X, dtype=np.float32).reshape(-1, DIM)
        image_ids = np.asarray(image_ids, dtype=np.int64).reshape(-1)
        if len(X) != len(image_ids):
            raise ValueError("descriptor/image-id length mismatch")
        if len(X) == 0:
            return {"added": 0}
        assign, codes = self.encode(X)
        feat_ids = np.arange(self.n_features_, self.n_features_ + len(X),
                             dtype=np.int64)
        for c in range(self.coarse_k):
            mask = assign == c
            if mask.any():
                self._list_codes[c].append(codes[mask])
                self._list_feats[c].append(feat_ids[mask])
                self._list_imgs[c].append(image_ids[mask])
        self.n_features_ += len(X)
        self.n_images_ = max(self.n_images_, int(image_ids.max()) + 1)
        self._flat = None
        return {"added": int(len(X))}

    def list_lengths(self) -> np.ndarray:
        self._require_trained()
        return np.array(
            [sum(len(a) for a in chunks) for chunks in self._list_codes],
            dtype=np.int64,
        )

    def _flatten(self):
        """Concatenate per-list chunks into contiguous scan arrays."""
        if self._flat is None:
            lengths = self.list_lengths()
            starts = np.zeros(self.coarse_k + 1, dtype=np.int64)
            np.cumsum(lengths, out=starts[1:])
            total = int(starts[-1])
            codes = np.empty((total, self.subq_m), dtype=np.uint8)
            feats = np.empty(total, dtype=np.int64)
            imgs = np.empty(total, dtype=np.int64)
            for c in range(self.coarse_k):
                lo = starts[c]
                for ch_codes, ch_feats, ch_imgs in zip(
                    self._list_codes[c], self._list_feats[c], self._list_imgs[c]
                ):
                    hi = lo + len(ch_feats)
                    codes[lo:hi] = ch_codes
                    feats[lo:hi] = ch_feats
                    imgs[lo:hi] = ch_imgs
                    lo = hi
            self._flat = (codes, feats, imgs, starts)
        return self._flat

    # -- search ------------------------------------------------------------

    def kneighbors(
        self,
        Q: np.ndarray,
        n_neighbors: int | None = None,
        nprobe: int | None = None,
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """ADC search. Returns (distances, feature ids, image ids), each
        (len(Q), K), rows sorted by ascending distance then feature id and
        padded with (+inf, SENTINEL_FEATURE, -1) when candidates run out."""
        self._require_trained()
        if self.n_features_ == 0:
            raise ValueError("index is empty")
        K = self.knn_k if n_neighbors is None else int(n_neighbors)
        nprobe = self.nprobe if nprobe is None else int(nprobe)
        nprobe = min(max(1, nprobe), self.coarse_k)

        Q = np.asarray(Q, dtype=np.float64).reshape(-1, DIM)
        codes, feats, imgs, starts = self._flatten()
        coarse = self.coarse_.astype(np.float64)
        books = self.codebooks_.astype(np.float64)
        d = DIM // self.subq_m

        out_d = np.full((len(Q), K), np.inf, dtype=np.float32)
        out_f = np.full((len(Q), K), SENTINEL_FEATURE, dtype=np.int64)
        out_i = np.full((len(Q), K), -1, dtype=np.int64)

        Qr = Q @ self.rotation_.T.astype(np.float64)
        coarse_d2 = _sq_dists(Qr, coarse)
        buf_d = np.empty(self.n_features_, dtype=np.float32)
        buf_row = np.empty(self.n_features_, dtype=np.int64)
        for qi in range(len(Q)):
            probes = np.argsort(coarse_d2[qi], kind="stable")[:nprobe]
            res = Qr[qi][None, :] - coarse[probes]          # (nprobe, DIM)
            res = res.reshape(len(probes), self.subq_m, 1, d)
            lut = np.sum((res - books[None]) ** 2, axis=3).astype(np.float32)
            cnt = _adc_scan(codes, starts, probes.astype(np.int64), lut,
                            buf_d, buf_row)
            if cnt == 0:
                continue
            cd, crow = buf_d[:cnt], buf_row[:cnt]
            take = min(K, cnt)
            part = np.argpartition(cd, take - 1)[:take] if cnt > take else np.arange(cnt)
            cand_f = feats[crow[part]]
            order = np.lexsort((cand_f, cd[part]))
            sel = part[order]
            out_d[qi, :take] = cd[sel]
            out_f[qi, :take] = feats[crow[sel]]
            out_i[qi, :take] = imgs[crow[sel]]
        return out_d, out_f, out_i

    # -- persistence -------------------------------------------------------

    def save(self, path: str | Path) -> None:
        self._require_trained()
        codes, feats, imgs, starts = self._flatten()
        entry_dtype = np.dtype(
            [("fid", "<u8"), ("img", "<u8"), ("codes", "u1", (self.subq_m,))]
        )
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4sI", INDEX_MAGIC, INDEX_VERSION))
            fh.write(struct.pack(
                "<5IQ2IQ2Q",
                self.coarse_k, self.subq_m, self.subq_k, self.nprobe,
                self.knn_k, self.batch_size, self.opq_iters,
                self.kmeans_iters, self.seed, self.n_images_, self.n_features_,
            ))
            fh.write(self.rotation_.astype("<f4").tobytes())
            fh.write(self.coarse_.astype("<f4").tobytes())
            fh.write(self.codebooks_.astype("<f4").tobytes())
            for c in range(self.coarse_k):
                lo, hi = int(starts[c]), int(starts[c + 1])
                fh.write(struct.pack("<Q", hi - lo))
                block = np.empty(hi - lo, dtype=entry_dtype)
                block["fid"] = feats[lo:hi]
                block["img"] = imgs[lo:hi]
                block["codes"] = codes[lo:hi]
                fh.write(block.tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "IvfAdcIndex":
        with open(path, "rb") as fh:
            magic, version = struct.unpack("<4sI", fh.read(8))
            if magic != INDEX_MAGIC:
                raise ValueError(f"{path}: bad index magic {magic!r}")
            if version != INDEX_VERSION:
                raise ValueError(f"{path}: unsupported index version {version}")
            (coarse_k, subq_m, subq_k, nprobe, knn_k, batch_size, opq_iters,
             kmeans_iters, seed, n_images, n_features) = struct.unpack(
                "<5IQ2IQ2Q", fh.read(struct.calcsize("<5IQ2IQ2Q")))
            index = cls(
                coarse_k=coarse_k, subq_m=subq_m, subq_k=subq_k, nprobe=nprobe,
                knn_k=knn_k, batch_size=batch_size, opq_iters=opq_iters,
                kmeans_iters=kmeans_iters, seed=seed,
            )
            d = DIM // subq_m

            def read_f32(shape):
                count = int(np.prod(shape))
                return np.frombuffer(fh.read(count * 4), dtype="<f4").reshape(shape).copy()

            index.rotation_ = read_f32((DIM, DIM))
            index.coarse_ = read_f32((coarse_k, DIM))
            index.codebooks_ = read_f32((subq_m, subq_k, d))
            index._reset_lists()
            entry_dtype = np.dtype(
                [("fid", "<u8"), ("img", "<u8"), ("codes", "u1", (subq_m,))]
            )
            for c in range(coarse_k):
                (length,) = struct.unpack("<Q", fh.read(8))
                if length:
                    block = np.frombuffer(
                        fh.read(length * entry_dtype.itemsize), dtype=entry_dtype
                    )
                    index._list_codes[c].append(block["codes"].copy())
                    index._list_feats[c].append(block["fid"].astype(np.int64))
                    index._list_imgs[c].append(block["img"].astype(np.int64))
            index.n_images_ = n_images
            index.n_features_ = n_features
        return index


@njit(cache=True)
def _adc_scan(codes, starts, probes, lut, out_d, out_row):  # pragma: no cover - jit
    cnt = 0
    m = codes.shape[1]
    for pi in range(len(probes)):
        c = probes[pi]
        for row in range(starts[c], starts[c + 1]):
            s = np.float32(0.0)
            for j in range(m):
                s += lut[pi, j, codes[row, j]]
            out_d[cnt] = s
            out_row[cnt] = row
            cnt += 1
    return cnt


def ingest_files(
    index: IvfAdcIndex,
    paths: Sequence[str | Path],
    batch_size: int | None = None,
    queue_depth: int = 8,
) -> dict:
    """Four-stage producer-consumer ingestion: path prefetch -> feature-file
    reads -> fixed-size batch assembly -> encode+append. Stages run on their
    own threads over bounded queues; arrival order is preserved.
    """
    index._require_trained()
    batch_size = index.batch_size if batch_size is None else int(batch_size)
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")

    path_q: queue.Queue = queue.Queue(maxsize=queue_depth)
    feat_q: queue.Queue = queue.Queue(maxsize=queue_depth)
    batch_q: queue.Queue = queue.Queue(maxsize=queue_depth)
    errors: list[BaseException] = []
    report = {"added": 0, "files": 0, "batch_sizes": []}

    def guard(fn):
        def run():
            try:
                fn()
            except BaseException as exc:  # propagate to caller
                errors.append(exc)
        return run

    def touch():
        for p in paths:
            if errors:
                break
            path_q.put(p)
        path_q.put(None)

    def read():
        while True:
            p = path_q.get()
            if p is None or errors:
                break
            feat_q.put(read_features(p))
        feat_q.put(None)

    def assemble():
        pend_x: list[np.ndarray] = []
        pend_i: list[np.ndarray] = []
        pending = 0

        def flush(upto: int):
            nonlocal pending
            X = np.concatenate(pend_x)
            ids = np.concatenate(pend_i)
            batch_q.put((X[:upto], ids[:upto]))
            pend_x.clear()
            pend_i.clear()
            if upto < len(X):
                pend_x.append(X[upto:])
                pend_i.append(ids[upto:])
            pending = len(X) - upto

        while True:
            fs = feat_q.get()
            if fs is None or errors:
                break
            report["files"] += 1
            pend_x.append(fs.descriptors)
            pend_i.append(np.full(len(fs), fs.image_id, dtype=np.int64))
            pending += len(fs)
            while pending >= batch_size:
                flush(batch_size)
        if pending:
            flush(pending)
        batch_q.put(None)

    def encode():
        while True:
            item = batch_q.get()
            if item is None or errors:
                break
            X, ids = item
            index.add(X, ids)
            report["added"] += len(X)
            report["batch_sizes"].append(len(X))

    threads = [threading.Thread(target=guard(fn), daemon=True)
               for fn in (touch, read, assemble, encode)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return report
