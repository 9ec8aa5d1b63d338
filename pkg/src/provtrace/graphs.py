"""Provenance graph construction: Kruskal spanning forest over GCM
dissimilarities and clustered expansion over GCM+MI."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .pairwise import PairwiseAnalysis


class Edge(NamedTuple):
    src: int
    dst: int
    directed: bool
    weight: float


@dataclass
class ProvenanceGraph:
    query: int
    nodes: list[int] = field(default_factory=list)
    edges: list[Edge] = field(default_factory=list)

    def undirected_pairs(self) -> set[tuple[int, int]]:
        return {(min(e.src, e.dst), max(e.src, e.dst)) for e in self.edges}

    def to_json_dict(self, files: dict[int, str] | None = None) -> dict:
        files = files or {}
        return {
            "query": self.query,
            "nodes": [{"id": n, "file": files.get(n, "")}
                      for n in sorted(self.nodes)],
            "edges": [
                {"from": e.src, "to": e.dst, "directed": e.directed,
                 "weight": e.weight}
                for e in sorted(self.edges)
            ],
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "ProvenanceGraph":
        return cls(
            query=int(data["query"]),
            nodes=[int(n["id"]) for n in data["nodes"]],
            edges=[Edge(int(e["from"]), int(e["to"]), bool(e["directed"]),
                        float(e["weight"])) for e in data["edges"]],
        )

    def write_json(self, path: str | Path,
                   files: dict[int, str] | None = None) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(files), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def read_json(cls, path: str | Path) -> "ProvenanceGraph":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))

    def to_dot(self) -> str:
        lines = ["digraph provenance {"]
        for n in sorted(self.nodes):
            shape = "doublecircle" if n == self.query else "circle"
            lines.append(f'  n{n} [label="{n}", shape={shape}];')
        for e in sorted(self.edges):
            attr = f'[label="{e.weight:g}"'
            if not e.directed:
                attr += ", dir=none"
            lines.append(f"  n{e.src} -> n{e.dst} {attr}];")
        lines.append("}")
        return "\n".join(lines) + "\n"


class _UnionFind:
    def __init__(self, ids):
        self.parent = {i: i for i in ids}

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[rb] = ra
        return True


def kruskal_build(analysis: PairwiseAnalysis) -> ProvenanceGraph:
    """Minimum spanning forest over the active nodes' GCM dissimilarities
    (undirected). Nodes without any finite edge are dropped, except the
    query, which is always kept."""
    active = [int(i) for i in np.nonzero(analysis.active)[0]]
    d = analysis.gcm_d
    cand = []
    for ai, i in enumerate(active):
        for j in active[ai + 1 :]:
            if np.isfinite(d[i, j]):
                cand.append((float(d[i, j]), i, j))
    cand.sort()
    uf = _UnionFind(active)
    edges = []
    for w, i, j in cand:
        if uf.union(i, j):
            edges.append(Edge(i, j, False, w))
    touched = {analysis.query}
    for e in edges:
        touched.add(e.src)
        touched.add(e.dst)
    return ProvenanceGraph(analysis.query, sorted(touched), edges)


def edge_direction(mi_ij: float, mi_ji: float) -> str:
    """'ij' when i better explains j (mi_ij > mi_ji), 'ji' for the reverse,
    'tie' on exact equality."""
    if mi_ij > mi_ji:
        return "ij"
    if mi_ji > mi_ij:
        return "ji"
    return "tie"


@dataclass
class ClusterState:
    """Running per-cluster match statistics (population std over the
    recorded edge match counts)."""

    members: list[int] = field(default_factory=list)
    counts: list[int] = field(default_factory=list)

    def add(self, member: int, count: int | None = None) -> None:
        self.members.append(member)
        if count is not None:
            self.counts.append(int(count))

    @property
    def mean(self) -> float:
        return float(np.mean(self.counts)) if self.counts else 0.0

    @property
    def std(self) -> float:
        return float(np.std(self.counts)) if self.counts else 0.0

    def accepts(self, count: int, alpha: float) -> bool:
        mu = self.mean
        sigma = max(self.std, alpha * mu)
        return count > 0 and (mu - sigma) <= count <= (mu + sigma)


def clustered_expansion(
    analysis: PairwiseAnalysis,
    alpha: float = 0.5,
) -> ProvenanceGraph:
    """Directed graph construction by sequential near-duplicate clustering.

    Each cluster is a branchless path grown from a seed in decreasing
    match-count order; a candidate joins while its match count with the path
    tail stays within mean +/- max(std, alpha*mean) of the cluster counts.
    Path edges take the dominant MI direction. When a cluster closes, the
    connected node with the strongest tie to the remainder seeds a branch.
    """
    if not analysis.active[analysis.query]:
        raise ValueError("query is not an active node")
    M = analysis.match_counts
    mi = analysis.mi
    query = analysis.query
    unconnected = {int(i) for i in np.nonzero(analysis.active)[0]} - {query}
    connected = [query]
    edges: list[Edge] = []
    seed = query

    while unconnected:
        order = sorted(unconnected, key=lambda u: (-M[seed, u], u))
        cluster = ClusterState()
        cluster.add(seed)
        path_edges: list[tuple[int, int, int]] = []
        prev = seed
        for cand in order:
            m = int(M[prev, cand])
            if not cluster.counts:
                if m <= 0:
                    break
                accepted = True
            else:
                accepted = cluster.accepts(m, alpha)
            if not accepted:
                break
            path_edges.append((prev, cand, m))
            cluster.add(cand, m)
            prev = cand
        for u, v, m in _orient_path(path_edges, mi):
            edges.append(Edge(u, v, True, float(m)))
        for node in cluster.members[1:]:
            unconnected.discard(node)
            connected.append(node)

        if not unconnected:
            break
        # next seed: connected node with the strongest single match count
        # into the remainder (tie: larger sum of counts, then smaller id)
        best = None
        for c in connected:
            row = M[c, sorted(unconnected)]
            key = (int(row.max()), int(row.sum()), -c)
            if best is None or key > best[0]:
                best = (key, c)
        if best is None or best[0][0] <= 0:
            break  # remaining nodes share nothing with the graph
        seed = best[1]

    return ProvenanceGraph(query, sorted(connected), edges)


def _orient_path(
    path_edges: list[tuple[int, int, int]], mi: np.ndarray
) -> list[tuple[int, int, int]]:
    """Orient a path's edges by MI, then flip the minority so the whole path
    follows the dominant direction (tie keeps per-edge orientations).
    MI ties point away from the cluster seed."""
    if not path_edges:
        return []
    oriented = []
    away = toward = 0
    for u, v, m in path_edges:
        direction = edge_direction(float(mi[u, v]), float(mi[v, u]))
        if direction == "ij":
            away += 1
        elif direction == "ji":
            toward += 1
        # MI ties resolve away from the seed and carry no vote
        oriented.append((u, v, m) if direction != "ji" else (v, u, m))
    if away > toward:
        return [(u, v, m) for u, v, m in path_edges]
    if toward > away:
        return [(v, u, m) for u, v, m in path_edges]
    return oriented
