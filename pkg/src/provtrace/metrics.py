"""Evaluation metrics: recall-at-k for filtering, F1-style vertex/edge
overlaps for graphs, and suite-level reporting."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

from .filtering import RankedList
from .graphs import ProvenanceGraph


@dataclass
class GroundTruthCase:
    query: int
    relevant: set[int]
    graph: ProvenanceGraph
    edge_transforms: dict[tuple[int, int], str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.relevant = set(int(r) for r in self.relevant)
        if self.query not in self.relevant:
            raise ValueError("query must be part of its relevant set")
        if not set(self.graph.nodes) <= self.relevant:
            raise ValueError("graph nodes must be a subset of the relevant set")

    def to_json_dict(self) -> dict:
        data = {
            "query": self.query,
            "relevant": sorted(self.relevant),
            "graph": self.graph.to_json_dict(),
        }
        if self.edge_transforms:
            data["edge_transforms"] = [
                {"from": u, "to": v, "transform": t}
                for (u, v), t in sorted(self.edge_transforms.items())
            ]
        return data

    @classmethod
    def from_json_dict(cls, data: dict) -> "GroundTruthCase":
        return cls(
            query=int(data["query"]),
            relevant=set(data["relevant"]),
            graph=ProvenanceGraph.from_json_dict(data["graph"]),
            edge_transforms={
                (int(e["from"]), int(e["to"])): e["transform"]
                for e in data.get("edge_transforms", [])
            },
        )

    def write_json(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def read_json(cls, path: str | Path) -> "GroundTruthCase":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


def recall_at_k(rank: RankedList | list[int], relevant: set[int], k: int) -> float:
    """|top-k of the rank intersected with relevant| / |relevant|."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not relevant:
        raise ValueError("relevant set must not be empty")
    ids = rank.image_ids() if isinstance(rank, RankedList) else list(rank)
    return len(set(ids[:k]) & set(relevant)) / len(relevant)


class Overlap(NamedTuple):
    vo: float
    eo: float
    veo: float


def _edge_set(g: ProvenanceGraph, directed: bool) -> set[tuple[int, int]]:
    if directed:
        return {(e.src, e.dst) for e in g.edges}
    return g.undirected_pairs()


def graph_overlap(g: ProvenanceGraph, truth: ProvenanceGraph,
                  directed: bool) -> Overlap:
    """F1 overlaps of nodes (VO), edges (EO) and both (VEO). Two empty edge
    sets agree perfectly (EO = 1)."""
    v, vt = set(g.nodes), set(truth.nodes)
    e, et = _edge_set(g, directed), _edge_set(truth, directed)
    vi = len(v & vt)
    ei = len(e & et)
    vo = 2.0 * vi / (len(v) + len(vt)) if (v or vt) else 1.0
    eo = 2.0 * ei / (len(e) + len(et)) if (e or et) else 1.0
    denom = len(v) + len(vt) + len(e) + len(et)
    veo = 2.0 * (vi + ei) / denom if denom else 1.0
    return Overlap(vo, eo, veo)


_REPORT_COLUMNS = ["case", "VO", "EO_directed", "EO_undirected",
                   "VEO_directed", "VEO_undirected", "R@50", "R@100", "R@200"]


def evaluate_case(
    case: GroundTruthCase,
    rank: RankedList | None,
    graph: ProvenanceGraph | None,
) -> dict:
    """Metrics for one query; missing results score zero and are flagged."""
    row: dict = {"case": case.query, "missing": rank is None and graph is None}
    for k in (50, 100, 200):
        row[f"R@{k}"] = recall_at_k(rank, case.relevant, k) if rank else 0.0
    if graph is not None:
        vo, eo_d, veo_d = graph_overlap(graph, case.graph, directed=True)
        _, eo_u, veo_u = graph_overlap(graph, case.graph, directed=False)
    else:
        vo = eo_d = veo_d = eo_u = veo_u = 0.0
    row.update({"VO": vo, "EO_directed": eo_d, "EO_undirected": eo_u,
                "VEO_directed": veo_d, "VEO_undirected": veo_u})
    return row


def evaluate_suite(
    cases: list[GroundTruthCase],
    ranks: dict[int, RankedList],
    graphs: dict[int, ProvenanceGraph],
) -> dict:
    """Per-case metrics plus unweighted means across cases."""
    rows = [evaluate_case(c, ranks.get(c.query), graphs.get(c.query))
            for c in cases]
    means = {
        col: (sum(r[col] for r in rows) / len(rows) if rows else 0.0)
        for col in _REPORT_COLUMNS
        if col != "case"
    }
    return {"cases": rows, "means": means}


def write_report_csv(report: dict, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_REPORT_COLUMNS)
        for row in report["cases"]:
            writer.writerow([row["case"]] + [f"{row[c]:.6f}" for c in _REPORT_COLUMNS[1:]])
        writer.writerow(["mean"] + [f"{report['means'][c]:.6f}" for c in _REPORT_COLUMNS[1:]])


def write_report_json(report: dict, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
