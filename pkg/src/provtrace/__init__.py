"""Image provenance analysis: local-feature filtering over an IVFADC index
and provenance graph construction."""

from .detector import FeatureSet, SurfDetector, read_features, write_features
from .filtering import (FeatureStore, ProvenanceFilter, RankedList,
                        aggregate_votes, rcmm)
from .graphs import Edge, ProvenanceGraph, clustered_expansion, edge_direction, kruskal_build
from .imaging import (box_sum, integral_build, load_image, match_histograms,
                      rgb_to_gray, save_image, warp)
from .index import IvfAdcIndex, ingest_files
from .metrics import (GroundTruthCase, evaluate_suite, graph_overlap,
                      recall_at_k)
from .pairwise import (Matches, NoHomographyError, PairwiseAnalysis,
                       PairwiseAnalyzer, consistent_matches,
                       estimate_homography, gcm_pair, geometric_consistency,
                       mi_pair, mutual_information, nndr_match)
from .synth import SynthSpec, generate

__version__ = "0.1.0"

__all__ = [
    "FeatureSet", "SurfDetector", "read_features", "write_features",
    "FeatureStore", "ProvenanceFilter", "RankedList", "aggregate_votes",
    "rcmm", "Edge", "ProvenanceGraph", "clustered_expansion",
    "edge_direction", "kruskal_build", "box_sum", "integral_build",
    "load_image", "match_histograms", "rgb_to_gray", "save_image", "warp",
    "IvfAdcIndex", "ingest_files", "GroundTruthCase", "evaluate_suite",
    "graph_overlap", "recall_at_k", "Matches", "NoHomographyError",
    "PairwiseAnalysis", "PairwiseAnalyzer", "consistent_matches",
    "estimate_homography", "gcm_pair", "geometric_consistency", "mi_pair",
    "mutual_information", "nndr_match", "SynthSpec", "generate",
]
