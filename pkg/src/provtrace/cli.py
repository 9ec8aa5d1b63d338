"""Command-line pipeline: extract, index-train, index-add, query, graph,
eval, synth, end-to-end."""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .detector import SurfDetector, write_features
from .filtering import (FeatureStore, ProvenanceFilter, RankedList,
                        feature_path)
from .graphs import ProvenanceGraph, clustered_expansion, kruskal_build
from .imaging import load_image
from .index import IvfAdcIndex, ingest_files
from .metrics import (GroundTruthCase, evaluate_suite, write_report_csv,
                      write_report_json)
from .pairwise import PairwiseAnalyzer
from .synth import SynthSpec, generate

PRESETS = {
    "surf2k": {"detector": {"n_points": 2000, "n_top": 2000}, "iterative": False},
    "surf5k": {"detector": {"n_points": 5000, "n_top": 5000}, "iterative": False},
    "dsurf": {"detector": {"n_points": 5000, "n_top": 2500}, "iterative": False},
    "dsurf-if": {"detector": {"n_points": 5000, "n_top": 2500}, "iterative": True},
}

EXIT_BAD_INPUT = 2
EXIT_BAD_CONFIG = 3
EXIT_BAD_FORMAT = 4


class CliError(RuntimeError):
    def __init__(self, message: str, code: int = EXIT_BAD_INPUT):
        super().__init__(message)
        self.code = code


@dataclass
class PipelineConfig:
    """Resolved parameters for every pipeline stage."""

    detector: dict = field(default_factory=dict)
    index: dict = field(default_factory=dict)
    match: dict = field(default_factory=dict)
    filter: dict = field(default_factory=dict)
    iterative: bool = False
    workers: int = 1
    seed: int = 0

    def make_detector(self) -> SurfDetector:
        return SurfDetector(**self.detector)

    def make_index(self) -> IvfAdcIndex:
        params = dict(self.index)
        params.setdefault("seed", self.seed)
        return IvfAdcIndex(**params)

    def make_analyzer(self, with_mi: bool) -> PairwiseAnalyzer:
        return PairwiseAnalyzer(with_mi=with_mi, seed=self.seed, **self.match)


def load_config(args) -> PipelineConfig:
    cfg = PipelineConfig()
    preset = getattr(args, "preset", None)
    if preset:
        if preset not in PRESETS:
            raise CliError(f"unknown preset {preset!r}; choices: "
                           f"{', '.join(sorted(PRESETS))}", EXIT_BAD_CONFIG)
        cfg.detector.update(PRESETS[preset]["detector"])
        cfg.iterative = PRESETS[preset]["iterative"]
    path = getattr(args, "config", None)
    if path:
        if not Path(path).is_file():
            raise CliError(f"config file not found: {path}", EXIT_BAD_CONFIG)
        parser = configparser.ConfigParser()
        parser.read(path)
        section_types = {
            "detector": {"n_points": int, "n_top": int, "octaves": int,
                         "layers": int, "hessian_threshold": float,
                         "overlap_radius": float},
            "index": {"coarse_k": int, "subq_m": int, "subq_k": int,
                      "nprobe": int, "knn_k": int, "batch_size": int,
                      "opq_iters": int, "kmeans_iters": int, "seed": int},
            "match": {"nndr_t": float, "gc_epsilon": float, "gc_trials": int,
                      "min_matches": int, "connect_min": int},
            "filter": {"rank_k": int, "iterations": int,
                       "nd_threshold": float, "max_seeds": int},
        }
        try:
            for section, types in section_types.items():
                if parser.has_section(section):
                    for key, value in parser.items(section):
                        if key not in types:
                            raise CliError(
                                f"unknown key {key!r} in [{section}]",
                                EXIT_BAD_CONFIG)
                        getattr(cfg, section)[key] = types[key](value)
            if parser.has_section("run"):
                for key, value in parser.items("run"):
                    if key == "workers":
                        cfg.workers = int(value)
                    elif key == "seed":
                        cfg.seed = int(value)
                    elif key == "iterative":
                        cfg.iterative = parser.getboolean("run", "iterative")
                    else:
                        raise CliError(f"unknown key {key!r} in [run]",
                                       EXIT_BAD_CONFIG)
        except ValueError as exc:
            raise CliError(f"malformed config value: {exc}", EXIT_BAD_CONFIG)
    if getattr(args, "workers", None):
        cfg.workers = args.workers
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "rank_k", None):
        cfg.filter["rank_k"] = args.rank_k
    return cfg


def _config_hash(cfg: PipelineConfig) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _write_manifest(path: Path, command: str, cfg: PipelineConfig,
                    inputs: dict, outputs: dict, counts: dict,
                    timings: dict) -> None:
    manifest = {
        "command": command,
        "config": asdict(cfg),
        "config_hash": _config_hash(cfg),
        "inputs": inputs,
        "outputs": outputs,
        "counts": counts,
        "timings_s": {k: round(v, 3) for k, v in timings.items()},
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_corpus_manifest(corpus: str | Path) -> dict[int, str]:
    """id -> file map from <corpus>/manifest.json, else a deterministic scan."""
    corpus = Path(corpus)
    if not corpus.is_dir():
        raise CliError(f"corpus directory not found: {corpus}")
    manifest = corpus / "manifest.json"
    if manifest.is_file():
        with open(manifest) as fh:
            data = json.load(fh)
        return {int(e["id"]): e["file"] for e in data["images"]}
    files = sorted(
        p.relative_to(corpus).as_posix()
        for p in corpus.rglob("*")
        if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    )
    if not files:
        raise CliError(f"no images found under {corpus}")
    return dict(enumerate(files))


def _extract_one(task) -> int:
    image_id, image_file, feat_file, detector_params = task
    detector = SurfDetector(**detector_params)
    fs = detector.extract(load_image(image_file), image_id)
    write_features(fs, feat_file)
    return len(fs)


def cmd_extract(args) -> int:
    cfg = load_config(args)
    t0 = time.time()
    corpus = Path(args.corpus)
    feat_dir = Path(args.features)
    feat_dir.mkdir(parents=True, exist_ok=True)
    id_to_file = load_corpus_manifest(corpus)
    tasks = [
        (image_id, str(corpus / rel), str(feature_path(feat_dir, image_id)),
         cfg.detector)
        for image_id, rel in sorted(id_to_file.items())
    ]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            counts = list(pool.map(_extract_one, tasks, chunksize=16))
    else:
        counts = [_extract_one(t) for t in tasks]
    with open(feat_dir / "manifest.json", "w") as fh:
        json.dump({"images": [{"id": i, "file": f}
                              for i, f in sorted(id_to_file.items())]},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(feat_dir / "extract.manifest.json", "extract", cfg,
                    {"corpus": str(corpus)}, {"features": str(feat_dir)},
                    {"images": len(tasks), "features": int(sum(counts))},
                    {"total": time.time() - t0})
    print(f"extracted {sum(counts)} features from {len(tasks)} images")
    return 0


def _feature_files(feat_dir: Path) -> list[Path]:
    files = sorted(feat_dir.glob("*.pvf"))
    if not files:
        raise CliError(f"no feature files in {feat_dir}")
    return files


def cmd_index_train(args) -> int:
    from .detector import read_features

    cfg = load_config(args)
    t0 = time.time()
    feat_dir = Path(args.features)
    files = _feature_files(feat_dir)
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(files))
    sample: list[np.ndarray] = []
    total = 0
    for i in order:
        fs = read_features(files[i])
        if len(fs):
            sample.append(fs.descriptors)
            total += len(fs)
        if total >= args.sample:
            break
    X = np.concatenate(sample) if sample else np.empty((0, 64), np.float32)
    if len(X) > args.sample:
        X = X[rng.choice(len(X), size=args.sample, replace=False)]
    index = cfg.make_index()
    index.fit(X)
    index.save(args.out)
    _write_manifest(Path(str(args.out) + ".manifest.json"), "index-train",
                    cfg, {"features": str(feat_dir)}, {"index": str(args.out)},
                    {"sample": int(len(X))}, {"total": time.time() - t0})
    print(f"trained index on {len(X)} descriptors -> {args.out}")
    return 0


def cmd_index_add(args) -> int:
    cfg = load_config(args)
    t0 = time.time()
    index = IvfAdcIndex.load(args.index)
    files = _feature_files(Path(args.features))
    report = ingest_files(index, files, batch_size=args.batch)
    out = args.out or args.index
    index.save(out)
    _write_manifest(Path(str(out) + ".manifest.json"), "index-add", cfg,
                    {"features": args.features, "index": str(args.index)},
                    {"index": str(out)},
                    {"added": report["added"], "files": report["files"],
                     "batches": len(report["batch_sizes"])},
                    {"total": time.time() - t0})
    print(f"added {report['added']} features in "
          f"{len(report['batch_sizes'])} batches -> {out}")
    return 0


def _make_filter(cfg: PipelineConfig, index: IvfAdcIndex,
                 feat_dir: Path | None) -> ProvenanceFilter:
    store = FeatureStore.from_dir(feat_dir) if feat_dir else None
    return ProvenanceFilter(index, detector=cfg.make_detector(), store=store,
                            **cfg.filter)


def cmd_query(args) -> int:
    cfg = load_config(args)
    t0 = time.time()
    index = IvfAdcIndex.load(args.index)
    feat_dir = Path(args.features) if args.features else None
    filt = _make_filter(cfg, index, feat_dir)
    if args.image_id is not None:
        if feat_dir is None:
            raise CliError("--image-id needs --features")
        fs = filt.store.get(args.image_id)
        exclude = args.image_id
    elif args.image:
        if not Path(args.image).is_file():
            raise CliError(f"query image not found: {args.image}")
        fs = filt.extract(load_image(args.image))
        exclude = None
    else:
        raise CliError("query needs --image or --image-id")
    iterative = cfg.iterative if args.iterative is None else args.iterative
    if iterative:
        rank = filt.iterative(features=fs, exclude_id=exclude)
    else:
        rank = filt.query(features=fs, exclude_id=exclude)
    rank.write_csv(args.out)
    _write_manifest(Path(str(args.out) + ".manifest.json"), "query", cfg,
                    {"index": str(args.index), "query": args.image or args.image_id},
                    {"rank": str(args.out)},
                    {"entries": len(rank), "iterative": int(iterative)},
                    {"total": time.time() - t0})
    print(f"rank of {len(rank)} images -> {args.out}")
    return 0


def build_graph_for_candidates(
    cfg: PipelineConfig,
    corpus: Path,
    feat_dir: Path,
    query_id: int,
    candidate_ids: list[int],
    builder: str,
    dump_dir: Path | None = None,
):
    id_to_file = load_corpus_manifest(corpus)
    ids = [query_id] + [i for i in candidate_ids if i != query_id]
    missing = [i for i in ids if i not in id_to_file]
    if missing:
        raise CliError(f"ids missing from corpus manifest: {missing[:5]}")
    store = FeatureStore.from_dir(feat_dir)
    images = [load_image(corpus / id_to_file[i]) for i in ids]
    features = [store.get(i) for i in ids]
    analyzer = cfg.make_analyzer(with_mi=(builder == "clustered"))
    analysis = analyzer.analyze(images, features, query=0)
    if dump_dir is not None:
        dump_dir.mkdir(parents=True, exist_ok=True)
        np.savetxt(dump_dir / "match_counts.csv", analysis.match_counts,
                   fmt="%d", delimiter=",")
        np.savetxt(dump_dir / "gcm_dissimilarity.csv", analysis.gcm_d,
                   delimiter=",")
        np.savetxt(dump_dir / "mi.csv", analysis.mi, delimiter=",")
    if builder == "clustered":
        local = clustered_expansion(analysis)
    else:
        local = kruskal_build(analysis)
    # map analysis indices back to corpus image ids
    remap = {k: ids[k] for k in range(len(ids))}
    graph = ProvenanceGraph(
        query=remap[local.query],
        nodes=sorted(remap[n] for n in local.nodes),
        edges=[e._replace(src=remap[e.src], dst=remap[e.dst])
               for e in local.edges],
    )
    return graph, analysis, id_to_file


def cmd_graph(args) -> int:
    cfg = load_config(args)
    t0 = time.time()
    if args.oracle:
        case = GroundTruthCase.read_json(args.oracle)
        query_id = case.query
        candidates = sorted(case.relevant - {case.query})
    else:
        if not args.rank:
            raise CliError("graph needs --rank or --oracle")
        rank = RankedList.read_csv(args.rank)
        if args.query_id is None:
            raise CliError("graph --rank needs --query-id")
        query_id = args.query_id
        k = cfg.filter.get("rank_k", 50)
        candidates = rank.truncated(k).image_ids()
    graph, analysis, id_to_file = build_graph_for_candidates(
        cfg, Path(args.corpus), Path(args.features), query_id, candidates,
        args.builder, Path(args.dump_matrices) if args.dump_matrices else None,
    )
    graph.write_json(args.out, files=id_to_file)
    if args.dot:
        Path(args.dot).write_text(graph.to_dot())
    _write_manifest(Path(str(args.out) + ".manifest.json"), "graph", cfg,
                    {"corpus": args.corpus, "query": query_id,
                     "oracle": bool(args.oracle), "builder": args.builder},
                    {"graph": str(args.out)},
                    {"nodes": len(graph.nodes), "edges": len(graph.edges),
                     "pair_computations": analysis.pair_computations},
                    {"total": time.time() - t0})
    print(f"{args.builder} graph: {len(graph.nodes)} nodes, "
          f"{len(graph.edges)} edges -> {args.out}")
    return 0


def _load_cases(truth_dir: Path) -> list[GroundTruthCase]:
    files = sorted(truth_dir.glob("case_*.json"))
    if not files:
        raise CliError(f"no ground-truth cases in {truth_dir}")
    return [GroundTruthCase.read_json(p) for p in files]


def cmd_eval(args) -> int:
    cfg = load_config(args)
    t0 = time.time()
    cases = _load_cases(Path(args.truth))
    ranks: dict[int, RankedList] = {}
    graphs: dict[int, ProvenanceGraph] = {}
    for case in cases:
        rank_file = Path(args.ranks) / f"rank_{case.query:06d}.csv"
        graph_file = Path(args.graphs) / f"graph_{case.query:06d}.json"
        if rank_file.is_file():
            ranks[case.query] = RankedList.read_csv(rank_file)
        if graph_file.is_file():
            graphs[case.query] = ProvenanceGraph.read_json(graph_file)
    report = evaluate_suite(cases, ranks, graphs)
    write_report_csv(report, str(args.out) + ".csv")
    write_report_json(report, str(args.out) + ".json")
    _write_manifest(Path(str(args.out) + ".manifest.json"), "eval", cfg,
                    {"truth": args.truth, "ranks": args.ranks,
                     "graphs": args.graphs},
                    {"report_csv": str(args.out) + ".csv",
                     "report_json": str(args.out) + ".json"},
                    {"cases": len(cases), "ranks": len(ranks),
                     "graphs": len(graphs)},
                    {"total": time.time() - t0})
    for key, value in sorted(report["means"].items()):
        print(f"mean {key}: {value:.4f}")
    return 0


def cmd_synth(args) -> int:
    cfg = load_config(args)
    t0 = time.time()
    if args.spec:
        spec = SynthSpec.from_file(args.spec)
    else:
        if not args.seeds:
            raise CliError("synth needs --spec or --seeds")
        spec = SynthSpec(seeds_dir=args.seeds, graphs=args.graphs,
                         distractors=args.distractors)
    if args.seed is not None:
        spec.seed = args.seed
    cases = generate(spec, args.out)
    _write_manifest(Path(args.out) / "synth.manifest.json", "synth", cfg,
                    {"spec": args.spec or "(flags)", "seeds": str(spec.seeds_dir)},
                    {"out": str(args.out)},
                    {"cases": len(cases), "distractors": spec.distractors},
                    {"total": time.time() - t0})
    print(f"generated {len(cases)} cases + {spec.distractors} distractors "
          f"-> {args.out}")
    return 0


def cmd_end_to_end(args) -> int:
    cfg = load_config(args)
    t0 = time.time()
    out = Path(args.out)
    corpus = Path(args.corpus)
    feat_dir = out / "features"
    ranks_dir = out / "ranks"
    graphs_dir = out / "graphs"
    for d in (feat_dir, ranks_dir, graphs_dir):
        d.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}

    stage = time.time()
    args_extract = argparse.Namespace(
        corpus=str(corpus), features=str(feat_dir), preset=args.preset,
        config=args.config, workers=cfg.workers, seed=cfg.seed, rank_k=None)
    cmd_extract(args_extract)
    timings["extract"] = time.time() - stage

    stage = time.time()
    index_file = out / "corpus.pvix"
    files = _feature_files(feat_dir)
    rng = np.random.default_rng(cfg.seed)
    from .detector import read_features

    sample_parts: list[np.ndarray] = []
    total = 0
    for i in rng.permutation(len(files)):
        fs = read_features(files[i])
        if len(fs):
            sample_parts.append(fs.descriptors)
            total += len(fs)
        if total >= args.sample:
            break
    X = np.concatenate(sample_parts)
    if len(X) > args.sample:
        X = X[rng.choice(len(X), size=args.sample, replace=False)]
    index = cfg.make_index()
    index.fit(X)
    timings["train"] = time.time() - stage

    stage = time.time()
    ingest_files(index, files)
    index.save(index_file)
    timings["ingest"] = time.time() - stage

    cases = _load_cases(Path(args.truth))
    filt = _make_filter(cfg, index, feat_dir)
    iterative = cfg.iterative

    stage = time.time()
    for case in cases:
        fs = filt.store.get(case.query)
        if iterative:
            rank = filt.iterative(features=fs, exclude_id=case.query)
        else:
            rank = filt.query(features=fs, exclude_id=case.query)
        rank.write_csv(ranks_dir / f"rank_{case.query:06d}.csv")
    timings["filter"] = time.time() - stage

    stage = time.time()
    for case in cases:
        rank = RankedList.read_csv(ranks_dir / f"rank_{case.query:06d}.csv")
        if args.oracle:
            candidates = sorted(case.relevant - {case.query})
        else:
            candidates = rank.image_ids()
        graph, _, id_to_file = build_graph_for_candidates(
            cfg, corpus, feat_dir, case.query, candidates, args.builder)
        graph.write_json(graphs_dir / f"graph_{case.query:06d}.json",
                         files=id_to_file)
    timings["graphs"] = time.time() - stage

    args_eval = argparse.Namespace(
        truth=args.truth, ranks=str(ranks_dir), graphs=str(graphs_dir),
        out=str(out / "report"), preset=args.preset, config=args.config,
        workers=cfg.workers, seed=cfg.seed, rank_k=getattr(args, "rank_k", None))
    cmd_eval(args_eval)
    timings["total"] = time.time() - t0
    _write_manifest(out / "end-to-end.manifest.json", "end-to-end", cfg,
                    {"corpus": str(corpus), "truth": args.truth,
                     "builder": args.builder, "oracle": bool(args.oracle)},
                    {"out": str(out)},
                    {"cases": len(cases)}, timings)
    return 0


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="INI config file")
    parser.add_argument("--preset", choices=sorted(PRESETS),
                        help="parameter preset")
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--rank-k", dest="rank_k", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="provtrace",
        description="Image provenance analysis: filtering and graph construction",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="detect+describe corpus images")
    p.add_argument("--corpus", required=True)
    p.add_argument("--features", required=True)
    _common(p)
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("index-train", help="train OPQ/IVFADC codebooks")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sample", type=int, default=100_000)
    _common(p)
    p.set_defaults(fn=cmd_index_train)

    p = sub.add_parser("index-add", help="ingest feature files into an index")
    p.add_argument("--features", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--batch", type=int, default=None)
    _common(p)
    p.set_defaults(fn=cmd_index_add)

    p = sub.add_parser("query", help="rank corpus images for a query")
    p.add_argument("--index", required=True)
    p.add_argument("--features", default=None)
    p.add_argument("--image", default=None)
    p.add_argument("--image-id", dest="image_id", type=int, default=None)
    p.add_argument("--out", required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--iterative", dest="iterative", action="store_true",
                       default=None)
    group.add_argument("--no-iterative", dest="iterative",
                       action="store_false")
    _common(p)
    p.set_defaults(fn=cmd_query)

    p = sub.add_parser("graph", help="build a provenance graph")
    p.add_argument("--corpus", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--rank", default=None)
    p.add_argument("--oracle", default=None,
                   help="ground-truth case JSON (perfect filtering)")
    p.add_argument("--query-id", dest="query_id", type=int, default=None)
    p.add_argument("--builder", choices=("kruskal", "clustered"),
                   default="clustered")
    p.add_argument("--out", required=True)
    p.add_argument("--dot", default=None)
    p.add_argument("--dump-matrices", dest="dump_matrices", default=None)
    _common(p)
    p.set_defaults(fn=cmd_graph)

    p = sub.add_parser("eval", help="score ranks and graphs against truth")
    p.add_argument("--truth", required=True)
    p.add_argument("--ranks", required=True)
    p.add_argument("--graphs", required=True)
    p.add_argument("--out", required=True, help="report path prefix")
    _common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic provenance corpus")
    p.add_argument("--spec", default=None)
    p.add_argument("--seeds", default=None)
    p.add_argument("--graphs", type=int, default=20)
    p.add_argument("--distractors", type=int, default=5000)
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("end-to-end", help="extract, index, filter, graph, eval")
    p.add_argument("--corpus", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--builder", choices=("kruskal", "clustered"),
                   default="clustered")
    p.add_argument("--oracle", action="store_true",
                   help="build graphs from the ground-truth relevant sets")
    p.add_argument("--sample", type=int, default=100_000)
    _common(p)
    p.set_defaults(fn=cmd_end_to_end)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_FORMAT


if __name__ == "__main__":
    sys.exit(main())
