"""Command-line entry point: ``hdgraph <subcommand> [flags]``.

Exit codes: 0 success, 1 validation/usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import gradcheck
from .config import RunConfig, load_config
from .errors import ConfigError, HdgError, ValidationError
from .graph import build_knn_graph, load_net, save_net, transfer_head_edges, accuracy
from .io import (
    extension,
    load_boxes,
    load_embeddings,
    read_rankings,
    save_embeddings,
    write_csv,
    write_metrics_json,
    write_rankings,
)
from .metrics import RankedResult, detection_ap_recall, map_and_cmc
from .rerank import (
    contiguous_labels,
    evaluate_similarity,
    fit_graph_net,
    fuse_similarities,
    graph_adjacency,
    rerank_pipeline,
    similarity_components,
    with_lambda,
)
from .synth import ScenarioConfig, generate_scenario, neighbor_purity

log = logging.getLogger("hdgraph")

SWEEP_COLUMNS = ["mAP", "rank1", "rank5", "rank10", "excluded_queries"]


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _csv_ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    shared = _Parser(add_help=False)
    shared.add_argument("--seed", type=int)
    shared.add_argument("--config", help="key = value config file (CLI flags win)")
    shared.add_argument("--out-dir", dest="out_dir")
    shared.add_argument("--format", choices=["binary", "jsonl"])
    shared.add_argument("-v", "--verbose", action="store_true")

    pipe = _Parser(add_help=False)
    pipe.add_argument("--k", type=int)
    pipe.add_argument("--lambda", dest="lam", type=float)
    pipe.add_argument("--metric", choices=["one-minus-cosine", "euclidean"])
    pipe.add_argument("--graph-mode", dest="graph_mode", choices=["head", "body"])
    pipe.add_argument("--transfer-mode", dest="transfer_mode", choices=["replace", "union"])
    pipe.add_argument("--missing-head-policy", dest="missing_head_policy",
                      choices=["fallback_to_update", "drop_query"])
    pipe.add_argument("--powers", type=_csv_ints)
    pipe.add_argument("--depth", type=int)
    pipe.add_argument("--hidden-width", dest="hidden_width", type=int)
    pipe.add_argument("--lr", type=float)
    pipe.add_argument("--epochs", type=int)
    pipe.add_argument("--min-head-score", dest="min_head_score", type=float)
    pipe.add_argument("--include-same-frame", dest="exclude_same_frame",
                      action="store_const", const=False)
    pipe.add_argument("--no-normalize", dest="normalize", action="store_const", const=False)

    data = _Parser(add_help=False)
    for name in ("train", "query", "gallery", "net"):
        data.add_argument(f"--{name}")

    parser = _Parser(prog="hdgraph", description="Head-driven graph re-ranking toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[shared], help="generate a synthetic scenario")
    for flag, typ in [("n-identities", int), ("clothes-per-identity", int),
                      ("samples-per-clothing", int), ("body-dim", int), ("head-dim", int),
                      ("body-noise-sigma", float), ("head-noise-sigma", float),
                      ("clothing-confusion", float), ("head-missing-rate", float),
                      ("train-fraction", float)]:
        p.add_argument(f"--{flag}", dest=flag.replace("-", "_"), type=typ)

    p = sub.add_parser("knn", parents=[shared, pipe], help="build a k-NN graph")
    p.add_argument("--input", required=True)
    p.add_argument("--channel", choices=["body", "head"], default="body")
    p.add_argument("--transfer", action="store_true",
                   help="transfer head edges into the body graph")

    sub.add_parser("train-gcn", parents=[shared, pipe, data], help="train the MixHop net")
    sub.add_parser("rerank", parents=[shared, pipe, data], help="re-rank a gallery")

    p = sub.add_parser("eval-retrieval", parents=[shared, pipe, data], help="mAP / CMC")
    p.add_argument("--rankings")

    p = sub.add_parser("eval-detection", parents=[shared], help="detection AP / recall")
    p.add_argument("--dets")
    p.add_argument("--gts")
    p.add_argument("--iou-threshold", dest="iou_threshold", type=float)

    p = sub.add_parser("sweep-lambda", parents=[shared, pipe, data], help="metrics per lambda")
    p.add_argument("--steps", type=int, default=10, help="lambda grid is i/steps, i=0..steps")

    p = sub.add_parser("sweep-k", parents=[shared, pipe, data], help="metrics per k")
    p.add_argument("--ks", type=_csv_ints, default=(3, 5, 10))

    sub.add_parser("gradcheck", parents=[shared], help="finite-difference gradient checks")
    return parser


def _require(cfg: RunConfig, *names: str) -> None:
    for name in names:
        if not getattr(cfg, name):
            raise ConfigError(f"--{name.replace('_', '-')} is required")


def _load(cfg: RunConfig, name: str):
    path = getattr(cfg, name)
    if not Path(path).exists():
        raise ConfigError(f"{name} file not found: {path}")
    return load_embeddings(path, None, cfg.normalize, cfg.min_head_score)


def _out(cfg: RunConfig, filename: str) -> Path:
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir / filename


def _net_for(cfg: RunConfig):
    if cfg.net:
        return load_net(cfg.net)
    _require(cfg, "train")
    return fit_graph_net(_load(cfg, "train"), cfg.pipeline())


def cmd_synth(cfg: RunConfig, args) -> int:
    overrides = {k: v for k, v in vars(args).items()
                 if k in ScenarioConfig.__dataclass_fields__ and v is not None}
    scenario = ScenarioConfig(**{**overrides, "seed": cfg.seed})
    train, query, gallery = generate_scenario(scenario)
    ext = extension(cfg.format)
    for name, eset in (("train", train), ("query", query), ("gallery", gallery)):
        save_embeddings(eset, _out(cfg, name + ext), cfg.format)
    _out(cfg, "scenario.json").write_text(json.dumps(scenario.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(train)} train, {len(query)} query, {len(gallery)} gallery records to {cfg.out_dir}")
    return 0


def cmd_knn(cfg: RunConfig, args) -> int:
    if not Path(args.input).exists():
        raise ConfigError(f"input file not found: {args.input}")
    eset = load_embeddings(args.input, None, cfg.normalize, cfg.min_head_score)
    g = build_knn_graph(eset, args.channel, cfg.k, cfg.metric)
    if args.transfer:
        head_g = build_knn_graph(eset, "head", cfg.k, cfg.metric)
        g = transfer_head_edges(head_g, build_knn_graph(eset, "body", cfg.k, cfg.metric),
                                cfg.transfer_mode)
    ids = eset.ids
    edges = g.edge_array()
    write_csv([{"src": int(ids[s]), "dst": int(ids[d])} for s, d in edges],
              _out(cfg, "edges.csv"), ["src", "dst"])
    labels = eset.labels
    summary = {"n_nodes": g.n_nodes, "n_edges": int(len(edges)), "k": cfg.k,
               "channel": args.channel, "transfer": bool(args.transfer), "purity": None}
    if len(edges) and (labels >= 0).any():
        summary["purity"] = neighbor_purity(g, labels)
    text = json.dumps(summary, indent=2, sort_keys=True) + "\n"
    _out(cfg, "knn.json").write_text(text)
    print(text, end="")
    return 0


def cmd_train_gcn(cfg: RunConfig, args) -> int:
    _require(cfg, "train")
    train = _load(cfg, "train")
    history: list[float] = []
    pcfg = cfg.pipeline()
    net = fit_graph_net(train, pcfg, history)
    save_net(net, _out(cfg, "net.udgn"))
    adj = graph_adjacency(train, pcfg)
    acc = accuracy(net, train.matrix("body"), adj, contiguous_labels(train.labels))
    payload = {"epochs": cfg.epochs, "losses": history,
               "final_loss": history[-1] if history else None, "train_accuracy": acc}
    _out(cfg, "train_log.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"trained {cfg.epochs} epochs, train accuracy {acc:.4f}")
    return 0


def cmd_rerank(cfg: RunConfig, args) -> int:
    _require(cfg, "query", "gallery")
    query, gallery = _load(cfg, "query"), _load(cfg, "gallery")
    result = rerank_pipeline(None, query, gallery, cfg.pipeline(), net=_net_for(cfg))
    path = _out(cfg, "rankings.jsonl")
    write_rankings(result.ranked_lists(), path)
    print(f"wrote rankings for {len(result.rankings)} queries to {path}")
    return 0


def _results_from_rankings(rows, cfg: RunConfig) -> list[RankedResult]:
    if all("relevant" in row for row in rows):
        return [RankedResult(r["query_id"], r["ranked_gallery_ids"], r["relevant"]) for r in rows]
    _require(cfg, "query", "gallery")
    query, gallery = _load(cfg, "query"), _load(cfg, "gallery")
    q_info = {r.record_id: r for r in query}
    g_info = {r.record_id: r for r in gallery}
    out = []
    for row in rows:
        q = q_info.get(row["query_id"])
        if q is None:
            raise ConfigError(f"query id {row['query_id']} not in query file")
        if q.label is None:
            continue
        ranked, rel = [], []
        for gid in row["ranked_gallery_ids"]:
            g = g_info.get(gid)
            if g is None:
                raise ConfigError(f"gallery id {gid} not in gallery file")
            if cfg.exclude_same_frame and g.frame_id == q.frame_id:
                continue
            ranked.append(gid)
            rel.append(g.label is not None and g.label == q.label)
        out.append(RankedResult(q.record_id, ranked, rel))
    return out


def cmd_eval_retrieval(cfg: RunConfig, args) -> int:
    if not args.rankings:
        raise ConfigError("--rankings is required")
    results = _results_from_rankings(read_rankings(args.rankings), cfg)
    m_ap, cmc, excluded = map_and_cmc(results, (1, 5, 10))
    metrics = {"mAP": m_ap, "rank1": cmc[1], "rank5": cmc[5], "rank10": cmc[10],
               "excluded_queries": excluded}
    print(write_metrics_json(metrics, _out(cfg, "metrics.json")), end="")
    return 0


def cmd_eval_detection(cfg: RunConfig, args) -> int:
    _require(cfg, "dets", "gts")
    ap, recall = detection_ap_recall(load_boxes(cfg.dets), load_boxes(cfg.gts), cfg.iou_threshold)
    metrics = {"detection_ap": ap, "detection_recall": recall}
    print(write_metrics_json(metrics, _out(cfg, "metrics.json")), end="")
    return 0


def cmd_sweep_lambda(cfg: RunConfig, args) -> int:
    _require(cfg, "query", "gallery")
    if args.steps < 1:
        raise ConfigError("--steps must be >= 1")
    query, gallery = _load(cfg, "query"), _load(cfg, "gallery")
    pcfg = cfg.pipeline()
    s_head, s_update = similarity_components(_net_for(cfg), query, gallery, pcfg)
    rows = []
    for i in range(args.steps + 1):
        lam = i / args.steps
        fused = fuse_similarities(s_head, s_update, with_lambda(pcfg, lam).fusion)
        rows.append({"lambda": lam, **evaluate_similarity(fused, query, gallery,
                                                          pcfg.exclude_same_frame)})
    path = _out(cfg, "sweep_lambda.csv")
    write_csv(rows, path, ["lambda"] + SWEEP_COLUMNS)
    print(f"wrote {len(rows)} rows to {path}")
    return 0


def cmd_sweep_k(cfg: RunConfig, args) -> int:
    _require(cfg, "query", "gallery")
    query, gallery = _load(cfg, "query"), _load(cfg, "gallery")
    train, fixed_net = None, None
    if cfg.net:
        fixed_net = load_net(cfg.net)
    else:
        _require(cfg, "train")
        train = _load(cfg, "train")
    rows = []
    for k in args.ks:
        pcfg = replace(cfg.pipeline(), k=k)
        result = rerank_pipeline(train, query, gallery, pcfg, net=fixed_net)
        rows.append({"k": k, **evaluate_similarity(result.fused, query, gallery,
                                                   pcfg.exclude_same_frame)})
    path = _out(cfg, "sweep_k.csv")
    write_csv(rows, path, ["k"] + SWEEP_COLUMNS)
    print(f"wrote {len(rows)} rows to {path}")
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    errors = gradcheck.run_all(cfg.seed)
    passed = all(e < gradcheck.TOLERANCE for e in errors.values())
    payload = {"max_relative_error": errors, "tolerance": gradcheck.TOLERANCE,
               "step": gradcheck.STEP, "passed": passed}
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    _out(cfg, "gradcheck.json").write_text(text)
    print(text, end="")
    return 0 if passed else 2


COMMANDS = {
    "synth": cmd_synth,
    "knn": cmd_knn,
    "train-gcn": cmd_train_gcn,
    "rerank": cmd_rerank,
    "eval-retrieval": cmd_eval_retrieval,
    "eval-detection": cmd_eval_detection,
    "sweep-lambda": cmd_sweep_lambda,
    "sweep-k": cmd_sweep_k,
    "gradcheck": cmd_gradcheck,
}


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: v for k, v in vars(args).items() if k != "config"}
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (HdgError, OSError, ArithmeticError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
