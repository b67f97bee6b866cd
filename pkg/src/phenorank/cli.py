"""Command-line surface tying the pipeline together.

Subcommands: synth, ingest, train, predict, extract, evaluate, fuse.
Every command writes a run manifest next to its outputs recording the
resolved config, input/output content hashes, the seed, and wall-clock
time. Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .extraction import (ExtractionConfig, PatientGraph, extract_patient_graph,
                         fuse_scores, load_external_scores, load_patient_graphs,
                         min_max_normalize)
from .kg import GraphFormatError, SubgraphExport, export_dot, load_graph
from .losses import LossConfig
from .metrics import MetricReport, Ranking, evaluate_rankings, rank_genes
from .model import ModelConfig, forward
from .sampling import load_cohort, sample_phenotype_subgraph
from .synthetic import SynthConfig, generate_dataset
from .training import (TrainConfig, load_checkpoint, save_checkpoint, train)

__all__ = ["main"]


class ConfigError(ValueError):
    pass


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, command: str, config: dict, inputs: dict,
                   outputs: dict, seed, elapsed: float) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "input_hashes": {str(k): _sha256(v) for k, v in sorted(inputs.items())},
        "output_hashes": {str(k): _sha256(v) for k, v in sorted(outputs.items())},
        "seed": seed,
        "version": __version__,
        "wall_clock_s": round(elapsed, 3),
    }
    path = Path(out_dir) / f"{command}_manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n",
                    encoding="utf-8")
    return path


def _load_flat_config(path) -> dict:
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    if not isinstance(obj, dict):
        raise ConfigError(f"config {path} must be a flat JSON object")
    return obj


def _split_configs(flat: dict, overrides: dict):
    """Distribute flat key-values over the model/loss/train configs."""
    groups = {
        "model": (ModelConfig, {}),
        "loss": (LossConfig, {}),
        "train": (TrainConfig, {}),
    }
    merged = dict(flat)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    for key, val in merged.items():
        placed = False
        for cls, kwargs in groups.values():
            if key in cls.__dataclass_fields__:
                kwargs[key] = val
                placed = True
                break
        if not placed:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        return (ModelConfig(**groups["model"][1]),
                LossConfig(**groups["loss"][1]),
                TrainConfig(**groups["train"][1]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc))


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    t0 = time.monotonic()
    flat = _load_flat_config(args.config)
    if args.seed is not None:
        flat["seed"] = args.seed
    try:
        cfg = SynthConfig.from_dict(flat)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc))
    out = Path(args.out)
    manifest = generate_dataset(cfg, out)
    outputs = {name: out / name for name in manifest["files"]}
    outputs["manifest.json"] = out / "manifest.json"
    write_manifest(out, "synth", cfg.to_dict(), {}, outputs, cfg.seed,
                   time.monotonic() - t0)
    print(f"wrote dataset to {out}")
    return 0


def cmd_ingest(args) -> int:
    g = load_graph(args.nodes, args.edges)
    cohort = None
    if args.cohort:
        cohort = load_cohort(args.cohort, g.key_to_id)
    print(f"graph: {g.node_count} nodes, {g.arc_count} arcs "
          f"({g.arc_count // 2} undirected edges)")
    if cohort is not None:
        labeled = sum(1 for r in cohort if r.causal_gene is not None)
        print(f"cohort: {len(cohort)} patients, {labeled} with causal gene")
    if args.check:
        print("ok")
    return 0


def cmd_train(args) -> int:
    t0 = time.monotonic()
    overrides = {
        "epochs": args.epochs,
        "learning_rate": args.learning_rate,
        "seed": args.seed,
        "sample_hops": args.hops,
        "val_fraction": args.val_fraction,
    }
    mcfg, lcfg, tcfg = _split_configs(_load_flat_config(args.config), overrides)
    g = load_graph(args.nodes, args.edges)
    cohort = load_cohort(args.cohort, g.key_to_id)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    resume = load_checkpoint(args.resume) if args.resume else None
    ckpt, reports = train(g, cohort, mcfg, lcfg, tcfg, resume=resume,
                          progress=print)
    ckpt_path = out_dir / "checkpoint.rnck"
    save_checkpoint(ckpt, ckpt_path)
    trace_path = out_dir / "loss_trace.csv"
    with open(trace_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss_sub", "loss_gene", "loss_total"])
        start = ckpt.epoch - len(reports)
        for i, r in enumerate(reports):
            writer.writerow([start + i, repr(r.loss_sub), repr(r.loss_gene),
                             repr(r.loss_total)])
    inputs = {"nodes": args.nodes, "edges": args.edges, "cohort": args.cohort}
    config = {"model": mcfg.to_dict(), "loss": lcfg.to_dict(), "train": tcfg.to_dict()}
    write_manifest(out_dir, "train", config, inputs,
                   {"checkpoint.rnck": ckpt_path, "loss_trace.csv": trace_path},
                   tcfg.seed, time.monotonic() - t0)
    print(f"checkpoint written to {ckpt_path}")
    return 0


def _per_patient_scores(g, ckpt, cohort, hops: int, jobs: int):
    """Forward passes; yields (record, subgraph, bundle) in cohort order."""
    params = ckpt.ranking_params()
    mcfg = ckpt.model_config

    def one(rec):
        sg = sample_phenotype_subgraph(g, rec.phenotypes, hops)
        bundle = forward(params, mcfg, sg)
        return rec, sg, bundle

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, cohort))
    return [one(rec) for rec in cohort]


def cmd_predict(args) -> int:
    t0 = time.monotonic()
    g = load_graph(args.nodes, args.edges)
    ckpt = load_checkpoint(args.checkpoint)
    cohort = load_cohort(args.patients, g.key_to_id)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as fh:
        for rec, sg, bundle in _per_patient_scores(g, ckpt, cohort, args.hops,
                                                   args.jobs):
            if sg.gene_locals.size == 0:
                print(f"warning: patient {rec.patient_id} has no candidate genes",
                      file=sys.stderr)
                obj = {"id": rec.patient_id, "ranking": [], "scores": {}}
            else:
                scores = {g.node_keys[int(sg.local_nodes[gl])]: float(s)
                          for gl, s in zip(sg.gene_locals, bundle.gene_scores.data)}
                ranking = rank_genes(scores)
                obj = {"id": rec.patient_id, "ranking": ranking.order,
                       "scores": {k: scores[k] for k in sorted(scores)}}
            fh.write(json.dumps(obj, sort_keys=True) + "\n")
    inputs = {"nodes": args.nodes, "edges": args.edges,
              "patients": args.patients, "checkpoint": args.checkpoint}
    write_manifest(out_path.parent, "predict", {"hops": args.hops}, inputs,
                   {out_path.name: out_path}, ckpt.seed, time.monotonic() - t0)
    return 0


def cmd_extract(args) -> int:
    t0 = time.monotonic()
    flat = _load_flat_config(args.config)
    for key, val in (("hops", args.hops), ("top_k_edges", args.top_k_edges),
                     ("top_k_genes", args.top_k_genes),
                     ("edge_percentile", args.edge_percentile),
                     ("gene_threshold", args.gene_threshold)):
        if val is not None:
            flat[key] = val
    try:
        ecfg = ExtractionConfig(**flat)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc))
    g = load_graph(args.nodes, args.edges)
    ckpt = load_checkpoint(args.checkpoint)
    cohort = load_cohort(args.patients, g.key_to_id)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pg_path = out_dir / "patient_graphs.jsonl"
    with open(pg_path, "w", encoding="utf-8") as fh:
        for rec, sg, bundle in _per_patient_scores(g, ckpt, cohort, ecfg.hops,
                                                   args.jobs):
            pg = extract_patient_graph(sg, bundle, ecfg)
            fh.write(json.dumps(pg.to_json_obj(rec.patient_id, g.node_keys),
                                sort_keys=True) + "\n")
            if args.dot:
                arc_ids = {int(a) for a in sg.global_arc_id
                           if int(g.arc_src[a]) in pg.nodes
                           and int(g.arc_dst[a]) in pg.nodes}
                export = SubgraphExport(nodes=pg.nodes, arcs=arc_ids)
                export_dot(g, export, out_dir / f"{rec.patient_id}.dot")
    inputs = {"nodes": args.nodes, "edges": args.edges,
              "patients": args.patients, "checkpoint": args.checkpoint}
    write_manifest(out_dir, "extract", ecfg.to_dict(), inputs,
                   {"patient_graphs.jsonl": pg_path}, ckpt.seed,
                   time.monotonic() - t0)
    return 0


def _load_predictions(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                obj = json.loads(line)
                out[obj["id"]] = obj
    return out


def cmd_evaluate(args) -> int:
    t0 = time.monotonic()
    if not args.predictions and not args.patient_graphs:
        raise ConfigError("provide --predictions and/or --patient-graphs")
    cohort = load_cohort(args.cohort)
    truths = {r.patient_id: r.causal_gene for r in cohort}
    ks = [int(k) for k in args.ks.split(",")]

    rankings, ranked_truths = [], []
    if args.predictions:
        preds = _load_predictions(args.predictions)
        for pid, truth in truths.items():
            if pid not in preds:
                raise ConfigError(f"patient {pid} missing from predictions")
            order = preds[pid]["ranking"]
            scores = preds[pid].get("scores") or {g: -i for i, g in enumerate(order)}
            if order:
                rankings.append(rank_genes(scores, worst_case_ties=args.worst_case_ties,
                                           truth=truth))
            else:
                rankings.append(Ranking(order=[], rank_of={}))
            ranked_truths.append(truth)

    graphs = graph_truths = None
    if args.patient_graphs:
        pg_map = load_patient_graphs(args.patient_graphs)
        graphs, graph_truths = [], []
        for pid, truth in truths.items():
            if pid not in pg_map:
                raise ConfigError(f"patient {pid} missing from patient graphs")
            graphs.append(pg_map[pid][0])
            graph_truths.append(truth)

    if rankings:
        report = evaluate_rankings(rankings, ranked_truths, ks=ks)
        if graphs:
            from .metrics import inclusion_rate
            report.inclusion = inclusion_rate(graphs, graph_truths)
    else:
        from .metrics import inclusion_rate
        report = MetricReport(hits_at={}, mrr=0.0, n_patients=len(graphs),
                              inclusion=inclusion_rate(graphs, graph_truths))
    print(report.to_table())
    out_path = Path(args.out) if args.out else None
    outputs = {}
    if out_path:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(report.to_json() + "\n", encoding="utf-8")
        outputs[out_path.name] = out_path
        inputs = {"cohort": args.cohort}
        if args.predictions:
            inputs["predictions"] = args.predictions
        if args.patient_graphs:
            inputs["patient_graphs"] = args.patient_graphs
        write_manifest(out_path.parent, "evaluate", {"ks": ks}, inputs, outputs,
                       None, time.monotonic() - t0)
    return 0


def cmd_fuse(args) -> int:
    t0 = time.monotonic()
    external = load_external_scores(args.external)
    pg_map = load_patient_graphs(args.patient_graphs)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    rankings, truths = [], []
    cohort = load_cohort(args.cohort) if args.cohort else None
    truth_of = {r.patient_id: r.causal_gene for r in cohort} if cohort else {}
    with open(out_path, "w", encoding="utf-8") as fh:
        for pid in sorted(pg_map):
            if pid not in external:
                raise RuntimeError(f"patient {pid} missing from external score file")
            nodes, genes = pg_map[pid]
            pg = PatientGraph(nodes=nodes, frontier_by_hop=[], selected_genes=genes)
            fused = fuse_scores(min_max_normalize(external[pid]), pg, args.delta)
            fh.write(json.dumps({"id": pid,
                                 "ranking": [g for g, _ in fused],
                                 "scores": {g: s for g, s in sorted(fused)}},
                                sort_keys=True) + "\n")
            if cohort:
                rankings.append(Ranking(order=[g for g, _ in fused],
                                        rank_of={g: i + 1 for i, (g, _) in
                                                 enumerate(fused)}))
                truths.append(truth_of.get(pid))
    if cohort:
        ks = [int(k) for k in args.ks.split(",")]
        report = evaluate_rankings(rankings, truths, ks=ks)
        print(report.to_table())
    inputs = {"external": args.external, "patient_graphs": args.patient_graphs}
    write_manifest(out_path.parent, "fuse", {"delta": args.delta}, inputs,
                   {out_path.name: out_path}, None, time.monotonic() - t0)
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="phenorank",
        description="Phenotype-driven causal gene prioritization pipeline")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic graph and cohort")
    p.add_argument("--config", help="JSON file of generator settings")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("ingest", help="load and validate graph/cohort files")
    p.add_argument("--nodes", required=True)
    p.add_argument("--edges", required=True)
    p.add_argument("--cohort")
    p.add_argument("--check", action="store_true",
                   help="exit nonzero unless all inputs validate")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("train", help="train the model on a cohort")
    p.add_argument("--nodes", required=True)
    p.add_argument("--edges", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", help="flat JSON of model/loss/train settings")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--hops", type=int, help="sampling hop count")
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="rank candidate genes per patient")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--nodes", required=True)
    p.add_argument("--edges", required=True)
    p.add_argument("--patients", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hops", type=int, default=2)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("extract", help="extract compact patient graphs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--nodes", required=True)
    p.add_argument("--edges", required=True)
    p.add_argument("--patients", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", help="JSON extraction settings")
    p.add_argument("--hops", type=int)
    p.add_argument("--top-k-edges", type=int)
    p.add_argument("--top-k-genes", type=int)
    p.add_argument("--edge-percentile", type=float)
    p.add_argument("--gene-threshold", type=float)
    p.add_argument("--dot", action="store_true", help="also write DOT files")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("evaluate", help="score rankings against the truth")
    p.add_argument("--predictions")
    p.add_argument("--patient-graphs")
    p.add_argument("--cohort", required=True)
    p.add_argument("--ks", default="1,5,10")
    p.add_argument("--out", help="write a JSON metric report here")
    p.add_argument("--worst-case-ties", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("fuse", help="re-rank external scores with a boost")
    p.add_argument("--external", required=True,
                   help="JSONL of per-patient external gene scores")
    p.add_argument("--patient-graphs", required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cohort", help="truth cohort for metrics")
    p.add_argument("--ks", default="1,5,10")
    p.set_defaults(fn=cmd_fuse)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (GraphFormatError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
