"""Command-line entry point.

Commands: gen-data, build-graph, train, eval, gradcheck, label-prop.

Exit codes:
    0  success
    1  I/O error (missing or unwritable path)
    2  usage error or invalid parameter
    3  parse error in an input file
    4  schema error (inconsistent input, bad config key, dimension mismatch)
    5  training diverged
    6  gradient check failed
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

from graphreg import config as cfgmod
from graphreg.dataio import (
    generate_click_logs,
    generate_synthetic,
    load_dataset,
    save_dataset,
    write_truth,
)
from graphreg.errors import (
    InvalidArgumentError,
    ParseError,
    PreconditionError,
    SchemaError,
    TrainingDivergedError,
)
from graphreg.evaluation import evaluate, make_synthetic_triplets, read_triplets, write_triplets
from graphreg.graph import build_graph, graph_stats, load_edges, read_click_log, save_edges, write_click_log
from graphreg.gradcheck import MODES, run_gradcheck
from graphreg.losses import LabelDistribution
from graphreg.model import load_checkpoint
from graphreg.numerics import make_rng
from graphreg.trainer import (
    load_resume_point,
    propagate,
    train,
    write_checkpoint,
    write_train_log,
)

EXIT_OK = 0
EXIT_IO = 1
EXIT_USAGE = 2
EXIT_PARSE = 3
EXIT_SCHEMA = 4
EXIT_DIVERGED = 5
EXIT_GRADCHECK = 6

# generator stream keys under --seed
DATA_STREAM, CLICK_STREAM, TRIPLET_STREAM = 10, 11, 12


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.per_class < 1:
        raise InvalidArgumentError("--per-class must be at least 1")
    data = generate_synthetic(
        make_rng(args.seed, DATA_STREAM),
        args.num_classes,
        args.per_class,
        args.dim,
        args.noise_sigma,
        args.unlabeled_fraction,
        args.multilabel_rate,
        args.query_per_class,
    )
    train_ds, query_ds = data.split("train"), data.split("query")
    records = generate_click_logs(
        train_ds, make_rng(args.seed, CLICK_STREAM), args.intra_rate, args.noise_rate, args.fanout
    )
    save_dataset(out / "train.tsv", train_ds)
    save_dataset(out / "query.tsv", query_ds)
    write_click_log(out / "clicks.tsv", records)
    write_truth(out / "truth.tsv", data)
    n_triplets = 0
    if args.triplets and len(query_ds):
        triplets = make_synthetic_triplets(query_ds, make_rng(args.seed, TRIPLET_STREAM), args.triplets)
        n_triplets = len(triplets)
        write_triplets(out / "triplets.tsv", triplets)
    else:
        write_triplets(out / "triplets.tsv", [])
    print(f"train\t{len(train_ds)} examples ({len(train_ds.labeled)} labeled, {len(train_ds.unlabeled)} unlabeled)")
    print(f"query\t{len(query_ds)} examples")
    print(f"clicks\t{len(records)} records")
    print(f"triplets\t{n_triplets}")
    return EXIT_OK


def cmd_build_graph(args) -> int:
    values = cfgmod.resolve(args, ["threshold"])
    records, malformed = read_click_log(args.log)
    if args.data:
        labeled = [ex.id for ex in load_dataset(args.data).labeled]
    else:
        labeled = sorted({r.image_u for r in records})
    g = build_graph(records, values["threshold"], labeled)
    save_edges(args.out, g)
    print(f"records\t{len(records)}")
    print(f"malformed lines\t{malformed}")
    print(f"invalid records\t{g.skipped_records}")
    print(graph_stats(g).format())
    return EXIT_OK


def cmd_train(args) -> int:
    keys = cfgmod.TRAIN_KEYS + cfgmod.MODEL_KEYS
    values = cfgmod.resolve(args, keys)
    cfg = cfgmod.train_config(values)
    ds = load_dataset(args.data)
    graph = load_edges(args.graph, [ex.id for ex in ds.labeled]) if args.graph else None
    model_cfg = cfgmod.model_config(values, ds.dim, ds.num_classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    params = state = None
    if args.resume:
        params, state = load_resume_point(args.resume, cfg, model_cfg)
    ckpt_dir = out / "checkpoints" if cfg.checkpoint_every else None
    result = train(ds, graph, cfg, model_cfg, params=params, state=state, checkpoint_dir=ckpt_dir)
    write_train_log(out / "train_log.tsv", result.records, timing=not args.no_log_timing)
    extra = {
        "effective_config": cfgmod.rendered(values),
        "effective_config_hash": cfgmod.values_hash(values),
        "inputs": {
            "data_sha256": _sha256(args.data),
            "graph_sha256": _sha256(args.graph) if args.graph else None,
        },
    }
    write_checkpoint(out, result.params, result.state, cfg, model_cfg, "model.ckpt", "optimizer.ckpt", extra)
    if result.records:
        last = result.records[-1].loss
        print(f"step {result.state.step}: supervised {last.supervised:.6f} graph {last.graph:.6f} total {last.total:.6f}")
    else:
        print(f"step {result.state.step}: no training steps run")
    return EXIT_OK


def cmd_eval(args) -> int:
    values = cfgmod.resolve(args, ["ks", "eta_grid", "eval_metric", "normalize"])
    params = load_checkpoint(args.checkpoint)
    queries = load_dataset(args.queries, split="query")
    index = load_dataset(args.index, split="index")
    for name, ds in (("queries", queries), ("index", index)):
        if ds.dim != params.config.input_dim:
            raise SchemaError(f"{name} have dim {ds.dim}, the model expects {params.config.input_dim}")
    triplets = read_triplets(args.triplets) if args.triplets else []
    report = evaluate(
        params, queries, index, triplets, values["ks"], values["eta_grid"], values["eval_metric"], values["normalize"]
    )
    report.write(args.out)
    print(report.summary())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    modes = MODES
    if args.alpha is not None and float(args.alpha) == 0.0:
        modes = ("supervised",)
    if args.metric:
        modes = tuple(m for m in modes if m == "supervised" or m.endswith(args.metric))
    report = run_gradcheck(nets=args.nets, seed=args.seed, modes=modes, tol=args.tol)
    print(report.format())
    return EXIT_OK if report.passed else EXIT_GRADCHECK


def cmd_label_prop(args) -> int:
    ds = load_dataset(args.data)
    graph = load_edges(args.graph, [ex.id for ex in ds.labeled])
    seeds = {
        ex.id: LabelDistribution({k: 1.0 / len(ex.labels) for k in ex.labels}) for ex in ds.labeled
    }
    res = propagate(graph, seeds, args.iterations, clamp=not args.no_clamp, num_classes=ds.num_classes, tol=args.tol)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# id\tdistribution over {ds.num_classes} classes\n")
        for vid, row in zip(res.vertex_ids, res.distributions):
            fh.write(f"{vid}\t" + ",".join(f"{p:.17g}" for p in row) + "\n")
    print(f"vertices\t{len(res.vertex_ids)}")
    print(f"iterations\t{res.iterations}")
    print(f"last max change\t{res.last_change:.3e}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphreg", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log warnings and progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthetic dataset, click logs and triplets")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-classes", type=int, default=50)
    p.add_argument("--per-class", type=int, default=120)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--noise-sigma", type=float, default=0.3)
    p.add_argument("--unlabeled-fraction", type=float, default=1000 / 6000)
    p.add_argument("--multilabel-rate", type=float, default=0.05)
    p.add_argument("--query-per-class", type=int, default=10)
    p.add_argument("--intra-rate", type=float, default=0.8)
    p.add_argument("--noise-rate", type=float, default=0.1)
    p.add_argument("--fanout", type=int, default=3)
    p.add_argument("--triplets", type=int, default=1000, help="triplets drawn from the query split")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("build-graph", help="threshold click logs into an edge file")
    p.add_argument("--log", required=True)
    p.add_argument("--data", help="dataset whose labeled ids may be edge sources")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    cfgmod.add_flags(p, ["threshold"])
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train", help="train the embedding model")
    p.add_argument("--data", required=True)
    p.add_argument("--graph")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--resume", metavar="MANIFEST")
    p.add_argument("--no-log-timing", action="store_true", help="write 0 in the seconds column of the log")
    cfgmod.add_flags(p, cfgmod.TRAIN_KEYS + cfgmod.MODEL_KEYS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="kNN Top-k and triplet evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--triplets")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    cfgmod.add_flags(p, ["ks", "eta_grid", "eval_metric", "normalize"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the training gradient")
    p.add_argument("--nets", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--alpha", help="0 restricts the check to the supervised path")
    p.add_argument("--metric", choices=["cosine", "euclidean"])
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("label-prop", help="propagate labels over the graph without a network")
    p.add_argument("--data", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--no-clamp", action="store_true")
    p.set_defaults(func=cmd_label_prop)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (InvalidArgumentError, PreconditionError) as exc:
        print(f"invalid argument: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
