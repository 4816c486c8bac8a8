"""Command-line entry point.

Subcommands: gen-data, train, eval, cluster, mi, ablate.  Every subcommand
takes ``--config FILE`` plus ``--key value`` overrides of config keys (see
:mod:`pcl.config`).  ``PCL_THREADS`` caps BLAS worker threads.
"""
import argparse
import os
import sys

from .clustering import dump_clustering, multi_cluster
from .config import load_run_config
from .data import export_csv, gen_hierarchical_mixture, load_dataset, save_dataset, split_dataset
from .encoder import encode, load_checkpoint
from .errors import PCLError
from .evaluation import (EvalReport, ami, cluster_size_stats, format_histogram, knn_accuracy,
                         linear_probe, mi_discrete, mi_ross)
from .experiments import format_ablation_table, run_ablation
from .prototypes import load_prototypes
from .serialization import atomic_write_text
from .trainer import train


def _build_parser():
    parser = argparse.ArgumentParser(prog="pcl", description="Prototypical contrastive learning toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="sectioned key = value config file")
        return p

    p = add("gen-data", "generate a synthetic hierarchical dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--test-out", help="also write a held-out split here")
    p.add_argument("--csv", help="also export the (training) dataset as CSV")

    p = add("train", "run the EM training loop")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="run directory")

    p = add("eval", "evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", help="held-out dataset; default: split --data")
    p.add_argument("--protos", help="prototype file for cluster-size and prototype-MI reports")
    p.add_argument("--out", help="report file (default stdout)")
    p.add_argument("--hist", help="histogram path prefix; writes <prefix>_<m>.txt")

    p = add("cluster", "cluster encoded features at every granularity in train.K")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = add("mi", "MI with labels: instance features vs prototype assignments")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--labels", choices=("fine", "coarse"), default="fine")
    p.add_argument("--out", help="report file (default stdout)")

    p = add("ablate", "train the five loss/warm-up variants and tabulate")
    p.add_argument("--data", required=True)
    p.add_argument("--test", help="held-out dataset; default: split --data")
    p.add_argument("--out", help="table file (default stdout)")
    return parser


def _parse_overrides(extra):
    pairs = []
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--") or len(token) == 2:
            raise PCLError(f"unexpected argument {token!r}")
        key = token[2:]
        if "=" in key:
            key, _, value = key.partition("=")
            i += 1
        else:
            if i + 1 >= len(extra):
                raise PCLError(f"override --{key} needs a value")
            value = extra[i + 1]
            i += 2
        pairs.append((key, value))
    return pairs


def _emit(text, path):
    if path:
        atomic_write_text(path, text)
    else:
        sys.stdout.write(text)


def _need_file(path, what):
    if not os.path.isfile(path):
        raise PCLError(f"{what} not found: {path}")


def _load_data(path):
    _need_file(path, "dataset")
    return load_dataset(path)


def _load_ckpt(path):
    _need_file(path, "checkpoint")
    return load_checkpoint(path)


def _held_out(args, rc, ds):
    if getattr(args, "test", None):
        return ds, _load_data(args.test)
    return split_dataset(ds, rc.data["test_fraction"], rc.seed_for("eval-split"))


def cmd_gen_data(args, rc):
    params = {k: v for k, v in rc.data.items() if k != "test_fraction"}
    ds = gen_hierarchical_mixture(seed=rc.seed_for("data"), **params)
    if args.test_out:
        ds, test = split_dataset(ds, rc.data["test_fraction"], rc.seed_for("data-split"))
        save_dataset(args.test_out, test)
    save_dataset(args.out, ds)
    if args.csv:
        export_csv(args.csv, ds)


def cmd_train(args, rc):
    ds = _load_data(args.data)
    cfg = rc.train_config()
    os.makedirs(args.out, exist_ok=True)
    atomic_write_text(os.path.join(args.out, "config.cfg"), rc.to_text())
    train(ds, cfg, rc.net, rc.augment, out_dir=args.out)


def cmd_eval(args, rc):
    ds = _load_data(args.data)
    params = _load_ckpt(args.checkpoint)
    train_ds, test_ds = _held_out(args, rc, ds)
    ev = rc.eval
    bank = encode(params, train_ds.inputs)
    query = encode(params, test_ds.inputs)
    echo = {"knn_k": ev["knn_k"], "knn_tau": ev["knn_tau"]}
    reports = [
        EvalReport("knn_fine", knn_accuracy(query, test_ds.fine, bank, train_ds.fine, ev["knn_k"], ev["knn_tau"]), echo),
        EvalReport("knn_coarse", knn_accuracy(query, test_ds.coarse, bank, train_ds.coarse, ev["knn_k"], ev["knn_tau"]), echo),
    ]
    seed = rc.seed_for("eval")
    for name, labels in (("fine", train_ds.fine), ("coarse", train_ds.coarse)):
        k = int(labels.max()) + 1
        clustering = multi_cluster(bank, [k], seed=seed)[0]
        reports.append(EvalReport(f"ami_{name}", ami(clustering.assignment, labels), {"k": k}))
    reports.append(EvalReport("mi_instance_fine", mi_ross(bank, train_ds.fine, ev["mi_k"]), {"mi_k": ev["mi_k"]}))
    for name, ytr, yte in (("fine", train_ds.fine, test_ds.fine), ("coarse", train_ds.coarse, test_ds.coarse)):
        acc = linear_probe(bank, ytr, query, yte, ev["probe_iters"], ev["probe_lr"], seed)
        reports.append(EvalReport(f"probe_{name}", acc, {"iters": ev["probe_iters"], "lr": ev["probe_lr"]}))
    if args.protos:
        _need_file(args.protos, "prototype file")
        for ps in load_prototypes(args.protos):
            mean, std, hist = cluster_size_stats(ps.member_count, ev["hist_bins"])
            tag = {"granularity": ps.granularity, "k": ps.k}
            reports.append(EvalReport("cluster_size_mean", mean, tag))
            reports.append(EvalReport("cluster_size_std", std, tag))
            if ps.assignment.shape[0] == ds.fine.shape[0]:
                reports.append(EvalReport("mi_proto_fine", mi_discrete(ps.assignment, ds.fine), tag))
            if args.hist:
                atomic_write_text(f"{args.hist}_{ps.granularity}.txt", format_histogram(hist))
    _emit("".join(r.format() + "\n" for r in reports), args.out)


def cmd_cluster(args, rc):
    ds = _load_data(args.data)
    params = _load_ckpt(args.checkpoint)
    feats = encode(params, ds.inputs, use_momentum=True)
    K = rc.train.K
    for m, clustering in enumerate(multi_cluster(feats, K, rc.train.kmeans_iters, rc.train.kmeans_tol,
                                                 rc.seed_for("cluster"))):
        dump_clustering(os.path.join(args.out, f"partition_{m}_k{K[m]}"), clustering)


def cmd_mi(args, rc):
    ds = _load_data(args.data)
    params = _load_ckpt(args.checkpoint)
    labels = ds.fine if args.labels == "fine" else ds.coarse
    feats = encode(params, ds.inputs, use_momentum=True)
    reports = [EvalReport("mi_instance", mi_ross(feats, labels, rc.eval["mi_k"]),
                          {"labels": args.labels, "mi_k": rc.eval["mi_k"]})]
    K = rc.train.K
    for m, clustering in enumerate(multi_cluster(feats, K, rc.train.kmeans_iters, rc.train.kmeans_tol,
                                                 rc.seed_for("cluster"))):
        reports.append(EvalReport("mi_proto", mi_discrete(clustering.assignment, labels),
                                  {"labels": args.labels, "granularity": m, "k": K[m]}))
    _emit("".join(r.format() + "\n" for r in reports), args.out)


def cmd_ablate(args, rc):
    ds = _load_data(args.data)
    train_ds, test_ds = _held_out(args, rc, ds)
    results = run_ablation(train_ds, test_ds, rc.train_config(), rc.net, rc.augment)
    _emit(format_ablation_table(results), args.out)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "cluster": cmd_cluster,
    "mi": cmd_mi,
    "ablate": cmd_ablate,
}


def _thread_limit():
    value = os.environ.get("PCL_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise PCLError(f"PCL_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise PCLError(f"PCL_THREADS must be a positive integer, got {value!r}")
    return n


def main(argv=None):
    parser = _build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        overrides = _parse_overrides(extra)
        rc = load_run_config(args.config, overrides)
        limit = _thread_limit()
        if limit is None:
            COMMANDS[args.command](args, rc)
        else:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=limit):
                COMMANDS[args.command](args, rc)
    except (PCLError, ValueError, OSError) as exc:
        print(f"pcl {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
