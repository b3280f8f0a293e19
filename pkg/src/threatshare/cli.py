"""Command-line interface.

Subcommands mirror the pipeline stages: featurize conn logs, train/apply
detectors, derive weights, build/consume share packages, generate synthetic
traffic, inject attacks, evaluate rankings, and run the full two-network
scenario from one config file.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .connlog import ConnLogReader, SiteConfig, parse_conn_log, serialize_zeek_tsv
from .detector import (
    WeightVector,
    fit_ensemble,
    load_model,
    load_ranking_csv,
    rank_alerts,
    save_model,
    save_ranking_csv,
)
from .evaluation import make_report, precision_fp_at_k, recall_at_k
from .features import (
    FEATURE_NAMES,
    FeatureMatrix,
    assign_labels,
    featurize,
    load_matrix_csv,
    save_matrix_csv,
)
from .forest import ForestConfig, feature_weights, train_forest
from .scenario import net_a_selfcheck, run_scenario
from .sharing import (
    adapt_weights,
    compute_moments,
    export_package,
    import_package,
    make_model_package,
    make_weights_moments_package,
    make_weights_package,
    moment_distance,
)
from .synth import BenignProfile, ScanProfile, gen_benign, gen_scan, inject, load_profile, slow_variant


def _site_config(args, ports=None) -> SiteConfig:
    tokens = frozenset(args.internal_token) if getattr(args, "internal_token", None) else None
    return SiteConfig(
        monitored_ports=tuple(ports or args.port),
        internal_prefixes=tuple(getattr(args, "internal_cidr", None) or ()),
        internal_tokens=tokens,
        window_seconds=getattr(args, "window", 60),
    )


def _load_weights_csv(path) -> WeightVector:
    table = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "feature,weight":
            raise SystemExit(f"{path}: expected 'feature,weight' header")
        for line in fh:
            line = line.strip()
            if line:
                name, w = line.split(",")
                table[name] = float(w)
    return WeightVector.from_dict(table)


def _save_weights_csv(weights: WeightVector, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("feature,weight\n")
        for name in FEATURE_NAMES:
            fh.write(f"{name},{weights[name]!r}\n")


def _single_port_matrix(matrices: dict[int, FeatureMatrix], port=None) -> FeatureMatrix:
    if port is not None:
        if port not in matrices:
            raise SystemExit(f"no rows for port {port} in the feature file")
        return matrices[port]
    if len(matrices) != 1:
        raise SystemExit(
            f"feature file covers ports {sorted(matrices)}; pick one with --port")
    return next(iter(matrices.values()))


def _load_truth(path, window_seconds=60.0) -> np.ndarray:
    """Truth CSV: either 'start,end' intervals or a single 'window_start' column."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        rows = [line.strip().split(",") for line in fh if line.strip()]
    if header == "start,end":
        wins: list[float] = []
        for a, b in rows:
            start, end = float(a), float(b)
            w = start
            while w < end:
                wins.append(w)
                w += window_seconds
        return np.array(wins)
    if header == "window_start":
        return np.array([float(r[0]) for r in rows])
    raise SystemExit(f"{path}: expected 'start,end' or 'window_start' header")


def cmd_featurize(args) -> int:
    cfg = _site_config(args)
    reader = parse_conn_log(args.input, args.format)
    matrices = featurize(iter(reader), cfg)
    if isinstance(reader, ConnLogReader) and reader.skipped:
        print(f"skipped {reader.skipped} malformed lines", file=sys.stderr)
    if args.truth:
        intervals = []
        with open(args.truth, "r", encoding="utf-8") as fh:
            header = fh.readline().strip()
            if header != "start,end":
                raise SystemExit(f"{args.truth}: expected 'start,end' header")
            for line in fh:
                if line.strip():
                    a, b = line.strip().split(",")
                    intervals.append((float(a), float(b)))
        matrices = {p: assign_labels(m, intervals) for p, m in matrices.items()}
    with open(args.out, "w", encoding="utf-8") as fh:
        save_matrix_csv(matrices, fh)
    print(f"wrote {sum(len(m) for m in matrices.values())} windows to {args.out}")
    return 0


def cmd_train(args) -> int:
    with open(args.features, "r", encoding="utf-8") as fh:
        matrices = load_matrix_csv(fh)
    matrix = _single_port_matrix(matrices, args.port)
    weights = _load_weights_csv(args.weights) if args.weights else None
    model = fit_ensemble(matrix, weights=weights, score_norm=args.score_norm)
    save_model(model, args.out)
    print(f"trained port {matrix.port} on {len(matrix)} windows -> {args.out}")
    return 0


def cmd_detect(args) -> int:
    model = load_model(args.model)
    with open(args.features, "r", encoding="utf-8") as fh:
        matrices = load_matrix_csv(fh)
    matrix = _single_port_matrix(matrices, model.port)
    if args.weights:
        model = model.with_weights(_load_weights_csv(args.weights))
    ranking = rank_alerts(model, matrix)
    with open(args.out, "w", encoding="utf-8") as fh:
        save_ranking_csv(ranking, fh)
    print(f"ranked {len(ranking)} windows -> {args.out}")
    return 0


def cmd_weights(args) -> int:
    with open(args.features, "r", encoding="utf-8") as fh:
        matrices = load_matrix_csv(fh)
    matrix = _single_port_matrix(matrices, args.port)
    forest = train_forest(matrix, ForestConfig(rng_seed=args.seed, n_trees=args.trees))
    weights = feature_weights(forest)
    _save_weights_csv(weights, args.out)
    if forest.oob_accuracy is not None:
        print(f"out-of-bag accuracy: {forest.oob_accuracy:.3f}")
    print(f"wrote weights -> {args.out}")
    return 0


def cmd_share_export(args) -> int:
    if args.kind == "model":
        pkg = make_model_package(args.site_id, load_model(args.model))
    else:
        weights = _load_weights_csv(args.weights)
        if args.kind == "weights":
            pkg = make_weights_package(args.site_id, args.port, weights)
        else:
            with open(args.moments_from, "r", encoding="utf-8") as fh:
                matrices = load_matrix_csv(fh)
            matrix = _single_port_matrix(matrices, args.port)
            pkg = make_weights_moments_package(
                args.site_id, args.port, weights, compute_moments(matrix))
    Path(args.out).write_bytes(export_package(pkg))
    print(f"exported {args.kind} package -> {args.out}")
    return 0


def cmd_share_import(args) -> int:
    pkg = import_package(Path(args.package).read_bytes())
    print(f"package: kind={pkg.kind} site={pkg.site_id} port={pkg.port}")
    if pkg.kind == "model":
        if args.out:
            save_model(pkg.payload, args.out)
            print(f"saved shared model -> {args.out}")
    elif pkg.kind == "weights":
        if args.out:
            _save_weights_csv(pkg.payload, args.out)
            print(f"saved shared weights -> {args.out}")
    else:
        weights, moments = pkg.payload
        if args.local_features:
            with open(args.local_features, "r", encoding="utf-8") as fh:
                matrices = load_matrix_csv(fh)
            matrix = _single_port_matrix(matrices, pkg.port)
            dist = moment_distance(moments, compute_moments(matrix), args.distance)
            weights = adapt_weights(weights, dist, args.adapt_k)
            print(f"adapted weights to the {args.adapt_k} closest features")
        if args.out:
            _save_weights_csv(weights, args.out)
            print(f"saved weights -> {args.out}")
    return 0


def cmd_gen(args) -> int:
    profile = load_profile(args.profile)
    if args.seed is not None:
        profile = replace(profile, rng_seed=args.seed)
    if isinstance(profile, BenignProfile):
        t0 = args.start_ts
        batch = gen_benign(profile, (t0, t0 + args.days * 86400.0), args.site_id)
    else:
        batch = gen_scan(profile)
    from .connlog import batch_to_records

    with open(args.out, "w", encoding="utf-8") as fh:
        n = serialize_zeek_tsv(batch_to_records(batch), fh)
    print(f"wrote {n} records -> {args.out}")
    return 0


def cmd_inject(args) -> int:
    benign = list(parse_conn_log(args.benign, "auto"))
    attack = list(parse_conn_log(args.attack, "auto"))
    if args.slow and args.slow > 1:
        attack = slow_variant(attack, args.slow, rng_seed=args.seed)
    merged, intervals = inject(benign, attack, args.offset, args.window)
    with open(args.out, "w", encoding="utf-8") as fh:
        n = serialize_zeek_tsv(merged, fh)
    if args.truth_out:
        with open(args.truth_out, "w", encoding="utf-8") as fh:
            fh.write("start,end\n")
            for s, e in intervals:
                fh.write(f"{s!r},{e!r}\n")
    print(f"wrote {n} merged records -> {args.out} ({len(intervals)} attack intervals)")
    return 0


def cmd_eval(args) -> int:
    with open(args.ranking, "r", encoding="utf-8") as fh:
        ranking = load_ranking_csv(fh, port=args.port)
    truth = _load_truth(args.truth, args.window)
    truth = truth[np.isin(truth, ranking.window_starts)]
    if len(truth) == 0:
        raise SystemExit("no truth windows intersect the ranking")
    report = make_report(ranking, truth, strategy="baseline", ks=(args.k,))
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(f"m,recall_at_{args.k},precision_at_{args.k},fp_at_{args.k}\n")
        fh.write(
            f"{report.m},{report.recall_at(min(args.k, len(ranking)))!r},"
            f"{report.precision_at[args.k]!r},{report.fp_at[args.k]}\n"
        )
    print(
        f"m={report.m} recall@{args.k}={report.recall_at(min(args.k, len(ranking))):.4f} "
        f"precision@{args.k}={report.precision_at[args.k]:.4f} fp={report.fp_at[args.k]}"
    )
    return 0


def cmd_run(args) -> int:
    from .scenario_config import load_scenario_config

    config = load_scenario_config(args.config)
    if args.workers:
        config = replace(config, n_workers=args.workers)
    result = run_scenario(config, out_dir=Path(args.out))
    ok = net_a_selfcheck(result)
    print(f"config digest: {result.config_digest}")
    print(f"site A self-check (accuracy > 0.96 on all ports): {'pass' if ok else 'FAIL'}")
    for line in result.diagnostics:
        print(f"note: {line}")
    print(f"{len(result.reports)} reports -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="threatshare", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("featurize", help="aggregate a conn log into per-port feature windows")
    f.add_argument("--input", required=True)
    f.add_argument("--format", choices=("auto", "tsv", "jsonl"), default="auto")
    f.add_argument("--port", type=int, action="append", required=True)
    f.add_argument("--window", type=int, default=60)
    f.add_argument("--internal-cidr", action="append", dest="internal_cidr")
    f.add_argument("--internal-token", action="append", dest="internal_token")
    f.add_argument("--truth", help="optional start,end intervals to label rows")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_featurize)

    t = sub.add_parser("train", help="fit the per-feature KDE ensemble on training windows")
    t.add_argument("--features", required=True)
    t.add_argument("--port", type=int)
    t.add_argument("--weights", help="optional feature,weight CSV (default: uniform)")
    t.add_argument("--score-norm", choices=("minmax", "zscore"), default="minmax")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("detect", help="score and rank test windows with a trained model")
    d.add_argument("--model", required=True)
    d.add_argument("--features", required=True)
    d.add_argument("--weights", help="override ensemble weights from a CSV")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_detect)

    w = sub.add_parser("weights", help="derive feature weights from labeled windows")
    w.add_argument("--features", required=True)
    w.add_argument("--port", type=int)
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--trees", type=int, default=100)
    w.add_argument("--out", required=True)
    w.set_defaults(func=cmd_weights)

    s = sub.add_parser("share", help="build or consume share packages")
    ssub = s.add_subparsers(dest="share_command", required=True)
    se = ssub.add_parser("export", help="build a package file")
    se.add_argument("--kind", choices=("model", "weights", "weights+moments"), required=True)
    se.add_argument("--site-id", default="site")
    se.add_argument("--port", type=int, default=0)
    se.add_argument("--model", help="model file (kind=model)")
    se.add_argument("--weights", help="feature,weight CSV (weight kinds)")
    se.add_argument("--moments-from", help="feature CSV to summarize (kind=weights+moments)")
    se.add_argument("--out", required=True)
    se.set_defaults(func=cmd_share_export)
    si = ssub.add_parser("import", help="validate and unpack a package file")
    si.add_argument("package")
    si.add_argument("--adapt-k", type=int, default=10)
    si.add_argument("--distance", choices=("raw_moments", "scale_adjusted"), default="raw_moments")
    si.add_argument("--local-features", help="local feature CSV for weight adaptation")
    si.add_argument("--out")
    si.set_defaults(func=cmd_share_import)

    g = sub.add_parser("gen", help="generate synthetic traffic from a profile file")
    g.add_argument("--profile", required=True)
    g.add_argument("--days", type=float, default=8.0)
    g.add_argument("--seed", type=int)
    g.add_argument("--site-id", default="site")
    g.add_argument("--start-ts", type=float, default=0.0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    i = sub.add_parser("inject", help="merge an attack trace into benign traffic")
    i.add_argument("--benign", required=True)
    i.add_argument("--attack", required=True)
    i.add_argument("--slow", type=float, help="slowdown factor (subsampling)")
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--offset", type=float, default=0.0)
    i.add_argument("--window", type=float, default=60.0)
    i.add_argument("--truth-out")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_inject)

    e = sub.add_parser("eval", help="top-k metrics for a ranking against ground truth")
    e.add_argument("--ranking", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--k", type=int, default=60)
    e.add_argument("--port", type=int, default=0)
    e.add_argument("--window", type=float, default=60.0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("run", help="run the full two-network scenario from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--workers", type=int)
    r.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
