"""Command-line entry point.

Subcommands: ``fit`` (estimate a network from counts), ``simulate``
(synthetic scenario bundles), ``evaluate`` (recovery metrics against stored
truth), ``tree`` (prior matrices from a Newick file), and ``sweep``
(one-at-a-time hyperparameter grids).

Exit codes: 0 success, 2 validation error, 3 sampler failure, 1 partial
sweep failure. stderr carries messages; stdout stays quiet unless
``--progress`` is given.
"""

import argparse
import importlib.resources
import json
import os
import sys
import time
from dataclasses import asdict

import numpy as np

from . import analyze, simulate
from .copula import read_counts_csv
from .sampler import ChainError, SamplerConfig, run_chains, write_binary_trace
from .tree import (
    normalize_to_unit_depth,
    read_newick_file,
    set_unit_branch_lengths,
    tree_correlation,
    tree_distance,
    write_matrix_csv,
)

CONFIG_KEY_ALIASES = {"lambda": "lam", "l": "latent_dims", "burn-in": "burn_in"}


class ValidationError(Exception):
    pass


def _env_workers():
    raw = os.environ.get("PHYLOCOPULA_WORKERS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1


def parse_config_file(path):
    """Flat key=value config; '#' starts a comment; flags override."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: expected key=value")
            key, raw = line.split("=", 1)
            key = key.strip().lower().replace("-", "_")
            key = CONFIG_KEY_ALIASES.get(key, key)
            values[key] = raw.strip()
    return values


def _coerce(parser_defaults, key, raw):
    ref = parser_defaults.get(key)
    if isinstance(ref, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(ref, int):
        return int(raw)
    if isinstance(ref, float):
        return float(raw)
    return raw


def _add_sampler_flags(sub):
    sub.add_argument("--variant", choices=("phylo", "oracle", "dist"), default="phylo")
    sub.add_argument("--iterations", type=int, default=5500)
    sub.add_argument("--burn-in", dest="burn_in", type=int, default=500)
    sub.add_argument("--thin", type=int, default=1)
    sub.add_argument("--chains", type=int, default=1)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--alpha", type=float, default=0.05)
    sub.add_argument("--workers", type=int, default=None)
    sub.add_argument("--h", type=float, default=2500.0)
    sub.add_argument("--lambda", dest="lam", type=float, default=1.0)
    sub.add_argument("--L", dest="latent_dims", type=int, default=2)
    sub.add_argument("--a-sigma", dest="a_sigma", type=float, default=0.001)
    sub.add_argument("--b-sigma", dest="b_sigma", type=float, default=0.001)
    sub.add_argument("--a-v0", dest="a_v0", type=float, default=0.001)
    sub.add_argument("--b-v0", dest="b_v0", type=float, default=0.001)
    sub.add_argument("--oracle-edge-count", dest="oracle_edge_count",
                     type=int, default=None)
    sub.add_argument("--store-trace", action="store_true")
    sub.add_argument("--progress", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="phylocopula")
    parser.add_argument("--config", default=None, help="flat key=value file")
    subs = parser.add_subparsers(dest="command", required=True)

    def add_sub(name, **kw):
        sub = subs.add_parser(name, **kw)
        sub.add_argument("--config", default=None, help="flat key=value file")
        return sub

    fit = add_sub("fit", help="estimate an association network")
    fit.add_argument("--counts", required=True)
    fit.add_argument("--tree", default=None)
    fit.add_argument("--rank-lengths", action="store_true",
                     help="replace branch lengths with one unit per rank level")
    fit.add_argument("--out", required=True)
    _add_sampler_flags(fit)

    sim = add_sub("simulate", help="write synthetic scenario bundles")
    sim.add_argument("--p", type=int, required=True)
    sim.add_argument("--n", type=int, required=True)
    sim.add_argument("--replicates", type=int, default=1)
    sim.add_argument("--scenarios", type=int, default=1)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--sigma-sq", dest="sigma_sq", type=float, default=3.0)
    sim.add_argument("--L", dest="latent_dims", type=int, default=2)
    sim.add_argument("--df", type=float, default=4.0)
    sim.add_argument("--reference", default=None,
                     help="counts CSV supplying empirical marginals")
    sim.add_argument("--out", required=True)
    sim.add_argument("--progress", action="store_true")

    ev = add_sub("evaluate", help="recovery metrics against stored truth")
    ev.add_argument("--truth-dir", dest="truth_dir", required=True)
    ev.add_argument("--fit-dir", dest="fit_dir", required=True)
    ev.add_argument("--out", required=True)

    tr = add_sub("tree", help="prior matrices from a Newick file")
    tr.add_argument("--tree", required=True)
    tr.add_argument("--rank-lengths", action="store_true")
    tr.add_argument("--out", required=True)

    sw = add_sub("sweep", help="one-at-a-time hyperparameter grid")
    sw.add_argument("--scenario-dir", dest="scenario_dir", required=True)
    sw.add_argument("--grid", default="default",
                    help="grid config file, or 'default' for the shipped grid")
    _add_sampler_flags(sw)
    sw.add_argument("--out", required=True)
    return parser


def _apply_config_file(parser, argv):
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config", default=None)
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return argv
    values = parse_config_file(known.config)
    # config values become defaults on every subparser that knows the key
    for action in parser._subparsers._group_actions[0].choices.values():
        defaults = {a.dest: a.default for a in action._actions}
        updates = {}
        for key, raw in values.items():
            if key in defaults:
                updates[key] = _coerce(defaults, key, raw)
        action.set_defaults(**updates)
    return argv


def _load_tree(path, rank_lengths):
    tree = read_newick_file(path)
    if rank_lengths:
        tree = set_unit_branch_lengths(tree)
    return normalize_to_unit_depth(tree)


def _sampler_config(args):
    return SamplerConfig(
        variant=args.variant,
        iterations=args.iterations,
        burn_in=args.burn_in,
        thin=args.thin,
        chains=args.chains,
        seed=args.seed,
        a_sigma=args.a_sigma,
        b_sigma=args.b_sigma,
        a_v0=args.a_v0,
        b_v0=args.b_v0,
        h=args.h,
        lam=args.lam,
        latent_dims=args.latent_dims,
        oracle_edge_count=args.oracle_edge_count,
        workers=args.workers if args.workers is not None else _env_workers(),
    ).validate()


def _write_fit_outputs(out_dir, summary, alpha, elapsed):
    os.makedirs(out_dir, exist_ok=True)
    labels = summary.labels
    selected = analyze.select_graph(summary.pi_hat, alpha)
    rho = analyze.partial_correlations(summary.omega_hat)
    communities = analyze.detect_communities(selected.adjacency)

    analyze.write_edge_list_csv(
        os.path.join(out_dir, "edge_list.csv"),
        labels, summary.pi_hat, rho, selected.adjacency)
    analyze.write_communities_csv(
        os.path.join(out_dir, "communities.csv"), labels, communities)
    if "t_mean" in summary.report:
        t_mean = summary.report["t_mean"]
        with open(os.path.join(out_dir, "latent_positions.csv"), "w",
                  encoding="utf-8") as fh:
            fh.write(",".join(labels) + "\n")
            for row in t_mean:
                fh.write(",".join(f"{v:.12g}" for v in row) + "\n")

    report = dict(summary.report)
    report.pop("t_mean", None)
    run_summary = {
        "alpha": alpha,
        "cutoff": selected.cutoff,
        "posterior_expected_fdr": selected.fdr,
        "fdr_achieved": selected.achieved,
        "n_selected_edges": int(selected.adjacency.sum() // 2),
        "wall_clock_seconds": elapsed,
        **report,
    }
    with open(os.path.join(out_dir, "run_summary.json"), "w",
              encoding="utf-8") as fh:
        json.dump(run_summary, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")
    return selected


def cmd_fit(args):
    try:
        counts = read_counts_csv(args.counts)
        config = _sampler_config(args)
        tree = None
        if config.variant in ("phylo", "dist"):
            if not args.tree:
                raise ValidationError(
                    f"variant {config.variant!r} requires --tree")
            tree = _load_tree(args.tree, args.rank_lengths)
        if not 0 < args.alpha < 1:
            raise ValidationError("--alpha must lie in (0, 1)")
    except (OSError, ValueError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    started = time.perf_counter()
    try:
        summary = run_chains(config, counts, tree)
    except ChainError as exc:
        print(f"sampler failure: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:  # pre-launch validation (label alignment etc.)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    elapsed = time.perf_counter() - started
    try:
        _write_fit_outputs(args.out, summary, args.alpha, elapsed)
    except ValueError as exc:  # degenerate posterior (e.g. no positive pi)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.store_trace:
        for c, trace in enumerate(summary.chain_traces):
            write_binary_trace(
                os.path.join(args.out, f"trace_chain{c}.bin"), trace)
    if args.progress:
        print(f"fit complete in {elapsed:.1f}s -> {args.out}")
    return 0


def cmd_simulate(args):
    if args.p < 2:
        print("error: --p must be at least 2 (a tree needs two terminals)",
              file=sys.stderr)
        return 2
    if args.n < 2 or args.replicates < 1 or args.scenarios < 1:
        print("error: invalid dimensions", file=sys.stderr)
        return 2
    marginals = None
    if args.reference:
        try:
            marginals = simulate.EmpiricalMarginals(read_counts_csv(args.reference))
        except (OSError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2

    for s in range(args.scenarios):
        truth_seed = args.seed + 7919 * s
        base = simulate.build_scenario(
            args.p, args.n, truth_seed, sigma_sq=args.sigma_sq,
            n_dims=args.latent_dims, df=args.df, marginals=marginals)
        for r in range(args.replicates):
            counts_seed = truth_seed + r + 1
            scen = simulate.build_scenario(
                args.p, args.n, counts_seed, sigma_sq=args.sigma_sq,
                n_dims=args.latent_dims, df=args.df, marginals=marginals,
                tree=base.tree, t_true=base.t_true, adj_true=base.adj_true,
                omega_true=base.omega_true)
            scen.manifest.update({
                "master_seed": int(args.seed),
                "scenario": s,
                "replicate": r,
                "truth_seed": int(truth_seed),
                "counts_seed": int(counts_seed),
            })
            name = f"scenario_{s:02d}/replicate_{r:03d}" if args.scenarios > 1 \
                else f"replicate_{r:03d}"
            simulate.write_scenario_bundle(os.path.join(args.out, name), scen)
            if args.progress:
                print(f"wrote {name}")
    return 0


def _evaluate_pair(truth_dir, fit_dir):
    adj_true, labels_true = simulate.read_true_edges_csv(
        os.path.join(truth_dir, "true_edges.csv"))
    labels_fit, pi_hat, rho, selected = analyze.read_edge_list_csv(
        os.path.join(fit_dir, "edge_list.csv"))
    if set(labels_fit) != set(labels_true):
        raise ValidationError(
            f"label sets differ between {truth_dir} and {fit_dir}")
    order = [labels_fit.index(lab) for lab in labels_true]
    idx = np.asarray(order)
    selected = selected[np.ix_(idx, idx)]
    mcc, tpr, fpr = analyze.recovery_metrics(selected, adj_true)
    return {
        "mcc": mcc,
        "tpr": tpr,
        "fpr": fpr,
        "n_selected": int(selected.sum() // 2),
        "n_true_edges": int(adj_true.sum() // 2),
        "clustering_coefficient_true": analyze.clustering_coefficient(adj_true),
    }


def cmd_evaluate(args):
    replicates = sorted(
        d for d in os.listdir(args.truth_dir)
        if os.path.isfile(os.path.join(args.truth_dir, d, "true_edges.csv"))
    ) if os.path.isdir(args.truth_dir) else []
    if not replicates:
        print(f"error: no truth bundles under {args.truth_dir}", file=sys.stderr)
        return 2
    os.makedirs(args.out, exist_ok=True)
    per_replicate = []
    try:
        for name in replicates:
            fit_dir = os.path.join(args.fit_dir, name)
            if not os.path.isfile(os.path.join(fit_dir, "edge_list.csv")):
                raise ValidationError(f"missing fitted edge list for {name}")
            metrics = _evaluate_pair(os.path.join(args.truth_dir, name), fit_dir)
            metrics["replicate"] = name
            analyze.write_metrics_json(
                os.path.join(args.out, f"metrics_{name}.json"), metrics)
            per_replicate.append(metrics)
    except (OSError, ValueError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    aggregate = analyze.aggregate_metrics(
        [{k: v for k, v in m.items() if isinstance(v, (int, float))}
         for m in per_replicate])
    analyze.write_aggregate_csv(os.path.join(args.out, "aggregate.csv"), aggregate)
    return 0


def cmd_tree(args):
    try:
        tree = _load_tree(args.tree, args.rank_lengths)
        corr = tree_correlation(tree)
        dist = tree_distance(tree)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "normalized.nwk"), "w",
              encoding="utf-8") as fh:
        fh.write(tree.to_newick() + "\n")
    write_matrix_csv(os.path.join(args.out, "H.csv"), corr.matrix, corr.labels)
    write_matrix_csv(os.path.join(args.out, "D.csv"), dist.matrix, dist.labels)
    return 0


SWEEPABLE = {
    "h": ("h",),
    "lambda": ("lam",),
    "ab_sigma": ("a_sigma", "b_sigma"),
    "ab_v0": ("a_v0", "b_v0"),
}


def _load_grid(source):
    if source == "default":
        ref = importlib.resources.files("phylocopula.data") / "default_sweep.cfg"
        text = ref.read_text(encoding="utf-8")
        lines = text.splitlines()
    else:
        with open(source, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    grid = []
    for line in lines:
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, raw = line.split("=", 1)
        key = key.strip().lower()
        if key not in SWEEPABLE:
            raise ValidationError(
                f"unknown sweep parameter {key!r}; choose from {sorted(SWEEPABLE)}")
        values = [float(v) for v in raw.split(",") if v.strip()]
        if not values:
            raise ValidationError(f"no values for sweep parameter {key!r}")
        grid.append((key, values))
    if not grid:
        raise ValidationError("empty sweep grid")
    return grid


def cmd_sweep(args):
    try:
        grid = _load_grid(args.grid)
        base_config = _sampler_config(args)
        replicates = sorted(
            d for d in os.listdir(args.scenario_dir)
            if os.path.isfile(os.path.join(args.scenario_dir, d, "counts.csv"))
        )
        if not replicates:
            raise ValidationError(f"no scenario bundles under {args.scenario_dir}")
    except (OSError, ValueError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    os.makedirs(args.out, exist_ok=True)
    rows = []
    any_failed = False
    for key, values in grid:
        for value in values:
            config = SamplerConfig(**asdict(base_config))
            for dest in SWEEPABLE[key]:
                setattr(config, dest, value)
            try:
                config.validate()
                metrics = []
                for name in replicates:
                    bundle = os.path.join(args.scenario_dir, name)
                    counts = read_counts_csv(os.path.join(bundle, "counts.csv"))
                    tree = _load_tree(os.path.join(bundle, "tree.nwk"), False)
                    summary = run_chains(config, counts, tree)
                    selected = analyze.select_graph(summary.pi_hat, args.alpha)
                    adj_true, labels_true = simulate.read_true_edges_csv(
                        os.path.join(bundle, "true_edges.csv"))
                    order = [summary.labels.index(lab) for lab in labels_true]
                    idx = np.asarray(order)
                    mcc, tpr, fpr = analyze.recovery_metrics(
                        selected.adjacency[np.ix_(idx, idx)], adj_true)
                    metrics.append({"mcc": mcc, "tpr": tpr, "fpr": fpr})
                agg = analyze.aggregate_metrics(metrics)
                rows.append({
                    "parameter": key, "value": value, "failed": 0,
                    **{f"{m}_mean": agg[m][0] for m in agg},
                    **{f"{m}_two_se": agg[m][1] for m in agg},
                })
            except Exception as exc:  # record and continue with the grid
                any_failed = True
                rows.append({"parameter": key, "value": value, "failed": 1,
                             "error": str(exc)})
                print(f"sweep point {key}={value} failed: {exc}", file=sys.stderr)
            if args.progress:
                print(f"sweep {key}={value} done")

    fields = sorted({k for row in rows for k in row})
    import csv as _csv

    with open(os.path.join(args.out, "sweep_results.csv"), "w",
              encoding="utf-8", newline="") as fh:
        writer = _csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    return 1 if any_failed else 0


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        argv = _apply_config_file(parser, argv)
    except (OSError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    args = parser.parse_args(argv)
    handler = {
        "fit": cmd_fit,
        "simulate": cmd_simulate,
        "evaluate": cmd_evaluate,
        "tree": cmd_tree,
        "sweep": cmd_sweep,
    }[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
