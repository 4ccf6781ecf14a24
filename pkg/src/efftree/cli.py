"""Command-line front end: fit trees from CSV, predict, run simulations.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 fit failure.
JSON artifacts go to files or stdout; logs and progress go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .data import DataError, load_csv
from .estimators import NuisanceScope, VarianceMethod
from .glm import FitError
from .prune import DEFAULT_LAMBDA, weakest_link_sequence
from .select import bootstrap_effects, select_final
from .simulate import SimSetting, make_config, run_experiment
from .tree import GrowConfig, grow_max_tree, schema_from_dict, tree_from_dict
from .data import SubgroupMask

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_FIT = 4

logger = logging.getLogger("efftree")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="efftree",
        description="Fit subgroup treatment-effect trees from observational data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit a tree from a CSV file")
    fit.add_argument("--data", required=True, help="CSV file with covariates, treatment, outcome")
    fit.add_argument("--schema", required=True, help="JSON schema file describing the columns")
    fit.add_argument("--estimator", required=True, choices=["ipw", "g", "dr"],
                     help="subgroup effect estimator")
    fit.add_argument("--propensity-spec", default=None,
                     help="propensity model formula (required for ipw and dr)")
    fit.add_argument("--outcome-spec", default=None,
                     help="outcome model formula (required for g and dr)")
    fit.add_argument("--outcome-family", default="gaussian", choices=["gaussian", "binomial"],
                     help="outcome model family (default gaussian)")
    fit.add_argument("--scope", default="parent", choices=["whole", "parent", "child"],
                     help="which rows fit the nuisance models (default parent)")
    fit.add_argument("--variance", default=None,
                     choices=[v.value for v in VarianceMethod],
                     help="split variance method (default depends on the estimator)")
    fit.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA,
                     help=f"split complexity penalty (default {DEFAULT_LAMBDA})")
    fit.add_argument("--train-frac", type=float, default=0.8,
                     help="fraction of rows used to build the tree; the rest select it (default 0.8)")
    fit.add_argument("--min-node", type=int, default=30, help="minimum rows per node (default 30)")
    fit.add_argument("--min-per-arm", type=int, default=10,
                     help="minimum rows per treatment arm per node (default 10)")
    fit.add_argument("--max-depth", type=int, default=10, help="maximum tree depth (default 10)")
    fit.add_argument("--epsilon", type=float, default=0.01,
                     help="propensity truncation bound (default 0.01)")
    fit.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    fit.add_argument("--bootstrap", type=int, default=0, metavar="B",
                     help="bootstrap replicates for terminal intervals (default 0 = off)")
    fit.add_argument("--level", type=float, default=0.95,
                     help="bootstrap interval level (default 0.95)")
    fit.add_argument("--missing", default="drop_rows", choices=["drop_rows", "reject"],
                     help="missing-cell policy (default drop_rows)")
    fit.add_argument("--out", default=".", help="output directory (default current)")

    predict = sub.add_parser("predict", help="route a CSV through a fitted tree")
    predict.add_argument("--tree", required=True, help="tree.json from a previous fit")
    predict.add_argument("--data", required=True, help="CSV file to score")
    predict.add_argument("--missing", default="drop_rows", choices=["drop_rows", "reject"])

    sim = sub.add_parser("simulate", help="run a Monte Carlo experiment")
    sim.add_argument("--setting", required=True,
                     choices=["homog", "heterog", "binary-mixed", "binary-mixed-homog"],
                     help="simulation design")
    sim.add_argument("--algo", required=True,
                     help="algorithm config: ESTIMATOR[:PROP_VARIANT,OUT_VARIANT] with "
                          "variants in {true, mis-func, unmeasured-cov}; e.g. dr:mis-func,true")
    sim.add_argument("--reps", type=int, required=True, help="number of replications")
    sim.add_argument("--seed", type=int, default=0, help="root seed (default 0)")
    sim.add_argument("--n", type=int, default=1000, help="sample size per replicate (default 1000)")
    sim.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA,
                     help=f"split complexity penalty (default {DEFAULT_LAMBDA})")
    sim.add_argument("--threads", type=int, default=None,
                     help="worker processes (default: available cores); results do not depend on it")
    sim.add_argument("--timing", action="store_true",
                     help="include wall-clock timing in the JSON output (off by default "
                          "so identical runs produce identical JSON)")
    sim.add_argument("--scope", default="parent", choices=["whole", "parent", "child"])
    sim.add_argument("--min-node", type=int, default=30)
    sim.add_argument("--min-per-arm", type=int, default=10)
    sim.add_argument("--max-depth", type=int, default=10)
    sim.add_argument("--epsilon", type=float, default=0.01)
    return parser


def _load_schema(path: str):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return schema_from_dict(json.load(fh))
    except FileNotFoundError:
        raise CliError(f"schema file not found: {path}", EXIT_DATA)
    except (json.JSONDecodeError, KeyError, ValueError) as err:
        raise CliError(f"bad schema file {path}: {err}", EXIT_CONFIG)


def cmd_fit(args) -> int:
    schema = _load_schema(args.schema)
    if args.estimator in ("ipw", "dr") and not args.propensity_spec:
        raise CliError("--propensity-spec is required with --estimator " + args.estimator, EXIT_CONFIG)
    if args.estimator in ("g", "dr") and not args.outcome_spec:
        raise CliError("--outcome-spec is required with --estimator " + args.estimator, EXIT_CONFIG)
    if not 0.0 < args.train_frac <= 1.0:
        raise CliError("--train-frac must lie in (0, 1]", EXIT_CONFIG)
    try:
        config = GrowConfig.from_strings(
            estimator=args.estimator,
            treatment_name=schema.treatment,
            propensity=args.propensity_spec,
            outcome=args.outcome_spec,
            scope=NuisanceScope(args.scope),
            variance_method=VarianceMethod(args.variance) if args.variance else None,
            min_node=args.min_node,
            min_per_arm=args.min_per_arm,
            max_depth=args.max_depth,
            epsilon=args.epsilon,
            seed=args.seed,
            outcome_family=args.outcome_family,
        )
    except ValueError as err:
        raise CliError(f"bad configuration: {err}", EXIT_CONFIG)

    try:
        data = load_csv(args.data, schema, args.missing)
    except FileNotFoundError:
        raise CliError(f"data file not found: {args.data}", EXIT_DATA)
    except DataError as err:
        raise CliError(f"bad data: {err}", EXIT_DATA)

    rng = np.random.default_rng(np.random.SeedSequence(args.seed))
    perm = rng.permutation(data.n)
    n_build = int(round(args.train_frac * data.n))
    if n_build < config.min_node:
        raise CliError("training split smaller than --min-node", EXIT_DATA)
    build_rows = np.sort(perm[:n_build])
    build_mask = SubgroupMask.from_indices(data.n, build_rows)

    try:
        tree = grow_max_tree(data, build_mask, config)
        sequence = weakest_link_sequence(tree)
        if n_build < data.n:
            validation = data.take(np.sort(perm[n_build:]))
            final, trace = select_final(sequence, validation, args.lam, config)
        else:
            final, trace = select_final(sequence, data.take(build_rows), args.lam, config)
            logger.warning("no held-out rows; selection reused the training rows")
    except (FitError, RuntimeError) as err:
        raise CliError(f"fit failed: {err}", EXIT_FIT)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "tree.json").write_text(final.to_json(indent=2) + "\n", encoding="utf-8")
    (out_dir / "tree.txt").write_text(final.render_text(), encoding="utf-8")
    (out_dir / "selection.json").write_text(
        json.dumps(trace.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )

    if args.bootstrap > 0:
        intervals = bootstrap_effects(final, data, B=args.bootstrap, level=args.level,
                                      seed=args.seed, config=config)
        payload = [
            {
                "terminal": iv.node_id,
                "effect": iv.point,
                "lower": iv.lower,
                "upper": iv.upper,
                "replicates": iv.n_replicates,
                "dropped": iv.n_dropped,
            }
            for iv in intervals
        ]
        (out_dir / "bootstrap.json").write_text(
            json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )

    print(f"{'terminal':>8} {'n':>6} {'effect':>10} {'mu1':>10} {'mu0':>10}")
    for t in final.terminal_ids():
        nd = final.node(t)
        print(f"{t:>8} {nd.n:>6} {nd.effect.effect:>10.4f} {nd.effect.mu1:>10.4f} {nd.effect.mu0:>10.4f}")
    return 0


def cmd_predict(args) -> int:
    try:
        payload = json.loads(Path(args.tree).read_text(encoding="utf-8"))
        tree = tree_from_dict(payload)
    except FileNotFoundError:
        raise CliError(f"tree file not found: {args.tree}", EXIT_DATA)
    except (json.JSONDecodeError, KeyError, ValueError) as err:
        raise CliError(f"bad tree file: {err}", EXIT_CONFIG)
    try:
        data = load_csv(args.data, tree.schema, args.missing)
    except FileNotFoundError:
        raise CliError(f"data file not found: {args.data}", EXIT_DATA)
    except DataError as err:
        raise CliError(f"schema mismatch or bad data: {err}", EXIT_DATA)

    terminal = tree.route(data)
    effects = {t: tree.node(t).effect.effect for t in tree.terminal_ids()}
    writer = csv.writer(sys.stdout)
    names = list(tree.schema.covariate_names)
    writer.writerow(names + [tree.schema.treatment, tree.schema.outcome, "effect", "terminal_id"])
    from .data import Continuous

    for i in range(data.n):
        row = []
        for name in names:
            kind = tree.schema.kind_of(name)
            if isinstance(kind, Continuous):
                row.append(repr(float(data.covariates[name][i])))
            else:
                row.append(kind.levels[data.covariates[name][i]])
        row.append(str(int(data.treatment[i])))
        row.append(repr(float(data.outcome[i])))
        row.append(repr(float(effects[int(terminal[i])])))
        row.append(str(int(terminal[i])))
        writer.writerow(row)
    return 0


_SETTING_ALIASES = {
    "homog": "homogeneous",
    "heterog": "heterogeneous",
    "binary-mixed": "binary-mixed-heterogeneous",
    "binary-mixed-homog": "binary-mixed-homogeneous",
}


def _parse_algo(text: str) -> tuple[str, str, str]:
    head, _, tail = text.partition(":")
    if head not in ("ipw", "g", "dr"):
        raise CliError(f"unknown estimator {head!r} in --algo", EXIT_CONFIG)
    if not tail:
        return head, "true", "true"
    parts = [p.strip() for p in tail.split(",")]
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2:
        raise CliError(f"--algo variants must be PROP,OUT: {text!r}", EXIT_CONFIG)
    for p in parts:
        if p not in ("true", "mis-func", "unmeasured-cov"):
            raise CliError(f"unknown model variant {p!r} in --algo", EXIT_CONFIG)
    return head, parts[0], parts[1]


def cmd_simulate(args) -> int:
    design = _SETTING_ALIASES.get(args.setting)
    if design is None:
        raise CliError(f"unknown setting {args.setting!r}", EXIT_CONFIG)
    estimator, prop_variant, out_variant = _parse_algo(args.algo)
    setting = SimSetting(design, n=args.n, seed=args.seed)
    try:
        config = make_config(
            setting, estimator, prop_variant, out_variant,
            scope=NuisanceScope(args.scope),
            min_node=args.min_node, min_per_arm=args.min_per_arm,
            max_depth=args.max_depth, epsilon=args.epsilon, seed=args.seed,
        )
    except ValueError as err:
        raise CliError(f"bad configuration: {err}", EXIT_CONFIG)
    if args.reps < 1:
        raise CliError("--reps must be >= 1", EXIT_CONFIG)

    summary = run_experiment(setting, config, args.reps, args.seed,
                             lam=args.lam, threads=args.threads)

    header = (
        f"{'setting':>12} {'algo':>22} {'MSE':>8} {'Correct':>8} {'Noise':>6} "
        f"{'PPS':>6} {'CFS':>6} {'Time(s)':>8}"
    )
    line = (
        f"{args.setting:>12} {args.algo:>22} {summary.mse:>8.3f} "
        f"{summary.correct_tree_prop:>8.2f} {summary.mean_noise_splits:>6.2f} "
        f"{summary.pps:>6.2f} {summary.correct_first_split_prop:>6.2f} "
        f"{summary.mean_fit_seconds:>8.3f}"
    )
    print(header, file=sys.stderr)
    print(line, file=sys.stderr)

    payload = {
        "setting": design,
        "n": args.n,
        "algo": args.algo,
        "replications_requested": args.reps,
        "seed": args.seed,
        "results": summary.to_dict(include_timing=args.timing),
    }
    print(json.dumps(payload, sort_keys=True))
    return 0


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=os.environ.get("EFFTREE_LOGLEVEL", "WARNING"))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "fit":
            return cmd_fit(args)
        if args.command == "predict":
            return cmd_predict(args)
        return cmd_simulate(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code


if __name__ == "__main__":
    sys.exit(main())
