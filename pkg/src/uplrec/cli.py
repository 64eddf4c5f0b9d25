"""Command-line entry points.

Subcommands:
  prepare     turn explicit-rating files into semi-synthetic implicit splits
  train       one training run on a prepared dataset directory
  experiment  full sweep from a key=value config file (grid + repeated runs)
  verify      run the estimator oracle suite (exact enumeration + Monte Carlo)
  report      re-aggregate an experiment directory from its per-run TSV
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import experiment as exp
from . import oracle
from .datasets import load_dataset
from .evaluation import CohortSpec, compute_cohorts, evaluate
from .experiment import METHOD_TOKENS, ExperimentConfig, PreparedData
from .factor_model import save_checkpoint
from .propensity import PropensityTable


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="uplrec")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="generate semi-synthetic implicit datasets")
    p.add_argument("--dataset", required=True, help="dataset file or directory")
    p.add_argument("--format", default="coat", choices=["coat", "triplets"])
    p.add_argument("--train-file", default="")
    p.add_argument("--test-file", default="")
    p.add_argument("--epsilon-train", type=float, default=0.1)
    p.add_argument("--epsilon-test", type=float, default=0.0)
    p.add_argument("--validation-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    t = sub.add_parser("train", help="single training run on a prepared directory")
    t.add_argument("--data", required=True, help="directory written by `prepare`")
    t.add_argument("--method", required=True, choices=METHOD_TOKENS)
    t.add_argument("--d", type=int, default=100)
    t.add_argument("--lam", type=float, default=1e-5)
    t.add_argument("--clip", type=float, default=0.0)
    t.add_argument("--wmf-weight", type=float, default=10.0)
    t.add_argument("--learning-rate", type=float, default=0.001)
    t.add_argument("--batch-size", type=int, default=256)
    t.add_argument("--max-epochs", type=int, default=200)
    t.add_argument("--patience", type=int, default=5)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--candidates", default="catalog", choices=["catalog", "test_only"])
    t.add_argument("--out", required=True)

    e = sub.add_parser("experiment", help="full experiment sweep from a config file")
    e.add_argument("--config", required=True, help="flat key=value config file")
    e.add_argument("--grid-file", default=None, help="config file overriding grid keys")
    e.add_argument("--dataset", default=None)
    e.add_argument("--format", default=None)
    e.add_argument("--methods", default=None)
    e.add_argument("--runs", default=None)
    e.add_argument("--seed", default=None)
    e.add_argument("--epsilon-train", dest="epsilon_train", default=None)
    e.add_argument("--epsilon-test", dest="epsilon_test", default=None)
    e.add_argument("--threads", default=None)
    e.add_argument("--out", default=None)

    v = sub.add_parser("verify", help="estimator oracle suite")
    v.add_argument("--world", default=None, help="world spec file; bundled suite if omitted")
    v.add_argument("--samples", type=int, default=100000)
    v.add_argument("--seed", type=int, default=1234)
    v.add_argument("--exact-only", action="store_true")
    v.add_argument("--out", default=None, help="optional TSV for estimator reports")

    r = sub.add_parser("report", help="re-aggregate an experiment output directory")
    r.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    if args.command == "prepare":
        return _cmd_prepare(args)
    if args.command == "train":
        return _cmd_train(args)
    if args.command == "experiment":
        return _cmd_experiment(args)
    if args.command == "verify":
        return _cmd_verify(args)
    if args.command == "report":
        return _cmd_report(args)
    parser.error(f"unknown command {args.command!r}")
    return 2


def _cmd_prepare(args) -> int:
    data = exp.prepare_datasets(
        args.dataset, args.format, args.epsilon_train, args.epsilon_test,
        args.validation_fraction, args.seed, args.train_file, args.test_file)
    exp.save_prepared(data, args.out)
    print(f"prepared {args.out}: train {len(data.train)} cells "
          f"({data.train.num_clicks} clicks), validation {len(data.validation)}, "
          f"test {len(data.test)}")
    return 0


def _load_prepared(data_dir) -> PreparedData:
    root = Path(data_dir)
    return PreparedData(
        train=load_dataset(root / "train"),
        validation=load_dataset(root / "validation"),
        test=load_dataset(root / "test"),
    )


def _cmd_train(args) -> int:
    data = _load_prepared(args.data)
    propensities = PropensityTable.from_click_counts(data.train.item_click_counts)
    config = ExperimentConfig(
        methods=(args.method,), runs=1, seed=args.seed,
        batch_size=args.batch_size, learning_rate=args.learning_rate,
        max_epochs=args.max_epochs, patience=args.patience,
        candidates=args.candidates, wmf_weight=args.wmf_weight,
    )
    run = exp.train_method(args.method, data, propensities, config,
                           d=args.d, lam=args.lam, clip=args.clip, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(run.final_model, out / "model.ckpt", seed=args.seed)
    cohorts = compute_cohorts(data.train, CohortSpec())
    reports = evaluate(run.final_model, data.test, cohorts=cohorts,
                       candidates=args.candidates, method=args.method, run=0)
    with open(out / "metrics.tsv", "w") as fh:
        fh.write("method\trun\tcohort\tmetric\tk\tvalue\n")
        for rep in reports:
            for metric in ("dcg", "recall", "map"):
                fh.write(f"{rep.method}\t{rep.run}\t{rep.cohort}\t{metric}\t{rep.k}\t"
                         f"{getattr(rep, metric):.17g}\n")
    with open(out / "train.log", "w") as fh:
        for epoch, loss, val in run.epoch_log:
            val_str = "" if val is None else f"{val:.10g}"
            fh.write(f"epoch={epoch}\ttrain_loss={loss:.10g}\tval_dcg5={val_str}\n")
    for rep in reports:
        if rep.cohort == "all":
            print(f"{args.method} k={rep.k}: dcg={rep.dcg:.5f} "
                  f"recall={rep.recall:.5f} map={rep.map:.5f}")
    print(f"wrote {out}")
    return 0


def _cmd_experiment(args) -> int:
    overrides = {
        "dataset": args.dataset, "format": args.format, "methods": args.methods,
        "runs": args.runs, "seed": args.seed, "threads": args.threads,
        "out": args.out, "epsilon_train": args.epsilon_train,
        "epsilon_test": args.epsilon_test,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    config = exp.parse_config_file(args.config, overrides)
    if args.grid_file:
        grid_cfg = exp.parse_config_file(args.grid_file)
        config = exp.parse_config_file(args.config, {
            **overrides,
            "d_grid": ",".join(str(d) for d in grid_cfg.d_grid),
            "lambda_grid": ",".join(repr(l) for l in grid_cfg.lambda_grid),
            "clip_grid": ",".join(repr(c) for c in grid_cfg.clip_grid),
        })
    out = exp.run_experiment(config)
    failures = out / "failures.tsv"
    print(f"experiment done: {out} (config hash {config.hash()})")
    if failures.exists():
        print(f"some methods failed, see {failures}", file=sys.stderr)
        return 1
    return 0


def _cmd_verify(args) -> int:
    if args.samples <= 0:
        print("error: --samples must be positive", file=sys.stderr)
        return 2
    if args.world:
        world = oracle.parse_world_spec(args.world)
        model = oracle.model_for_world(world, seed=args.seed)
        reports = []
        ideal = oracle.ideal_risk(world, model)
        print(f"world: {world.num_users} users x {world.num_items} items "
              f"({world.num_cells} cells); ideal risk = {ideal:.10g}")
        for estimator in oracle.ESTIMATORS:
            if args.exact_only:
                exact = oracle.exact_expectation(world, model, estimator)
                print(f"  {estimator}: exact expectation = {exact:.10g} "
                      f"(bias {exact - ideal:+.3e})")
            else:
                rep = oracle.mc_bias_variance(world, model, estimator,
                                              samples=args.samples, seed=args.seed)
                reports.append(rep)
                exact_str = ("" if rep.exact_expectation is None
                             else f" exact={rep.exact_expectation:.10g}")
                print(f"  {estimator}: mc mean={rep.mc_mean:.10g} "
                      f"var={rep.mc_variance:.6g}{exact_str}")
        if args.out and reports:
            oracle.reports_to_tsv(reports, args.out)
            print(f"wrote {args.out}")
        return 0

    results = oracle.verification_suite(samples=args.samples, seed=args.seed)
    failed = 0
    for name, passed, detail in results:
        status = "PASS" if passed else "FAIL"
        failed += 0 if passed else 1
        print(f"{status} {name}: {detail}")
    return 1 if failed else 0


def _cmd_report(args) -> int:
    out = Path(args.out)
    rows = exp.read_per_run(out / "per_run_metrics.tsv")
    hash_file = out / "config_hash.txt"
    cfg_hash = hash_file.read_text().strip() if hash_file.exists() else "unknown"
    exp.write_aggregates_from_rows(out, rows, cfg_hash)
    print(f"re-aggregated {len(rows)} rows into {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
