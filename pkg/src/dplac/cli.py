"""Command-line front end for batch experiments.

Subcommands: run (one experiment from a config file), accountant (budget
queries), partition (write per-client shards), sweep (run one experiment
per parameter value), plotdata (extract a column of a round log). Exit
status 0 on success, 2 for configuration or argument problems, 3 for
runtime failures.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import accountant, config, flcore, harness

_RUN_FILES = ("rounds.csv", "summary.txt", "model.bin")
_PLOT_SERIES = {"C": 2, "v": 3, "sigma": 4, "acc": 5}


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _resolve_workers(args) -> int:
    if args.workers is not None:
        workers = args.workers
    else:
        raw = os.environ.get("DPLAC_WORKERS", "1")
        try:
            workers = int(raw)
        except ValueError:
            raise config.ConfigError(f"DPLAC_WORKERS={raw!r} is not an integer") from None
    if workers < 1:
        raise config.ConfigError(f"workers must be >= 1, got {workers}")
    return workers


def _write_run_outputs(result: harness.ExperimentResult, cfg, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    harness.write_round_log(result.records, os.path.join(out_dir, "rounds.csv"))
    harness.write_summary(result, cfg, os.path.join(out_dir, "summary.txt"))
    harness.save_model(result.model.params, os.path.join(out_dir, "model.bin"))


def cmd_run(args) -> int:
    try:
        cfg = config.load_config(args.config, args.overrides, seed_override=args.seed)
        workers = _resolve_workers(args)
    except config.ConfigError as exc:
        return _fail(2, str(exc))
    out_dir = args.out or "out"
    try:
        result = harness.run_experiment(cfg, workers)
        _write_run_outputs(result, cfg, out_dir)
    except Exception as exc:
        return _fail(3, str(exc))
    last = result.records[-1]
    print(f"wrote {out_dir}: final_accuracy={last.eval_accuracy:.6g} final_C={last.C:.6g}")
    return 0


def cmd_accountant(args) -> int:
    try:
        if args.mode == "solve-z":
            if args.epsilon is None:
                raise ValueError("solve-z requires --epsilon")
            spec = accountant.PrivacySpec(
                epsilon=args.epsilon, delta=args.delta, q=args.q, rounds=args.rounds
            )
        else:
            if args.z is None or args.z <= 0:
                raise ValueError("solve-eps requires --z > 0")
            if not 0 < args.q <= 1:
                raise ValueError(f"q must be in (0, 1], got {args.q}")
            if not 0 < args.delta < 1:
                raise ValueError(f"delta must be in (0, 1), got {args.delta}")
            if args.rounds < 1:
                raise ValueError(f"rounds must be >= 1, got {args.rounds}")
    except ValueError as exc:
        return _fail(2, str(exc))
    try:
        if args.mode == "solve-z":
            print(f"z={accountant.get_noise_multiplier(spec):.6g}")
        else:
            curve = accountant.rdp_subsampled_gaussian(args.z, args.q)
            eps = accountant.rdp_to_dp(accountant.compose(curve, args.rounds), args.delta)
            print(f"epsilon={eps:.6g}")
    except Exception as exc:
        return _fail(3, str(exc))
    return 0


def cmd_partition(args) -> int:
    try:
        if args.clients < 1:
            raise ValueError(f"clients must be >= 1, got {args.clients}")
        spec = flcore.PartitionSpec(
            num_clients=args.clients, alpha=args.alpha, seed=args.seed or 0
        )
        if args.data is not None:
            data = flcore.load_dataset(args.data)
        else:
            data = flcore.synth_dataset(
                args.samples, args.features, args.classes, args.separation, args.data_seed
            )
    except (ValueError, OSError) as exc:
        return _fail(2, str(exc))
    out_dir = args.out or "shards"
    try:
        shards = flcore.dirichlet_partition(data, spec)
        os.makedirs(out_dir, exist_ok=True)
        width = max(4, len(str(args.clients - 1)))
        manifest = ["shard,size," + ",".join(f"class_{c}" for c in range(data.num_classes))]
        for idx, shard in enumerate(shards):
            name = f"shard_{idx:0{width}d}.csv"
            flcore.save_dataset(shard, os.path.join(out_dir, name))
            counts = np.bincount(shard.labels, minlength=data.num_classes)
            manifest.append(
                f"{idx},{shard.num_samples}," + ",".join(str(int(c)) for c in counts)
            )
        with open(os.path.join(out_dir, "manifest.csv"), "w", encoding="ascii") as fh:
            fh.write("\n".join(manifest) + "\n")
    except Exception as exc:
        return _fail(3, str(exc))
    print(f"wrote {len(shards)} shards + manifest to {out_dir}")
    return 0


def cmd_sweep(args) -> int:
    try:
        values = [v.strip() for v in args.values.split(",") if v.strip()]
        if not values:
            raise config.ConfigError("--values must list at least one value")
        base = config.load_config(args.config, args.overrides, seed_override=args.seed)
        workers = _resolve_workers(args)
        configs = []
        for i, value in enumerate(values):
            configs.append(
                config.load_config(
                    args.config,
                    list(args.overrides) + [f"{args.param}={value}"],
                    seed_override=base.master_seed + i,
                )
            )
    except config.ConfigError as exc:
        return _fail(2, str(exc))
    out_dir = args.out or "sweep"
    try:
        os.makedirs(out_dir, exist_ok=True)
        table = ["value,final_acc,final_C"]
        for value, cfg in zip(values, configs):
            result = harness.run_experiment(cfg, workers)
            _write_run_outputs(result, cfg, os.path.join(out_dir, f"val_{value}"))
            last = result.records[-1]
            table.append(f"{value},{last.eval_accuracy:.9g},{last.C:.9g}")
        with open(os.path.join(out_dir, "sweep.csv"), "w", encoding="ascii") as fh:
            fh.write("\n".join(table) + "\n")
    except Exception as exc:
        return _fail(3, str(exc))
    print(f"wrote {len(values)} runs + sweep.csv to {out_dir}")
    return 0


def cmd_plotdata(args) -> int:
    if args.series not in _PLOT_SERIES:
        return _fail(
            2,
            f"unknown series {args.series!r}; valid: {', '.join(sorted(_PLOT_SERIES))}",
        )
    col = _PLOT_SERIES[args.series]
    path = os.path.join(args.run_dir, "rounds.csv")
    try:
        with open(path, "r", encoding="ascii") as fh:
            header = fh.readline().strip()
            if header != harness.CSV_HEADER:
                raise ValueError(f"{path}: unexpected header {header!r}")
            print(f"round,{args.series}")
            for line in fh:
                cells = line.strip().split(",")
                print(f"{cells[0]},{cells[col]}")
    except Exception as exc:
        return _fail(3, str(exc))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override run.master_seed")
    common.add_argument(
        "--workers",
        type=int,
        default=None,
        help="client worker threads (default: $DPLAC_WORKERS or 1)",
    )
    common.add_argument("--out", default=None, help="output directory")

    parser = argparse.ArgumentParser(
        prog="dplac", description="differentially private federated learning simulator"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="run one experiment")
    p.add_argument("config", help="key=value config file")
    p.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override a config key (repeatable)",
    )
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("accountant", parents=[common], help="privacy budget queries")
    p.add_argument("mode", choices=["solve-z", "solve-eps"])
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--z", type=float, default=None)
    p.add_argument("--delta", type=float, default=1e-5)
    p.add_argument("--q", type=float, required=True)
    p.add_argument("--rounds", type=int, required=True)
    p.set_defaults(func=cmd_accountant)

    p = sub.add_parser("partition", parents=[common], help="write per-client shards")
    p.add_argument("--data", default=None, help="dataset file; omit to synthesize")
    p.add_argument("--clients", type=int, required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--features", type=int, default=10)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--separation", type=float, default=3.0)
    p.add_argument("--data-seed", type=int, default=0, help="synthetic data seed")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("sweep", parents=[common], help="run once per parameter value")
    p.add_argument("config")
    p.add_argument("--param", required=True, help="config key to vary")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE"
    )
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plotdata", parents=[common], help="print one log column as CSV")
    p.add_argument("run_dir")
    p.add_argument("--series", required=True, help="one of: C, v, sigma, acc")
    p.set_defaults(func=cmd_plotdata)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
