"""``vamlab`` command line: sweep, verify, summarize, garnet, train."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import harness
from ._accel import backend_name
from .errors import ConfigurationError, VamlabError
from .mdp import GarnetSpec, exact_value, generate_garnet, sample_transitions
from .models import LowRankModel
from .valuelearn import ALGORITHMS, TrainSchedule, value_error

EXIT_OK, EXIT_USAGE, EXIT_THEORY, EXIT_PARTIAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _sweep_flags(p):
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--rho", help="comma list, e.g. 0.5,0.75,1.0")
    p.add_argument("--ranks", help="comma list with ranges, e.g. 1-10,50")
    p.add_argument("--algorithms", help=f"comma list from {','.join(ALGORITHMS)}")
    p.add_argument("--seeds", type=int, help="number of seeds")
    p.add_argument("--samples", type=int, help="dataset size N")
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int)
    p.add_argument("--base-seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vamlab", description="Value-aware model learning on Garnet MRPs.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("sweep", help="run the Garnet benchmark sweep")
    _sweep_flags(p)

    p = sub.add_parser("verify", help="run the theory checks")
    p.add_argument("--out", default=None, help="directory for verify.json")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", action="store_true",
                   help="corrupt the MuZero normal equations (negative control)")

    p = sub.add_parser("summarize", help="aggregate an existing results.csv")
    p.add_argument("path", help="results.csv or its directory")
    p.add_argument("--out", default=None)

    p = sub.add_parser("garnet", help="dump a generated MRP as JSON")
    p.add_argument("--rho", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--m", type=int, default=10)
    p.add_argument("--discount", type=float, default=0.99)
    p.add_argument("--out", default=None, help="file; stdout if omitted")

    p = sub.add_parser("train", help="train a single cell and print its loss curve")
    p.add_argument("--algorithm", choices=sorted(ALGORITHMS), default="itervaml")
    p.add_argument("--rho", type=float, default=0.5)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--record-every", type=int, default=100)
    return parser


def _cmd_sweep(args) -> int:
    flags = {"rho": args.rho, "ranks": args.ranks, "algorithms": args.algorithms,
             "seeds": args.seeds, "samples": args.samples, "out": args.out,
             "workers": args.workers, "base_seed": args.base_seed}
    if args.config:
        config = harness.load_config(args.config, flags)
    else:
        config = harness.config_from_mapping(flags)

    def progress(done, total, row):
        logging.getLogger("vamlab").info("[%d/%d] rho=%g k=%d %s seed=%d mae=%.4g %s", done,
                                         total, row.rho, row.k, row.algorithm, row.seed, row.mae,
                                         row.status)

    outcome = harness.run_sweep(config, progress)
    print(f"{len(outcome.rows)} rows ({outcome.ran} run, {outcome.skipped} resumed) -> {config.out}")
    if outcome.failed:
        print(f"{len(outcome.failed)} runs failed", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def _cmd_verify(args) -> int:
    report = harness.verify_theory(args.out, inject_fault=args.inject_fault, seed=args.seed)
    print(report.render())
    return EXIT_OK if report.passed else EXIT_THEORY


def _cmd_summarize(args) -> int:
    summary = harness.summarize(args.path, args.out)
    print(summary.to_markdown())
    return EXIT_OK


def _cmd_garnet(args) -> int:
    mrp = generate_garnet(GarnetSpec(args.n, args.m, args.rho, discount=args.discount,
                                     seed=args.seed))
    text = json.dumps(mrp.to_dict())
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        print(text)
    return EXIT_OK


def _cmd_train(args) -> int:
    spec = GarnetSpec(rho=args.rho, seed=args.seed)
    mrp = generate_garnet(spec)
    data = sample_transitions(mrp, args.samples, args.seed)
    model = LowRankModel.random(mrp.n_states, args.k, seed=args.seed,
                                init_scale=harness.ExperimentConfig.psi_init_scale)
    schedule = TrainSchedule(record_every=args.record_every)
    result = ALGORITHMS[args.algorithm](data, mrp.reward, mrp.discount, model, schedule=schedule)
    for step, loss in result.losses:
        print(f"step {step:6d}  loss {loss:.6g}")
    err = value_error(result.values, exact_value(mrp))
    print(f"{args.algorithm} rho={args.rho:g} k={args.k} seed={args.seed} backend={backend_name()}")
    print(f"mae={err.mae:.6g} rmse={err.rmse:.6g} max={err.max:.6g} diverged={result.diverged}"
          + (f" ({result.message})" if result.message else ""))
    print("V_hat[:5] =", np.array2string(result.values[:5], precision=4))
    return EXIT_OK


COMMANDS = {"sweep": _cmd_sweep, "verify": _cmd_verify, "summarize": _cmd_summarize,
            "garnet": _cmd_garnet, "train": _cmd_train}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, ValueError, OSError) as exc:
        print(f"vamlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except VamlabError as exc:
        print(f"vamlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
