"""
Command line interface.

Results go to stdout as JSON (CSV for `sweep`), log events go to stderr. The exit
status tells what went wrong:

    0 success
    1 precondition or range violation, or a failing casebook/fuzz check
    2 unparsable input
    3 infeasible instance
    4 policy under which nobody buys
    5 file could not be read or written
    6 unknown casebook case
"""
import argparse
import csv
import json
import logging
import math
import os
import sys
from collections import Counter
from typing import *

import attr
import numpy as np
import structlog

from externreg import approx, casebook, fuzz, simple_opt
from externreg.enumerations import ExternalityMode
from externreg.exceptions import (
    DegeneratePolicyError,
    InfeasibleInstanceError,
    InvalidDistributionError,
    InvalidRangeError,
    ParseError,
    PolicyDomainError,
    PreconditionError,
    UnknownCaseError,
)
from externreg.model import TIE_TOLERANCE, Policy, evaluate, response_arrays
from externreg.population import DiscreteDistribution, Instance, Population
from externreg.pricing import best_response_prices

LOG = structlog.get_logger()

SEED_ENV = "EXTERNREG_SEED"
SWEEP_HEADER = ["y", "c", "best_price", "profit", "externality"]

EXIT_OK = 0
EXIT_PRECONDITION = 1
EXIT_PARSE = 2
EXIT_INFEASIBLE = 3
EXIT_DEGENERATE = 4
EXIT_IO = 5
EXIT_UNKNOWN_CASE = 6


def configure_logging(verbose: bool = False):
    structlog.configure(
        processors=[
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.dev.ConsoleRenderer(colors=False),
        ],
        wrapper_class=structlog.make_filtering_bound_logger(
            logging.DEBUG if verbose else logging.WARNING
        ),
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=False,
    )


def _emit(data: Any):
    print(json.dumps(data, indent=2))


def _parse_float_list(text: str) -> Tuple[float, ...]:
    try:
        return tuple(float(item) for item in text.split(",") if item.strip())
    except ValueError as e:
        raise ParseError(f"Expected a comma separated list of numbers. Got {text!r}") from e


def _nonempty(instance, attribute, value: Tuple[float, ...]):
    if not value:
        raise InvalidRangeError(f"{attribute.name} must not be empty")
    if any(not (math.isfinite(item) and item >= 0) for item in value):
        raise InvalidRangeError(f"{attribute.name} must be finite and nonnegative. Got {value}")


@attr.s(auto_attribs=True, frozen=True)
class SweepSpec:
    """A grid of (y, c) cells over a population, each priced by the seller."""

    values: DiscreteDistribution
    efficiencies: DiscreteDistribution
    fines: Tuple[float, ...] = attr.ib(converter=tuple, validator=[_nonempty])
    costs: Tuple[float, ...] = attr.ib(converter=tuple, validator=[_nonempty])

    @classmethod
    def from_strings(cls, values: str, efficiencies: str, fines: str, c_max: float, c_points: int) -> "SweepSpec":
        if not c_max > 0:
            raise InvalidRangeError(f"--c-max must be positive. Got {c_max}")
        if c_points < 1:
            raise InvalidRangeError(f"--c-points must be at least 1. Got {c_points}")
        return cls(
            values=DiscreteDistribution.from_string(values),
            efficiencies=DiscreteDistribution.from_string(efficiencies),
            fines=_parse_float_list(fines),
            costs=tuple(np.linspace(0.0, c_max, c_points)),
        )

    @property
    def population(self) -> Population:
        return Population(self.values, self.efficiencies)


def sweep_rows(sweep: SweepSpec, mode: ExternalityMode = ExternalityMode.TOTAL) -> Iterator[List[float]]:
    """
    One row per (y, c) in y-major order with the seller's profit maximizing price,
    its profit and the resulting externality.
    """
    values, effs, probs = sweep.population.joint_arrays()
    costs = np.asarray(sweep.costs)
    for fine in sweep.fines:
        _, risk, loss = response_arrays(effs[None, :], fine, costs[:, None])
        post = values[None, :] - loss
        price, profit = best_response_prices(post, probs, costs)
        buys = post >= price[:, None] - TIE_TOLERANCE
        sale = buys @ probs
        compromised = (buys * risk) @ probs
        if mode is ExternalityMode.TOTAL:
            externality = compromised
        else:
            externality = np.where(sale > 0, compromised / np.where(sale > 0, sale, 1.0), 0.0)
        for row in range(costs.size):
            yield [float(fine), float(costs[row]), float(price[row]), float(profit[row]), float(externality[row])]


def _read_instance(args: argparse.Namespace) -> Instance:
    if args.instance:
        with open(args.instance) as f:
            return Instance.from_json(f.read())
    if args.values is None or args.effs is None or args.profit_floor is None:
        raise ParseError("Give --instance or all of --values, --effs and --profit-floor")
    return Instance(
        Population(
            DiscreteDistribution.from_string(args.values),
            DiscreteDistribution.from_string(args.effs),
        ),
        args.profit_floor,
    )


def _read_population(args: argparse.Namespace) -> Population:
    if args.instance:
        return _read_instance(args).population
    if args.values is None or args.effs is None:
        raise ParseError("Give --instance or both --values and --effs")
    return Population(
        DiscreteDistribution.from_string(args.values),
        DiscreteDistribution.from_string(args.effs),
    )


def _solver_config(args: argparse.Namespace) -> simple_opt.SolverConfig:
    return simple_opt.SolverConfig(
        y_min=args.y_min,
        y_max=args.y_max,
        y_points=args.y_points,
        c_points=args.c_points,
        c_max=args.c_max,
        refine_iters=args.refine_iters,
        tolerance=args.tolerance,
    )


def _seed(args: argparse.Namespace) -> int:
    if args.seed is not None:
        return args.seed
    raw = os.environ.get(SEED_ENV, "0")
    try:
        return int(raw)
    except ValueError as e:
        raise ParseError(f"{SEED_ENV} must be an integer. Got {raw!r}") from e


def cmd_eval(args: argparse.Namespace) -> int:
    pop = _read_population(args)
    policy = Policy.from_string(args.policy)
    outcome = evaluate(pop, policy, mode=ExternalityMode(args.mode))
    _emit({"policy": policy.to_dict(), "outcome": outcome.to_dict(include_atoms=not args.no_atoms)})
    return EXIT_OK


SOLVERS = {
    "cost": simple_opt.best_cost_policy,
    "fine": simple_opt.best_fine_policy,
    "general": simple_opt.best_general_policy,
}


def cmd_optimize(args: argparse.Namespace) -> int:
    instance = _read_instance(args)
    config = _solver_config(args)
    LOG.info("Optimizing", family=args.family, atoms=instance.population.size)
    result = SOLVERS[args.family](instance, config)
    data = {"family": args.family}
    data.update(result.to_dict())
    _emit(data)
    return EXIT_OK


def cmd_approx(args: argparse.Namespace) -> int:
    pop = _read_population(args)
    policy = Policy.from_string(args.policy)
    output, trace = approx.approx_routine(pop, policy)
    profit_ratio, externality_ratio = approx.guarantee_ratios(pop, policy, output)
    _emit(
        {
            "input": policy.to_dict(),
            "output": output.to_dict(),
            "profit_ratio": profit_ratio,
            "externality_ratio": externality_ratio,
            "trace": trace.to_dict(),
        }
    )
    return EXIT_OK


def _write_sweep(sweep: SweepSpec, mode: ExternalityMode, out: TextIO):
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(SWEEP_HEADER)
    for row in sweep_rows(sweep, mode):
        writer.writerow([repr(item) for item in row])


def cmd_sweep(args: argparse.Namespace) -> int:
    sweep = SweepSpec.from_strings(args.values, args.effs, args.fines, args.c_max, args.c_points)
    mode = ExternalityMode(args.mode)
    if args.out == "-":
        _write_sweep(sweep, mode, sys.stdout)
    else:
        with open(args.out, "w", newline="") as f:
            _write_sweep(sweep, mode, f)
        LOG.info("Sweep written", path=args.out, rows=len(sweep.fines) * len(sweep.costs))
    return EXIT_OK


def cmd_cutoff(args: argparse.Namespace) -> int:
    if args.instance:
        instance = _read_instance(args)
        values, floor = instance.population.values, instance.profit_floor
    else:
        if args.values is None or args.profit_floor is None:
            raise ParseError("Give --instance or both --values and --profit-floor")
        values, floor = DiscreteDistribution.from_string(args.values), args.profit_floor
    _emit(simple_opt.cutoff_t(values, floor).to_dict())
    return EXIT_OK


def cmd_casebook(args: argparse.Namespace) -> int:
    names = list(casebook.CASES) if args.case == "all" else [args.case]
    reports = [casebook.run_case(name, args.x) for name in names]
    for report in reports:
        if args.json:
            print(json.dumps(report.to_dict()))
        else:
            print(f"{report.case_name}: {'PASS' if report.all_pass else 'FAIL'}")
            for check in report.checks:
                print(f"  {check.describe()}")
    return EXIT_OK if all(report.all_pass for report in reports) else EXIT_PRECONDITION


def cmd_fuzz(args: argparse.Namespace) -> int:
    seed = _seed(args)
    results = fuzz.run_guarantee_trials(args.trials, seed)
    failures = [result for result in results if not result.passed]
    _emit(
        {
            "seed": seed,
            "trials": len(results),
            "failures": len(failures),
            "branches": dict(Counter(result.branch.value for result in results)),
            "min_profit_ratio": min(result.profit_ratio for result in results),
            "max_externality_ratio": max(result.externality_ratio for result in results),
            "failed_trials": [result.to_dict() for result in failures],
        }
    )
    return EXIT_OK if not failures else EXIT_PRECONDITION


def _add_instance_arguments(parser: argparse.ArgumentParser):
    group = parser.add_argument_group("instance")
    group.add_argument("--instance", help="Instance JSON file with values, efficiencies and profit_floor")
    group.add_argument("--values", help="Value distribution, e.g. uniform:0,20,200 or atoms:1@0.5,2@0.5")
    group.add_argument("--effs", help="Efficiency distribution, e.g. point:3")
    group.add_argument("--profit-floor", type=float, dest="profit_floor", help="Profit floor R")


def _add_solver_arguments(parser: argparse.ArgumentParser):
    defaults = simple_opt.SolverConfig()
    group = parser.add_argument_group("solver")
    group.add_argument("--y-min", type=float, default=defaults.y_min, dest="y_min")
    group.add_argument("--y-max", type=float, default=defaults.y_max, dest="y_max")
    group.add_argument("--y-points", type=int, default=defaults.y_points, dest="y_points")
    group.add_argument("--c-points", type=int, default=defaults.c_points, dest="c_points")
    group.add_argument("--c-max", type=float, default=None, dest="c_max", help="Largest security cost on the grid (default: largest value)")
    group.add_argument("--refine-iters", type=int, default=defaults.refine_iters, dest="refine_iters")
    group.add_argument("--tolerance", type=float, default=defaults.tolerance)


def _mode_argument(parser: argparse.ArgumentParser, default: ExternalityMode):
    parser.add_argument(
        "--mode",
        choices=[mode.value for mode in ExternalityMode],
        default=default.value,
        help=f"Externality measure (default: {default.value})",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="externreg",
        description="Evaluate and optimize regulation of a product with negative externalities.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Log debug events to stderr")
    commands = parser.add_subparsers(dest="command", metavar="command")
    commands.required = True

    p = commands.add_parser("eval", help="Evaluate a policy on a population")
    _add_instance_arguments(p)
    p.add_argument("--policy", required=True, help="Policy as y=...,c=...,p=...")
    _mode_argument(p, ExternalityMode.CONDITIONAL)
    p.add_argument("--no-atoms", action="store_true", dest="no_atoms", help="Leave out per-atom outcomes")
    p.set_defaults(handler=cmd_eval)

    p = commands.add_parser("optimize", help="Find the least externality policy of a family")
    _add_instance_arguments(p)
    p.add_argument("--family", choices=list(SOLVERS), required=True)
    _add_solver_arguments(p)
    p.set_defaults(handler=cmd_optimize)

    p = commands.add_parser("approx", help="Turn a policy into a simple one with bounded loss")
    _add_instance_arguments(p)
    p.add_argument("--policy", required=True, help="Policy as y=...,c=...,p=...")
    p.set_defaults(handler=cmd_approx)

    p = commands.add_parser("sweep", help="Seller best responses over a (y, c) grid as CSV")
    p.add_argument("--values", default="uniform:0,20,200")
    p.add_argument("--effs", default="uniform:0,1,20")
    p.add_argument("--fines", default="0,0.5,1,2,5,10", help="Comma separated fines")
    p.add_argument("--c-max", type=float, default=5.0, dest="c_max")
    p.add_argument("--c-points", type=int, default=51, dest="c_points")
    _mode_argument(p, ExternalityMode.TOTAL)
    p.add_argument("--out", default="-", help="CSV path, - for stdout")
    p.set_defaults(handler=cmd_sweep)

    p = commands.add_parser("cutoff", help="Efficiency cutoff between fines and mandated security")
    _add_instance_arguments(p)
    p.set_defaults(handler=cmd_cutoff)

    p = commands.add_parser("casebook", help="Check the worked examples")
    p.add_argument("case", nargs="?", default="all", help=f"One of {', '.join(casebook.CASES)} or all")
    p.add_argument("--x", type=float, default=None, help="Example parameter x")
    p.add_argument("--json", action="store_true", help="One JSON report per line")
    p.set_defaults(handler=cmd_casebook)

    p = commands.add_parser("fuzz", help="Check the approximation guarantee on random instances")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=None, help=f"Base seed (default: ${SEED_ENV} or 0)")
    p.set_defaults(handler=cmd_fuzz)

    return parser


def _fail(code: int, error: Exception) -> int:
    LOG.error("Command failed", error=str(error), error_type=type(error).__name__, exit_code=code)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    LOG.info("Running command", command=args.command)
    try:
        return args.handler(args)
    except UnknownCaseError as e:
        return _fail(EXIT_UNKNOWN_CASE, e)
    except (ParseError, InvalidDistributionError) as e:
        return _fail(EXIT_PARSE, e)
    except InfeasibleInstanceError as e:
        return _fail(EXIT_INFEASIBLE, e)
    except DegeneratePolicyError as e:
        return _fail(EXIT_DEGENERATE, e)
    except (PreconditionError, InvalidRangeError, PolicyDomainError) as e:
        return _fail(EXIT_PRECONDITION, e)
    except OSError as e:
        return _fail(EXIT_IO, e)
