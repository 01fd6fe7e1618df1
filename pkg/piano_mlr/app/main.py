import argparse
import os
import sys
from dataclasses import dataclass, replace
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from piano_mlr.data.datasets import load_csv, load_libsvm, synth_generate, write_trace
from piano_mlr.data.models import Dataset, FitConfig, Regularization, SyntheticSpec, TraceRecord, WeightMatrix
from piano_mlr.helper.json_formatting import save_weights
from piano_mlr.tools.baselines import fit_baseline
from piano_mlr.tools.objective import HESSIAN_MAX_DIM, penalized_objective
from piano_mlr.tools.piano_solver import default_initial_weights, fit_piano
from piano_mlr.tools.trace import FitResult, has_converged, relative_change
from piano_mlr.utils.errors import ConfigError, PianoError, SizeGuardError, SolverError
from piano_mlr.utils.logger import get_logger

# Load environment variables from .env file
load_dotenv()

logger = get_logger(__name__)

SOLVERS = ("piano", "irls", "bohning", "coord-l1")
EXIT_OK, EXIT_ERROR, EXIT_MAX_ITER, EXIT_MISMATCH = 0, 1, 2, 3

# --reg auto: l1 with this lambda when n < d, plain MLR otherwise
AUTO_L1_LAMBDA = 0.01

BENCH_COLUMNS = ["solver", "n", "d", "m", "time_ms", "reached", "iterations", "reg", "trials"]

# Per-subcommand defaults for --tol and --max-iter: compare needs tight fixed points
DEFAULT_TOL = {"train": 1e-3, "bench": 1e-3, "compare": 1e-9}
DEFAULT_MAX_ITER = {"train": 1000, "bench": 1000, "compare": 20000}


# --------------------------
# Command model
# --------------------------
@dataclass(frozen=True)
class DataSource:
    path: Optional[str] = None
    fmt: str = "csv"
    synth: Optional[SyntheticSpec] = None
    label_column: int = -1
    has_header: bool = False
    append_bias: bool = False


@dataclass(frozen=True)
class CliCommand:
    subcommand: str
    source: DataSource
    solvers: Tuple[str, ...]
    config: FitConfig
    out: Optional[str] = None
    trace: Optional[str] = None
    target_frac: float = 0.6
    sweep_d: Tuple[int, ...] = ()
    gate: float = 1e-3
    trials: int = 1
    auto_lambda: Optional[float] = None


def parse_synth(text: str, seed: int, append_bias: bool = False) -> SyntheticSpec:
    """Parse 'n=500,d=50,m=30[,labels=model|uniform]'."""
    fields: Dict[str, str] = {}
    for part in text.split(","):
        key, sep, value = part.partition("=")
        if not sep:
            raise ConfigError(f"--synth entry '{part}' is not key=value")
        fields[key.strip()] = value.strip()
    missing = {"n", "d", "m"} - fields.keys()
    if missing:
        raise ConfigError(f"--synth is missing {sorted(missing)}")
    unknown = fields.keys() - {"n", "d", "m", "labels"}
    if unknown:
        raise ConfigError(f"--synth has unknown keys {sorted(unknown)}")
    try:
        n, d, m = int(fields["n"]), int(fields["d"]), int(fields["m"])
    except ValueError as e:
        raise ConfigError(f"--synth sizes must be integers: {e}") from e
    return SyntheticSpec(
        n=n, d=d, m=m, label_mode=fields.get("labels", "model"), seed=seed, append_bias=append_bias  # type: ignore
    )


def parse_sweep(text: str) -> Tuple[int, ...]:
    """Parse 'd1,d2,...' or an inclusive 'start:stop:step' range."""
    separator = ":" if ":" in text else ","
    try:
        numbers = [int(x) for x in text.split(separator)]
    except ValueError as e:
        raise ConfigError(f"--sweep-d must be d1,d2,... or start:stop:step: {e}") from e
    if separator == ":":
        if len(numbers) != 3 or numbers[2] < 1:
            raise ConfigError(f"--sweep-d range '{text}' must be start:stop:step with a positive step")
        values = tuple(range(numbers[0], numbers[1] + 1, numbers[2]))
    else:
        values = tuple(numbers)
    if not values or min(values) < 1:
        raise ConfigError(f"--sweep-d '{text}' gives no valid dimensions")
    return values


def resolve_threads(flag: Optional[int]) -> int:
    """--threads, else PIANO_THREADS, else 1."""
    if flag is not None:
        return flag
    env = os.environ.get("PIANO_THREADS")
    if env:
        try:
            return int(env)
        except ValueError as e:
            raise ConfigError(f"PIANO_THREADS must be an integer, got '{env}'") from e
    return 1


def check_compatible(solver: str, reg: Regularization) -> None:
    if solver not in SOLVERS:
        raise ConfigError(f"unknown solver '{solver}', expected one of {', '.join(SOLVERS)}")
    if solver in ("irls", "bohning") and reg.kind != "none":
        raise ConfigError(f"solver '{solver}' does not support --reg {reg.kind}")
    if solver == "coord-l1" and reg.kind != "l1":
        raise ConfigError("solver 'coord-l1' requires --reg l1")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    source = common.add_mutually_exclusive_group(required=True)
    source.add_argument("--data", help="dataset file")
    source.add_argument("--synth", help="synthetic spec n=..,d=..,m=..[,labels=model|uniform]")
    common.add_argument("--format", choices=["csv", "libsvm"], default="csv")
    common.add_argument("--label-column", type=int, default=-1)
    common.add_argument("--header", action="store_true", help="CSV has a header row")
    common.add_argument("--bias", action="store_true", help="append an all-ones feature column")
    common.add_argument(
        "--reg", choices=["none", "l1", "l0", "auto"], default="none", help="auto (bench only): l1 when n < d, else none"
    )
    common.add_argument("--lambda", dest="lam", type=float, default=None)
    common.add_argument("--beta", type=int, default=None)
    common.add_argument("--l0-rank", choices=["value", "gain"], default="value")
    common.add_argument("--tol", type=float, default=None)
    common.add_argument("--max-iter", type=int, default=None)
    common.add_argument("--threads", type=int, default=None)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output path (weights JSON for train, CSV table for bench)")

    parser = argparse.ArgumentParser(prog="piano", description="PIANO multinomial logistic regression")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    train = sub.add_parser("train", parents=[common], help="fit one model")
    train.add_argument("--solver", choices=SOLVERS, default="piano")
    train.add_argument("--trace", help="trace output (.json for JSON, CSV otherwise)")

    bench = sub.add_parser("bench", parents=[common], help="time solvers to a fraction of the initial objective")
    bench.add_argument("--solvers", default="piano,bohning")
    bench.add_argument("--target-frac", type=float, default=0.6)
    bench.add_argument("--sweep-d", default="", help="feature dimensions d1,d2,... or start:stop:step (synthetic data)")
    bench.add_argument("--trials", type=int, default=1, help="timed runs per solver and size; time_ms is their mean")

    compare = sub.add_parser("compare", parents=[common], help="cross-check solver fixed points")
    compare.add_argument("--solvers", default=None)
    compare.add_argument("--gate", type=float, default=1e-3, help="max pairwise relative objective delta")
    return parser


def _regularization(args: argparse.Namespace) -> Regularization:
    if args.reg == "auto":
        if args.subcommand != "bench":
            raise ConfigError("--reg auto is only available for bench")
        return Regularization.none()
    if args.reg == "l1":
        if args.lam is None:
            raise ConfigError("--reg l1 requires --lambda")
        return Regularization.l1(args.lam)
    if args.reg == "l0":
        if args.beta is None:
            raise ConfigError("--reg l0 requires --beta")
        return Regularization.l0(args.beta)
    return Regularization.none()


def command_from_args(args: argparse.Namespace) -> CliCommand:
    """Validate flags into a CliCommand; nothing is computed or written here."""
    reg = _regularization(args)
    sub = args.subcommand
    config = FitConfig(
        regularization=reg,
        rel_tol=args.tol if args.tol is not None else DEFAULT_TOL[sub],
        max_outer_iters=args.max_iter if args.max_iter is not None else DEFAULT_MAX_ITER[sub],
        thread_count=resolve_threads(args.threads),
        seed=args.seed,
        l0_rank=args.l0_rank,
    )
    if args.synth:
        source = DataSource(synth=parse_synth(args.synth, args.seed, args.bias))
    else:
        source = DataSource(
            path=args.data,
            fmt=args.format,
            label_column=args.label_column,
            has_header=args.header,
            append_bias=args.bias,
        )

    if sub == "train":
        solvers: Tuple[str, ...] = (args.solver,)
    elif sub == "compare":
        if reg.kind == "l0":
            raise ConfigError("compare supports --reg none or l1")
        default = "irls,bohning" if reg.kind == "none" else "coord-l1"
        requested = [s.strip() for s in (args.solvers or default).split(",") if s.strip()]
        solvers = tuple(["piano"] + [s for s in requested if s != "piano"])
    else:
        solvers = tuple(s.strip() for s in args.solvers.split(",") if s.strip())
    if not solvers:
        raise ConfigError("no solvers requested")
    for solver in solvers:
        if args.reg == "auto":
            if solver not in SOLVERS:
                raise ConfigError(f"unknown solver '{solver}', expected one of {', '.join(SOLVERS)}")
        else:
            check_compatible(solver, reg)

    auto_lambda: Optional[float] = None
    if args.reg == "auto":
        auto_lambda = Regularization.l1(args.lam if args.lam is not None else AUTO_L1_LAMBDA).lam

    sweep_d: Tuple[int, ...] = ()
    if sub == "bench":
        if not args.target_frac > 0:
            raise ConfigError(f"--target-frac must be positive, got {args.target_frac}")
        if args.sweep_d:
            if source.synth is None:
                raise ConfigError("--sweep-d needs --synth data")
            sweep_d = parse_sweep(args.sweep_d)
        if args.trials < 1:
            raise ConfigError(f"--trials must be positive, got {args.trials}")

    return CliCommand(
        subcommand=sub,
        source=source,
        solvers=solvers,
        config=config,
        out=args.out,
        trace=getattr(args, "trace", None),
        target_frac=getattr(args, "target_frac", 0.6),
        sweep_d=sweep_d,
        gate=getattr(args, "gate", 1e-3),
        trials=getattr(args, "trials", 1),
        auto_lambda=auto_lambda,
    )


# --------------------------
# Helper functions
# --------------------------
def load_data(source: DataSource) -> Dataset:
    if source.synth is not None:
        data, _ = synth_generate(source.synth)
        return data
    if source.fmt == "libsvm":
        return load_libsvm(source.path, append_bias=source.append_bias)  # type: ignore[arg-type]
    return load_csv(
        source.path,  # type: ignore[arg-type]
        label_column=source.label_column,
        has_header=source.has_header,
        append_bias=source.append_bias,
    )


def run_fit(
    solver: str, data: Dataset, W_0: WeightMatrix, config: FitConfig, target_objective: Optional[float] = None
) -> FitResult:
    if solver == "piano":
        return fit_piano(data, W_0, config, target_objective)
    return fit_baseline(solver, data, W_0, config, target_objective)


def _check_sizes(subcommand: str, solvers: Sequence[str], config: FitConfig, data: Dataset) -> None:
    dm = data.m * data.d
    config.validate_for(dm)
    dense = [s for s in solvers if s != "piano"]
    if (dense or subcommand == "compare") and dm > HESSIAN_MAX_DIM:
        raise SizeGuardError(f"d*m={dm} exceeds {HESSIAN_MAX_DIM} for solvers {dense or ['compare']}")


# --------------------------
# Subcommands
# --------------------------
def run_train(cmd: CliCommand) -> int:
    data = load_data(cmd.source)
    _check_sizes(cmd.subcommand, cmd.solvers, cmd.config, data)
    solver = cmd.solvers[0]
    W_0 = default_initial_weights(data, cmd.config)
    weights, trace = run_fit(solver, data, W_0, cmd.config)

    final = trace[-1]
    if cmd.out:
        save_weights(
            cmd.out,
            weights,
            data.classes,
            regularization=cmd.config.regularization,
            objective=final.objective,
        )
        logger.info(f"Weights written to {cmd.out}")
    if cmd.trace:
        write_trace(trace, cmd.trace, "json" if cmd.trace.endswith(".json") else "csv")
        logger.info(f"Trace written to {cmd.trace}")

    converged = has_converged(trace, cmd.config.rel_tol)
    print(f"solver={solver} objective={final.objective:.12g} iterations={final.iter} nnz={final.nnz}")
    print(f"status={'converged' if converged else 'max-iter'}")
    return EXIT_OK if converged else EXIT_MAX_ITER


def _reg_label(reg: Regularization) -> str:
    if reg.kind == "l1":
        return f"l1({reg.lam:g})"
    if reg.kind == "l0":
        return f"l0({reg.beta})"
    return "none"


def _bench_plan(cmd: CliCommand, data: Dataset) -> Tuple[FitConfig, Tuple[str, ...]]:
    """Config and solvers for one dataset; --reg auto picks l1 when n < d and drops unsupported solvers."""
    if cmd.auto_lambda is None:
        return cmd.config, cmd.solvers
    reg = Regularization.l1(cmd.auto_lambda) if data.n < data.d else Regularization.none()
    solvers: List[str] = []
    for solver in cmd.solvers:
        try:
            check_compatible(solver, reg)
            solvers.append(solver)
        except ConfigError as e:
            logger.warning(f"bench: skipping {solver} on n={data.n} d={data.d}: {e}")
    return replace(cmd.config, regularization=reg), tuple(solvers)


def _time_to_target(
    solver: str, data: Dataset, W_0: WeightMatrix, config: FitConfig, target: float, trials: int
) -> dict:
    times: List[float] = []
    hit: Optional[TraceRecord] = None
    last: Optional[TraceRecord] = None
    for trial in range(trials):
        try:
            _, trace = run_fit(solver, data, W_0, config, target_objective=target)
        except SolverError as e:
            logger.warning(f"bench: {solver} failed on d={data.d} (trial {trial + 1}): {e}")
            return {"time_ms": float("nan"), "reached": False, "iterations": 0}
        hit = next((r for r in trace if r.objective <= target), None)
        last = hit or trace[-1]
        times.append(last.wall_ms)
    assert last is not None
    return {"time_ms": float(np.mean(times)), "reached": hit is not None, "iterations": last.iter}


def run_bench(cmd: CliCommand) -> int:
    base = cmd.source
    sizes = [base]
    if cmd.sweep_d and base.synth is not None:
        sizes = [replace(base, synth=replace(base.synth, d=d)) for d in cmd.sweep_d]
    plans = []
    for source in sizes:
        data = load_data(source)
        config, solvers = _bench_plan(cmd, data)
        _check_sizes(cmd.subcommand, solvers, config, data)
        plans.append((data, config, solvers))

    rows: List[dict] = []
    for data, config, solvers in plans:
        W_0 = default_initial_weights(data, config)
        initial = penalized_objective(W_0, data, config)
        target = cmd.target_frac * initial
        logger.info(
            f"bench: n={data.n} d={data.d} m={data.m} reg={_reg_label(config.regularization)} "
            f"initial={initial:.8g} target={target:.8g} trials={cmd.trials}"
        )
        for solver in solvers:
            timing = _time_to_target(solver, data, W_0, config, target, cmd.trials)
            rows.append(
                {
                    "solver": solver,
                    "n": data.n,
                    "d": data.d,
                    "m": data.m,
                    **timing,
                    "reg": _reg_label(config.regularization),
                    "trials": cmd.trials,
                }
            )

    table = pd.DataFrame(rows, columns=BENCH_COLUMNS)

    if cmd.out:
        table.to_csv(cmd.out, index=False)
        logger.info(f"Benchmark table written to {cmd.out}")
    else:
        print(table.to_csv(index=False), end="")
    return EXIT_OK


def run_compare(cmd: CliCommand) -> int:
    data = load_data(cmd.source)
    _check_sizes(cmd.subcommand, cmd.solvers, cmd.config, data)
    W_0 = default_initial_weights(data, cmd.config)
    finals: Dict[str, float] = {}
    for solver in cmd.solvers:
        _, trace = run_fit(solver, data, W_0, cmd.config)
        finals[solver] = trace[-1].objective
        print(f"{solver}: objective={finals[solver]:.12g} iterations={trace[-1].iter}")

    worst = 0.0
    for a, b in combinations(cmd.solvers, 2):
        delta = relative_change(finals[a], finals[b])
        worst = max(worst, delta)
        print(f"{a} vs {b}: relative delta={delta:.3e}")
    if worst > cmd.gate:
        logger.error(f"compare: largest relative delta {worst:.3e} exceeds gate {cmd.gate:.1e}")
        return EXIT_MISMATCH
    return EXIT_OK


COMMANDS = {"train": run_train, "bench": run_bench, "compare": run_compare}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors; usage errors are configuration errors here
        return EXIT_OK if e.code == 0 else EXIT_ERROR

    logger.info("=" * 60)
    logger.info(f"piano {args.subcommand}")
    logger.info("=" * 60)
    try:
        cmd = command_from_args(args)
        return COMMANDS[cmd.subcommand](cmd)
    except PianoError as e:
        logger.error(f"{args.subcommand} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as e:
        logger.error(f"{args.subcommand} failed with an I/O error: {e}", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
