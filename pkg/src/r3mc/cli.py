"""Command line interface.

Subcommands: synth (generate a problem), complete (solve one), bench
(sweep configurations with aggregate statistics), movielens-prep
(convert a ratings file into Matrix Market splits).

Every long option can also come from an environment variable named
R3MC_<OPTION> (dashes become underscores, upper case); explicit flags
win over the environment.  Exit codes: 0 solved, 2 bad configuration or
unreadable input, 3 iteration budget exhausted, 4 line-search stall.
Wall-clock fields in outputs are zeroed under --deterministic so that
identical seeded runs are byte-identical (pin BLAS threads to one for
full reproducibility).
"""

import argparse
import concurrent.futures
import json
import os
import statistics
import sys
import time
from dataclasses import asdict
from pathlib import Path

from .data_io import (
    SyntheticSpec,
    parse_movielens,
    read_matrix_market,
    split_train_val_test,
    synthesize,
    to_entries,
    write_dense_matrix_market,
    write_matrix_market,
)
from .errors import (
    ConfigError,
    ContractViolationError,
    DimensionError,
    ParseError,
    SingularMatrixError,
)
from .manifold import random_point
from .problem import (
    CompletionProblem,
    cost,
    mean_squared_error,
    op_count,
    reset_op_count,
)
from .solver import (
    REASON_MAX_ITERATIONS,
    REASON_STALL,
    RankSchedule,
    SolverConfig,
    cg_solve,
    rank_incremental_solve,
    truncated_warm_start,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MAX_ITERATIONS = 3
EXIT_STALL = 4

_REASON_EXIT = {REASON_MAX_ITERATIONS: EXIT_MAX_ITERATIONS, REASON_STALL: EXIT_STALL}

TRACE_HEADER = "iter,cost,grad_norm,step,backtracks,reset,time_s"


def _env_name(option):
    return "R3MC_" + option.lstrip("-").replace("-", "_").upper()


def _add(parser, option, type=str, default=None, required=False, help="", **kwargs):
    """add_argument with an R3MC_* environment fallback."""
    env_key = _env_name(option)
    raw = os.environ.get(env_key)
    if raw is not None:
        if kwargs.get("action") == "store_true":
            kwargs["default"] = raw.strip().lower() in ("1", "true", "yes", "on")
        else:
            try:
                default = type(raw)
            except ValueError:
                parser.error("%s=%r is not a valid %s" % (env_key, raw, option))
        required = False
    help = (help + " " if help else "") + "[env %s]" % env_key
    if kwargs.get("action") == "store_true":
        kwargs.setdefault("default", default if default is not None else False)
        parser.add_argument(option, required=False, help=help, **kwargs)
    else:
        parser.add_argument(
            option, type=type, default=default, required=required, help=help, **kwargs
        )


def _int_list(text):
    try:
        return [int(v) for v in str(text).split(",") if v.strip() != ""]
    except ValueError:
        raise ConfigError("expected a comma-separated integer list, got %r" % text)


def _float_list(text):
    try:
        return [float(v) for v in str(text).split(",") if v.strip() != ""]
    except ValueError:
        raise ConfigError("expected a comma-separated number list, got %r" % text)


def _atomic_write(path, write_body):
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        write_body(fh)
    os.replace(tmp, path)


def _write_trace_csv(fh, rows, deterministic):
    fh.write(TRACE_HEADER + "\n")
    for k, row in enumerate(rows, start=1):
        t = 0.0 if deterministic else row.time_s
        fh.write(
            "%d,%s,%s,%s,%d,%d,%s\n"
            % (
                k,
                repr(float(row.cost)),
                repr(float(row.grad_norm)),
                repr(float(row.step)),
                row.backtracks,
                int(row.reset),
                repr(float(t)),
            )
        )


def _solver_config(args):
    return SolverConfig(
        max_iterations=args.max_iters,
        cost_tolerance=args.cost_tol,
        gradient_norm_tolerance=args.grad_tol,
    )


def _add_solver_options(sub):
    _add(sub, "--max-iters", type=int, default=500, help="iteration budget")
    _add(sub, "--cost-tol", type=float, default=1e-20, help="stop when cost falls below")
    _add(sub, "--grad-tol", type=float, default=1e-14,
         help="stop on relative gradient norm")
    _add(sub, "--deterministic", action="store_true",
         help="zero wall-clock fields in outputs")


def cmd_synth(args):
    if args.os <= 1.0:
        if not args.force:
            raise ConfigError(
                "oversampling %.3g is at most one observation per degree of "
                "freedom; recovery is underdetermined (pass --force to "
                "generate anyway)" % args.os
            )
        print(
            "warning: oversampling %.3g is at most one; proceeding under --force"
            % args.os,
            file=sys.stderr,
        )
    spec = SyntheticSpec(
        n=args.n,
        m=args.m,
        rank=args.rank,
        oversampling=args.os,
        condition_number=args.cn,
    )
    problem, (left, right) = synthesize(spec, args.seed)
    out = Path(args.out)
    _atomic_write(out / "entries.mtx",
                  lambda fh: write_matrix_market(fh, problem.entries))
    _atomic_write(out / "left.mtx",
                  lambda fh: write_dense_matrix_market(fh, left))
    _atomic_write(out / "right.mtx",
                  lambda fh: write_dense_matrix_market(fh, right))
    print(
        "wrote %s: %d x %d rank %d, %d entries, oversampling %.6g"
        % (out, spec.n, spec.m, spec.rank, problem.entries.count,
           problem.oversampling)
    )
    return EXIT_OK


def _check_grid(data, other, name):
    if (other.n, other.m) != (data.n, data.m):
        raise ConfigError(
            "%s grid %d x %d does not match the data grid %d x %d"
            % (name, other.n, other.m, data.n, data.m)
        )


def _validation_stop(validation, window=5):
    """Monitor that stops a solve after ``window`` straight validation rises."""
    state = {"prev": float("inf"), "bad": 0}

    def monitor(iteration, x, f):
        v = mean_squared_error(x, validation)
        state["bad"] = state["bad"] + 1 if v > state["prev"] else 0
        state["prev"] = v
        return state["bad"] >= window

    return monitor


def _solve(args, problem, validation, config):
    """Run the configured solve; returns (point, traces, rank_steps, reason)."""
    if args.rank_updates is not None and args.warm_start_cols is not None:
        raise ConfigError("--rank-updates and --warm-start-cols are exclusive")
    if args.rank_updates is not None:
        schedule = RankSchedule(max_rank=args.rank_updates, validation=validation)
        x, steps = rank_incremental_solve(problem, schedule, config, args.seed)
        return x, [s.trace for s in steps], steps, steps[-1].trace.reason
    if args.warm_start_cols is not None:
        x0 = truncated_warm_start(problem, args.warm_start_cols, config, args.seed)
    else:
        x0 = random_point(problem.n, problem.m, problem.rank, args.seed)
    monitor = _validation_stop(validation) if validation is not None else None
    x, trace = cg_solve(problem, x0, config, monitor=monitor)
    return x, [trace], None, trace.reason


def cmd_complete(args):
    if args.rank is None and args.rank_updates is None:
        raise ConfigError("need --rank (or --rank-updates for the homotopy)")
    entries = read_matrix_market(args.data)
    rank = args.rank_updates if args.rank_updates is not None else args.rank
    problem = CompletionProblem(entries, rank)
    validation = None
    if args.val:
        validation = read_matrix_market(args.val)
        _check_grid(entries, validation, "validation")
    test = None
    if args.test:
        test = read_matrix_market(args.test)
        _check_grid(entries, test, "test")

    config = _solver_config(args)
    reset_op_count()
    t0 = time.perf_counter()
    x, traces, steps, reason = _solve(args, problem, validation, config)
    elapsed = 0.0 if args.deterministic else time.perf_counter() - t0
    rows = [row for tr in traces for row in tr.rows]
    exit_code = _REASON_EXIT.get(reason, EXIT_OK)
    val_mse = mean_squared_error(x, validation) if validation is not None else None
    test_mse = mean_squared_error(x, test) if test is not None else None

    if args.trace:
        _atomic_write(args.trace,
                      lambda fh: _write_trace_csv(fh, rows, args.deterministic))
    if args.report:
        result = {
            "reason": reason,
            "exit_code": exit_code,
            "iterations": len(rows),
            "final_cost": cost(problem, x),
            "final_rank": x.r,
            "validation_mse": val_mse,
            "test_mse": test_mse,
            "sparse_flops": op_count(),
            "time_s": elapsed,
        }
        if steps is not None:
            result["ranks"] = [
                {
                    "rank": s.rank,
                    "iterations": s.trace.iterations,
                    "final_cost": s.trace.final_cost,
                    "validation_mse": s.validation_mse,
                }
                for s in steps
            ]
        report = {
            "format_version": 1,
            "command": "complete",
            "config": {
                "data": args.data,
                "rank": rank,
                "rank_updates": args.rank_updates,
                "warm_start_cols": args.warm_start_cols,
                "val": args.val,
                "test": args.test,
                "seed": args.seed,
                "deterministic": bool(args.deterministic),
                "solver": asdict(config),
            },
            "problem": {
                "n": problem.n,
                "m": problem.m,
                "observed": problem.entries.count,
                "oversampling": problem.oversampling,
            },
            "result": result,
        }
        _atomic_write(
            args.report, lambda fh: json.dump(report, fh, indent=2, sort_keys=True)
        )
    if args.solution_prefix:
        for name, mat in (("U", x.U), ("R", x.R), ("V", x.V)):
            _atomic_write(
                "%s_%s.mtx" % (args.solution_prefix, name),
                lambda fh, mat=mat: write_dense_matrix_market(fh, mat),
            )
    line = "reason=%s iterations=%d final_cost=%.6e rank=%d" % (
        reason, len(rows), cost(problem, x), x.r,
    )
    if val_mse is not None:
        line += " val_mse=%.6e" % val_mse
    if test_mse is not None:
        line += " test_mse=%.6e" % test_mse
    print(line)
    return exit_code


def _bench_synth_run(params):
    """One sweep cell: generate, solve, compare to the ground truth.

    Any failure lands in the row's error column; the sweep never dies on
    a single run.
    """
    row = {
        "n": params["n"], "m": params["m"], "rank": params["rank"],
        "os": params["os"], "cn": params["cn"], "seed": params["seed"],
        "iterations": 0, "final_cost": float("nan"), "mse": float("nan"),
        "reason": "", "time_s": 0.0, "error": "",
    }
    try:
        spec = SyntheticSpec(
            n=params["n"], m=params["m"], rank=params["rank"],
            oversampling=params["os"], condition_number=params["cn"],
        )
        problem, (left, right) = synthesize(spec, params["seed"])
        config = SolverConfig(**params["config"])
        t0 = time.perf_counter()
        x0 = random_point(spec.n, spec.m, spec.rank, params["seed"])
        x, trace = cg_solve(problem, x0, config)
        diff = x.matrix() - left @ right
        row["iterations"] = trace.iterations
        row["final_cost"] = trace.final_cost
        row["mse"] = float((diff * diff).mean())
        row["reason"] = trace.reason
        row["time_s"] = 0.0 if params["deterministic"] else time.perf_counter() - t0
    except Exception as exc:
        row["error"] = "%s: %s" % (type(exc).__name__, exc)
    return row


def _bench_movielens_run(params):
    """One ratings-protocol cell: split, solve with early stopping, test."""
    row = {
        "rank": params["rank"], "seed": params["seed"],
        "iterations": 0, "final_cost": float("nan"),
        "val_mse": float("nan"), "test_mse": float("nan"),
        "reason": "", "time_s": 0.0, "error": "",
    }
    try:
        dataset = parse_movielens(params["ratings"])
        entries = to_entries(dataset)
        train, val, test = split_train_val_test(
            entries, params["fractions"], params["seed"]
        )
        config = SolverConfig(**params["config"])
        t0 = time.perf_counter()
        problem = CompletionProblem(train, params["rank"])
        x0 = random_point(problem.n, problem.m, problem.rank, params["seed"])
        monitor = _validation_stop(val) if val.count else None
        x, trace = cg_solve(problem, x0, config, monitor=monitor)
        row["iterations"] = trace.iterations
        row["final_cost"] = trace.final_cost
        if val.count:
            row["val_mse"] = mean_squared_error(x, val)
        if test.count:
            row["test_mse"] = mean_squared_error(x, test)
        row["reason"] = trace.reason
        row["time_s"] = 0.0 if params["deterministic"] else time.perf_counter() - t0
    except Exception as exc:
        row["error"] = "%s: %s" % (type(exc).__name__, exc)
    return row


def _run_tasks(worker, tasks, jobs):
    if jobs <= 1:
        return [worker(t) for t in tasks]
    with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(worker, tasks))


def _aggregate(values):
    good = [v for v in values if v == v]
    if not good:
        return float("nan"), float("nan")
    dev = statistics.stdev(good) if len(good) > 1 else 0.0
    return statistics.fmean(good), dev


def _write_rows_csv(fh, header, rows, float_keys):
    fh.write(",".join(header) + "\n")
    for row in rows:
        cells = []
        for key in header:
            v = row[key]
            if key in float_keys:
                cells.append(repr(float(v)))
            else:
                cells.append(str(v))
        fh.write(",".join(cells) + "\n")


def cmd_bench(args):
    config = asdict(_solver_config(args))
    out_dir = Path(args.out_dir)
    if args.movielens:
        if args.ranks is None:
            raise ConfigError("--movielens needs --ranks")
        ranks = _int_list(args.ranks)
        fractions = tuple(_float_list(args.fractions))
        seed0 = _int_list(args.seeds)[0]
        tasks = [
            {
                "ratings": args.movielens, "rank": rank, "seed": seed0 + k,
                "fractions": fractions, "config": config,
                "deterministic": args.deterministic,
            }
            for rank in ranks
            for k in range(args.splits)
        ]
        rows = _run_tasks(_bench_movielens_run, tasks, args.jobs)
        run_header = ["rank", "seed", "iterations", "final_cost", "val_mse",
                      "test_mse", "reason", "time_s", "error"]
        run_floats = {"final_cost", "val_mse", "test_mse", "time_s"}
        summary = []
        for rank in ranks:
            group = [r for r in rows if r["rank"] == rank]
            ok = [r for r in group if not r["error"]]
            test_mean, test_dev = _aggregate([r["test_mse"] for r in ok])
            cost_mean, cost_dev = _aggregate([r["final_cost"] for r in ok])
            time_mean, time_dev = _aggregate([r["time_s"] for r in ok])
            summary.append({
                "rank": rank, "splits": len(group),
                "failures": len(group) - len(ok),
                "test_mse_mean": test_mean, "test_mse_std": test_dev,
                "final_cost_mean": cost_mean, "final_cost_std": cost_dev,
                "time_mean": time_mean, "time_std": time_dev,
            })
        summary_header = ["rank", "splits", "failures", "test_mse_mean",
                          "test_mse_std", "final_cost_mean", "final_cost_std",
                          "time_mean", "time_std"]
        summary_floats = set(summary_header[3:])
    else:
        for flag, value in (("--n", args.n), ("--m", args.m),
                            ("--ranks", args.ranks), ("--os", args.os),
                            ("--seeds", args.seeds)):
            if value is None:
                raise ConfigError("bench needs %s" % flag)
        ranks = _int_list(args.ranks)
        os_values = _float_list(args.os)
        cn_values = [None] if args.cn is None else _float_list(args.cn)
        seeds = _int_list(args.seeds)
        tasks = [
            {
                "n": args.n, "m": args.m, "rank": rank, "os": os_, "cn": cn,
                "seed": seed, "config": config,
                "deterministic": args.deterministic,
            }
            for rank in ranks
            for os_ in os_values
            for cn in cn_values
            for seed in seeds
        ]
        rows = _run_tasks(_bench_synth_run, tasks, args.jobs)
        run_header = ["n", "m", "rank", "os", "cn", "seed", "iterations",
                      "final_cost", "mse", "reason", "time_s", "error"]
        run_floats = {"os", "final_cost", "mse", "time_s"}
        summary = []
        for rank in ranks:
            for os_ in os_values:
                for cn in cn_values:
                    group = [
                        r for r in rows
                        if (r["rank"], r["os"], r["cn"]) == (rank, os_, cn)
                    ]
                    ok = [r for r in group if not r["error"]]
                    cost_mean, cost_dev = _aggregate([r["final_cost"] for r in ok])
                    mse_mean, mse_dev = _aggregate([r["mse"] for r in ok])
                    time_mean, time_dev = _aggregate([r["time_s"] for r in ok])
                    summary.append({
                        "n": args.n, "m": args.m, "rank": rank, "os": os_,
                        "cn": cn, "seeds": len(group),
                        "failures": len(group) - len(ok),
                        "final_cost_mean": cost_mean, "final_cost_std": cost_dev,
                        "mse_mean": mse_mean, "mse_std": mse_dev,
                        "time_mean": time_mean, "time_std": time_dev,
                    })
        summary_header = ["n", "m", "rank", "os", "cn", "seeds", "failures",
                          "final_cost_mean", "final_cost_std", "mse_mean",
                          "mse_std", "time_mean", "time_std"]
        summary_floats = {"os"} | set(summary_header[7:])

    _atomic_write(out_dir / "runs.csv",
                  lambda fh: _write_rows_csv(fh, run_header, rows, run_floats))
    _atomic_write(
        out_dir / "summary.csv",
        lambda fh: _write_rows_csv(fh, summary_header, summary, summary_floats),
    )
    failures = sum(1 for r in rows if r["error"])
    print(
        "wrote %s and %s (%d runs, %d failed)"
        % (out_dir / "runs.csv", out_dir / "summary.csv", len(rows), failures)
    )
    return EXIT_OK


def cmd_movielens_prep(args):
    fractions = tuple(_float_list(args.fractions))
    dataset = parse_movielens(args.ratings)
    entries = to_entries(dataset)
    train, val, test = split_train_val_test(entries, fractions, args.seed)
    out_dir = Path(args.out_dir)
    names = (("train", train), ("val", val), ("test", test))
    for name, part in names:
        if part.count:
            _atomic_write(
                out_dir / ("%s.mtx" % name),
                lambda fh, part=part: write_matrix_market(fh, part),
            )
    meta = {
        "format_version": 1,
        "users": dataset.n_users,
        "items": dataset.n_items,
        "user_id_range": dataset.user_id_range,
        "item_id_range": dataset.item_id_range,
        "ratings": dataset.count,
        "fractions": list(fractions),
        "seed": args.seed,
        "splits": {name: part.count for name, part in names},
    }
    _atomic_write(
        out_dir / "meta.json", lambda fh: json.dump(meta, fh, indent=2, sort_keys=True)
    )
    print(
        "wrote splits to %s: %d ratings, %d x %d grid"
        % (out_dir, dataset.count, dataset.n_users, dataset.n_items)
    )
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="r3mc",
        description="Fixed-rank matrix completion by Riemannian conjugate gradient.",
        epilog="Options also read environment variables named R3MC_<OPTION>.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic problem")
    _add(p, "--n", type=int, required=True, help="rows")
    _add(p, "--m", type=int, required=True, help="columns")
    _add(p, "--rank", type=int, required=True, help="ground-truth rank")
    _add(p, "--os", type=float, required=True,
         help="observed entries per degree of freedom")
    _add(p, "--cn", type=float, default=None,
         help="condition number (default: gaussian factors)")
    _add(p, "--seed", type=int, required=True, help="generator seed")
    _add(p, "--out", required=True,
         help="output directory for entries.mtx, left.mtx, right.mtx")
    _add(p, "--force", action="store_true",
         help="allow oversampling at or below one")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("complete", help="solve a completion problem")
    _add(p, "--data", required=True, help="Matrix Market coordinate file")
    _add(p, "--rank", type=int, default=None, help="target rank")
    _add(p, "--rank-updates", type=int, default=None,
         help="grow the rank from one up to this maximum")
    _add(p, "--warm-start-cols", type=int, default=None,
         help="warm start from this many completed columns")
    _add(p, "--val", default=None,
         help="validation entries (Matrix Market) for early stopping")
    _add(p, "--test", default=None,
         help="held-out entries (Matrix Market) to score at the end")
    _add(p, "--seed", type=int, required=True, help="initialization seed")
    _add_solver_options(p)
    _add(p, "--trace", default=None, help="write per-iteration CSV here")
    _add(p, "--report", default=None, help="write a JSON run report here")
    _add(p, "--solution-prefix", default=None,
         help="write solution factors to PREFIX_U/R/V.mtx")
    p.set_defaults(func=cmd_complete)

    p = sub.add_parser("bench", help="sweep configurations with statistics")
    _add(p, "--n", type=int, default=None, help="rows (synthetic sweep)")
    _add(p, "--m", type=int, default=None, help="columns (synthetic sweep)")
    _add(p, "--ranks", default=None, help="comma-separated rank list")
    _add(p, "--os", default=None, help="comma-separated oversampling list")
    _add(p, "--cn", default=None,
         help="comma-separated condition number list (default: gaussian)")
    _add(p, "--seeds", default=None, help="comma-separated seed list")
    _add(p, "--movielens", default=None,
         help="ratings file; switches to the split-protocol sweep")
    _add(p, "--splits", type=int, default=10,
         help="partition count per rank for --movielens")
    _add(p, "--fractions", default="0.8,0.1,0.1",
         help="train,val,test fractions for --movielens")
    _add(p, "--jobs", type=int, default=1, help="parallel worker count")
    _add_solver_options(p)
    _add(p, "--out-dir", required=True,
         help="directory for runs.csv and summary.csv")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("movielens-prep",
                       help="convert ratings to Matrix Market splits")
    _add(p, "--ratings", required=True,
         help="ratings file (UserID::MovieID::Rating::Timestamp)")
    _add(p, "--out-dir", required=True, help="directory for train/val/test.mtx")
    _add(p, "--seed", type=int, required=True, help="split seed")
    _add(p, "--fractions", default="0.8,0.1,0.1", help="train,val,test fractions")
    p.set_defaults(func=cmd_movielens_prep)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractViolationError, DimensionError, ParseError,
            SingularMatrixError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
