"""Command-line interface: fit, predict, benchmark, validate, synth.

Every command is driven by one config file plus flag overrides and a seed, so
runs are reproducible.  Report commands write delimited output and render the
matching figures next to it.

Exit codes: 0 success, 2 configuration error, 3 non-convergence,
4 validation failure.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from . import bta, bta_dist, dataio, figures
from .bta import OpCounter, random_spd_bta
from .config import ConfigError, build_model, load_config, theta_start
from .inla import fit, load_balance_ratio, predict
from .model import DimensionError
from .sched import allocate, pair_runner, run_tasks, TaskRunner
from .validate import run_validation

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NO_CONVERGENCE = 3
EXIT_VALIDATION = 4


def build_parser():
    parser = argparse.ArgumentParser(
        prog="stinla",
        description="Spatio-temporal Bayesian inference on structured solvers",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func, helptext in (
        ("fit", cmd_fit, "estimate the posterior for a configured model"),
        ("predict", cmd_predict, "posterior predictive means at new locations"),
        ("benchmark", cmd_benchmark, "time the structured solver routines"),
        ("validate", cmd_validate, "run the randomized oracle suite"),
        ("synth", cmd_synth, "generate a synthetic dataset on disk"),
    ):
        cmd = sub.add_parser(name, help=helptext)
        cmd.add_argument("--config", type=Path, default=None, help="INI config file")
        cmd.add_argument("--seed", type=int, default=None)
        cmd.add_argument("--workers", type=int, default=None)
        cmd.add_argument("--partitions", type=int, default=None)
        cmd.add_argument("--lb", type=float, default=None)
        cmd.add_argument("--out-dir", dest="out_dir", type=str, default=None)
        if name == "predict":
            cmd.add_argument(
                "--design", type=Path, required=True,
                help="Matrix Market prediction design matrix",
            )
            cmd.add_argument(
                "--latent", type=Path, default=None,
                help="latent.csv from a previous fit (default: <out-dir>/latent.csv)",
            )
        cmd.set_defaults(func=func)
    return parser


def _load(args):
    overrides = {
        "seed": args.seed,
        "workers": args.workers,
        "partitions": args.partitions,
        "lb": args.lb,
        "out_dir": args.out_dir,
    }
    return load_config(args.config, overrides)


def _out_dir(config):
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DimensionError, bta_dist.PlanError, FileNotFoundError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


def cmd_fit(args):
    config = _load(args)
    out = _out_dir(config)
    spec, _ = build_model(config)
    theta0 = theta_start(config)

    alloc = allocate(config.workers, config.theta_dim)
    summary, result = fit(
        spec,
        theta0,
        options=config.fit_options(),
        runner=TaskRunner(alloc),
        partitions=config.partitions,
        lb=config.lb,
        pair_runner=pair_runner(alloc),
        calibrate_variance=config.calibrate_variance,
    )

    dataio.write_summary_json(
        out / "summary.json",
        summary,
        extra={
            "seed": config.seed,
            "dims": {
                "n_processes": spec.n_processes,
                "n_spatial": spec.n_spatial,
                "n_time": spec.n_time,
                "n_fixed": spec.n_fixed,
            },
            "workers": config.workers,
            "partitions": config.partitions,
            "lb": config.lb,
        },
    )
    dataio.write_latent_csv(out / "latent.csv", spec, summary.latent_mean, summary.latent_sd)
    dataio.write_table(
        out / "trace.csv",
        ["iteration", "f", "grad_norm", "step", "f_evals", "seconds"],
        [
            (rec.iteration, rec.f, rec.grad_norm, rec.step, rec.f_evals, rec.seconds)
            for rec in result.trace
        ],
    )
    figure_paths = figures.fit_figures(
        out, result.trace, spec, summary.latent_mean, summary.latent_sd
    )

    print(
        f"fit: status={summary.status} iterations={summary.iterations} "
        f"f_evals={summary.f_evals} logpost={summary.logpost_at_mode:.6f}"
    )
    for name, value, sd in zip(
        summary.theta_mode.names(), summary.theta_mode.values, summary.theta_sd
    ):
        print(f"  {name} = {value:.6f} (sd {sd:.6f})")
    print(f"outputs: {out / 'summary.json'}, {out / 'latent.csv'}, {out / 'trace.csv'}")
    print("figures: " + ", ".join(str(p) for p in figure_paths))
    if not summary.status.startswith("converged"):
        print("warning: optimization did not converge; outputs are partial", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    return EXIT_OK


def cmd_predict(args):
    config = _load(args)
    out = _out_dir(config)
    latent_path = args.latent if args.latent is not None else out / "latent.csv"
    if not Path(latent_path).exists():
        raise ConfigError(f"latent summary not found: {latent_path} (run fit first)")
    table = np.genfromtxt(latent_path, delimiter=",", names=True)
    latent_mean = np.atleast_1d(table["mean"])
    design = dataio.read_sparse(args.design)
    values = predict(design, latent_mean)
    dataio.write_table(
        out / "predictions.csv",
        ["row", "mean"],
        list(enumerate(values)),
    )
    figure_paths = figures.prediction_figure(out, values)
    print(f"predict: {values.size} rows -> {out / 'predictions.csv'}")
    print("figures: " + ", ".join(str(p) for p in figure_paths))
    return EXIT_OK


def cmd_benchmark(args):
    config = _load(args)
    out = _out_dir(config)
    rng = np.random.default_rng(config.seed)
    n, b, a = config.bench_n_blocks, config.bench_block_size, config.bench_arrow_size
    matrix = random_spd_bta(rng, n, b, a)
    prior_like = matrix.copy()
    if a > 0:
        prior_like.arrow[...] = 0.0
        prior_like.tip[...] = np.eye(a)
    rhs = rng.normal(size=matrix.dim)

    partitions = sorted(set(config.bench_partitions) | {1})
    rows = []
    for lb in config.bench_lb_values:
        for p in partitions:
            if p > 1 and n < 2 * p:
                continue
            plan = bta_dist.plan_partitions(n, p, lb if p > 1 else 1.0)

            def record(routine, phase_times, counter):
                for phase, seconds in sorted(phase_times.items()):
                    rows.append(
                        {
                            "routine": routine,
                            "P": p,
                            "lb": lb,
                            "n": n,
                            "b": b,
                            "a": a,
                            "phase": phase,
                            "seconds": seconds,
                            "flop_count": counter.flops,
                        }
                    )

            counter, times = OpCounter(), {}
            factor = bta_dist.d_factorize(
                matrix.copy(), plan, counter=counter, phase_times=times
            )
            record("factorize", times, counter)

            counter, times = OpCounter(), {}
            bta_dist.d_factorize(
                prior_like.copy(), plan, counter=counter, phase_times=times
            )
            record("factorize_bt", times, counter)

            counter, times = OpCounter(), {}
            bta_dist.d_solve(factor, rhs, counter=counter, phase_times=times)
            record("solve", times, counter)

            counter, times = OpCounter(), {}
            bta_dist.d_selected_invert(factor, counter=counter, phase_times=times)
            record("selected_invert", times, counter)

    dataio.write_table(
        out / "benchmark.csv",
        ["routine", "P", "lb", "n", "b", "a", "phase", "seconds", "flop_count"],
        [
            (
                row["routine"], row["P"], row["lb"], row["n"], row["b"], row["a"],
                row["phase"], row["seconds"], row["flop_count"],
            )
            for row in rows
        ],
    )
    figure_paths = figures.benchmark_figure(out, rows)

    # evaluation-layer trace: one gradient-sized batch of factorization tasks
    # dealt over the configured worker pool
    small = random_spd_bta(rng, max(2, n // 4), b, a)
    tasks = [
        (lambda m=small.copy(): bta.logdet(bta.factorize(m)))
        for _ in range(31)
    ]
    trace = []
    run_tasks(tasks, allocate(config.workers, dim_theta=15), trace=trace)
    dataio.write_table(
        out / "task_trace.csv",
        ["task", "group", "round", "start", "stop"],
        [(rec.index, rec.group, rec.round, rec.start, rec.stop) for rec in trace],
    )

    bta_flops = max(r["flop_count"] for r in rows if r["routine"] == "factorize" and r["P"] == 1)
    bt_flops = max(r["flop_count"] for r in rows if r["routine"] == "factorize_bt" and r["P"] == 1)
    print(
        f"benchmark: n={n} b={b} a={a}; factorization work ratio "
        f"{bta_flops / bt_flops:.4f} (asymptotic model {1 + load_balance_ratio(b, a):.4f})"
    )
    print(f"outputs: {out / 'benchmark.csv'}")
    print("figures: " + ", ".join(str(p) for p in figure_paths))
    return EXIT_OK


def cmd_validate(args):
    config = _load(args)
    results = run_validation(config.seed)
    for result in results:
        print(result.line())
    if all(result.passed for result in results):
        print(f"validate: all {len(results)} properties passed (seed {config.seed})")
        return EXIT_OK
    failed = sum(1 for result in results if not result.passed)
    print(f"validate: {failed} properties FAILED (seed {config.seed})", file=sys.stderr)
    return EXIT_VALIDATION


def cmd_synth(args):
    config = _load(args)
    out = _out_dir(config)
    config.synthetic = True
    spec, latent_true = build_model(config)

    dataio.write_sparse(out / "spatial_mass.mtx", spec.spatial[0].mass)
    dataio.write_sparse(out / "spatial_stiffness.mtx", spec.spatial[0].stiffness)
    dataio.write_sparse(out / "temporal_mass.mtx", spec.temporal[0].mass)
    dataio.write_sparse(out / "temporal_coupling.mtx", spec.temporal[0].coupling)
    dataio.write_sparse(out / "temporal_stiffness.mtx", spec.temporal[0].stiffness)
    for i in range(spec.n_processes):
        dataio.write_sparse(out / f"design_{i}.mtx", spec.design[i])
        dataio.write_vector(out / f"observations_{i}.csv", spec.observations[i])
    dataio.write_vector(out / "latent_true.csv", latent_true)
    theta_true = config.theta_true if config.theta_true is not None else theta_start(config)
    dataio.write_vector(out / "theta_true.csv", theta_true)

    lines = [
        "[model]",
        f"n_processes = {spec.n_processes}",
        f"n_spatial = {spec.n_spatial}",
        f"n_time = {spec.n_time}",
        f"n_fixed = {spec.n_fixed}",
        "synthetic = false",
        f"fixed_effect_precision = {config.fixed_effect_precision}",
        "spatial_mass = spatial_mass.mtx",
        "spatial_stiffness = spatial_stiffness.mtx",
        "temporal_mass = temporal_mass.mtx",
        "temporal_coupling = temporal_coupling.mtx",
        "temporal_stiffness = temporal_stiffness.mtx",
    ]
    for i in range(spec.n_processes):
        lines.append(f"design_{i} = design_{i}.mtx")
        lines.append(f"observations_{i} = observations_{i}.csv")
    lines += [
        "",
        "[theta]",
        "theta0 = " + ", ".join(f"{v:.17g}" for v in theta_true),
        f"prior_sd = {config.prior_sd}",
        "",
        "[optimizer]",
        f"gtol = {config.gtol}",
        f"ftol = {config.ftol}",
        f"max_iter = {config.max_iter}",
        "",
        "[run]",
        f"seed = {config.seed}",
        "",
        "[output]",
        f"out_dir = {config.out_dir}",
        "",
    ]
    (out / "model.ini").write_text("\n".join(lines))
    print(
        f"synth: wrote model files for {spec.n_processes} processes "
        f"({spec.joint_dim} latent) to {out}"
    )
    print(f"fit it with: stinla fit --config {out / 'model.ini'}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
