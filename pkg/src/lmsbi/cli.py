"""Command-line entry point.

Exit codes: 0 success, 2 usage, 3 validation, 4 runtime or numeric failure,
5 resource refusal. Every command writes a ``manifest.json`` next to its
outputs listing each artifact with its SHA-256 hash.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from lmsbi import __version__
from lmsbi.errors import LmsbiError, ResourceError, ValidationError

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_RESOURCE = 0, 2, 3, 4, 5
DEFAULT_THETA = "0.016,0.012,0.55"
DEFAULT_SHOCK = 231
PARAM_HEADER = ["delta_u", "delta_v", "r"]


class UsageError(Exception):
    pass


def _floats(text, count=None):
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc
    if count is not None and len(vals) != count:
        raise argparse.ArgumentTypeError(f"expected {count} values, got {len(vals)}")
    return vals


def _theta(text):
    return _floats(text, 3)


def _ints(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _positive(text):
    try:
        v = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from exc
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _shock(text):
    if text.lower() in ("none", "off"):
        return None
    try:
        return int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"--shock-at takes an integer step or 'none', got {text!r}") from exc


# manifests --------------------------------------------------------------
def write_manifest(out_dir, command, args, seed, inputs=(), outputs=(), config_path=None):
    from lmsbi.flow import CKPT_VERSION
    from lmsbi.io import TRAJ_VERSION, file_hash

    params = {k: v for k, v in vars(args).items() if k not in ("func",)}
    manifest = {
        "command": command,
        "config": str(config_path or getattr(args, "config", None) or "") or None,
        "parameters": json.loads(json.dumps(params, default=str)),
        "seed": seed,
        "inputs": {str(p): file_hash(p) for p in inputs if p},
        "outputs": {str(p): file_hash(p) for p in outputs},
        "version": __version__,
        "formats": {"trajectory": TRAJ_VERSION, "checkpoint": CKPT_VERSION},
    }
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def _out_dir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _sim_config(args, T=None):
    from lmsbi.market import SimulationConfig

    T = T or args.steps
    shock = args.shock_at
    if shock is not None and not 0 <= shock < T:
        raise ValidationError(f"--shock-at {shock} outside [0, {T})")
    return SimulationConfig(T=T, t_shock=shock, shock_mode=args.shock_mode, seed=args.seed,
                            burn_in=args.burn_in, vacancy_lifetime=args.vacancy_lifetime)


def _load_obs(path):
    from lmsbi.io import load_trajectory
    from lmsbi.market import MicroTrajectory

    traj = load_trajectory(path)
    return traj.indicators if isinstance(traj, MicroTrajectory) else traj


# commands ---------------------------------------------------------------
def cmd_gen_market(args):
    from lmsbi.io import save_spec
    from lmsbi.synth import SynthConfig, generate_market

    cfg = SynthConfig(n=args.n, workers_per_occupation=args.workers, block_count=args.blocks,
                      intra_block_mass=args.intra_mass, smoothing_epsilon=args.epsilon, p_max=args.p_max,
                      seed=args.seed)
    spec = generate_market(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_spec(spec, out)
    write_manifest(out.parent, "gen-market", args, args.seed, outputs=[out])
    print(f"wrote {out} (n={spec.n}, workforce={spec.workforce})")


def cmd_simulate(args):
    from lmsbi import rng as rngmod
    from lmsbi.io import load_spec, save_trajectory, trajectory_to_csv
    from lmsbi.market import BehaviouralParams, micro_memory_estimate, simulate, simulate_micro

    spec = load_spec(args.spec)
    params = BehaviouralParams.from_array(args.theta)
    cfg = _sim_config(args)
    if args.micro:
        est = micro_memory_estimate(args.sims, cfg.T, spec.n, args.bytes_per_element)
        if est > args.memory_budget:
            raise ResourceError(
                f"refusing micro simulation: estimate {est} bytes ({est / 1024**3:.2f} GiB) for "
                f"{args.sims} sims x {cfg.T} steps x n={spec.n} at {args.bytes_per_element} bytes/element "
                f"exceeds budget {args.memory_budget} bytes ({args.memory_budget / 1024**3:.2f} GiB)",
                estimate=est,
            )
    out = _out_dir(args.out)
    outputs = []
    for k in range(args.sims):
        seed = args.seed if args.sims == 1 else rngmod.child_seed(args.seed, k)
        run_cfg = replace(cfg, seed=seed)
        traj = (simulate_micro(spec, params, run_cfg, memory_budget=args.memory_budget) if args.micro
                else simulate(spec, params, run_cfg))
        stem = "trajectory" if args.sims == 1 else f"trajectory_{k:04d}"
        if args.format == "csv":
            path = out / f"{stem}.csv"
            trajectory_to_csv(traj, path)
        else:
            path = out / f"{stem}.lmtr"
            save_trajectory(traj, path)
        outputs.append(path)
    write_manifest(out, "simulate", args, args.seed, inputs=[args.spec], outputs=outputs)
    print(f"wrote {len(outputs)} trajectory file(s) to {out}")


def cmd_infer(args):
    from lmsbi.flow import FlowArch
    from lmsbi.io import load_spec, write_matrix_csv
    from lmsbi.npe import (PriorBox, condition, credible_interval, default_train_config, fit_posterior,
                           posterior_sample, run_simulation_batch, sample_prior, save_posterior)
    from lmsbi import rng as rngmod

    spec = load_spec(args.spec)
    y = _load_obs(args.obs)
    if y.n != spec.n:
        raise ValidationError(f"observation has n={y.n}, spec has n={spec.n}")
    cfg = _sim_config(args, T=y.T)
    prior = PriorBox()
    thetas = sample_prior(prior, args.sims, rngmod.child_seed(args.seed, 0))
    batch = run_simulation_batch(spec, cfg, thetas, master_seed=rngmod.child_seed(args.seed, 1),
                                 workers=args.workers)
    if batch.failures:
        print(f"warning: {len(batch.failures)} simulation(s) failed and were dropped", file=sys.stderr)
    tcfg = replace(default_train_config(args.summaries), seed=args.seed, max_epochs=args.max_epochs)
    if args.learning_rate is not None:
        tcfg = replace(tcfg, learning_rate=args.learning_rate)
    builder = fit_posterior(batch, args.summaries, tcfg, FlowArch(), stat_mode=args.stat_mode, prior=prior)
    post = condition(builder, y)
    samples, leak = posterior_sample(post, args.samples, rngmod.child_seed(args.seed, 2), return_leakage=True)
    out = _out_dir(args.out)
    ckpt, samples_csv, log_csv, summary_json = (out / "posterior.lmnf", out / "samples.csv",
                                                out / "train_log.csv", out / "summary.json")
    save_posterior(ckpt, builder)
    write_matrix_csv(samples_csv, PARAM_HEADER, samples)
    builder.log.to_csv(log_csv)
    ci = credible_interval(samples, 0.9)
    summary_json.write_text(json.dumps({
        "summary_mode": args.summaries,
        "mean": samples.mean(axis=0).tolist(),
        "std": samples.std(axis=0).tolist(),
        "ci90_low": ci[0].tolist(),
        "ci90_high": ci[1].tolist(),
        "leakage": leak,
        "epochs": builder.log.epochs_run,
        "best_epoch": builder.log.best_epoch,
        "simulation_failures": len(batch.failures),
    }, indent=1))
    write_manifest(out, "infer", args, args.seed, inputs=[args.spec, args.obs],
                   outputs=[ckpt, samples_csv, log_csv, summary_json])
    print(f"posterior mean {np.round(samples.mean(axis=0), 5).tolist()}, leakage {leak:.3f}; wrote {out}")


def cmd_sbc(args):
    from lmsbi import rng as rngmod
    from lmsbi.analysis import svg_plot
    from lmsbi.io import load_spec
    from lmsbi.market import BehaviouralParams, simulate
    from lmsbi.npe import (PriorBox, condition, default_train_config, fit_posterior, posterior_sample,
                           run_simulation_batch, sample_prior)
    from lmsbi.sbc import run_sbc

    prior = PriorBox()
    spec = load_spec(args.spec)
    cfg = _sim_config(args)

    def simulator(theta, seed):
        return simulate(spec, BehaviouralParams.from_array(theta), replace(cfg, seed=seed))

    if args.method == "prior":
        def factory(data, L, seed):
            return prior.sample(L, rngmod.generator(seed))
    else:
        thetas = sample_prior(prior, args.sims, rngmod.child_seed(args.seed, 10))
        batch = run_simulation_batch(spec, cfg, thetas, master_seed=rngmod.child_seed(args.seed, 11),
                                     workers=args.workers)
        tcfg = replace(default_train_config(args.summaries), seed=args.seed, max_epochs=args.max_epochs)
        builder = fit_posterior(batch, args.summaries, tcfg, prior=prior)

        def factory(data, L, seed):
            return posterior_sample(condition(builder, data), L, seed)

    report = run_sbc(prior, simulator, factory, N=args.trials, L=args.draws, seed=args.seed, bins=args.bins,
                     names=tuple(PARAM_HEADER))
    out = _out_dir(args.out)
    rj, rc = out / "sbc_report.json", out / "sbc_histograms.csv"
    report.to_json(rj)
    report.to_csv(rc)
    outputs = [rj, rc]
    if args.svg:
        for k, name in enumerate(PARAM_HEADER):
            p = out / f"sbc_{name}.svg"
            b = np.arange(report.bins)
            svg_plot(p, {"count": (b, report.counts[k]), "band low": (b, report.band_low),
                         "band high": (b, report.band_high)}, xlabel="rank bin", ylabel="count",
                     title=f"SBC {name}")
            outputs.append(p)
    write_manifest(out, "sbc", args, args.seed, inputs=[args.spec], outputs=outputs)
    for k, name in enumerate(PARAM_HEADER):
        print(f"{name}: chi2 p={report.p_values[k]:.4f} in-band={report.in_band_fraction[k]:.2f} "
              f"pattern={report.patterns[k]}")


def cmd_bench(args):
    from lmsbi.analysis import BenchConfig, bench_scaling, svg_plot

    cfg = BenchConfig(sims=args.sims, T=args.steps, training=not args.no_training, summary_mode=args.summaries,
                      max_epochs=args.max_epochs, seed=args.seed)
    res = bench_scaling(args.n, args.reps, cfg)
    out = _out_dir(args.out)
    bc, fj = out / "bench.csv", out / "fit.json"
    res.to_csv(bc)
    fj.write_text(json.dumps({**res.fit_dict(), "failures": {str(k): v for k, v in res.failures.items()}},
                             indent=1))
    outputs = [bc, fj]
    if args.svg:
        ns, means = res.mean_times("simulation")
        p = out / "bench_simulation.svg"
        svg_plot(p, {"simulation": (ns, means)}, xlabel="n", ylabel="seconds", title="simulation time vs n")
        outputs.append(p)
    write_manifest(out, "bench", args, args.seed, outputs=outputs)
    f = res.fit
    print(f"slope={f.slope:.4g} intercept={f.intercept:.4g} R2={f.r2:.4f} "
          f"pearson(train time, epochs)={res.training_epochs_pearson:.3f} (reference 0.93)")


def cmd_analyze(args):
    from lmsbi.analysis import hdr_sample, pattern_cluster, posterior_correlation
    from lmsbi.io import load_spec, read_samples_csv, write_matrix_csv
    from lmsbi.npe import condition, load_posterior

    out = _out_dir(args.out)
    inputs, outputs = [], []
    if args.kind == "correlation":
        if not args.samples:
            raise UsageError("correlation needs --samples")
        S = read_samples_csv(args.samples)
        C = posterior_correlation(S)
        p = out / "correlation.json"
        p.write_text(json.dumps({"parameters": PARAM_HEADER, "matrix": C.tolist()}, indent=1))
        inputs, outputs = [args.samples], [p]
        print(np.array2string(C, precision=3))
    elif args.kind == "hdr":
        if not (args.posterior and args.obs):
            raise UsageError("hdr needs --posterior and --obs")
        post = condition(load_posterior(args.posterior), _load_obs(args.obs))
        sel = hdr_sample(post, args.count, args.seed)
        p = out / "hdr_samples.csv"
        write_matrix_csv(p, [*PARAM_HEADER, "log_prob"], np.c_[sel.samples, sel.log_prob])
        inputs, outputs = [args.posterior, args.obs], [p]
        print(f"selected {sel.samples.shape[0]} draws; min log-density {sel.log_prob.min():.3f}")
    else:
        if not (args.spec and args.samples):
            raise UsageError("cluster needs --spec and --samples")
        spec = load_spec(args.spec)
        sets = read_samples_csv(args.samples)
        cfg = _sim_config(args)
        res = pattern_cluster(spec, sets[:, :2], r=args.r, cfg=cfg, seed=args.seed)
        pc, pj = out / "clusters.csv", out / "clusters.json"
        res.to_csv(pc)
        pj.write_text(json.dumps({"clusters": res.summaries, "failures": {str(k): v for k, v in res.failures.items()}},
                                 indent=1))
        inputs, outputs = [args.spec, args.samples], [pc, pj]
        for s in res.summaries:
            print(s)
    write_manifest(out, f"analyze {args.kind}", args, args.seed, inputs=inputs, outputs=outputs)


# parser -----------------------------------------------------------------
def _add_sim_flags(p, steps=True):
    if steps:
        p.add_argument("--steps", type=_positive, default=600)
    p.add_argument("--shock-at", type=_shock, default=DEFAULT_SHOCK, help="shock step, or 'none'")
    p.add_argument("--shock-mode", choices=("step", "sigmoid"), default="step")
    p.add_argument("--burn-in", type=int, default=0)
    p.add_argument("--vacancy-lifetime", type=_positive, default=None)


def build_parser():
    from lmsbi.flow import CKPT_VERSION
    from lmsbi.io import TRAJ_VERSION
    from lmsbi.market import DEFAULT_MICRO_BUDGET

    ap = argparse.ArgumentParser(prog="lmsbi", description="Labour-market ABM simulation and inference.")
    ap.add_argument("--version", action="version",
                    version=f"lmsbi {__version__} (trajectory format {TRAJ_VERSION}, checkpoint format {CKPT_VERSION})")
    ap.add_argument("--config", help="JSON file of flag defaults for the chosen command")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-market", help="write a synthetic market spec")
    p.add_argument("--n", type=_positive, required=True)
    p.add_argument("--blocks", type=_positive, default=2)
    p.add_argument("--intra-mass", type=float, default=0.8)
    p.add_argument("--epsilon", type=float, default=0.01)
    p.add_argument("--workers", type=_positive, default=100, help="workers per occupation")
    p.add_argument("--p-max", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_market)

    p = sub.add_parser("simulate", help="simulate trajectories")
    p.add_argument("--spec", required=True)
    p.add_argument("--theta", type=_theta, default=_theta(DEFAULT_THETA))
    _add_sim_flags(p)
    p.add_argument("--micro", action="store_true", help="also record per-step transition matrices")
    p.add_argument("--sims", type=_positive, default=1)
    p.add_argument("--bytes-per-element", type=_positive, default=8)
    p.add_argument("--memory-budget", type=_positive, default=DEFAULT_MICRO_BUDGET)
    p.add_argument("--format", choices=("bin", "csv"), default="bin")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("infer", help="train a posterior and sample it for an observation")
    p.add_argument("--spec", required=True)
    p.add_argument("--obs", required=True, help="observed trajectory (.lmtr)")
    p.add_argument("--summaries", choices=("handcrafted", "learned"), default="handcrafted")
    p.add_argument("--stat-mode", choices=("per_series", "per_step"), default="per_series")
    p.add_argument("--sims", type=_positive, default=1000)
    p.add_argument("--samples", type=_positive, default=1000)
    p.add_argument("--max-epochs", type=_positive, default=500)
    p.add_argument("--learning-rate", type=float, default=None,
                   help="default 5e-4 for handcrafted and 2e-3 for learned summaries")
    p.add_argument("--workers", type=_positive, default=1)
    _add_sim_flags(p, steps=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("sbc", help="simulation-based calibration")
    p.add_argument("--spec", required=True)
    p.add_argument("--method", choices=("npe", "prior"), default="npe",
                   help="'prior' uses the prior as the posterior (self-check)")
    p.add_argument("--summaries", choices=("handcrafted", "learned"), default="handcrafted")
    p.add_argument("--trials", type=_positive, default=300)
    p.add_argument("--draws", type=_positive, default=100)
    p.add_argument("--bins", type=_positive, default=20)
    p.add_argument("--sims", type=_positive, default=1000)
    p.add_argument("--max-epochs", type=_positive, default=500)
    p.add_argument("--workers", type=_positive, default=1)
    _add_sim_flags(p)
    p.add_argument("--svg", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sbc)

    p = sub.add_parser("bench", help="wall-time scaling benchmark")
    p.add_argument("--n", type=_ints, default=[10, 35, 60, 110, 160])
    p.add_argument("--reps", type=_positive, default=25)
    p.add_argument("--sims", type=_positive, default=50)
    p.add_argument("--steps", type=_positive, default=600)
    p.add_argument("--summaries", choices=("handcrafted", "learned"), default="handcrafted")
    p.add_argument("--max-epochs", type=_positive, default=50)
    p.add_argument("--no-training", action="store_true")
    p.add_argument("--svg", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("analyze", help="posterior correlation, HDR draws or pattern clustering")
    p.add_argument("kind", choices=("correlation", "hdr", "cluster"))
    p.add_argument("--samples", help="samples CSV with columns delta_u,delta_v,r")
    p.add_argument("--posterior", help="posterior checkpoint from infer")
    p.add_argument("--obs")
    p.add_argument("--spec")
    p.add_argument("--count", type=_positive, default=100)
    p.add_argument("--r", type=float, default=0.55)
    _add_sim_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)
    return ap, sub


def _parse(argv):
    ap, sub = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        try:
            overrides = json.loads(Path(known.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {known.config}: {exc}") from exc
        if not isinstance(overrides, dict):
            raise UsageError("config must be a JSON object")
        command = next((a for a in argv if a in sub.choices), None)
        if command is None:
            return ap.parse_args(argv)
        overrides = {k.replace("-", "_"): v for k, v in overrides.items()}
        sub.choices[command].set_defaults(**overrides)
        # config values satisfy required flags
        for action in sub.choices[command]._actions:
            if action.dest in overrides:
                action.required = False
    return ap.parse_args(argv)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _parse(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ResourceError as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except LmsbiError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
