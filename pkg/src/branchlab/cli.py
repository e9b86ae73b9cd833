"""Command-line front end.

    branchlab analyze  MODEL [--out FILE]
    branchlab simulate MODEL --steps K --reps R --seed S --out DIR
    branchlab limit    MODEL --T T --dt DT --reps R --seed S --out DIR
    branchlab converge MODEL --n-list 50,100,200 --T T --reps R --seed S --out DIR

Exit codes: 0 success / all families pass, 1 a statistical family failed,
2 usage or validation error.  ``--figures`` additionally renders PNGs next to
the data files.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import harness, limit_sde, moments, reporting
from .errors import BranchlabError
from .model import load_model, validate_critical_indecomposable
from .simulator import resolve_threads, simulate_batch

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _positive_float(text):
    try:
        x = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not x > 0:
        raise argparse.ArgumentTypeError(f"must be positive: {text!r}")
    return x


def _n_list(text):
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {text!r}")
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("n values must be positive")
    return vals


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"model file not found: {path}")
    return load_model(p)


def _require_critical(model):
    if not model.critical_indecomposable:
        raise UsageError("not critical" if model.irreducible else "decomposable: not critical indecomposable")


# -- commands ----------------------------------------------------------------------------


def cmd_analyze(args) -> int:
    model = _load(args.model)
    report = validate_critical_indecomposable(model)
    data = {"model": model.to_dict(), "p": model.p, "rho": model.rho,
            "m_xi": model.m_xi, "m_eps": model.m_eps,
            "structure": model.structure.to_dict() if model.structure is not None else None,
            "validation": report}
    if model.structure is not None and model.critical:
        data["sde_coefficients"] = limit_sde.sde_coefficients(model).to_dict()
    if not model.irreducible:
        print("warning: decomposable mean matrix (not irreducible)", file=sys.stderr)
    meta = reporting.metadata("analyze", model=model)
    text = reporting.dumps_document(meta, data)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.figures:
        reporting_dir = _out_dir(args.figures)
        from . import plotting
        plotting.plot_mean_matrix(model, reporting_dir / "mean_matrix.png")
    return EXIT_OK


def cmd_simulate(args) -> int:
    model = _load(args.model)
    out = _out_dir(args.out)
    batch = simulate_batch(model, args.steps, args.reps, args.seed, threads=args.threads,
                           mode=args.mode)
    meta = reporting.metadata("simulate", seed=args.seed, model=model, steps=args.steps,
                              reps=args.reps, mode=args.mode)
    p, K = model.p, args.steps
    rows = ([j, k] + batch.states[j, k].tolist() for j in range(batch.reps) for k in range(K + 1))
    reporting.write_table(out / "trajectories.csv", ["rep", "k"] + [f"X{i}" for i in range(p)],
                          rows, meta)

    X = batch.states.astype(float)
    emp_mean = X.mean(axis=0)
    oracle_mean = moments.mean_sequence(model, K)
    oracle_var = moments.variance_sequence(model, K)
    cols = ["k"] + [f"mean{i}" for i in range(p)] + [f"oracle_mean{i}" for i in range(p)]
    pairs = [(a, b) for b in range(p) for a in range(p)]  # column-major
    cols += [f"var{a}{b}" for a, b in pairs] + [f"oracle_var{a}{b}" for a, b in pairs]
    mrows = []
    for k in range(K + 1):
        if batch.reps > 1:
            C = np.cov(X[:, k, :], rowvar=False).reshape(p, p)
        else:
            C = np.full((p, p), np.nan)
        mrows.append([k] + emp_mean[k].tolist() + oracle_mean[k].tolist()
                     + [C[a, b] for a, b in pairs] + [oracle_var[k][a, b] for a, b in pairs])
    reporting.write_table(out / "moments.csv", cols, mrows, meta)
    if args.figures:
        from . import plotting
        plotting.plot_moments(np.arange(K + 1), emp_mean, oracle_mean, out / "moments.png")
    print(f"wrote {out / 'trajectories.csv'} and {out / 'moments.csv'}")
    return EXIT_OK


def cmd_limit(args) -> int:
    model = _load(args.model)
    _require_critical(model)
    if args.dt >= args.T:
        raise UsageError("invalid step: dt must be smaller than T")
    out = _out_dir(args.out)
    coef = limit_sde.sde_coefficients(model)
    meta = reporting.metadata("limit", seed=args.seed, model=model, T=args.T, dt=args.dt,
                              reps=args.reps)
    reporting.write_json(out / "coefficients.json", meta, coef.to_dict())
    paths = limit_sde.simulate_Z_classes(coef, args.T, args.dt, args.seed, args.reps,
                                         G=args.grid, threads=args.threads)
    lim = limit_sde.assemble_limit(paths, model)
    r, p = model.r, model.p
    cols = (["rep", "t"] + [f"Z{i}" for i in range(r)] + [f"Y{i}" for i in range(p)]
            + [f"X{l}_{i}" for l in range(r) for i in range(p)])
    rows = ([j, t] + lim.Z[j, g].tolist() + lim.Y[j, g].tolist() + lim.X[j, g].tolist()
            for j in range(args.reps) for g, t in enumerate(lim.grid))
    reporting.write_table(out / "limit_paths.csv", cols, rows, meta)
    if args.figures:
        from . import plotting
        plotting.plot_paths(lim.grid, lim.Z, out / "limit_Z.png",
                            labels=[f"Z class {i}" for i in range(r)])
    print(f"wrote {out / 'coefficients.json'} and {out / 'limit_paths.csv'}")
    return EXIT_OK


def cmd_converge(args) -> int:
    model = _load(args.model)
    _require_critical(model)
    out = _out_dir(args.out)
    rep = harness.run_convergence(model, args.n_list, args.T, args.reps, args.seed,
                                  threads=args.threads, lindeberg_reps=args.lindeberg_reps,
                                  alpha=args.alpha)
    meta = reporting.metadata("converge", seed=args.seed, model=model, n_list=args.n_list,
                              T=args.T, reps=args.reps)
    reporting.write_json(out / "report.json", meta, rep.to_dict())

    coef = limit_sde.sde_coefficients(model)
    for n in rep.n_values:
        sample = harness.scaled_sample(model, n, args.T, args.reps,
                                       harness.derive_seed(args.seed, n), args.threads)
        proj = sample.projections(coef)
        cols = ["rep"] + [f"proj{c}" for c in range(model.r)] + \
            [f"block{l}_{i}" for l in range(model.r) for i in range(model.p)]
        rows = ([j] + proj[j].tolist() + sample.values[j].ravel().tolist()
                for j in range(sample.reps))
        reporting.write_table(out / f"samples_n{n}.csv", cols, rows, meta)
        if args.figures and n == rep.n_values[-1]:
            from . import plotting
            for c in range(model.r):
                try:
                    law = coef.projection_marginal(c, args.T)
                except BranchlabError:
                    continue
                plotting.plot_ecdf(proj[:, c], law.cdf, out / f"ecdf_class{c}.png",
                                   title=f"class {c}, n = {n}")
    if args.figures and len(rep.n_values) >= 2:
        from . import plotting
        series = {k: v["values"] for k, v in rep.families.items() if "values" in v}
        if series:
            plotting.plot_trend(rep.n_values, series, out / "trends.png")

    for note in rep.notes:
        print(f"note: {note}")
    for name, fam in rep.families.items():
        print(f"{name}: {'PASS' if fam.get('pass') else 'FAIL'}")
    print(f"overall: {'PASS' if rep.passed else 'FAIL'}")
    return EXIT_OK if rep.passed else EXIT_FAIL


# -- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="branchlab", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"branchlab {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $BRANCHLAB_THREADS or 1)")
    common.add_argument("--figures", nargs="?", const=True, default=False,
                        help="also render PNG figures (analyze: target directory)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", parents=[common], help="cyclic structure and validation report")
    p.add_argument("model")
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate", parents=[common], help="trajectories and moment tables")
    p.add_argument("model")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["aggregate", "individual"], default="aggregate")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("limit", parents=[common], help="SDE coefficients and limit paths")
    p.add_argument("model")
    p.add_argument("--T", type=_positive_float, default=1.0)
    p.add_argument("--dt", type=_positive_float, default=None)
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", type=int, default=100, help="recorded grid intervals")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_limit)

    p = sub.add_parser("converge", parents=[common], help="full convergence harness")
    p.add_argument("model")
    p.add_argument("--n-list", type=_n_list, default=[50, 100, 200])
    p.add_argument("--T", type=_positive_float, default=1.0)
    p.add_argument("--reps", type=int, default=10_000)
    p.add_argument("--lindeberg-reps", type=int, default=1000)
    p.add_argument("--alpha", type=_positive_float, default=harness.ALPHA)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_converge)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    args.threads = resolve_threads(args.threads)
    if getattr(args, "dt", "unset") is None:
        args.dt = 1e-3 * args.T
    for name in ("steps", "reps"):
        val = getattr(args, name, None)
        if val is not None and (val < 0 or (name == "reps" and val < 1)):
            print(f"error: --{name} must be {'positive' if name == 'reps' else 'nonnegative'}",
                  file=sys.stderr)
            return EXIT_USAGE
    if args.figures and args.command == "analyze" and args.figures is True:
        args.figures = "."
    try:
        return args.func(args)
    except (UsageError, BranchlabError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
