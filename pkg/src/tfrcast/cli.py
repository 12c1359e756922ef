"""Command-line front end: ``tfrcast <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or format
error, 3 integrity error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import pandas as pd

from .engine import ChainStore, ConfigurationError, IntegrityError, RunConfig
from .ingest import DataFormatError, load_raw, load_reference
from .measurement import UNBIASED_VR_COUNTRIES

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTEGRITY = 0, 1, 2, 3

PRESETS = {
    "production": dict(chains=3, iters=62000, thin=10, burnin=2000, sigma0_min=0.04,
                       iso_unbiased=",".join(map(str, UNBIASED_VR_COUNTRIES))),
}
RUN_DEFAULTS = dict(chains=3, iters=5000, thin=1, burnin=None, sigma0_min=None, iso_unbiased="")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _int_list(text: str) -> list[int]:
    if not text:
        return []
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _name_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()] if text else []


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _emit(df: pd.DataFrame, out, index=True):
    if out:
        df.to_csv(out, index=index)
    else:
        df.to_csv(sys.stdout, index=index)


# ---------------------------------------------------------------------------
# subcommands


def cmd_run(args):
    from .engine import run

    preset = PRESETS.get(args.preset, {})
    vals = {k: getattr(args, k) for k in RUN_DEFAULTS}
    for k, v in vals.items():
        if v is None:
            vals[k] = preset.get(k, RUN_DEFAULTS[k])
    covariates = _name_list(args.covariates)
    cont = _name_list(args.cont_covariates)
    raw = load_raw(args.raw_file, covariates, cont) if args.raw_file else None
    ref = load_reference(args.ref_file)
    cfg = RunConfig(
        output_dir=args.output_dir, n_chains=vals["chains"], iters=vals["iters"],
        thin=vals["thin"], burnin=vals["burnin"], annual=args.annual, ar_phase2=args.ar_phase2,
        uncertainty=args.uncertainty, sigma0_min=vals["sigma0_min"],
        unbiased_vr=tuple(_int_list(vals["iso_unbiased"])), seed=args.seed,
        parallel=args.parallel, covariates=tuple(covariates), cont_covariates=tuple(cont),
        source_column=args.source_column, start_year=args.start_year,
        present_year=args.present_year, replace_output=args.replace,
    )
    store = run(cfg, raw, ref)
    print(f"{store.n_chains} chains x {store.meta['iters']} iterations written to {store.root}")


def cmd_continue(args):
    from .engine import continue_run

    store = continue_run(args.output_dir, args.iters, parallel=args.parallel)
    print(f"{store.n_chains} chains now at {store.meta['iters']} iterations")


def cmd_extra(args):
    from .engine import run_extra

    store = ChainStore(args.output_dir)
    covariates = _name_list(args.covariates) if args.covariates is not None else None
    raw = None
    if args.raw_file:
        raw = load_raw(args.raw_file, covariates if covariates is not None else store.meta["covariates"],
                       store.meta["cont_covariates"])
    vr = _int_list(args.iso_unbiased) if args.iso_unbiased is not None else None
    run_extra(store, _int_list(args.countries), raw=raw, covariates=covariates,
              unbiased_vr=vr, iters=args.iters, burnin=args.burnin)
    print(f"re-estimated countries {args.countries} in {store.root}")


def cmd_predict(args):
    from .projection import predict

    ts = predict(args.output_dir, args.end_year, burnin=args.burnin, n_traj=args.nr_traj,
                 uncertainty=args.uncertainty, seed=args.seed)
    print(f"{ts.n_trajectories} trajectories per country to {ts.grid.end_year} written to "
          f"{Path(args.output_dir) / 'predictions'}")


def cmd_summarize(args):
    from .diagnostics import summarize

    names = _name_list(args.parameters) or None
    _emit(summarize(args.output_dir, names, args.country, args.thin, args.burnin), args.out)


def cmd_estimate(args):
    from .diagnostics import estimation_quantiles

    store = ChainStore(args.output_dir)
    levels = args.levels if args.levels else None
    mat, table = estimation_quantiles(store, args.country, levels if not args.matrix else None,
                                      args.thin, args.burnin)
    if args.matrix or table is None:
        _emit(pd.DataFrame(mat, columns=[str(y) for y in store.grid.years]), args.out, index=False)
    else:
        _emit(table, args.out)


def cmd_table(args):
    from .projection import DEFAULT_LEVELS, load_predictions, trajectory_table

    ts = load_predictions(args.output_dir)
    _emit(trajectory_table(ts, args.country, args.levels or DEFAULT_LEVELS), args.out)


def cmd_bias_sd(args):
    path = Path(args.output_dir) / "bias_sd.csv"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; bias and sd are fitted only in uncertainty runs")
    df = pd.read_csv(path)
    if args.country is not None:
        df = df[df["country_code"] == args.country]
        if df.empty:
            raise KeyError(f"no bias/sd rows for country {args.country}")
    _emit(df, args.out, index=False)


def cmd_diagnose(args):
    from .diagnostics import diagnose

    diag = diagnose(args.output_dir, thin=args.thin, burnin=args.burnin, express=args.express)
    bad = diag.report[~diag.report.converged]
    if args.out:
        diag.report.to_csv(args.out, index=False)
    print(f"{diag}; latent tfr converged share {diag.latent_share:.3f}; "
          f"{len(bad)} of {len(diag.report)} parameters above the threshold")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tfrcast", description="Estimate and project total fertility rates.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def store_arg(sp):
        sp.add_argument("--output-dir", required=True, help="simulation directory")

    r = sub.add_parser("run", help="fit measurement errors and run MCMC chains")
    store_arg(r)
    r.add_argument("--ref-file", required=True)
    r.add_argument("--raw-file")
    r.add_argument("--covariates", default="source,method")
    r.add_argument("--cont-covariates", default="")
    r.add_argument("--source-column", default="source")
    r.add_argument("--annual", action="store_true")
    r.add_argument("--ar-phase2", action="store_true")
    r.add_argument("--uncertainty", action="store_true")
    r.add_argument("--iso-unbiased", default=None, help="countries with unbiased VR, e.g. 124,840")
    r.add_argument("--chains", type=int)
    r.add_argument("--iters", type=int)
    r.add_argument("--thin", type=int)
    r.add_argument("--burnin", type=int, help="adaptation period in iterations")
    r.add_argument("--seed", type=int, default=1)
    r.add_argument("--parallel", action="store_true")
    r.add_argument("--sigma0-min", type=float)
    r.add_argument("--start-year", type=int)
    r.add_argument("--present-year", type=int)
    r.add_argument("--preset", choices=sorted(PRESETS))
    r.add_argument("--replace", action="store_true", help="overwrite an existing simulation")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("continue", help="extend every chain")
    store_arg(c)
    c.add_argument("--iters", type=int, required=True)
    c.add_argument("--parallel", action="store_true")
    c.set_defaults(func=cmd_continue)

    e = sub.add_parser("extra", help="re-estimate single countries against stored hyperparameters")
    store_arg(e)
    e.add_argument("--countries", required=True)
    e.add_argument("--raw-file")
    e.add_argument("--covariates")
    e.add_argument("--iso-unbiased")
    e.add_argument("--iters", type=int)
    e.add_argument("--burnin", type=int)
    e.set_defaults(func=cmd_extra)

    pr = sub.add_parser("predict", help="generate projection trajectories")
    store_arg(pr)
    pr.add_argument("--end-year", type=int, required=True)
    pr.add_argument("--burnin", type=int, default=0)
    pr.add_argument("--nr-traj", type=int, default=1000)
    pr.add_argument("--uncertainty", action=argparse.BooleanOptionalAction, default=None)
    pr.add_argument("--seed", type=int)
    pr.set_defaults(func=cmd_predict)

    def report_args(sp, country_required=False):
        store_arg(sp)
        sp.add_argument("--country", type=int, required=country_required)
        sp.add_argument("--out")

    s = sub.add_parser("summarize", help="posterior summary statistics")
    report_args(s)
    s.add_argument("--parameters", default="")
    s.add_argument("--thin", type=int, default=1)
    s.add_argument("--burnin", type=int, default=0)
    s.set_defaults(func=cmd_summarize)

    es = sub.add_parser("estimate", help="past TFR quantiles or draw matrix")
    report_args(es, True)
    es.add_argument("--levels", type=_float_list, default=[0.025, 0.1, 0.5, 0.9, 0.975])
    es.add_argument("--matrix", action="store_true", help="export the draw matrix instead")
    es.add_argument("--thin", type=int, default=1)
    es.add_argument("--burnin", type=int, default=0)
    es.set_defaults(func=cmd_estimate)

    t = sub.add_parser("table", help="projection quantile table of one country")
    report_args(t, True)
    t.add_argument("--levels", type=_float_list)
    t.set_defaults(func=cmd_table)

    b = sub.add_parser("bias-sd", help="fitted measurement bias and sd")
    report_args(b)
    b.set_defaults(func=cmd_bias_sd)

    d = sub.add_parser("diagnose", help="convergence diagnostics")
    store_arg(d)
    d.add_argument("--thin", type=int, default=1)
    d.add_argument("--burnin", type=int, default=0)
    d.add_argument("--express", action="store_true")
    d.add_argument("--out")
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (DataFormatError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
