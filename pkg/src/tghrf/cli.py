"""
Command-line interface.

    tghrf simulate  --out DIR [--nx 39 --ny 39 --g 0.5 --h 0.1 --reps 5]
    tghrf sblue     --data FIELD --covariates COV --out DIR [--predict COV] [--rank L]
    tghrf fit       --mode {full,lowrank,sparse} --data FIELD --out DIR
    tghrf lmoments  --data FIELD --out DIR
    tghrf cluster   --input LMOMENTS --out DIR (--k 7 | --select-k 3..10)
    tghrf bench     --protocol {lowrank-B,sparse-C} --out DIR [--set key=value ...]

Common options: ``--seed`` (default ``$TGH_SEED`` or 0), ``--threads``
(worker pool for independent days/sites/replications; numerical results
do not depend on it) and ``--config FILE`` (``key=value`` lines giving
option defaults; command-line flags win).

Exit status: 0 success, 2 bad input (with file:line:column for CSV
problems), 3 numerical failure, 4 other estimation failure.
"""

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .errors import (ConditioningError, CsvFormatError, DecompositionError, InputError,
                     NumericError, TghError)

EXIT_INPUT, EXIT_NUMERIC, EXIT_FIT = 2, 3, 4
NOT_HASHED = {"threads", "out", "config", "func"}


def _int_range(text):
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(v) for v in text.split(",")]


def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _float_pair(text):
    a, b = (float(v) for v in text.split(","))
    return (a, b)


def _common(p):
    p.add_argument("--seed", type=int, default=None,
                   help="random seed (default: $TGH_SEED or 0)")
    p.add_argument("--threads", type=int, default=1, help="worker threads")
    p.add_argument("--config", type=Path, default=None, help="key=value defaults file")
    p.add_argument("--out", type=Path, required=True, help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(prog="tghrf", description="Tukey g-and-h random fields")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate TGH random fields on a grid")
    _common(p)
    p.add_argument("--nx", type=int, default=39)
    p.add_argument("--ny", type=int, default=39)
    p.add_argument("--cell", type=float, default=1.0)
    for name, default in (("a", 0.0), ("b", 1.0), ("g", 0.0), ("h", 0.0), ("r", 1.0),
                          ("nugget", 0.0)):
        p.add_argument(f"--{name}", type=float, default=default)
    p.add_argument("--reps", type=int, default=1, help="number of days (replications)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sblue", help="regression S-BLUE per day")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="field CSV x,y,t,value")
    p.add_argument("--covariates", type=Path, required=True, help="covariate CSV x,y,cov...")
    p.add_argument("--predict", type=Path, default=None, help="covariate CSV of target sites")
    p.add_argument("--rank", type=int, default=None, help="rank-reduced mode with L pairs")
    p.add_argument("--landmarks", type=int, default=None, help="Nystrom landmarks")
    p.add_argument("--boxcox", default=None, metavar="COLUMN",
                   help="Box-Cox linearize this covariate against the response")
    p.add_argument("--boxcox-per-day", action="store_true",
                   help="refit the Box-Cox exponent for each day")
    p.add_argument("--pool-adjacent-days", type=int, default=0, metavar="MIN_OBS",
                   help="add the neighbouring days when a day has fewer observations")
    p.add_argument("--days", type=_int_list, default=None)
    p.set_defaults(func=cmd_sblue)

    p = sub.add_parser("fit", help="fit the TGH random field")
    _common(p)
    p.add_argument("--mode", choices=("full", "lowrank", "sparse"), required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--days", type=_int_list, default=None)
    p.add_argument("--rank", type=int, default=100, help="low-rank L")
    p.add_argument("--basis", choices=("exact", "nystrom"), default="exact")
    p.add_argument("--budget", type=int, default=200, help="local design budget")
    p.add_argument("--smooth", action="store_true", help="smooth local surfaces")
    p.add_argument("--interval", type=int, default=1,
                   help="sparse: fit every INTERVAL-th day and average")
    p.add_argument("--stride", type=int, default=1, help="sparse: fit every STRIDE-th site")
    p.add_argument("--max-iter", type=int, default=50)
    p.add_argument("--no-nugget", action="store_true", help="full: no nugget")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("lmoments", help="per-site l-moments and l-moment matching")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.set_defaults(func=cmd_lmoments)

    p = sub.add_parser("cluster", help="k-means over moment surfaces")
    _common(p)
    p.add_argument("--input", type=Path, required=True, help="lmoments CSV")
    p.add_argument("--features", default="a,b,g,h")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--select-k", type=_int_range, default=None, metavar="LO..HI")
    p.add_argument("--reference", type=_float_pair, default=None, metavar="X,Y")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("bench", help="replication experiments")
    _common(p)
    p.add_argument("--protocol", choices=("lowrank-B", "sparse-C"), required=True)
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a protocol setting (lists comma-separated)")
    p.set_defaults(func=cmd_bench)
    return parser, sub


def _read_config(path):
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CsvFormatError(path, lineno, 1, "expected key=value")
            k, v = line.split("=", 1)
            out[k.strip().replace("-", "_")] = v.strip()
    return out


def _apply_config(parser, sub, argv):
    pre, _ = parser.parse_known_args(argv)
    if getattr(pre, "config", None) is None:
        return parser.parse_args(argv)
    if not pre.config.exists():
        raise InputError(f"{pre.config}: no such file")
    values = _read_config(pre.config)
    sp = sub.choices[pre.command]
    known = {a.dest: a for a in sp._actions}
    defaults = {}
    for k, v in values.items():
        if k not in known or k in ("config", "help"):
            raise InputError(f"{pre.config}: unknown option {k!r} for {pre.command}")
        act = known[k]
        if isinstance(act, argparse._StoreTrueAction):
            defaults[k] = v.lower() in ("1", "true", "yes", "on")
        elif act.type is not None:
            defaults[k] = act.type(v)
        else:
            defaults[k] = v
        act.required = False
    sp.set_defaults(**defaults)
    return parser.parse_args(argv)


def _mapper(threads):
    from .sparse import thread_map

    return thread_map(max(1, int(threads)))


def _meta(args):
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
           if k not in NOT_HASHED}
    return {"seed": args.seed, "config": cfg}


# ---------------------------------------------------------------------------


def cmd_simulate(args):
    from .field import GridSpec
    from .kernels import ExpKernelParams
    from .simgen import SimConfig, simulate_tgh_field
    from .tgh import TghParams

    grid = GridSpec((0.0, 0.0), args.cell, args.nx, args.ny)
    cfg = SimConfig(grid, TghParams(args.a, args.b, args.g, args.h),
                    ExpKernelParams.unit(args.r, args.nugget), args.seed, args.reps)
    frames = simulate_tgh_field(cfg)
    io.write_field_csv(args.out / "field.csv", grid.coords(), [f.values for f in frames],
                       **_meta(args))
    return [args.out / "field.csv"]


def _days(field, wanted):
    if wanted is None:
        return list(field.days)
    missing = [t for t in wanted if t not in set(field.days.tolist())]
    if missing:
        raise InputError(f"day(s) {missing} not in the data")
    return list(wanted)


def cmd_sblue(args):
    from .field import as_coords
    from .kernels import ExpKernelParams, choose_landmarks, nystrom_eigs, robust_variogram_wls
    from .sblue import boxcox_fit_transform, boxcox_transform, gls_fit, sblue_predict

    field = io.read_field_csv(args.data)
    cxy, C, names = io.read_covariate_csv(args.covariates)
    pred = io.read_covariate_csv(args.predict) if args.predict else None
    if pred is not None and pred[2] != names:
        raise InputError(f"prediction covariates {pred[2]} differ from {names}")
    bc = None
    if args.boxcox is not None:
        if args.boxcox not in names:
            raise InputError(f"Box-Cox column {args.boxcox!r} not among {names}")
        bc = names.index(args.boxcox)
    days = _days(field, args.days)

    def day_data(t):
        if args.pool_adjacent_days:
            xy, y = io.pool_adjacent_days(field, t, args.pool_adjacent_days)
        else:
            xy, y, _ = field.day(t)
        return xy, y, C[io.match_sites(xy, cxy)]

    lam_global = None
    if bc is not None and not args.boxcox_per_day:
        parts = [day_data(t) for t in days]
        lam_global, _ = boxcox_fit_transform(np.concatenate([p[2][:, bc] for p in parts]),
                                             np.concatenate([p[1] for p in parts]))

    def run(t):
        xy, y, X = day_data(t)
        X = X.copy()
        lam = lam_global
        if bc is not None:
            if lam is None:
                lam, X[:, bc] = boxcox_fit_transform(X[:, bc], y)
            else:
                X[:, bc] = boxcox_transform(X[:, bc], lam)
        D = np.column_stack([np.ones(len(y)), X])
        ols, *_ = np.linalg.lstsq(D, y, rcond=None)
        kern = robust_variogram_wls(xy, y - D @ ols).params
        basis = None
        if args.rank:
            m = args.landmarks or min(len(y), max(2 * args.rank, 500))
            basis = nystrom_eigs(xy, kern, choose_landmarks(len(y), m, args.seed + int(t)),
                                 args.rank)
        model = gls_fit(D, y, kern, xy, basis)
        coef = [[int(t), n, model.z_hat[i], model.t_values[i]]
                for i, n in enumerate(["intercept"] + names)]
        prows = []
        if pred is not None:
            pxy, PX, _ = pred
            PX = PX.copy()
            if bc is not None:
                PX[:, bc] = boxcox_transform(PX[:, bc], lam)
            yhat = sblue_predict(as_coords(pxy), np.column_stack([np.ones(len(pxy)), PX]), model)
            prows = [[x, yy, int(t), v] for (x, yy), v in zip(pxy, np.atleast_1d(yhat))]
        krow = [int(t), kern.tau2, kern.sigma2, kern.r, lam if lam is not None else np.nan]
        return coef, prows, krow

    results = _mapper(args.threads)(run, days)
    meta = _meta(args)
    outs = [io.write_csv(args.out / "coefficients.csv", ["t", "name", "estimate", "t_value"],
                         [r for c, _, _ in results for r in c], **meta),
            io.write_csv(args.out / "kernels.csv", ["t", "tau2", "sigma2", "r", "boxcox_lambda"],
                         [k for _, _, k in results], **meta)]
    if pred is not None:
        outs.append(io.write_csv(args.out / "predictions.csv", ["x", "y", "t", "prediction"],
                                 [r for _, p, _ in results for r in p], **meta))
    return outs


PARAMS = ("a", "b", "g", "h")
LOWRANK_COLUMNS = (["day", "a", "b", "g", "h"] + [f"ci_low_{p}" for p in PARAMS]
                   + [f"ci_high_{p}" for p in PARAMS])


def cmd_fit(args):
    field = io.read_field_csv(args.data)
    days = _days(field, args.days)
    mapper = _mapper(args.threads)
    meta = _meta(args)
    if args.mode == "full":
        from .full import fit_full

        def run(t):
            xy, y, _ = field.day(t)
            m = fit_full(xy, y, max_iter=args.max_iter, fit_nugget=not args.no_nugget)
            k = m.kernel
            return ([int(t), m.params.a, m.params.b, m.params.g, m.params.h,
                     k.tau2, k.sigma2, k.r, m.loglik] + list(m.ci_low) + list(m.ci_high)
                    + [m.iterations, int(m.converged)])

        cols = (["day", "a", "b", "g", "h", "tau2", "sigma2", "r", "loglik"]
                + [f"ci_low_{p}" for p in PARAMS] + [f"ci_high_{p}" for p in PARAMS]
                + ["iterations", "converged"])
        return [io.write_csv(args.out / "params_full.csv", cols, mapper(run, days), **meta)]

    if args.mode == "lowrank":
        from .lowrank import fit_lowrank, make_lowrank_spec

        specs = {}

        def spec_for(xy):
            key = xy.tobytes()
            if key not in specs:
                specs[key] = make_lowrank_spec(xy, min(args.rank, len(xy)), method=args.basis,
                                               seed=args.seed)
            return specs[key]

        prepared = []
        for t in days:
            xy, y, _ = field.day(t)
            prepared.append((t, y, spec_for(np.ascontiguousarray(xy))))

        def run(item):
            t, y, spec = item
            m = fit_lowrank(y, spec, max_iter=args.max_iter)
            main = [int(t), m.params.a, m.params.b, m.params.g, m.params.h]
            main += list(m.ci_low) + list(m.ci_high)
            return main, [int(t), m.m, spec.r, spec.L, m.loglik, m.iterations, int(m.converged)]

        res = mapper(run, prepared)
        return [io.write_csv(args.out / "params_lowrank.csv", LOWRANK_COLUMNS,
                             [r for r, _ in res], **meta),
                io.write_csv(args.out / "lowrank_details.csv",
                             ["day", "m", "r", "L", "loglik", "iterations", "converged"],
                             [d for _, d in res], **meta)]

    from .sparse import fit_sparse_field

    step = max(1, args.interval)
    fit_days = days[::step]
    per_day = []
    for t in fit_days:
        xy, y, idx = field.day(t)
        targets = np.arange(0, len(y), max(1, args.stride))
        res = fit_sparse_field(xy, y, budget=args.budget, smooth=args.smooth,
                               targets=targets, map_fn=mapper)
        g = res.g_smooth if args.smooth else res.g
        h = res.h_smooth if args.smooth else res.h
        r = res.r_smooth if args.smooth else res.r
        per_day.append((idx[targets], np.column_stack([res.a, res.b, g, h, r,
                                                       res.design_size, res.flag])))
    # average over the fitted days, site by site
    nsite = len(field.coords)
    acc = np.zeros((nsite, 7))
    cnt = np.zeros(nsite)
    flag = np.zeros(nsite, dtype=bool)
    for sites, vals in per_day:
        ok = np.all(np.isfinite(vals[:, :5]), axis=1)
        acc[sites[ok]] += vals[ok]
        cnt[sites[ok]] += 1
        flag[sites] |= vals[:, 6].astype(bool) | ~ok
    rows = []
    for i in np.flatnonzero((cnt > 0) | flag):
        v = acc[i] / cnt[i] if cnt[i] else np.full(7, np.nan)
        x, y = field.coords[i]
        rows.append([x, y, v[0], v[1], v[2], v[3], v[4], int(round(v[5])) if cnt[i] else 0,
                     int(flag[i])])
    return [io.write_csv(args.out / "params_sparse.csv",
                         ["x", "y", "a", "b", "g", "h", "r", "design_size", "flag"], rows,
                         extra={"days": ",".join(str(int(t)) for t in fit_days)}, **meta)]


def cmd_lmoments(args):
    from .lmoments import lmoment_match

    field = io.read_field_csv(args.data)

    def run(i):
        v = field.values[:, i]
        v = v[np.isfinite(v)]
        x, y = field.coords[i]
        if v.size < 4 or np.ptp(v) == 0:
            return [x, y] + [np.nan] * 8 + [v.size, 1]
        p, info = lmoment_match(v, full_output=True, warn=False)
        lm = info["lmoments"]
        return [x, y, p.a, p.b, p.g, p.h, lm.l1, lm.l2, lm.tau3, lm.tau4, v.size,
                int(info["flag"])]

    rows = _mapper(args.threads)(run, range(len(field.coords)))
    cols = ["x", "y", "a", "b", "g", "h", "l1", "l2", "tau3", "tau4", "n", "flag"]
    return [io.write_csv(args.out / "lmoments.csv", cols, rows, **_meta(args))]


def cmd_cluster(args):
    from .clustering import kmeans, select_k, separation_D, standardize

    tab = io.read_table(args.input, ("x", "y"))
    feats = [f.strip() for f in args.features.split(",") if f.strip()]
    for f in feats:
        if f not in tab.columns:
            raise InputError(f"{args.input}: no column {f!r}")
    xy = np.column_stack([io.column(tab, "x"), io.column(tab, "y")])
    F = np.column_stack([io.column(tab, f, missing_ok=True) for f in feats])
    ok = np.all(np.isfinite(F), axis=1)
    Z = standardize(F[ok], feats)
    meta = _meta(args)
    outs = []
    if args.select_k:
        table = select_k(Z, args.select_k, seed=args.seed)
        rows = list(zip(table.k, table.aic, table.bic, table.inertia))
        outs.append(io.write_csv(args.out / "select_k.csv", ["k", "aic", "bic", "inertia"], rows,
                                 extra={"best_aic": table.best_aic, "best_bic": table.best_bic,
                                        "elbow": table.elbow}, **meta))
    if args.k:
        res = kmeans(Z, args.k, seed=args.seed, coords=xy[ok], reference=args.reference)
        try:
            D = separation_D(res.labels, Z)
        except TghError:
            D = np.nan
        labels = np.zeros(len(xy), dtype=int)
        labels[ok] = res.labels
        rows = [[x, y, lab] for (x, y), lab in zip(xy, labels)]
        outs.append(io.write_csv(args.out / "labels.csv", ["x", "y", "label"], rows,
                                 extra={"separation_D": io.format_value(D),
                                        "features": ",".join(feats)}, **meta))
        crow = [[i + 1] + list(c) for i, c in enumerate(res.centers)]
        outs.append(io.write_csv(args.out / "centers.csv", ["label"] + feats, crow,
                                 extra={"inertia": io.format_value(res.inertia),
                                        "aic": io.format_value(res.aic),
                                        "bic": io.format_value(res.bic)}, **meta))
    if not outs:
        raise InputError("cluster needs --k or --select-k")
    return outs


def _parse_override(text):
    if "=" not in text:
        raise InputError(f"--set expects KEY=VALUE, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


TIMING = ("seconds",)


def cmd_bench(args):
    from .simgen import replicate_experiment

    overrides = dict(_parse_override(s) for s in args.set)
    overrides.setdefault("seed", args.seed)
    if args.reps is not None:
        overrides["reps"] = args.reps
    res = replicate_experiment(args.protocol, overrides, map_fn=_mapper(args.threads))
    meta = _meta(args)
    stem = args.protocol
    raw_cols = [c for c in res.raw[0] if c not in TIMING]
    sum_cols = [c for c in res.summary[0] if c not in ("seconds", "speedup_vs_full")]
    outs = [io.write_csv(args.out / f"{stem}_raw.csv", raw_cols, res.raw, **meta),
            io.write_csv(args.out / f"{stem}_summary.csv", sum_cols, res.summary, **meta)]
    # wall-clock numbers go to their own file; everything else is reproducible
    key = ["model", "L"] if args.protocol == "lowrank-B" else ["g", "h"]
    trows = [[r["rep"]] + [r[k] for k in key] + [r["seconds"]] for r in res.raw]
    outs.append(io.write_csv(args.out / f"{stem}_timing.csv", ["rep"] + key + ["seconds"], trows,
                             **meta))
    return outs


def main(argv=None):
    parser, sub = build_parser()
    try:
        args = _apply_config(parser, sub, argv)
    except InputError as exc:
        print(f"tghrf: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if args.seed is None:
        env = os.environ.get("TGH_SEED")
        try:
            args.seed = int(env) if env not in (None, "") else 0
        except ValueError:
            print(f"tghrf: input error: TGH_SEED={env!r} is not an integer", file=sys.stderr)
            return EXIT_INPUT
    from threadpoolctl import threadpool_limits

    try:
        # one BLAS thread everywhere: parallelism comes from the worker pool only,
        # so results cannot depend on --threads
        with threadpool_limits(1):
            args.func(args)
    except (CsvFormatError, InputError) as exc:
        print(f"tghrf: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericError, DecompositionError, ConditioningError) as exc:
        print(f"tghrf: numeric error in {args.command}: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return EXIT_NUMERIC
    except TghError as exc:
        print(f"tghrf: estimation error in {args.command}: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return EXIT_FIT
    return 0


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
