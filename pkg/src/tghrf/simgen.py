"""
Synthetic TGH random fields and the two replication harnesses: a
low-rank versus full-likelihood comparison and the local (sparse)
estimator study on a 39 x 39 grid.
"""

import time
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .errors import DecompositionError, InputError, TghError
from .field import FieldFrame, GridSpec
from .full import fit_full
from .kernels import ExpKernelParams, cov_matrix, exact_eigs
from .lowrank import fit_lowrank, make_lowrank_spec
from .sparse import _start_range, fit_local_tgh, greedy_local_design
from .tgh import TghParams, tau_gh

DENSE_LIMIT = 10_000


@dataclass(frozen=True)
class SimConfig:
    grid: GridSpec = field(default_factory=lambda: GridSpec((0.0, 0.0), 1.0, 39, 39))
    params: TghParams = field(default_factory=TghParams)
    kernel: ExpKernelParams = field(default_factory=lambda: ExpKernelParams.unit(1.0))
    seed: int = 0
    reps: int = 1
    sampler: str = "auto"

    def __post_init__(self):
        if self.reps < 1:
            raise InputError(f"reps must be at least 1, got {self.reps}")
        if self.sampler not in ("auto", "cholesky", "eigen"):
            raise InputError(f"unknown sampler {self.sampler!r}")


def rep_generators(seed, reps):
    """Independent Philox streams, one per replication, from ``SeedSequence(seed)``."""
    return [np.random.Generator(np.random.Philox(s))
            for s in np.random.SeedSequence(seed).spawn(reps)]


@lru_cache(maxsize=4)
def _cholesky(coords_key, kernel):
    xy = np.frombuffer(coords_key).reshape(-1, 2)
    try:
        return np.linalg.cholesky(cov_matrix(xy, kernel))
    except np.linalg.LinAlgError as exc:
        raise DecompositionError(f"simulation covariance not positive definite: {exc}") from exc


@lru_cache(maxsize=2)
def _eigen_factor(coords_key, kernel, L):
    xy = np.frombuffer(coords_key).reshape(-1, 2)
    basis = exact_eigs(cov_matrix(xy, kernel), L)
    F = basis.vectors * np.sqrt(basis.values)
    # independent top-up keeps every marginal variance exactly at the sill
    resid = np.sqrt(np.maximum(kernel.sill - np.sum(F * F, axis=1), 0.0))
    return F, resid


def gaussian_field(coords, kernel, rng, sampler="auto", rank=None):
    """
    One draw of a zero-mean Gaussian field with covariance ``kernel``.

    ``cholesky`` uses the dense factor (cached per site set and kernel);
    ``eigen`` uses the leading ``rank`` eigen-pairs (all by default) plus an
    independent term restoring the marginal variance; ``auto`` picks
    Cholesky up to 10^4 sites.
    """
    xy = np.ascontiguousarray(coords, dtype=float)
    n = len(xy)
    if sampler == "auto":
        sampler = "cholesky" if n <= DENSE_LIMIT else "eigen"
    key = xy.tobytes()
    if sampler == "cholesky":
        return _cholesky(key, kernel) @ rng.standard_normal(n)
    F, resid = _eigen_factor(key, kernel, n if rank is None else int(rank))
    return F @ rng.standard_normal(F.shape[1]) + resid * rng.standard_normal(n)


def simulate_tgh_field(config, coords=None):
    """
    ``config.reps`` fields ``a + b tau(Z)`` with ``Z`` a unit-variance
    Gaussian field whose correlation is ``config.kernel`` rescaled to unit
    sill.  Replication ``t`` draws from its own stream, so any subset of
    replications can be regenerated alone.  ``coords`` overrides the grid
    sites (the frames then carry no grid).
    """
    xy = config.grid.coords() if coords is None else np.asarray(coords, dtype=float)
    corr = config.kernel.correlation()
    p = config.params
    frames = []
    for t, rng in enumerate(rep_generators(config.seed, config.reps)):
        z = gaussian_field(xy, corr, rng, config.sampler)
        y = p.a + p.b * tau_gh(z, p.g, p.h)
        frames.append(FieldFrame(config.grid if coords is None else None, t, y))
    return frames


# ---------------------------------------------------------------------------
# replication harnesses

SPARSE_C = {
    "nx": 39, "ny": 39, "r": 1.0, "a": 0.0, "b": 1.0,
    "g_values": (-0.5, 0.0, 0.5), "h_values": (0.0, 0.25, 0.5),
    "reps": 100, "budget": 200, "seed": 20180701,
}
LOWRANK_B = {
    "n": 1500, "extent": 40.0, "r": 3.0, "a": 0.0, "b": 1.0, "g": 0.4, "h": 0.1,
    "ranks": (200, 400, 600, 800, 1000, 1200), "reps": 1, "seed": 20180701,
    "full": True,
}


@dataclass
class ExperimentResult:
    protocol: str
    raw: list  # one dict per replication (per rank for lowrank-B)
    summary: list  # one dict per design cell
    config: dict


def _sparse_c_one(args):
    cfg, g, h, rep, rng = args
    grid = GridSpec((0.0, 0.0), 1.0, cfg["nx"], cfg["ny"])
    xy = grid.coords()
    s0i = grid.center_index()
    t0 = time.perf_counter()
    row = {"g": g, "h": h, "rep": rep}
    try:
        z = gaussian_field(xy, ExpKernelParams.unit(cfg["r"]), rng)
        y = cfg["a"] + cfg["b"] * tau_gh(z, g, h)
        r0 = _start_range(xy, y)
        design = greedy_local_design(xy[s0i], xy, budget=cfg["budget"], threshold=0.0,
                                     kernel=ExpKernelParams.unit(r0))
        fit = fit_local_tgh(xy[s0i], design, xy, y, r0=r0)
        if fit.params is None:
            raise TghError(fit.message)
        row.update(a_hat=fit.params.a, b_hat=fit.params.b, g_hat=fit.params.g,
                   h_hat=fit.params.h, r_hat=fit.lengthscale, design_size=fit.design_size,
                   flag=int(fit.flag), error="")
    except TghError as exc:
        row.update(a_hat=np.nan, b_hat=np.nan, g_hat=np.nan, h_hat=np.nan, r_hat=np.nan,
                   design_size=0, flag=1, error=f"{type(exc).__name__}: {exc}")
    row["seconds"] = time.perf_counter() - t0
    return row


def _summarize_sparse(raw, cfg):
    out = []
    for g in cfg["g_values"]:
        for h in cfg["h_values"]:
            rows = [r for r in raw if r["g"] == g and r["h"] == h]
            gh = np.array([r["g_hat"] for r in rows])
            hh = np.array([r["h_hat"] for r in rows])
            ok = np.isfinite(gh)
            gq = np.percentile(gh[ok], [25, 50, 75]) if ok.any() else [np.nan] * 3
            hq = np.percentile(hh[ok], [25, 50, 75]) if ok.any() else [np.nan] * 3
            sign = np.mean(np.sign(gh[ok]) == np.sign(g)) if ok.any() and g != 0 else np.nan
            out.append({
                "g": g, "h": h, "reps": len(rows), "ok": int(ok.sum()),
                "g_q25": gq[0], "g_median": gq[1], "g_q75": gq[2],
                "h_q25": hq[0], "h_median": hq[1], "h_q75": hq[2],
                "g_abs_err_median": float(np.median(np.abs(gh[ok] - g))) if ok.any() else np.nan,
                "h_bias_median": float(np.median(hh[ok] - h)) if ok.any() else np.nan,
                "sign_rate": sign,
            })
    return out


def _lowrank_b(cfg, map_fn):
    raw = []
    for rep, rng in enumerate(rep_generators(cfg["seed"], cfg["reps"])):
        xy = rng.uniform(0.0, cfg["extent"], (cfg["n"], 2))
        z = gaussian_field(xy, ExpKernelParams.unit(cfg["r"]), rng)
        y = cfg["a"] + cfg["b"] * tau_gh(z, cfg["g"], cfg["h"])
        jobs = [("lowrank", L) for L in cfg["ranks"]]
        if cfg["full"]:
            jobs.append(("full", cfg["n"]))

        def run(job):
            kind, L = job
            t0 = time.perf_counter()
            try:
                if kind == "full":
                    m = fit_full(xy, y, intervals=False)
                else:
                    m = fit_lowrank(y, make_lowrank_spec(xy, L), intervals=False)
                p, err = m.params, ""
                extra = {"m": m.m if m.m is not None else np.nan, "r": m.kernel.r,
                         "loglik": m.loglik, "iterations": m.iterations}
            except TghError as exc:
                p, err = None, f"{type(exc).__name__}: {exc}"
                extra = {"m": np.nan, "r": np.nan, "loglik": np.nan, "iterations": 0}
            row = {"rep": rep, "model": kind, "L": L,
                   "a_hat": p.a if p else np.nan, "b_hat": p.b if p else np.nan,
                   "g_hat": p.g if p else np.nan, "h_hat": p.h if p else np.nan,
                   "seconds": time.perf_counter() - t0, "error": err}
            row.update(extra)
            return row

        raw.extend(map_fn(run, jobs))
    return raw


def _summarize_lowrank(raw, cfg):
    out = []
    for rep in range(cfg["reps"]):
        rows = [r for r in raw if r["rep"] == rep]
        full = next((r for r in rows if r["model"] == "full"), None)
        for r in rows:
            s = {k: r[k] for k in ("rep", "model", "L", "a_hat", "b_hat", "g_hat", "h_hat",
                                   "m", "seconds")}
            s["dg_vs_full"] = r["g_hat"] - full["g_hat"] if full else np.nan
            s["speedup_vs_full"] = full["seconds"] / r["seconds"] if full else np.nan
            out.append(s)
    return out


def _coerce(default, value, key):
    """Convert an override to the type of the protocol default."""
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return value.lower() in ("true", "1", "yes")
            return bool(value)
        if isinstance(default, tuple):
            items = value.split(",") if isinstance(value, str) else np.atleast_1d(value)
            kind = type(default[0])
            return tuple(kind(float(v)) if kind is int else kind(v) for v in items)
        if isinstance(default, int):
            f = float(value)
            if f != int(f):
                raise ValueError(value)
            return int(f)
        return type(default)(value)
    except (TypeError, ValueError):
        raise InputError(f"bad value {value!r} for setting {key!r}") from None


def replicate_experiment(protocol, overrides=None, map_fn=None):
    """
    Run a replication harness.

    ``sparse-C``: for every ``(g, h)`` cell, ``reps`` fields on a 39 x 39
    unit grid with ``a = 0, b = 1, r = 1`` and no nugget; a local design of
    at most ``budget`` sites is grown around the centre site and the local
    TGH model is fitted there.

    ``lowrank-B``: ``n`` uniformly scattered sites, one TGH field, low-rank
    fits at each rank in ``ranks`` and (with ``full``) the full-likelihood
    fit, each timed including basis construction.

    ``overrides`` replaces protocol defaults by key.  Failed replications
    are recorded with an ``error`` string.
    """
    if protocol == "sparse-C":
        cfg = dict(SPARSE_C)
    elif protocol == "lowrank-B":
        cfg = dict(LOWRANK_B)
    else:
        raise InputError(f"unknown protocol {protocol!r}; use 'sparse-C' or 'lowrank-B'")
    for k, v in (overrides or {}).items():
        if k not in cfg:
            raise InputError(f"unknown setting {k!r} for protocol {protocol}")
        cfg[k] = _coerce(cfg[k], v, k)
    if cfg["reps"] < 1:
        raise InputError("reps must be at least 1")
    if map_fn is None:
        map_fn = map
    if protocol == "sparse-C":
        cells = [(g, h) for g in cfg["g_values"] for h in cfg["h_values"]]
        gens = rep_generators(cfg["seed"], len(cells) * cfg["reps"])
        jobs = [(cfg, g, h, rep, gens[c * cfg["reps"] + rep])
                for c, (g, h) in enumerate(cells) for rep in range(cfg["reps"])]
        raw = list(map_fn(_sparse_c_one, jobs))
        return ExperimentResult(protocol, raw, _summarize_sparse(raw, cfg), cfg)
    raw = _lowrank_b(cfg, map_fn)
    return ExperimentResult(protocol, raw, _summarize_lowrank(raw, cfg), cfg)


def with_params(config, **kw):
    """Copy of a ``SimConfig`` with TGH parameters replaced."""
    return replace(config, params=replace(config.params, **kw))
