"""Command-line pipeline: simulate, aggregate, fit, predict, evaluate, experiment.

Every run writes the fully resolved configuration plus the library version
into the output directory (`run_config.json`) and appends stage timings to
a JSON-lines log (`run_log.jsonl`), so any run is reproducible from its
config file alone. Flags override config-file values, which override
defaults; environment variables with the STDISAGG_ prefix override flag
defaults for CI use (e.g. STDISAGG_THREADS=2).

Exit codes: 0 success, 1 usage/IO error, 2 validation error, 3 numerical
failure.
"""

from __future__ import annotations

import os

# Workers and BLAS pools are coordinated here; a single setting keeps runs
# reproducible for any --threads value (set before numpy loads).
os.environ.setdefault("OPENBLAS_NUM_THREADS", "2")
os.environ.setdefault("OMP_NUM_THREADS", "2")

import argparse
import json
import math
import sys
import time

import numpy as np

from . import errors as err
from .aggregate import AggScheme, aggregate_observe, build_projection
from .dataio import (
    GriddedDataset,
    load_dataset,
    load_field_dataset,
    load_prediction,
    model_from_meta,
    write_field_dataset,
    write_obs_dataset,
    write_results,
)
from .infer import FitOptions, FitResult, exceedance, fit, make_obs_model, predict_fine
from .lattice import Field, build_lattice, default_buffer
from .simstudy import (
    MetricsReport,
    ecp_and_width,
    rmse,
    run_experiment,
    scenario_grid,
    write_tables,
)
from .stmodel import (
    TEMPORAL_RANGE_CONVENTION,
    ModelKind,
    ModelSpec,
    simulate_field,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

_VALIDATION_ERRORS = (
    err.InvalidExtent, err.IndexOutOfRange, err.UnsupportedPower,
    err.IndivisibleFactor, err.DimensionMismatch, err.ShapeMismatch,
    err.SchemaError, err.BoundsError, err.DuplicateCell, err.CovariateGap,
    err.TorusTooSmall, err.DisconnectedGraph, ValueError,
)
_NUMERICAL_ERRORS = (
    err.NotPositiveDefinite, err.NonFiniteLikelihood, err.DegenerateData,
    err.MaxIterationsExceeded, FloatingPointError,
)


class RunLogger:
    def __init__(self, outdir: str):
        self.outdir = outdir
        os.makedirs(outdir, exist_ok=True)
        self.path = os.path.join(outdir, "run_log.jsonl")

    def event(self, **kw):
        kw.setdefault("ts", time.time())
        with open(self.path, "a") as fh:
            fh.write(json.dumps(kw) + "\n")

    def stage(self, name):
        logger = self

        class _Stage:
            def __enter__(self):
                self.t0 = time.time()
                return self

            def __exit__(self, exc_type, exc, tb):
                logger.event(
                    stage=name,
                    wall_seconds=time.time() - self.t0,
                    ok=exc_type is None,
                )
                return False

        return _Stage()


def _env_default(name: str, fallback):
    raw = os.environ.get(f"STDISAGG_{name.upper()}")
    if raw is None:
        return fallback
    if isinstance(fallback, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(fallback, int):
        return int(raw)
    if isinstance(fallback, float):
        return float(raw)
    return raw


def _defaults(command: str) -> dict:
    common = dict(seed=_env_default("seed", 7))
    table = {
        "simulate": dict(
            kind="separable", sigma2=0.25, rs=0.2, rt=12.0, tau_eps=None,
            beta0=0.1, nx=24, ny=24, nt=24, xmin=0.0, xmax=1.0, ymin=0.0,
            ymax=1.0, t0=1.0, dt=1.0, buffer=None,
        ),
        "aggregate": dict(tau_eps="inf"),
        "fit": dict(
            kind="nonseparable", threshold=None, buffer=None, rs_hint=None,
            maxiter=400, tol=1e-5, mc_samples=200, no_ci=False, integrate=False,
        ),
        "predict": dict(
            kind="nonseparable", threshold=None, buffer=None, rs_hint=None,
            maxiter=400, tol=1e-5, mc_samples=200, no_ci=False, integrate=False,
        ),
        "evaluate": dict(),
        "experiment": dict(
            kind="both", replicates=_env_default("replicates", 20),
            threads=_env_default("threads", os.cpu_count() or 1),
            full=False, no_baseline=False, nx=24, ny=24, nt=24,
        ),
    }
    out = dict(common)
    out.update(table[command])
    return out


def _resolve_config(args: argparse.Namespace) -> dict:
    """Defaults < config file < explicitly passed flags."""
    cfg = _defaults(args.command)
    if getattr(args, "config", None):
        with open(args.config) as fh:
            cfg.update(json.load(fh))
    for k, v in vars(args).items():
        if k in ("func", "config", "command"):
            continue
        if v is not None:
            cfg[k] = v
        elif k not in cfg:
            cfg[k] = None
    return cfg


def _write_run_config(outdir: str, command: str, cfg: dict):
    os.makedirs(outdir, exist_ok=True)
    from .dataio import PACKAGE_VERSION

    doc = dict(command=command, package_version=PACKAGE_VERSION,
               temporal_range_convention=TEMPORAL_RANGE_CONVENTION)
    doc.update({k: v for k, v in cfg.items() if not callable(v)})
    with open(os.path.join(outdir, "run_config.json"), "w") as fh:
        json.dump(doc, fh, indent=2, default=str)


def _model_from_args(cfg: dict) -> ModelSpec:
    kind = ModelKind.SEPARABLE_102 if cfg["kind"] == "separable" else ModelKind.NONSEPARABLE_121
    return ModelSpec(
        kind=kind, sigma2=cfg["sigma2"], range_s=cfg["rs"], range_t=cfg["rt"],
        tau_eps=cfg.get("tau_eps") or 1.0 / 0.15**2,
    )


# -- commands --


def cmd_simulate(args) -> int:
    cfg = _resolve_config(args)
    log = RunLogger(cfg["out"])
    _write_run_config(cfg["out"], "simulate", cfg)
    m = _model_from_args(cfg)
    buf = cfg["buffer"]
    if buf is None:
        buf = default_buffer(m.range_s, (cfg["xmax"] - cfg["xmin"]) / cfg["nx"])
    spec = build_lattice(
        cfg["nx"], cfg["ny"], cfg["nt"],
        (cfg["xmin"], cfg["xmax"], cfg["ymin"], cfg["ymax"]), buffer=buf,
        t0=cfg["t0"], dt=cfg["dt"],
    )
    with log.stage("simulate"):
        W = simulate_field(m, spec, [cfg["beta0"]], None, cfg["seed"])
    with log.stage("write"):
        write_field_dataset(cfg["out"], W, model=m, beta=[cfg["beta0"]], seed=cfg["seed"])
    print(f"wrote field dataset to {cfg['out']} ({spec.n_interior} interior nodes)")
    return EXIT_OK


def cmd_aggregate(args) -> int:
    cfg = _resolve_config(args)
    log = RunLogger(cfg["out"])
    _write_run_config(cfg["out"], "aggregate", cfg)
    with log.stage("load"):
        field, meta = load_field_dataset(cfg["inp"])
    scheme = AggScheme(cfg["sf"], cfg["tf"])
    with log.stage("aggregate"):
        P = build_projection(field.spec, scheme)
        tau = math.inf if cfg["tau_eps"] in ("inf", math.inf) else float(cfg["tau_eps"])
        y = aggregate_observe(field, P, tau, cfg["seed"])
    with log.stage("write"):
        write_obs_dataset(
            cfg["out"], y, P,
            meta_extra=dict(source=cfg["inp"], tau_eps_used=None if math.isinf(tau) else tau,
                            model=meta.get("model")),
        )
    print(f"wrote {P.n_cells} aggregated cells to {cfg['out']}")
    return EXIT_OK


def _fit_dataset(ds: GriddedDataset, cfg: dict, log: RunLogger) -> tuple[FitResult, object]:
    kind = ModelKind.SEPARABLE_102 if cfg["kind"] == "separable" else ModelKind.NONSEPARABLE_121
    template = model_from_meta(ds.meta) or ModelSpec(kind, 1.0, 1.0, 1.0, 1.0)
    template = template.with_params(kind=kind) if template.kind is not kind else template
    obs = make_obs_model(ds.y, ds.P, template.with_params(kind=kind), X=ds.covariates)
    opts = FitOptions(
        maxiter=cfg["maxiter"], tol=cfg["tol"], seed=cfg["seed"],
        compute_theta_ci=not cfg["no_ci"], integrate=cfg["integrate"],
        mc_samples=cfg["mc_samples"],
    )
    with log.stage("fit"):
        fr = fit(obs, opts)
    return fr, obs


def cmd_fit(args) -> int:
    cfg = _resolve_config(args)
    log = RunLogger(cfg["out"])
    _write_run_config(cfg["out"], "fit", cfg)
    with log.stage("load"):
        ds = load_dataset(cfg["inp"], buffer=cfg["buffer"], range_s_hint=cfg["rs_hint"])
    fr, obs = _fit_dataset(ds, cfg, log)
    exc = None
    if cfg["threshold"] is not None:
        with log.stage("exceedance"):
            exc = exceedance(fr, cfg["threshold"])
    with log.stage("write"):
        write_results(fr, cfg["out"], exceedance_field=exc, threshold=cfg["threshold"])
    print(
        f"fit: loglik={fr.loglik:.3f} converged={fr.converged} "
        + " ".join(
            f"{k}={float(getattr(fr.theta_hat, k)):.4g}"
            for k in ("sigma2", "range_s", "range_t", "tau_eps")
        )
    )
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _resolve_config(args)
    log = RunLogger(cfg["out"])
    _write_run_config(cfg["out"], "predict", cfg)
    with log.stage("load"):
        ds = load_dataset(cfg["inp"], buffer=cfg["buffer"], range_s_hint=cfg["rs_hint"])
        with open(os.path.join(cfg["summary"], "summary.json")) as fh:
            summary = json.load(fh)
    kind = ModelKind(summary["kind"])
    theta = ModelSpec(
        kind=kind,
        sigma2=summary["hyperparameters"]["sigma2"]["q50"],
        range_s=summary["hyperparameters"]["range_s"]["q50"],
        range_t=summary["hyperparameters"]["range_t"]["q50"],
        tau_eps=summary["hyperparameters"]["tau_eps"]["q50"],
    )
    obs = make_obs_model(ds.y, ds.P, theta, X=ds.covariates)
    shell = FitResult(
        theta_hat=theta, theta_ci={}, theta_sd_log={},
        beta_mean=np.zeros(obs.p), beta_sd=np.zeros(obs.p),
        latent_mean=Field(obs.spec, np.zeros(obs.spec.n_nodes)),
        latent_sd=Field(obs.spec, np.zeros(obs.spec.n_nodes)),
        lo95=Field(obs.spec, np.zeros(obs.spec.n_nodes)),
        hi95=Field(obs.spec, np.zeros(obs.spec.n_nodes)),
        loglik=float("nan"), converged=True, n_evals=0,
    )
    with log.stage("predict"):
        mean, sd, (lo, hi) = predict_fine(obs, shell, opts=FitOptions(seed=cfg["seed"], mc_samples=cfg["mc_samples"]))
    shell.latent_mean, shell.latent_sd, shell.lo95, shell.hi95 = mean, sd, lo, hi
    exc = exceedance(shell, cfg["threshold"]) if cfg["threshold"] is not None else None
    with log.stage("write"):
        write_results(shell, cfg["out"], exceedance_field=exc, threshold=cfg["threshold"])
    print(f"wrote predictions to {cfg['out']}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _resolve_config(args)
    log = RunLogger(cfg["out"])
    _write_run_config(cfg["out"], "evaluate", cfg)
    with log.stage("evaluate"):
        truth, _ = load_field_dataset(cfg["truth"])
        pred = load_prediction(cfg["pred"])
        spec = truth.spec
        mean = Field(spec, pred["mean"])
        metrics = dict(rmse=rmse(mean, truth))
        if "lo95" in pred and "hi95" in pred:
            e, w = ecp_and_width(Field(spec, pred["lo95"]), Field(spec, pred["hi95"]), truth)
            metrics["ecp"] = e
            metrics["mean_width"] = w
    with open(os.path.join(cfg["out"], "metrics.json"), "w") as fh:
        json.dump(metrics, fh, indent=2)
    print(" ".join(f"{k}={v:.5f}" for k, v in metrics.items()))
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = _resolve_config(args)
    log = RunLogger(cfg["out"])
    _write_run_config(cfg["out"], "experiment", cfg)
    kinds = {
        "separable": (ModelKind.SEPARABLE_102,),
        "nonseparable": (ModelKind.NONSEPARABLE_121,),
        "both": (ModelKind.SEPARABLE_102, ModelKind.NONSEPARABLE_121),
    }[cfg["kind"]]
    configs = scenario_grid(
        kinds=kinds, full=cfg["full"], replicates=cfg["replicates"],
        base_seed=cfg["seed"], fit_both=not cfg["no_baseline"],
        nx=cfg["nx"], ny=cfg["ny"], nt=cfg["nt"],
    )
    total = sum(c.replicates for c in configs)
    done = [0]

    def progress(idx, rep, errmsg):
        done[0] += 1
        log.event(stage="replicate", scenario=idx, replicate=rep,
                  error=errmsg, done=done[0], total=total)

    with log.stage("experiment"):
        reports = run_experiment(configs, threads=cfg["threads"], progress=progress)
    with log.stage("write"):
        paths = write_tables(reports, cfg["out"])
        _dump_reports(reports, os.path.join(cfg["out"], "reports.json"))
    bad = [r for r in reports if not r.valid]
    for r in reports:
        c = r.config
        areal = f" areal={r.rmse_areal:.4f}" if r.rmse_areal is not None else ""
        print(
            f"{c.kind.value:12s} {c.autocorr:8s} sf={c.s_f} tf={c.t_f}: "
            f"rmse={r.rmse:.4f}{areal} ecp={r.ecp:.3f} width={r.mean_width:.3f} "
            f"failed={r.n_failed}"
        )
    print(f"wrote {len(paths)} table CSVs to {cfg['out']}")
    if bad:
        print(f"WARNING: {len(bad)} scenario(s) exceeded the 10% failure budget")
    return EXIT_OK


def _dump_reports(reports: list[MetricsReport], path: str):
    def enc(r: MetricsReport):
        d = dict(
            kind=r.config.kind.value, autocorr=r.config.autocorr,
            s_f=r.config.s_f, t_f=r.config.t_f, replicates=r.config.replicates,
            rmse=r.rmse, rmse_se=r.rmse_se, rmse_areal=r.rmse_areal,
            rmse_areal_se=r.rmse_areal_se, ecp=r.ecp, mean_width=r.mean_width,
            param_cover=r.param_cover, n_failed=r.n_failed, valid=r.valid,
            replicate_rmse=r.replicate_rmse,
            replicate_rmse_areal=r.replicate_rmse_areal,
            replicate_ecp=r.replicate_ecp, replicate_width=r.replicate_width,
        )
        return d

    with open(path, "w") as fh:
        json.dump([enc(r) for r in reports], fh, indent=2)


# -- parser --


def build_parser() -> argparse.ArgumentParser:
    # optionals default to None so the resolution order is
    # defaults table < config file < explicitly passed flags
    p = argparse.ArgumentParser(
        prog="stdisagg",
        description="Spatio-temporal disaggregation of gridded data",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file; flags override its values")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int)

    def flag(sp, name, **kw):
        sp.add_argument(name, action="store_const", const=True, **kw)

    sp = sub.add_parser("simulate", help="simulate a fine-resolution field dataset")
    common(sp)
    sp.add_argument("--kind", choices=["separable", "nonseparable"])
    sp.add_argument("--sigma2", type=float)
    sp.add_argument("--rs", type=float)
    sp.add_argument("--rt", type=float)
    sp.add_argument("--tau-eps", dest="tau_eps", type=float)
    sp.add_argument("--beta0", type=float)
    for dim in ("--nx", "--ny", "--nt"):
        sp.add_argument(dim, type=int)
    for ext in ("--xmin", "--xmax", "--ymin", "--ymax", "--t0", "--dt"):
        sp.add_argument(ext, type=float)
    sp.add_argument("--buffer", type=int)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("aggregate", help="aggregate a field dataset into cells")
    common(sp)
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--sf", type=int, required=True)
    sp.add_argument("--tf", type=int, required=True)
    sp.add_argument("--tau-eps", dest="tau_eps",
                    help="observation noise precision; 'inf' for exact means")
    sp.set_defaults(func=cmd_aggregate)

    for name in ("fit", "predict"):
        sp = sub.add_parser(name, help=f"{name} a gridded dataset")
        common(sp)
        sp.add_argument("--in", dest="inp", required=True)
        sp.add_argument("--kind", choices=["separable", "nonseparable"])
        sp.add_argument("--threshold", type=float,
                        help="emit exceedance.csv for this level")
        sp.add_argument("--buffer", type=int)
        sp.add_argument("--rs-hint", dest="rs_hint", type=float)
        sp.add_argument("--maxiter", type=int)
        sp.add_argument("--tol", type=float)
        sp.add_argument("--mc-samples", dest="mc_samples", type=int)
        flag(sp, "--no-ci", dest="no_ci")
        flag(sp, "--integrate")
        if name == "predict":
            sp.add_argument("--summary", required=True,
                            help="directory containing summary.json from a fit")
        sp.set_defaults(func=cmd_fit if name == "fit" else cmd_predict)

    sp = sub.add_parser("evaluate", help="score predictions against a truth field")
    common(sp)
    sp.add_argument("--pred", required=True)
    sp.add_argument("--truth", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("experiment", help="run the simulation study")
    common(sp)
    sp.add_argument("--kind", choices=["separable", "nonseparable", "both"])
    sp.add_argument("--replicates", type=int)
    sp.add_argument("--threads", type=int)
    flag(sp, "--full", help="all 15 aggregation scenarios instead of the 3x2 subset")
    flag(sp, "--no-baseline", dest="no_baseline")
    for dim in ("--nx", "--ny", "--nt"):
        sp.add_argument(dim, type=int, help="reduced-scale debugging lattice")
    sp.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except _VALIDATION_ERRORS as e:
        print(f"validation error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except _NUMERICAL_ERRORS as e:
        print(f"numerical error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
