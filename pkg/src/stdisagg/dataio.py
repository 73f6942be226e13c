"""Dataset and result serialization: CSV + JSON, full double precision.

Two dataset layouts share a directory-with-metadata.json convention:

* field dataset — a fine-resolution space-time field (simulation output or
  ground truth): `field.csv` with columns x,y,t,value over interior nodes.
* gridded observation dataset — aggregated cells plus optional fine-lattice
  covariate rasters: `observations.csv` with integer cell coordinates
  (cell_x, cell_y, cell_t), covariate CSVs with (x, y[, t], value).

Fit outputs: `summary.json` (hyperparameter and fixed-effect posterior
summaries: mean and 2.5/50/97.5% quantiles), `prediction.csv`
(x,y,t,mean,sd,lo95,hi95 over interior nodes), `exceedance.csv` on request.
Floats are serialized with repr(), the shortest exact representation, so
round trips are bit-exact.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .aggregate import AggScheme, Projection, build_projection
from .errors import BoundsError, CovariateGap, DuplicateCell, SchemaError
from .lattice import Field, LatticeSpec, crop_interior, default_buffer
from .stmodel import ModelKind, ModelSpec

PACKAGE_VERSION = "0.1.0"


def _lattice_to_json(spec: LatticeSpec) -> dict:
    return dict(
        nx=spec.nx, ny=spec.ny, nt=spec.nt, x0=spec.x0, y0=spec.y0,
        dx=spec.dx, dy=spec.dy, t0=spec.t0, dt=spec.dt, buffer=spec.buffer,
    )


def _lattice_from_json(d: dict) -> LatticeSpec:
    return LatticeSpec(**d)


def write_field_dataset(
    path: str, field: Field, model: ModelSpec | None = None,
    beta=None, seed=None, extra: dict | None = None,
) -> None:
    """Write an interior field with its lattice metadata."""
    os.makedirs(path, exist_ok=True)
    interior = crop_interior(field)
    meta = dict(
        format="stdisagg-field-v1",
        package_version=PACKAGE_VERSION,
        lattice=_lattice_to_json(field.spec),
    )
    if model is not None:
        meta["model"] = dict(
            kind=model.kind.value, sigma2=model.sigma2, range_s=model.range_s,
            range_t=model.range_t, tau_eps=model.tau_eps,
        )
    if beta is not None:
        meta["beta"] = list(np.asarray(beta, dtype=float))
    if seed is not None:
        meta["seed"] = int(seed)
    meta.update(extra or {})
    with open(os.path.join(path, "metadata.json"), "w") as fh:
        json.dump(meta, fh, indent=2)
    spec = interior.spec
    from .lattice import node_coords

    with open(os.path.join(path, "field.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "t", "value"])
        for idx in range(spec.n_nodes):
            x, y, t = node_coords(spec, idx)
            w.writerow([repr(x), repr(y), repr(t), repr(float(interior.values[idx]))])


def load_field_dataset(path: str) -> tuple[Field, dict]:
    """Read back a field dataset; returns the interior field and metadata."""
    with open(os.path.join(path, "metadata.json")) as fh:
        meta = json.load(fh)
    full_spec = _lattice_from_json(meta["lattice"])
    spec = full_spec.interior_spec()
    values = np.full(spec.n_nodes, np.nan)
    from .lattice import coords_index

    fname = os.path.join(path, "field.csv")
    with open(fname, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:4] != ["x", "y", "t", "value"]:
            raise SchemaError(1, f"unexpected header {header} in {fname}")
        for ln, row in enumerate(reader, start=2):
            try:
                x, y, t, v = (float(c) for c in row)
            except (ValueError, IndexError) as e:
                raise SchemaError(ln, f"malformed row {row}") from e
            values[coords_index(spec, x, y, t)] = v
    if np.any(~np.isfinite(values)):
        raise SchemaError(0, "field.csv does not cover every interior node")
    return Field(spec, values), meta


def model_from_meta(meta: dict, default_tau_eps: float = 44.44) -> ModelSpec | None:
    m = meta.get("model")
    if m is None:
        return None
    return ModelSpec(
        kind=ModelKind(m["kind"]), sigma2=m["sigma2"], range_s=m["range_s"],
        range_t=m["range_t"], tau_eps=m.get("tau_eps", default_tau_eps),
    )


# -- gridded observation datasets --


@dataclass
class GriddedDataset:
    y: np.ndarray                  # (n_cells,) with NaN for unobserved cells
    P: Projection
    covariates: list[Field]        # on the buffered modeling lattice
    covariate_names: list[str]
    meta: dict

    @property
    def spec(self) -> LatticeSpec:
        return self.P.spec


def write_obs_dataset(
    path: str,
    y: np.ndarray,
    P: Projection,
    meta_extra: dict | None = None,
    covariates: list[tuple[str, Field, bool]] | None = None,
) -> None:
    """Write aggregated observations (+ optional fine covariate rasters)."""
    os.makedirs(path, exist_ok=True)
    spec = P.spec
    if P.scheme is None:
        raise SchemaError(0, "only uniform aggregation schemes are serializable")
    covariates = covariates or []
    meta = dict(
        format="stdisagg-obs-v1",
        package_version=PACKAGE_VERSION,
        fine_lattice=_lattice_to_json(spec),
        factors=dict(s_f=P.scheme.s_f, t_f=P.scheme.t_f),
        grid=dict(ncx=P.ncx, ncy=P.ncy, nct=P.nct),
        variable=dict(name="value", units="1"),
        covariates=[
            dict(name=name, file=f"cov_{name}.csv", time_varying=tv)
            for name, _, tv in covariates
        ],
    )
    meta.update(meta_extra or {})
    with open(os.path.join(path, "metadata.json"), "w") as fh:
        json.dump(meta, fh, indent=2)
    with open(os.path.join(path, "observations.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell_x", "cell_y", "cell_t", "value"])
        for row in range(P.n_cells):
            if not np.isfinite(y[row]):
                continue
            cx, cy, ct = P.cell_of_row(row)
            w.writerow([cx, cy, ct, repr(float(y[row]))])
    from .lattice import node_coords

    interior = spec.interior_spec()
    for name, f, tv in covariates:
        vals = crop_interior(f).values if f.spec.buffer else f.values
        with open(os.path.join(path, f"cov_{name}.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            if tv:
                w.writerow(["x", "y", "t", "value"])
                for idx in range(interior.n_nodes):
                    x, yy, t = node_coords(interior, idx)
                    w.writerow([repr(x), repr(yy), repr(t), repr(float(vals[idx]))])
            else:
                w.writerow(["x", "y", "value"])
                cube = vals.reshape(interior.nt, interior.nby, interior.nbx)
                for iy in range(interior.ny):
                    for ix in range(interior.nx):
                        idx = interior.node_index(ix, iy, 0)
                        x, yy, _ = node_coords(interior, idx)
                        w.writerow([repr(x), repr(yy), repr(float(cube[0, iy, ix]))])


def load_dataset(path: str, buffer: int | None = None, range_s_hint: float | None = None) -> GriddedDataset:
    """Load a gridded dataset and build the modeling lattice and projection.

    `buffer` overrides the boundary-extension default
    ceil(range_s_hint / dx) capped at 8 (hint defaults to a quarter of the
    domain width).
    """
    with open(os.path.join(path, "metadata.json")) as fh:
        meta = json.load(fh)
    fine = dict(meta["fine_lattice"])
    s_f = int(meta["factors"]["s_f"])
    t_f = int(meta["factors"]["t_f"])
    if buffer is None:
        hint = range_s_hint if range_s_hint is not None else fine["nx"] * fine["dx"] / 4
        buffer = default_buffer(hint, fine["dx"])
    fine["buffer"] = buffer
    spec = _lattice_from_json(fine)
    P = build_projection(spec, AggScheme(s_f, t_f))
    y = np.full(P.n_cells, np.nan)
    seen = set()
    fname = os.path.join(path, "observations.csv")
    with open(fname, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:4] != ["cell_x", "cell_y", "cell_t", "value"]:
            raise SchemaError(1, f"unexpected header {header} in {fname}")
        for ln, row in enumerate(reader, start=2):
            try:
                cx, cy, ct = int(row[0]), int(row[1]), int(row[2])
                v = float(row[3])
            except (ValueError, IndexError) as e:
                raise SchemaError(ln, f"malformed row {row}") from e
            if not (0 <= cx < P.ncx and 0 <= cy < P.ncy and 0 <= ct < P.nct):
                raise BoundsError(
                    f"line {ln}: cell ({cx},{cy},{ct}) outside grid "
                    f"{P.ncx}x{P.ncy}x{P.nct}"
                )
            if (cx, cy, ct) in seen:
                raise DuplicateCell(f"line {ln}: duplicate cell ({cx},{cy},{ct})")
            seen.add((cx, cy, ct))
            y[P.cell_index(cx, cy, ct)] = v
    covs, names = [], []
    for cv in meta.get("covariates", []):
        f = _load_covariate(os.path.join(path, cv["file"]), spec, cv.get("time_varying", False))
        covs.append(f)
        names.append(cv["name"])
    return GriddedDataset(y=y, P=P, covariates=covs, covariate_names=names, meta=meta)


def _load_covariate(fname: str, spec: LatticeSpec, time_varying: bool) -> Field:
    """Covariate raster on the fine interior, extended into the buffer."""
    from .lattice import coords_index

    interior = spec.interior_spec()
    if time_varying:
        vals = np.full(interior.n_nodes, np.nan)
    else:
        vals = np.full(interior.n_spatial, np.nan)
    with open(fname, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        want = ["x", "y", "t", "value"] if time_varying else ["x", "y", "value"]
        if header[: len(want)] != want:
            raise SchemaError(1, f"unexpected header {header} in {fname}")
        for ln, row in enumerate(reader, start=2):
            try:
                if time_varying:
                    x, yy, t, v = (float(c) for c in row)
                else:
                    x, yy, v = (float(c) for c in row)
                    t = interior.t0
            except (ValueError, IndexError) as e:
                raise SchemaError(ln, f"malformed row {row}") from e
            try:
                idx = coords_index(interior, x, yy, t)
            except Exception as e:
                raise BoundsError(f"{fname} line {ln}: point outside lattice") from e
            if time_varying:
                vals[idx] = v
            else:
                vals[idx % interior.n_spatial] = v
    if np.any(~np.isfinite(vals)):
        missing = int(np.sum(~np.isfinite(vals)))
        raise CovariateGap(f"{fname}: {missing} fine nodes have no covariate value")
    if not time_varying:
        vals = np.tile(vals, interior.nt)
    inner = Field(interior, vals)
    return _extend_into_buffer(inner, spec)


def _extend_into_buffer(inner: Field, spec: LatticeSpec) -> Field:
    """Nearest-edge extension of an interior field onto the buffered lattice."""
    b = spec.buffer
    cube = inner.cube()
    padded = np.pad(cube, ((0, 0), (b, b), (b, b)), mode="edge")
    return Field(spec, padded.ravel())


# -- fit results --


def _lognormal_summary(mode: float, sd_log: float) -> dict:
    mu = math.log(mode)
    clamp = lambda v: math.exp(min(max(v, -700.0), 700.0))  # noqa: E731
    return dict(
        mean=clamp(mu + sd_log**2 / 2.0),
        q025=clamp(mu - 1.96 * sd_log),
        q50=clamp(mu),
        q975=clamp(mu + 1.96 * sd_log),
    )


def write_results(
    fit_result, path: str, exceedance_field: Field | None = None,
    threshold: float | None = None, extra: dict | None = None,
) -> list[str]:
    """summary.json + prediction.csv (+ exceedance.csv)."""
    os.makedirs(path, exist_ok=True)
    written = []
    hyper = {}
    for name in ("sigma2", "range_s", "range_t", "tau_eps"):
        mode = float(getattr(fit_result.theta_hat, name))
        sd_log = fit_result.theta_sd_log.get(name, float("nan"))
        if math.isfinite(sd_log):
            hyper[name] = _lognormal_summary(mode, sd_log)
        else:
            hyper[name] = dict(mean=mode, q025=mode, q50=mode, q975=mode)
    fixed = {}
    for j in range(len(fit_result.beta_mean)):
        m, s = float(fit_result.beta_mean[j]), float(fit_result.beta_sd[j])
        fixed[f"beta{j}"] = dict(
            mean=m, sd=s, q025=m - 1.96 * s, q50=m, q975=m + 1.96 * s
        )
    summary = dict(
        package_version=PACKAGE_VERSION,
        kind=fit_result.theta_hat.kind.value,
        hyperparameters=hyper,
        fixed_effects=fixed,
        loglik=fit_result.loglik,
        converged=fit_result.converged,
        n_evals=fit_result.n_evals,
    )
    summary.update(extra or {})
    spath = os.path.join(path, "summary.json")
    with open(spath, "w") as fh:
        json.dump(summary, fh, indent=2)
    written.append(spath)

    from .lattice import node_coords

    mean_i = crop_interior(fit_result.latent_mean)
    sd_i = crop_interior(fit_result.latent_sd)
    lo_i = crop_interior(fit_result.lo95)
    hi_i = crop_interior(fit_result.hi95)
    spec = mean_i.spec
    ppath = os.path.join(path, "prediction.csv")
    with open(ppath, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "t", "mean", "sd", "lo95", "hi95"])
        for idx in range(spec.n_nodes):
            x, y, t = node_coords(spec, idx)
            w.writerow([
                repr(x), repr(y), repr(t),
                repr(float(mean_i.values[idx])), repr(float(sd_i.values[idx])),
                repr(float(lo_i.values[idx])), repr(float(hi_i.values[idx])),
            ])
    written.append(ppath)

    if exceedance_field is not None:
        ex_i = crop_interior(exceedance_field)
        epath = os.path.join(path, "exceedance.csv")
        with open(epath, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "t", "prob"])
            for idx in range(spec.n_nodes):
                x, y, t = node_coords(spec, idx)
                w.writerow([repr(x), repr(y), repr(t), repr(float(ex_i.values[idx]))])
        written.append(epath)
        if threshold is not None:
            summary["exceedance_threshold"] = threshold
            with open(spath, "w") as fh:
                json.dump(summary, fh, indent=2)
    return written


def load_prediction(path: str) -> dict[str, np.ndarray]:
    """Columns of prediction.csv keyed by name (row order preserved)."""
    fname = os.path.join(path, "prediction.csv") if os.path.isdir(path) else path
    with open(fname, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        cols = {h: [] for h in header}
        for row in reader:
            for h, c in zip(header, row):
                cols[h].append(float(c))
    return {h: np.asarray(v) for h, v in cols.items()}
