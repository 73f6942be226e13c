"""Acceptance gate: every criterion at its stated tolerance, one line each.

The scaled simulation study (20 replicates, scenarios {2,4,8} x {2,4}, both
model kinds, three autocorrelation levels) and the synthetic India-shaped
application run execute once per configuration and cache their reports
under tests/_artifacts, so reruns only re-assert. Run with `-s` to see the
PASS/FAIL lines inline; they are also appended to
tests/_artifacts/acceptance_report.txt.

Published reference values for the RMSE band criteria (separable: areal and
continuous columns; non-separable: continuous), subset cells:
see _TABLE3_CONT/_TABLE3_AREAL/_TABLE5 below. The study generates with
sigma = 0.25 as the field standard deviation; the variance reading is
incompatible with the published tables (see simstudy module docstring and
tests/test_acceptance.py::test_sigma_convention_floor_evidence).
"""

import hashlib
import math
import os
import pickle
import time

import numpy as np
import pytest

from helpers import dense_oracle_loglik, small_dataset
from stdisagg.aggregate import AggScheme, aggregate_observe, build_projection
from stdisagg.infer import (
    FitOptions,
    exceedance,
    fit,
    log_marginal_likelihood,
    make_obs_model,
)
from stdisagg.lattice import Field, build_lattice, crop_interior
from stdisagg.simstudy import (
    ScenarioConfig,
    rho_phi_map,
    run_experiment,
    scenario_grid,
)
from stdisagg.sparsela import factorize, sample_gmrf_many
from stdisagg.stmodel import (
    ModeDecomposition,
    ModelKind,
    ModelSpec,
    build_precision,
    simulate_field,
    spectral_oracle,
)

ARTIFACTS = os.path.join(os.path.dirname(__file__), "_artifacts")
os.makedirs(ARTIFACTS, exist_ok=True)
STUDY_PROTOCOL = "v1"  # bump to invalidate cached study runs

_LEVELS = ("weak", "moderate", "strong")
_CELLS = [(2, 2), (2, 4), (4, 2), (4, 4), (8, 2), (8, 4)]

_TABLE3_CONT = {
    "weak":     {(2, 2): 0.175, (2, 4): 0.199, (4, 2): 0.206, (4, 4): 0.220, (8, 2): 0.232, (8, 4): 0.246},
    "moderate": {(2, 2): 0.172, (2, 4): 0.203, (4, 2): 0.209, (4, 4): 0.229, (8, 2): 0.246, (8, 4): 0.258},
    "strong":   {(2, 2): 0.143, (2, 4): 0.163, (4, 2): 0.192, (4, 4): 0.207, (8, 2): 0.241, (8, 4): 0.251},
}
_TABLE3_AREAL = {
    "weak":     {(2, 2): 0.184, (2, 4): 0.203, (4, 2): 0.207, (4, 4): 0.213, (8, 2): 0.215, (8, 4): 0.219},
    "moderate": {(2, 2): 0.189, (2, 4): 0.213, (4, 2): 0.224, (4, 4): 0.237, (8, 2): 0.244, (8, 4): 0.249},
    "strong":   {(2, 2): 0.165, (2, 4): 0.183, (4, 2): 0.210, (4, 4): 0.223, (8, 2): 0.246, (8, 4): 0.253},
}
_TABLE5 = {
    "weak":     {(2, 2): 0.1526, (2, 4): 0.1810, (4, 2): 0.1799, (4, 4): 0.1982, (8, 2): 0.2158, (8, 4): 0.2255},
    "moderate": {(2, 2): 0.1544, (2, 4): 0.1834, (4, 2): 0.1895, (4, 4): 0.2104, (8, 2): 0.2317, (8, 4): 0.2429},
    "strong":   {(2, 2): 0.1406, (2, 4): 0.1591, (4, 2): 0.1845, (4, 4): 0.1981, (8, 2): 0.2304, (8, 4): 0.2405},
}


def report(name: str, ok: bool, detail: str = ""):
    line = f"ACCEPTANCE[{name}]: {'PASS' if ok else 'FAIL'} {detail}".rstrip()
    print("\n" + line)
    with open(os.path.join(ARTIFACTS, "acceptance_report.txt"), "a") as fh:
        fh.write(line + "\n")
    return ok


def _cached(key: str, builder):
    tag = hashlib.sha256(key.encode()).hexdigest()[:16]
    path = os.path.join(ARTIFACTS, f"cache_{tag}.pkl")
    if os.path.exists(path):
        with open(path, "rb") as fh:
            return pickle.load(fh)
    out = builder()
    with open(path, "wb") as fh:
        pickle.dump(out, fh)
    return out


# ---------------------------------------------------------------------------
# fast analytic criteria
# ---------------------------------------------------------------------------


def test_dense_oracle_equivalence():
    """Criterion: log marginal likelihood vs dense MVN oracle, 1e-6, <1 min."""
    t0 = time.time()
    rng = np.random.default_rng(20260810)
    n_checked = 0
    worst = 0.0
    cases = [
        (ModelKind.SEPARABLE_102, 4, 4, 3, 1, 2, 1),
        (ModelKind.NONSEPARABLE_121, 4, 4, 3, 1, 2, 1),
        (ModelKind.SEPARABLE_102, 5, 4, 4, 0, 1, 2),
        (ModelKind.NONSEPARABLE_121, 4, 4, 4, 1, 2, 2),
        (ModelKind.SEPARABLE_102, 6, 6, 2, 0, 3, 1),
        (ModelKind.NONSEPARABLE_121, 6, 4, 2, 1, 2, 1),
        (ModelKind.SEPARABLE_102, 4, 4, 6, 0, 4, 3),
        (ModelKind.NONSEPARABLE_121, 4, 4, 6, 0, 2, 3),
        (ModelKind.SEPARABLE_102, 3, 3, 5, 1, 3, 1),
        (ModelKind.NONSEPARABLE_121, 5, 5, 3, 0, 5, 1),
        (ModelKind.SEPARABLE_102, 8, 4, 4, 0, 4, 2),
        (ModelKind.NONSEPARABLE_121, 4, 4, 4, 1, 4, 2),
    ]
    for kind, nx, ny, nt, buf, sf, tf in cases:
        n_nodes = (nx + 2 * buf) * (ny + 2 * buf) * nt
        assert n_nodes <= 200, f"test grid too large: {n_nodes}"
        obs, m, _ = small_dataset(
            kind=kind, nx=nx, ny=ny, nt=nt, buffer=buf, s_f=sf, t_f=tf,
            sigma2=float(rng.uniform(0.05, 1.0)),
            range_s=float(rng.uniform(0.15, 0.6)),
            range_t=float(rng.uniform(0.5, 8.0)),
            tau_eps=float(rng.uniform(5.0, 100.0)),
            seed=int(rng.integers(1e6)), noise_seed=int(rng.integers(1e6)),
        )
        want = dense_oracle_loglik(obs, m)
        for route in ("collapsed", "latent"):
            got = log_marginal_likelihood(obs, m, route=route)
            worst = max(worst, abs(got - want))
            assert abs(got - want) < 1e-6, (kind, route, got, want)
        n_checked += 1
    elapsed = time.time() - t0
    ok = n_checked >= 10 and worst < 1e-6 and elapsed < 60
    assert report(
        "dense-oracle-equivalence", ok,
        f"{n_checked} configs, worst |diff| = {worst:.2e}, {elapsed:.1f}s",
    )


def test_separable_kron_structure():
    """Criterion: build_precision(Separable102) equals dense kron exactly."""
    from stdisagg.operators import build_operator
    from stdisagg.stmodel import ar1_precision

    spec = build_lattice(4, 4, 3)
    m = ModelSpec(ModelKind.SEPARABLE_102, 0.3, 0.35, 2.5, 40.0)
    Q = build_precision(m, spec).dense()
    rho = math.exp(-spec.dt / m.range_t)
    Qt = ar1_precision(3, rho).dense()
    op = build_operator(spec, math.sqrt(8.0) / m.range_s)
    md = ModeDecomposition(spec)
    lam = (math.sqrt(8.0) / m.range_s) ** 2 + md.mu
    vmid = float(np.sum(md.phi2_mid / (op.C_diag * lam**2)))
    Qs = vmid * (op.K.toarray() @ op.K.toarray()) / op.C_diag
    exact = np.array_equal(Q, np.kron(Qt, Qs) / m.sigma2)
    assert report("separable-kron-structure", exact, "4x4x3 lattice, exact equality")


def test_ar1_mapping():
    """Criterion: lag-1 correlations {0.3679, 0.7165, 0.9200} +- 0.02, 10k MC."""
    spec = build_lattice(6, 6, 8, buffer=1)
    mid = spec.mid_node()
    results = []
    for rt in (1.0, 3.0, 12.0):
        m = ModelSpec(ModelKind.SEPARABLE_102, 0.25, 0.2, rt, 44.4)
        F = factorize(build_precision(m, spec))
        X = sample_gmrf_many(F, seeds=range(10_000))
        a = X[mid] - X[mid].mean()
        b = X[mid + spec.n_spatial] - X[mid + spec.n_spatial].mean()
        corr = float(np.sum(a * b) / np.sqrt(np.sum(a * a) * np.sum(b * b)))
        results.append((rt, corr, rho_phi_map(rt)))
    ok = all(abs(c - r) <= 0.02 for _, c, r in results)
    assert report(
        "ar1-mapping", ok,
        " ".join(f"phi={rt:g}: {c:.4f} (expect {r:.4f})" for rt, c, r in results),
    )


def test_spatial_range_both_kinds():
    """Criterion: sampled correlation at distance r_s = 0.139 +- 0.02."""
    r_s = 0.2
    out = []
    for kind, rt, nt in [(ModelKind.SEPARABLE_102, 3.0, 4),
                         (ModelKind.NONSEPARABLE_121, 24.0, 6)]:
        spec = build_lattice(25, 25, nt, (0.0, 1.0, 0.0, 1.0), buffer=5)
        m = ModelSpec(kind, 0.25, r_s, rt, 44.4)
        F = factorize(build_precision(m, spec))
        X = np.concatenate(
            [sample_gmrf_many(F, seeds=range(k, 5000, 4)) for k in range(4)], axis=1
        )
        mid_t = (nt // 2) * spec.n_spatial
        c = spec.nbx // 2
        corrs = []
        for off in (-3, -1, 0, 2):
            i = mid_t + (c + off) * spec.nbx + c
            for j in (i + 5, i - 5, i + 5 * spec.nbx, i - 5 * spec.nbx):
                a, b = X[i] - X[i].mean(), X[j] - X[j].mean()
                corrs.append(np.sum(a * b) / np.sqrt(np.sum(a * a) * np.sum(b * b)))
        out.append((kind.value, float(np.mean(corrs))))
    ok = all(abs(c - 0.139) <= 0.02 for _, c in out)
    assert report(
        "spatial-range-matern", ok,
        " ".join(f"{k}: {c:.4f}" for k, c in out) + " (target 0.139 +- 0.02)",
    )


def test_nonseparable_oracle_match():
    """Criterion: 121 vs spectral oracle within 5% at 6 lags; non-product."""
    spec = build_lattice(24, 24, 16, buffer=5, dt=0.5)
    m = ModelSpec(ModelKind.NONSEPARABLE_121, 0.25, 0.2, 24.0, 44.4)
    F = factorize(build_precision(m, spec))
    mid = spec.mid_node()
    ns = spec.n_spatial
    e = np.zeros(spec.n_nodes)
    e[mid] = 1.0
    col = F.solve(e)
    v0 = col[mid]
    rels = []
    for dx_cells, dt_steps in [(2, 0), (5, 0), (0, 1), (0, 2), (2, 1), (5, 2)]:
        built = col[mid + dx_cells + dt_steps * ns] / v0
        want = spectral_oracle(m, dx_cells * spec.dx, dt_steps * spec.dt)
        rels.append(abs(built / want - 1.0))
    c_st = col[mid + 2 + 4 * ns] / v0
    c_s = col[mid + 2] / v0
    c_t = col[mid + 4 * ns] / v0
    gap = abs(c_st - c_s * c_t)
    ok = max(rels) <= 0.05 and gap > 0.01
    assert report(
        "nonseparable-oracle", ok,
        f"max rel diff {max(rels):.3%} over 6 lags; separability gap {gap:.3f}",
    )


# ---------------------------------------------------------------------------
# simulation study criteria (shared cached run)
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def study():
    def build():
        configs = scenario_grid(full=False, replicates=20)
        threads = min(2, os.cpu_count() or 1)
        return run_experiment(configs, threads=threads)

    reports = _cached(f"study-{STUDY_PROTOCOL}-reps20-seed20260810", build)
    by_key = {
        (r.config.kind, r.config.autocorr, r.config.s_f, r.config.t_f): r
        for r in reports
    }
    return by_key


def test_study_all_replicates_succeeded(study):
    bad = [(k, r.n_failed) for k, r in study.items() if not r.valid]
    assert report("study-replicate-failures", not bad, f"invalid scenarios: {bad}")


def test_table3_band_reproduction(study):
    """Criterion: separable RMSE within +-0.02 of the published cells."""
    lines, misses_c, misses_a = [], [], []
    for lvl in _LEVELS:
        for cell in _CELLS:
            r = study[(ModelKind.SEPARABLE_102, lvl, *cell)]
            dc = r.rmse - _TABLE3_CONT[lvl][cell]
            da = (r.rmse_areal or np.nan) - _TABLE3_AREAL[lvl][cell]
            if abs(dc) > 0.02:
                misses_c.append((lvl, cell, round(dc, 4)))
            if not (abs(da) <= 0.02):
                misses_a.append((lvl, cell, round(da, 4)))
            lines.append(f"{lvl[:3]}{cell}: cont {r.rmse:.4f} ({dc:+.4f}) "
                         f"areal {r.rmse_areal:.4f} ({da:+.4f})")
    ordering_bad = [
        cell for cell in _CELLS
        if not study[(ModelKind.SEPARABLE_102, 'strong', *cell)].rmse
        < study[(ModelKind.SEPARABLE_102, 'strong', *cell)].rmse_areal
    ]
    ok = not misses_c and not misses_a and not ordering_bad
    detail = (
        f"cont misses: {misses_c or 'none'}; areal misses: {misses_a or 'none'}; "
        f"strong cont<areal violations: {ordering_bad or 'none'}"
    )
    report("table3-bands", ok, detail)
    for line in lines:
        print("   ", line)
    assert ok


def test_table5_band_reproduction(study):
    """Criterion: non-separable RMSE within +-0.02 of the published cells."""
    misses = []
    for lvl in _LEVELS:
        for cell in _CELLS:
            r = study[(ModelKind.NONSEPARABLE_121, lvl, *cell)]
            d = r.rmse - _TABLE5[lvl][cell]
            if abs(d) > 0.02:
                misses.append((lvl, cell, round(d, 4)))
    assert report("table5-bands", not misses, f"misses: {misses or 'none'}")


def test_calibration_ecp_and_width(study):
    """Criterion: ECP in [0.85, 0.99]; width non-decreasing in s_f (slack 0.02)."""
    bad_ecp = [
        (k[0].value, k[1], k[2], k[3], round(r.ecp, 3))
        for k, r in study.items() if not (0.85 <= r.ecp <= 0.99)
    ]
    bad_width = []
    for kind in ModelKind:
        for lvl in _LEVELS:
            for tf in (2, 4):
                ws = [study[(kind, lvl, sf, tf)].mean_width for sf in (2, 4, 8)]
                if not all(ws[i + 1] >= ws[i] - 0.02 for i in range(2)):
                    bad_width.append((kind.value, lvl, tf, [round(w, 3) for w in ws]))
    ok = not bad_ecp and not bad_width
    assert report(
        "calibration", ok,
        f"ECP violations: {bad_ecp or 'none'}; width violations: {bad_width or 'none'}",
    )


def test_parameter_coverage(study):
    """Criterion: each of 5 parameters covered >= 80% at (2,2) strong."""
    rows = []
    ok = True
    for kind in ModelKind:
        pc = study[(kind, "strong", 2, 2)].param_cover
        for name in ("sigma2", "range_s", "range_t", "tau_eps", "beta0"):
            ok = ok and pc[name] >= 0.80
            rows.append(f"{kind.value}.{name}={pc[name]:.2f}")
    assert report("parameter-coverage", ok, " ".join(rows))


def test_rmse_monotonicity(study):
    """Criterion: replicate-mean RMSE non-decreasing in each factor, slack 0.005."""
    bad = []
    for kind in ModelKind:
        for lvl in _LEVELS:
            for tf in (2, 4):
                r = [study[(kind, lvl, sf, tf)].rmse for sf in (2, 4, 8)]
                if not all(r[i + 1] >= r[i] - 0.005 for i in range(2)):
                    bad.append((kind.value, lvl, f"tf={tf}", [round(v, 4) for v in r]))
            for sf in (2, 4, 8):
                r = [study[(kind, lvl, sf, tf)].rmse for tf in (2, 4)]
                if not r[1] >= r[0] - 0.005:
                    bad.append((kind.value, lvl, f"sf={sf}", [round(v, 4) for v in r]))
    assert report("rmse-monotonicity", not bad, f"violations: {bad or 'none'}")


def test_sigma_convention_floor_evidence(study):
    """Documented check: the variance reading of the scale 0.25 is infeasible.

    The Bayes-optimal RMSE at (2,2) strong under sigma2 = 0.25 exceeds every
    published (2,2) cell by far, while the sd reading (sigma2 = 0.0625) used
    by the study lands inside the bands; assert the floor computation that
    backs the convention choice.
    """
    from stdisagg.infer import _CollapsedEngine

    spec = build_lattice(24, 24, 24, buffer=5)
    m = ModelSpec(ModelKind.SEPARABLE_102, 0.25, 0.2, 12.0, 1 / 0.15**2)
    P = build_projection(spec, AggScheme(2, 2))
    obs = make_obs_model(np.zeros(P.n_cells), P, m)
    eng = _CollapsedEngine(obs)
    g = eng._gaussian_pieces(m)
    sd = eng.mc_sd(m, g, 100, seed=3)
    floor = float(np.sqrt((sd[spec.interior_mask()] ** 2).mean()))
    ok = floor > _TABLE3_CONT["strong"][(2, 2)] + 0.05
    assert report(
        "sigma-convention-evidence", ok,
        f"optimal RMSE under variance reading = {floor:.3f} "
        f"vs published 0.143 (gap > 0.05 confirms sd reading)",
    )


# ---------------------------------------------------------------------------
# synthetic India-shaped application
# ---------------------------------------------------------------------------

_INDIA = dict(
    ncx=17, ncy=18, nct=20, s_f=3, t_f=3,
    x0=67.0, y0=8.0, cell=0.75, dt=1.0,
    sigma2=0.09, range_s=1.5, range_t=30.0, tau_eps=1e4,
    beta=(2.2, -0.08), replicates=10,
)


def _india_elevation(spec) -> Field:
    """Deterministic multi-scale terrain (km): ridge, massif, and hills."""
    xs = np.linspace(0.0, 1.0, spec.nbx)
    ys = np.linspace(0.0, 1.0, spec.nby)
    X, Y = xs[None, :], ys[:, None]
    elev = (
        2.8 * np.exp(-((X - 0.72) ** 2 + (Y - 0.78) ** 2) / 0.02)
        + 1.4 * np.exp(-((X - 0.25) ** 2 + (Y - 0.45) ** 2) / 0.05)
        + 0.8 * (1 - Y)
        + 0.35 * np.sin(9 * np.pi * X) * np.cos(7 * np.pi * Y)
        + 0.25 * np.sin(17 * np.pi * (X + Y))
    )
    elev = np.maximum(elev, 0.0)
    return Field(spec, np.tile(elev.ravel(), spec.nt))


def _india_replicate(rep: int) -> dict:
    c = _INDIA
    nx, ny, nt = c["ncx"] * c["s_f"], c["ncy"] * c["s_f"], c["nct"] * c["t_f"]
    dx = c["cell"] / c["s_f"]
    spec = build_lattice(
        nx, ny, nt,
        (c["x0"], c["x0"] + nx * dx, c["y0"], c["y0"] + ny * dx),
        buffer=6, t0=0.0, dt=c["dt"],
    )
    m = ModelSpec(ModelKind.NONSEPARABLE_121, c["sigma2"], c["range_s"],
                  c["range_t"], c["tau_eps"])
    elev = _india_elevation(spec)
    W = simulate_field(m, spec, list(c["beta"]), [elev],
                       seed=np.random.SeedSequence((777, rep)), method="modes")
    P = build_projection(spec, AggScheme(c["s_f"], c["t_f"]))
    y = aggregate_observe(W, P, m.tau_eps, seed=np.random.SeedSequence((778, rep)))
    obs = make_obs_model(y, P, m, X=[elev])
    fr = fit(obs, FitOptions(maxiter=120, tol=1e-4, compute_theta_ci=False,
                             seed=rep, mc_samples=200))
    truth_i = crop_interior(W)
    rmse = float(np.sqrt(np.mean((crop_interior(fr.latent_mean).values - truth_i.values) ** 2)))
    probs = {c_: exceedance(fr, c_).values for c_ in (2.5, 3.0, 3.5)}
    monotone = bool(
        np.all(probs[2.5] >= probs[3.0]) and np.all(probs[3.0] >= probs[3.5])
    )
    lo, hi = fr.beta_ci(1)
    return dict(
        beta1=float(fr.beta_mean[1]), beta1_lo=float(lo), beta1_hi=float(hi),
        excludes_zero=bool(hi < 0 or lo > 0), rmse=rmse, monotone=monotone,
        theta={k: float(getattr(fr.theta_hat, k))
               for k in ("sigma2", "range_s", "range_t", "tau_eps")},
    )


@pytest.fixture(scope="session")
def india_runs():
    def build():
        return [_india_replicate(rep) for rep in range(_INDIA["replicates"])]

    return _cached(f"india-{STUDY_PROTOCOL}-reps{_INDIA['replicates']}", build)


def test_india_analog_elevation_and_exceedance(india_runs):
    """Criterion: beta1 CI excludes 0 in >= 80% of replicates; exceedance
    monotone in the threshold. (Full-scale published application is out of
    desk scope; this synthetic analog substitutes.)"""
    n_exclude = sum(r["excludes_zero"] for r in india_runs)
    all_monotone = all(r["monotone"] for r in india_runs)
    betas = [round(r["beta1"], 4) for r in india_runs]
    ok = n_exclude >= 8 and all_monotone
    assert report(
        "india-analog", ok,
        f"CI excludes 0 in {n_exclude}/10; exceedance monotone: {all_monotone}; "
        f"beta1 estimates {betas} (truth -0.08)",
    )
