"""Shared brute-force oracles and small-problem builders for the test suite."""

from __future__ import annotations

import numpy as np
from scipy.stats import multivariate_normal

from stdisagg.aggregate import AggScheme, aggregate_observe, build_projection
from stdisagg.infer import make_obs_model
from stdisagg.lattice import build_lattice
from stdisagg.stmodel import ModelKind, ModelSpec, build_precision, simulate_field


def dense_oracle_loglik(obs, m: ModelSpec) -> float:
    """Marginal log-likelihood via dense inversion of the full latent precision."""
    Q = build_precision(m, obs.spec).dense()
    Cov = np.linalg.inv(Q)
    idx = obs.observed
    Pm = obs.P.matrix.toarray()[idx]
    X = obs.X_agg[idx]
    Sig = Pm @ Cov @ Pm.T + np.eye(len(idx)) / m.tau_eps
    if X.shape[1]:
        Sig = Sig + X @ X.T / obs.beta_prior_precision
    return float(
        multivariate_normal.logpdf(obs.y[idx], mean=np.zeros(len(idx)), cov=Sig)
    )


def small_dataset(
    kind=ModelKind.SEPARABLE_102,
    nx=4, ny=4, nt=3, buffer=1, s_f=2, t_f=1,
    sigma2=0.3, range_s=0.4, range_t=2.0, tau_eps=30.0,
    seed=1, noise_seed=2, beta=(0.1,), X=None,
):
    spec = build_lattice(nx, ny, nt, (0.0, 1.0, 0.0, 1.0), buffer=buffer)
    m = ModelSpec(kind=kind, sigma2=sigma2, range_s=range_s,
                  range_t=range_t, tau_eps=tau_eps)
    P = build_projection(spec, AggScheme(s_f, t_f))
    W = simulate_field(m, spec, list(beta), X, seed=seed)
    y = aggregate_observe(W, P, tau_eps, seed=noise_seed)
    obs = make_obs_model(y, P, m, X=X)
    return obs, m, W


def corr_from_samples(samples: np.ndarray, i: int, j: int) -> float:
    """Empirical correlation of coordinates i, j over sample columns."""
    a, b = samples[i], samples[j]
    a = a - a.mean()
    b = b - b.mean()
    return float(np.sum(a * b) / np.sqrt(np.sum(a * a) * np.sum(b * b)))
