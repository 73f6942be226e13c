"""Areal comparison model: separable Besag (ICAR) x AR(1) at cell level.

The spatial component is intrinsic (Q_S = D - W, rank n-1 on a connected
graph); it is made proper by restriction to the per-slice sum-to-zero
subspace, matching the pseudoinverse covariance, with a diagonal-jitter
fallback. The temporal chain is z_j | z_{j-1} ~ N(rho z_{j-1}, tau_S^{-1}
Q_S^-) with the stationary (1-rho^2)^{-1}-scaled first slice, giving joint
precision tau_S (T(rho) kron Q_S) in time-major order.

Since the noise is i.i.d. and every cell is observed, the observation
covariance diagonalizes in the (temporal eigenvectors kron spatial
eigenvectors) basis, so likelihood evaluations are closed-form diagonal
algebra; hyperparameters (log tau_S, atanh rho, log tau_eps) go through the
same Nelder-Mead + finite-difference-Hessian machinery as the
disaggregation model. Disaggregation duplicates each cell posterior to its
member fine nodes.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.optimize import minimize
from scipy.sparse.csgraph import connected_components

from .aggregate import Projection
from .errors import DegenerateData, DimensionMismatch, DisconnectedGraph
from .lattice import Field
from .sparsela import SparseSym
from .stmodel import ar1_precision


@dataclass(frozen=True)
class Adjacency:
    n_regions: int
    pairs: np.ndarray  # (m, 2) with i < j, each undirected edge once

    def matrix(self) -> sp.csr_matrix:
        i, j = self.pairs[:, 0], self.pairs[:, 1]
        data = np.ones(len(self.pairs))
        W = sp.coo_matrix(
            (np.concatenate([data, data]), (np.concatenate([i, j]), np.concatenate([j, i]))),
            shape=(self.n_regions, self.n_regions),
        )
        return W.tocsr()

    def n_components(self) -> int:
        ncomp, _ = connected_components(self.matrix(), directed=False)
        return ncomp


def grid_adjacency(ncx: int, ncy: int) -> Adjacency:
    """Rook adjacency of an ncx x ncy cell grid, region index = cy * ncx + cx."""
    pairs = []
    for cy in range(ncy):
        for cx in range(ncx):
            r = cy * ncx + cx
            if cx + 1 < ncx:
                pairs.append((r, r + 1))
            if cy + 1 < ncy:
                pairs.append((r, r + ncx))
    return Adjacency(n_regions=ncx * ncy, pairs=np.asarray(pairs, dtype=np.int64))


def besag_precision(adj: Adjacency) -> SparseSym:
    """Q_S = D - W; rank n-1 on connected graphs, row sums exactly zero."""
    W = adj.matrix()
    deg = np.asarray(W.sum(axis=1)).ravel()
    Q = sp.diags(deg) - W
    if adj.n_components() > 1:
        warnings.warn(
            "adjacency graph is disconnected: Besag precision has rank "
            f"deficiency {adj.n_components()}",
            stacklevel=2,
        )
    return SparseSym.from_matrix(Q.tocsc())


@dataclass
class ArealFit:
    beta_mean: np.ndarray
    beta_sd: np.ndarray
    rho_hat: float
    rho_ci: tuple[float, float]
    tau_S_hat: float
    tau_eps_hat: float
    theta_ci: dict
    cell_mean: np.ndarray
    cell_sd: np.ndarray
    loglik: float
    converged: bool
    n_evals: int


@dataclass(frozen=True)
class ArealFitOptions:
    maxiter: int = 400
    tol: float = 1e-5
    proper: str = "constraint"   # or "jitter"
    jitter: float = 1e-8
    hessian_step: float = 0.05


class _ArealEngine:
    def __init__(self, y, X, adj: Adjacency, n_times: int, opts: ArealFitOptions):
        n_reg = adj.n_regions
        if y.shape != (n_reg * n_times,):
            raise DimensionMismatch("y must be time-major of length n_regions*n_times")
        if adj.n_components() > 1:
            raise DisconnectedGraph("areal fit requires a connected region graph")
        self.y = y
        self.X = X
        self.M = n_times
        self.N = n_reg
        self.p = X.shape[1]
        self.eps = 1e-6
        Qs = besag_precision(adj).dense()
        if opts.proper == "jitter":
            lam, V = np.linalg.eigh(Qs + opts.jitter * np.eye(n_reg))
            self.lam_S = lam
            self.n_field = n_reg
            self.B_S = V
            self.lam_full = lam
        else:
            # orthonormal basis of the sum-to-zero subspace (Helmert columns)
            H = np.zeros((n_reg, n_reg - 1))
            for k in range(1, n_reg):
                H[:k, k - 1] = 1.0
                H[k, k - 1] = -k
                H[:, k - 1] /= math.sqrt(k * (k + 1))
            Qt = H.T @ Qs @ H
            lam, V = np.linalg.eigh(Qt)
            self.lam_S = lam            # all > 0 on connected graphs
            self.n_field = n_reg - 1
            # basis completed with the constant mode (no field variance there)
            self.B_S = np.column_stack(
                [H @ V, np.full(n_reg, 1.0 / math.sqrt(n_reg))]
            )
            self.lam_full = np.concatenate([lam, [np.inf]])

    def _diag_and_transform(self, tau_S, rho, tau_eps):
        T = ar1_precision(self.M, rho, unit_marginal=False).dense()
        lam_T, V_T = np.linalg.eigh(T)
        with np.errstate(divide="ignore"):
            cov_z = 1.0 / (tau_S * np.outer(lam_T, self.lam_full))
        cov_z[:, self.n_field :] = 0.0
        d = cov_z + 1.0 / tau_eps
        return lam_T, V_T, cov_z, d

    def _to_eig(self, v, V_T):
        Vv = v.reshape(self.M, self.N, -1)
        return np.einsum("am,arq,rb->mbq", V_T, Vv, self.B_S)

    def loglik_parts(self, theta):
        tau_S, rho, tau_eps = math.exp(theta[0]), math.tanh(theta[1]), math.exp(theta[2])
        lam_T, V_T, cov_z, d = self._diag_and_transform(tau_S, rho, tau_eps)
        dflat = d.reshape(-1)
        yt = self._to_eig(self.y, V_T).reshape(-1)
        Xt = self._to_eig(self.X, V_T).reshape(-1, self.p)
        Siy = yt / dflat
        SiX = Xt / dflat[:, None]
        Mm = Xt.T @ SiX
        A = Mm + self.eps * np.eye(self.p)
        a_vec = Xt.T @ Siy
        cho_A = sla.cho_factor(A, lower=True)
        beta = sla.cho_solve(cho_A, a_vec)
        quad = float(yt @ Siy) - float(a_vec @ beta)
        logdet = float(np.sum(np.log(dflat))) + 2 * float(
            np.sum(np.log(np.diag(cho_A[0])))
        ) - self.p * math.log(self.eps)
        n = yt.size
        ll = -0.5 * (n * math.log(2 * math.pi) + logdet + quad)
        return dict(
            ll=ll, beta=beta, cho_A=cho_A, lam_T=lam_T, V_T=V_T, cov_z=cov_z,
            d=d, yt=yt, Xt=Xt,
        )

    def posterior_cells(self, parts):
        """Posterior mean/sd of eta = X beta + z per cell.

        All pieces contract through the orthonormal basis E[(a,r),(m,b)] =
        V_T[a,m] B_S[r,b]; the beta coupling uses the eps-free identity
        Cov(beta, z_i | y) = -A^{-1} u_i with u_i = X~^T D^{-1} h~_i.
        """
        cov_z = parts["cov_z"].reshape(-1)
        d = parts["d"].reshape(-1)
        V_T = parts["V_T"]
        beta = parts["beta"]
        resid = parts["yt"] - parts["Xt"] @ beta
        z_mode = (cov_z / d * resid).reshape(self.M, self.N)
        z_cells = np.einsum("am,mb,rb->ar", V_T, z_mode, self.B_S)
        mean = self.X @ beta + z_cells.reshape(-1)

        var_mode = (cov_z - cov_z**2 / d).reshape(self.M, self.N)
        var_z = np.einsum("am,mb,rb->ar", V_T**2, var_mode, self.B_S**2).reshape(-1)

        U = parts["Xt"].T * (cov_z / d)[None, :]                  # p x modes
        u_cell = np.einsum(
            "pmb,am,rb->par", U.reshape(self.p, self.M, self.N), V_T, self.B_S
        ).reshape(self.p, self.M * self.N)
        var_corr = np.einsum(
            "pi,pi->i", u_cell, sla.cho_solve(parts["cho_A"], u_cell)
        )
        xAinv = sla.cho_solve(parts["cho_A"], self.X.T)           # p x cells
        cross = np.einsum("pi,pi->i", xAinv, u_cell)
        var_beta_term = np.einsum("ip,pi->i", self.X, xAinv)
        var = var_z + var_corr + var_beta_term - 2 * cross
        return mean, np.sqrt(np.maximum(var, 0.0))


def fit_areal(
    y: np.ndarray,
    X_agg: np.ndarray,
    adj: Adjacency,
    n_times: int,
    opts: ArealFitOptions = ArealFitOptions(),
) -> ArealFit:
    """Marginal-likelihood fit of the Besag x AR(1) areal model."""
    y = np.asarray(y, dtype=float)
    v = float(np.var(y))
    if v <= 0:
        raise DegenerateData("observations are constant")
    eng = _ArealEngine(y, X_agg, adj, n_times, opts)
    x0 = np.array([math.log(2.0 / v), math.atanh(0.5), math.log(2.0 / v)])
    trace = []

    def objective(th):
        if abs(th[1]) > 6.0 or abs(th[0]) > 25 or abs(th[2]) > 25:
            return np.inf
        try:
            ll = eng.loglik_parts(th)["ll"]
        except (sla.LinAlgError, FloatingPointError):
            return np.inf
        if not np.isfinite(ll):
            return np.inf
        trace.append(ll)
        return -ll

    res = minimize(
        objective, x0, method="Nelder-Mead",
        options=dict(maxiter=opts.maxiter, fatol=opts.tol, xatol=1e-3),
    )
    th = res.x
    parts = eng.loglik_parts(th)
    mean, sd = eng.posterior_cells(parts)

    H = _fd_hessian3(objective, th, opts.hessian_step)
    sd_log = _hessian_sd3(H)
    tau_S, rho, tau_eps = math.exp(th[0]), math.tanh(th[1]), math.exp(th[2])
    theta_ci = {
        "tau_S": (math.exp(th[0] - 1.96 * sd_log[0]), math.exp(th[0] + 1.96 * sd_log[0])),
        "rho": (
            math.tanh(th[1] - 1.96 * sd_log[1]),
            math.tanh(th[1] + 1.96 * sd_log[1]),
        ),
        "tau_eps": (math.exp(th[2] - 1.96 * sd_log[2]), math.exp(th[2] + 1.96 * sd_log[2])),
    }
    var_beta = sla.cho_solve(parts["cho_A"], np.eye(eng.p))
    return ArealFit(
        beta_mean=parts["beta"],
        beta_sd=np.sqrt(np.diag(var_beta)),
        rho_hat=rho,
        rho_ci=theta_ci["rho"],
        tau_S_hat=tau_S,
        tau_eps_hat=tau_eps,
        theta_ci=theta_ci,
        cell_mean=mean,
        cell_sd=sd,
        loglik=-float(res.fun),
        converged=bool(res.success),
        n_evals=len(trace),
    )


def duplicate_to_fine(fit: ArealFit, P: Projection) -> tuple[Field, Field]:
    """Piecewise-constant disaggregation of cell posteriors to interior nodes."""
    spec = P.spec.interior_spec()
    if P.scheme is None:
        raise DimensionMismatch("duplication requires a uniform scheme")
    sf, tf = P.scheme.s_f, P.scheme.t_f
    mgrid = fit.cell_mean.reshape(P.nct, P.ncy, P.ncx)
    sgrid = fit.cell_sd.reshape(P.nct, P.ncy, P.ncx)
    mean = np.repeat(np.repeat(np.repeat(mgrid, tf, axis=0), sf, axis=1), sf, axis=2)
    sd = np.repeat(np.repeat(np.repeat(sgrid, tf, axis=0), sf, axis=1), sf, axis=2)
    return Field(spec, mean.ravel()), Field(spec, sd.ravel())


def _fd_hessian3(f, x, h):
    k = x.size
    H = np.empty((k, k))
    f0 = f(x)
    for i in range(k):
        e = np.zeros(k); e[i] = h
        H[i, i] = (f(x + e) - 2 * f0 + f(x - e)) / h**2
    for i in range(k):
        for j in range(i + 1, k):
            ei = np.zeros(k); ei[i] = h
            ej = np.zeros(k); ej[j] = h
            H[i, j] = H[j, i] = (
                f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)
            ) / (4 * h**2)
    return H


def _hessian_sd3(H):
    Hs = 0.5 * (H + H.T)
    w, V = np.linalg.eigh(Hs)
    w = np.maximum(np.abs(w), 1e-10)
    return np.sqrt(np.maximum(np.diag((V / w) @ V.T), 0.0))
