"""Symmetric sparse linear algebra: assembly, Cholesky, solves, GMRF sampling.

The numeric engine is CHOLMOD (via cvxopt): fill-reducing
approximate-minimum-degree analysis plus a supernodal LL^T factorization.
A natural-order backend (SuperLU with no column permutation) is kept as a
debugging fallback for banded systems. Dense NumPy paths appear only as
oracles in tests, never here.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

import cvxopt
import cvxopt.cholmod as _cholmod

from .errors import DimensionMismatch, NotPositiveDefinite

# Supernodal LL^T throughout: `diag` then returns diag(L) directly and the
# triangular solve codes refer to L rather than an LDL^T pair.
_cholmod.options["supernodal"] = 2

_SYS_A = 0       # solve A x = b
_SYS_LT = 5      # solve L^T x = b
_SYS_P = 7       # x = P b
_SYS_PT = 8      # x = P^T b

# Relative pivot tolerance separating indefinite/intrinsic matrices from
# roundoff in the natural-order backend.
PD_PIVOT_RTOL = 1e-12


class OrderingChoice(Enum):
    AMD = "amd"
    NATURAL = "natural"


@dataclass(frozen=True)
class SparseSym:
    """Symmetric sparse matrix, lower triangle stored (CSC)."""

    n: int
    lower: sp.csc_matrix

    @staticmethod
    def from_matrix(A) -> "SparseSym":
        """Build from any scipy sparse or dense symmetric matrix.

        Only the lower triangle of `A` is read, so callers may pass either a
        full symmetric matrix or one with the upper part already dropped.
        """
        A = sp.csc_matrix(A)
        if A.shape[0] != A.shape[1]:
            raise DimensionMismatch(f"matrix is {A.shape}, expected square")
        low = sp.tril(A, format="csc")
        low.sum_duplicates()
        return SparseSym(n=A.shape[0], lower=low)

    def full(self) -> sp.csc_matrix:
        """Reconstruct the full symmetric matrix from the stored triangle."""
        strict = sp.tril(self.lower, k=-1)
        return (self.lower + strict.T).tocsc()

    def dense(self) -> np.ndarray:
        return self.full().toarray()

    @property
    def nnz_lower(self) -> int:
        return self.lower.nnz

    def matvec(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.n:
            raise DimensionMismatch(f"vector length {x.shape[0]} != {self.n}")
        return self.full() @ x

    def scaled(self, a: float) -> "SparseSym":
        return SparseSym(n=self.n, lower=(self.lower * a).tocsc())


def identity(n: int) -> SparseSym:
    return SparseSym.from_matrix(sp.identity(n, format="csc"))


def _to_cvx_lower(A: SparseSym) -> cvxopt.spmatrix:
    low = A.lower.tocoo()
    return cvxopt.spmatrix(
        low.data, low.row.astype(int), low.col.astype(int), (A.n, A.n)
    )


class CholFactor:
    """Cholesky factorization P Q P^T = L L^T of an SPD SparseSym.

    Provides solves with Q, sampling from N(0, Q^{-1}), the log-determinant,
    and on demand the explicit factor `L` and `permutation`.
    """

    def __init__(self, Q: SparseSym, ordering: OrderingChoice = OrderingChoice.AMD):
        self.n = Q.n
        self.ordering = ordering
        if ordering is OrderingChoice.NATURAL:
            self._init_natural(Q)
        else:
            self._init_cholmod(Q)

    # -- CHOLMOD backend (AMD ordering) --

    def _init_cholmod(self, Q: SparseSym):
        self._Acv = _to_cvx_lower(Q)
        self._symb = _cholmod.symbolic(self._Acv, uplo="L")
        self._numeric()
        self._Lmat = None
        self._perm = None

    def _numeric(self):
        try:
            _cholmod.numeric(self._Acv, self._symb)
        except ArithmeticError as e:  # CHOLMOD reports the failing column
            pivot = e.args[0] if e.args and isinstance(e.args[0], int) else None
            raise NotPositiveDefinite(pivot=pivot) from e

    def _solve_sys(self, b: np.ndarray, sys: int) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        squeeze = b.ndim == 1
        B = cvxopt.matrix(b.reshape(self.n, -1))
        _cholmod.solve(self._symb, B, sys=sys)
        out = np.asarray(B).reshape(self.n, -1)
        return out[:, 0] if squeeze else out

    # -- SuperLU backend (natural ordering, debugging) --

    def _init_natural(self, Q: SparseSym):
        A = Q.full()
        maxdiag = float(np.max(A.diagonal()))
        try:
            lu = spla.splu(
                A,
                permc_spec="NATURAL",
                diag_pivot_thresh=0.0,
                options=dict(SymmetricMode=True),
            )
        except RuntimeError as e:
            raise NotPositiveDefinite(msg=str(e)) from e
        d = lu.U.diagonal()
        bad = np.flatnonzero(d <= PD_PIVOT_RTOL * maxdiag)
        if bad.size:
            raise NotPositiveDefinite(pivot=int(bad[0]))
        if not np.array_equal(lu.perm_r, lu.perm_c):
            raise NotPositiveDefinite(msg="pivoting kicked in: matrix not SPD")
        self._lu = lu
        self._Lmat = (lu.L @ sp.diags(np.sqrt(d))).tocsc()
        self._perm = np.asarray(lu.perm_c, dtype=np.int64)
        self._diag = np.sqrt(d)

    # -- shared interface --

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve Q x = b; `b` may be a vector or a matrix of columns."""
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.n:
            raise DimensionMismatch(f"rhs length {b.shape[0]} != {self.n}")
        if self.ordering is OrderingChoice.NATURAL:
            return self._lu.solve(b)
        return self._solve_sys(b, _SYS_A)

    def logdet(self) -> float:
        """log det Q = 2 sum log L_kk."""
        if self.ordering is OrderingChoice.NATURAL:
            return 2.0 * float(np.sum(np.log(self._diag)))
        d = np.asarray(_cholmod.diag(self._symb)).ravel()
        return 2.0 * float(np.sum(np.log(d)))

    def sample(self, z: np.ndarray) -> np.ndarray:
        """Map standard-normal draws z to N(0, Q^{-1}): solve L^T (P x) = z."""
        z = np.asarray(z, dtype=float)
        if z.shape[0] != self.n:
            raise DimensionMismatch(f"noise length {z.shape[0]} != {self.n}")
        if self.ordering is OrderingChoice.NATURAL:
            w = spla.spsolve_triangular(self._Lmat.T.tocsr(), z, lower=False)
            x = np.empty_like(w)
            x[self._perm] = w if w.ndim == 1 else w
            return x
        w = self._solve_sys(z, _SYS_LT)
        return self._solve_sys(w, _SYS_PT)

    @property
    def permutation(self) -> np.ndarray:
        """Fill-reducing ordering p with (P x)_i = x_{p_i}."""
        if self._perm is None:
            idx = self._solve_sys(np.arange(self.n, dtype=float), _SYS_P)
            self._perm = np.round(idx).astype(np.int64)
        return self._perm

    @property
    def L(self) -> sp.csc_matrix:
        """Explicit lower-triangular factor with P Q P^T = L L^T."""
        if self._Lmat is None:
            # getfactor() consumes the numeric factor, so refactorize after.
            Lcv = _cholmod.getfactor(self._symb)
            self._Lmat = sp.csc_matrix(
                (
                    np.asarray(Lcv.V).ravel(),
                    (np.asarray(Lcv.I).ravel(), np.asarray(Lcv.J).ravel()),
                ),
                shape=(self.n, self.n),
            )
            self._numeric()
        return self._Lmat


def factorize(Q: SparseSym, ordering: OrderingChoice = OrderingChoice.AMD) -> CholFactor:
    return CholFactor(Q, ordering=ordering)


def solve(F: CholFactor, b: np.ndarray) -> np.ndarray:
    return F.solve(b)


def logdet(F: CholFactor) -> float:
    return F.logdet()


def sample_gmrf(F: CholFactor, seed) -> np.ndarray:
    """One draw x ~ N(0, Q^{-1}), deterministic given `seed`.

    `seed` may be an int, a SeedSequence, or a Generator.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z = rng.standard_normal(F.n)
    return F.sample(z)


def sample_gmrf_many(F: CholFactor, seeds) -> np.ndarray:
    """Batch of independent draws; column i reproduces sample_gmrf(F, seeds[i])."""
    Z = np.column_stack(
        [np.random.default_rng(s).standard_normal(F.n) for s in seeds]
    )
    return F.sample(Z)


def quad_form(Q: SparseSym, x: np.ndarray) -> float:
    """x^T Q x."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] != Q.n:
        raise DimensionMismatch(f"vector length {x.shape[0]} != {Q.n}")
    low = Q.lower
    strict = sp.tril(low, k=-1)
    return float(x @ (low @ x) + x @ (strict.T @ x))


def kron(At: SparseSym, Bs: SparseSym) -> SparseSym:
    """Kronecker product with time-major node ordering (index = t*G + s)."""
    return SparseSym.from_matrix(sp.kron(At.full(), Bs.full(), format="csc"))
