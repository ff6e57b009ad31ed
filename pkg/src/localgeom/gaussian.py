"""Gaussian machinery for ancestral graph models.

Covers the structural-equation parameterization of a mixed graph, partial
correlations, sample covariances and maximum likelihood fitting by residual
iterative conditional fitting (RICF).
"""
from __future__ import annotations

import numbers
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from .graphs import BIDIRECTED, DIRECTED, UNDIRECTED, MixedGraph, build_discpath_graphs, check_mag

__all__ = [
    "PD_TOL",
    "NotPositiveDefiniteError",
    "ConvergenceError",
    "CorrMatrix",
    "SemParams",
    "SampleCov",
    "FitResult",
    "sem_to_covariance",
    "disc_path_sem",
    "partial_correlation",
    "constraint_fa",
    "constraint_fb",
    "sample_cov",
    "fit_mag_gaussian",
    "deviance",
    "dag_regression_fit",
    "write_matrix_csv",
    "read_matrix_csv",
]

PD_TOL = 1e-10


class NotPositiveDefiniteError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message, last_iterate=None, sweeps=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.sweeps = sweeps


def _check_pd(M: np.ndarray, what: str = "matrix") -> None:
    if not np.allclose(M, M.T, atol=1e-12, rtol=0):
        raise NotPositiveDefiniteError(f"{what} is not symmetric")
    lo = np.linalg.eigvalsh(M).min()
    if lo <= PD_TOL:
        raise NotPositiveDefiniteError(f"{what} is not positive definite (min eigenvalue {lo:.3g})")


@dataclass(frozen=True)
class CorrMatrix:
    entries: np.ndarray

    def __post_init__(self):
        R = np.array(self.entries, dtype=float)
        if R.ndim != 2 or R.shape[0] != R.shape[1]:
            raise ValueError("correlation matrix must be square")
        if not np.all(np.diag(R) == 1.0):
            raise ValueError("correlation matrix needs a unit diagonal")
        _check_pd(R, "correlation matrix")
        R.setflags(write=False)
        object.__setattr__(self, "entries", R)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @classmethod
    def from_covariance(cls, Sigma) -> "CorrMatrix":
        Sigma = np.asarray(Sigma, dtype=float)
        d = np.sqrt(np.diag(Sigma))
        R = Sigma / np.outer(d, d)
        np.fill_diagonal(R, 1.0)
        return cls(R)

    def __getitem__(self, idx):
        return self.entries[idx]


@dataclass(frozen=True)
class SemParams:
    """Linear SEM on a mixed graph: ``X = B^T X + eps``, ``eps ~ N(0, Omega)``.

    ``B[i, j]`` is the coefficient of the edge ``i -> j``.
    """

    graph: MixedGraph
    B: np.ndarray
    Omega: np.ndarray

    def __post_init__(self):
        p = self.graph.n
        B = np.array(self.B, dtype=float)
        Om = np.array(self.Omega, dtype=float)
        if B.shape != (p, p) or Om.shape != (p, p):
            raise ValueError("B and Omega must be p x p")
        G = self.graph
        for i in range(p):
            for j in range(p):
                if i == j:
                    continue
                kind = G.edge(i, j)
                if B[i, j] != 0 and kind != DIRECTED:
                    raise ValueError(f"B[{i},{j}] nonzero without edge {i}->{j}")
                if Om[i, j] != 0 and kind != BIDIRECTED:
                    raise ValueError(f"Omega[{i},{j}] nonzero without edge {i}<->{j}")
        if any(kind == UNDIRECTED for kind, _ in G.edges.values()):
            raise ValueError("undirected edges are not supported in the SEM parameterization")
        if abs(np.linalg.det(np.eye(p) - B)) < 1e-12:
            raise ValueError("I - B is singular")
        _check_pd(Om, "Omega")
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "Omega", Om)


@dataclass(frozen=True)
class SampleCov:
    S: np.ndarray
    n: int

    def __post_init__(self):
        S = np.array(self.S, dtype=float)
        if S.ndim != 2 or S.shape[0] != S.shape[1] or not np.allclose(S, S.T, atol=1e-12):
            raise ValueError("S must be a symmetric square matrix")
        if self.n < 1:
            raise ValueError("sample size must be at least 1")
        object.__setattr__(self, "S", S)

    @property
    def dim(self) -> int:
        return self.S.shape[0]

    def permuted(self, perm: Sequence[int]) -> "SampleCov":
        """Covariance of the relabeled variables, vertex ``v`` becoming ``perm[v]``."""
        inv = np.argsort(perm)
        return SampleCov(self.S[np.ix_(inv, inv)], self.n)


def sem_to_covariance(p: SemParams) -> np.ndarray:
    """``Sigma = (I - B)^{-T} Omega (I - B)^{-1}``."""
    A = np.linalg.inv(np.eye(p.graph.n) - p.B)
    Sigma = A.T @ p.Omega @ A
    return (Sigma + Sigma.T) / 2


def disc_path_sem(k: int, s: float, variant: str = "Gk", path_weight: float = 0.4,
                  other_weight: float = 0.5, error_variance: float = 1.0) -> SemParams:
    """SEM on ``G_k`` or ``G_k'`` with path edges ``0.4 * 2**-s`` and other edges 0.5.

    The path edges are ``1<->2, ..., (k-1)<->k`` and the final edge between
    ``k`` and ``k+1``; the remaining edges ``i -> k+1`` carry ``other_weight``.
    """
    Gk, Gkp = build_discpath_graphs(k)
    if variant in ("Gk", "G"):
        G = Gk
    elif variant in ("Gk'", "Gk_prime", "G'"):
        G = Gkp
    else:
        raise ValueError(f"unknown variant {variant!r}")
    n = k + 1
    rho = path_weight * 2.0 ** (-s)
    B = np.zeros((n, n))
    Om = np.eye(n) * error_variance
    for (i, j), (kind, tail) in G.edges.items():
        on_path = j == i + 1 and j <= k
        w = rho if on_path else other_weight
        if kind == BIDIRECTED:
            Om[i, j] = Om[j, i] = w
        else:
            head = j if tail == i else i
            B[tail, head] = w
    try:
        params = SemParams(G, B, Om)
        _check_pd(sem_to_covariance(params), "implied covariance")
    except NotPositiveDefiniteError as e:
        raise NotPositiveDefiniteError(f"k={k}, s={s}: {e}") from None
    return params


def partial_correlation(Sigma, i: int, j: int, C: Iterable[int] = ()) -> float:
    """``rho_{ij.C}`` from the Schur complement of ``Sigma_CC``."""
    Sigma = np.asarray(Sigma, dtype=float)
    C = list(C)
    if i == j or i in C or j in C:
        raise ValueError("need i != j, both outside C")
    idx = [i, j]
    M = Sigma[np.ix_(idx, idx)]
    if C:
        SCC = Sigma[np.ix_(C, C)]
        if np.linalg.cond(SCC) > 1e14:
            raise np.linalg.LinAlgError("Sigma_CC is singular")
        M = M - Sigma[np.ix_(idx, C)] @ np.linalg.solve(SCC, Sigma[np.ix_(C, idx)])
    return float(M[0, 1] / np.sqrt(M[0, 0] * M[1, 1]))


def _rho(P, a, b):
    return P[a - 1, b - 1]


def constraint_fb(Pi) -> float:
    """``rho14 - rho12 rho24`` (vertices 1..4)."""
    P = np.asarray(getattr(Pi, "entries", Pi))
    return float(_rho(P, 1, 4) - _rho(P, 1, 2) * _rho(P, 2, 4))


def constraint_fa(Pi) -> float:
    """``rho14 - rho12 rho24 + rho12 rho34 rho23 - rho14 rho23^2`` (``rho13 = 0`` form)."""
    P = np.asarray(getattr(Pi, "entries", Pi))
    r12, r14, r23 = _rho(P, 1, 2), _rho(P, 1, 4), _rho(P, 2, 3)
    r24, r34 = _rho(P, 2, 4), _rho(P, 3, 4)
    return float(r14 - r12 * r24 + r12 * r34 * r23 - r14 * r23 ** 2)


# -- sampling ----------------------------------------------------------
_DIRECT_LIMIT = 200_000
_CHUNK = 65_536


def sample_cov(Sigma, n: int, seed, method: str = "auto") -> SampleCov:
    """Second-moment matrix ``X^T X / n`` of ``n`` mean-zero Gaussian draws.

    ``method="direct"`` draws the observations; ``"wishart"`` draws
    ``X^T X`` from its Bartlett decomposition, which has the same
    distribution and costs O(p^2) regardless of ``n``.  ``"auto"`` switches
    to the Wishart route above 200k observations.  ``seed`` may be an int,
    a :class:`numpy.random.SeedSequence` or a Generator.
    """
    Sigma = np.asarray(Sigma, dtype=float)
    p = Sigma.shape[0]
    if n < p + 1:
        raise ValueError(f"need n >= dim + 1 (n={n}, dim={p})")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    L = np.linalg.cholesky(Sigma)
    if method == "auto":
        method = "direct" if n <= _DIRECT_LIMIT else "wishart"
    if method == "direct":
        W = np.zeros((p, p))
        left = n
        while left > 0:
            m = min(left, _CHUNK)
            Z = rng.standard_normal((m, p))
            W += Z.T @ Z
            left -= m
    elif method == "wishart":
        A = np.zeros((p, p))
        A[np.diag_indices(p)] = np.sqrt(rng.chisquare(n - np.arange(p)))
        low = np.tril_indices(p, -1)
        A[low] = rng.standard_normal(len(low[0]))
        W = A @ A.T
    else:
        raise ValueError(f"unknown sampling method {method!r}")
    S = L @ W @ L.T / n
    return SampleCov((S + S.T) / 2, n)


# -- fitting ------------------------------------------------------------
@dataclass
class FitResult:
    Sigma: np.ndarray
    deviance: float
    B: np.ndarray
    Omega: np.ndarray
    sweeps: int


def deviance(S, Sigma, n: int) -> float:
    """``n (tr(S Sigma^-1) - log det(S Sigma^-1) - p)``."""
    S = np.asarray(S)
    K = np.linalg.solve(Sigma, S)
    sign, logdet = np.linalg.slogdet(K)
    if sign <= 0:
        raise NotPositiveDefiniteError("S Sigma^-1 has nonpositive determinant")
    return float(n * (np.trace(K) - logdet - S.shape[0]))


def _implied(B, Om):
    A = np.linalg.inv(np.eye(B.shape[0]) - B)
    Sig = A.T @ Om @ A
    return (Sig + Sig.T) / 2


def fit_mag_gaussian(G: MixedGraph, S: SampleCov, tol: float = 1e-9, max_sweeps: int = 500,
                     check: bool = True) -> FitResult:
    """Maximum likelihood fit of the Gaussian model of a MAG by RICF.

    Each step regresses one vertex on its parents and on pseudo-variables
    for its spouses (the spouses' current residuals, decorrelated through
    ``Omega_{-v,-v}``) with all other parameters held fixed.  Stops when the
    largest parameter change in a sweep drops below ``tol``.
    """
    if check:
        check_mag(G)
    if any(kind == UNDIRECTED for kind, _ in G.edges.values()):
        raise ValueError("undirected edges are not supported by the fitter")
    Smat = S.S
    p = G.n
    if S.dim != p:
        raise ValueError("dimension mismatch between graph and covariance")
    if S.n <= p:
        raise ValueError("need n > dim")
    B = np.zeros((p, p))
    Om = np.diag(np.diag(Smat)).astype(float)
    plan = []
    for v in range(p):
        pa = G.parents(v)
        sp = G.spouses(v)
        others = [u for u in range(p) if u != v]
        sp_pos = [others.index(u) for u in sp]
        plan.append((v, pa, sp, others, sp_pos))

    # vertices without spouses have a closed-form update that never changes
    for v, pa, sp, others, sp_pos in plan:
        if not sp:
            if pa:
                coef = np.linalg.solve(Smat[np.ix_(pa, pa)], Smat[pa, v])
                B[pa, v] = coef
                Om[v, v] = Smat[v, v] - coef @ Smat[pa, v]
            else:
                Om[v, v] = Smat[v, v]
    active = [row for row in plan if row[2]]

    I = np.eye(p)
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        delta = 0.0
        for v, pa, sp, others, sp_pos in active:
            Oinv = np.linalg.inv(Om[np.ix_(others, others)])
            A_o = (I - B.T)[others, :]          # residual map, rows = other vertices
            Tz = Oinv[sp_pos, :] @ A_o          # pseudo-variables as linear maps of X
            if pa:
                T = np.vstack([I[pa, :], Tz])
            else:
                T = Tz
            TS = T @ Smat
            coef = np.linalg.solve(TS @ T.T, TS[:, v])
            rss = Smat[v, v] - coef @ TS[:, v]
            npa = len(pa)
            new_b = coef[:npa]
            new_w = coef[npa:]
            if pa:
                delta = max(delta, np.max(np.abs(B[pa, v] - new_b)))
                B[pa, v] = new_b
            delta = max(delta, np.max(np.abs(Om[v, sp] - new_w)))
            Om[v, sp] = new_w
            Om[sp, v] = new_w
            w_o = Om[v, others]
            new_vv = rss + w_o @ Oinv @ w_o
            delta = max(delta, abs(Om[v, v] - new_vv))
            Om[v, v] = new_vv
        if delta < tol:
            break
    else:
        if active:
            raise ConvergenceError(
                f"RICF did not converge in {max_sweeps} sweeps",
                last_iterate=(B.copy(), Om.copy()), sweeps=max_sweeps)
    Sigma = _implied(B, Om)
    return FitResult(Sigma, max(deviance(Smat, Sigma, S.n), 0.0), B, Om, sweeps)


def dag_regression_fit(G: MixedGraph, S: SampleCov) -> FitResult:
    """Closed-form MLE for a DAG: least squares of each vertex on its parents."""
    if not G.is_dag():
        raise ValueError("graph is not a DAG")
    Smat = S.S
    p = G.n
    B = np.zeros((p, p))
    Om = np.zeros((p, p))
    for v in range(p):
        pa = G.parents(v)
        if pa:
            coef = np.linalg.solve(Smat[np.ix_(pa, pa)], Smat[pa, v])
            B[pa, v] = coef
            Om[v, v] = Smat[v, v] - coef @ Smat[pa, v]
        else:
            Om[v, v] = Smat[v, v]
    Sigma = _implied(B, Om)
    return FitResult(Sigma, max(deviance(Smat, Sigma, S.n), 0.0), B, Om, 0)


# -- CSV ---------------------------------------------------------------
def write_matrix_csv(M, fh) -> None:
    M = np.asarray(M, dtype=float)
    for row in M:
        fh.write(",".join(repr(float(x)) for x in row) + "\n")


def read_matrix_csv(fh) -> np.ndarray:
    rows = [list(map(float, line.split(","))) for line in fh if line.strip() and not line.startswith("#")]
    M = np.array(rows)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("matrix CSV must be square")
    return M
