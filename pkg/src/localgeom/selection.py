"""Model selection by sparsity in tangent-space coordinates.

``loglin_lasso`` fits an L1-penalized multinomial log-linear model over the
full binary table.  With penalty ``nu = n**delta`` the surviving parameters
estimate the tangent pattern of a Bayesian network, which ``learn_bn``
turns into a skeleton with collider orientations.  ``cov_select_moment``
is the Gaussian analogue for marginal independence structure.
"""
from __future__ import annotations

import itertools as itr
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from .gaussian import SampleCov, sample_cov
from .graphs import MixedGraph
from .loglinear import JointTable, LogLinearParams, _fwht, mask_subset, subset_mask

__all__ = [
    "InvalidConfigError",
    "SolverError",
    "CountTable",
    "SparsityPattern",
    "LassoResult",
    "LearnedStructure",
    "loglin_lasso",
    "lasso_objective",
    "kkt_residuals",
    "learn_bn",
    "BayesNet",
    "collider_table",
    "chain_table",
    "collider_bn",
    "chain_bn",
    "RecoveryCurve",
    "theorem71_experiment",
    "validate_theorem71",
    "cov_select_moment",
]

MAX_LASSO_VARS = 12


class InvalidConfigError(ValueError):
    """Experiment configuration violates a stated hypothesis."""


class SolverError(RuntimeError):
    """An optimizer failed to converge or to reach a feasible fixpoint."""


@dataclass(frozen=True)
class CountTable:
    """Cell counts over binary variables in binary-counter order."""

    counts: np.ndarray
    vars: Tuple[int, ...] = ()

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 1 or c.size < 2 or 2 ** int(round(np.log2(c.size))) != c.size:
            raise ValueError("counts must be a vector of length 2**d")
        if np.any(c < 0) or not np.all(np.equal(np.mod(c, 1), 0)):
            raise ValueError("counts must be nonnegative integers")
        c = c.astype(np.int64)
        if c.sum() < 1:
            raise ValueError("need at least one observation")
        d = int(round(np.log2(c.size)))
        vs = tuple(self.vars) if self.vars else tuple(range(d))
        if len(vs) != d:
            raise ValueError("one name per variable")
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)
        object.__setattr__(self, "vars", vs)

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def nvars(self) -> int:
        return len(self.vars)

    @classmethod
    def sample(cls, p: JointTable, n: int, rng) -> "CountTable":
        rng = np.random.default_rng(rng)
        return cls(rng.multinomial(n, p.probs), p.vars)

    @classmethod
    def from_samples(cls, X) -> "CountTable":
        X = np.asarray(X, dtype=np.int64)
        idx = (X << np.arange(X.shape[1])).sum(axis=1)
        return cls(np.bincount(idx, minlength=2 ** X.shape[1]))

    def permuted(self, perm: Sequence[int]) -> "CountTable":
        """Variable at position ``i`` moves to position ``perm[i]``."""
        d = self.nvars
        idx = np.arange(self.counts.size)
        new = np.zeros_like(idx)
        for i, j in enumerate(perm):
            new |= ((idx >> i) & 1) << j
        out = np.zeros(self.counts.size, dtype=np.int64)
        out[new] = self.counts
        return CountTable(out)

    def to_csv(self) -> str:
        head = ",".join(f"x{v}" for v in self.vars) + ",count"
        rows = []
        for m, c in enumerate(self.counts):
            rows.append(",".join(str(m >> i & 1) for i in range(self.nvars)) + f",{int(c)}")
        return "\n".join([head] + rows) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "CountTable":
        lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
        d = len(lines[0].split(",")) - 1
        counts = np.zeros(2 ** d, dtype=np.int64)
        for ln in lines[1:]:
            parts = ln.split(",")
            m = sum(int(b) << i for i, b in enumerate(parts[:d]))
            counts[m] += int(parts[d])
        return cls(counts)


@dataclass(frozen=True)
class SparsityPattern:
    """Nonzero parameter identifiers: variable subsets, or index pairs for matrices."""

    support: FrozenSet[Tuple[int, ...]]

    def __post_init__(self):
        sup = frozenset(tuple(sorted(s)) for s in self.support)
        if any(len(set(s)) != len(s) or not s for s in sup):
            raise ValueError("identifiers must be nonempty tuples of distinct indices")
        object.__setattr__(self, "support", sup)

    def __contains__(self, item) -> bool:
        return tuple(sorted(item)) in self.support

    def __iter__(self):
        return iter(sorted(self.support, key=lambda s: (len(s), s)))

    def __len__(self):
        return len(self.support)

    def of_size(self, k: int) -> Set[Tuple[int, ...]]:
        return {s for s in self.support if len(s) == k}


@dataclass
class LassoResult:
    params: LogLinearParams
    pattern: SparsityPattern
    objective: float
    iterations: int
    nu: float


def _softmax(eta):
    e = eta - eta.max()
    w = np.exp(e)
    return w / w.sum(), float(eta.max() + np.log(w.sum()))


def lasso_objective(data: CountTable, nu: float, lam: np.ndarray) -> float:
    """Per-observation objective ``(NLL(lam) + nu * sum_{A != {}} |lam_A|) / n``.

    ``lam`` holds all ``2**d`` entries; the empty-set entry is ignored.
    """
    lam = np.array(lam, dtype=float)
    lam[0] = 0.0
    eta = _fwht(lam)
    _, lse = _softmax(eta)
    n = data.n
    phat = data.counts / n
    return float(-phat @ eta + lse + nu / n * np.abs(lam[1:]).sum())


def kkt_residuals(data: CountTable, nu: float, lam: np.ndarray) -> Tuple[float, float]:
    """KKT violations of the per-observation objective.

    Returns ``(zero_excess, active_error)`` where ``zero_excess`` is the
    largest ``|grad_A| - nu/n`` over zero coordinates (nonpositive when the
    conditions hold) and ``active_error`` the largest ``|grad_A + nu/n sign|``
    over active coordinates.  Both compare against ``1e-6``.
    """
    lam = np.array(lam, dtype=float)
    lam[0] = 0.0
    p, _ = _softmax(_fwht(lam))
    g = _fwht(p - data.counts / data.n)
    thr = nu / data.n
    zero = np.flatnonzero(lam == 0)[1:] if lam[0] == 0 else np.flatnonzero(lam == 0)
    zero = zero[zero != 0]
    act = np.flatnonzero(lam != 0)
    ze = float((np.abs(g[zero]) - thr).max()) if zero.size else -np.inf
    ae = float(np.abs(g[act] + thr * np.sign(lam[act])).max()) if act.size else 0.0
    return ze, ae


def loglin_lasso(data: CountTable, nu: float, init=None, tol: float = 1e-10,
                 max_iter: int = 50000) -> LassoResult:
    """L1-penalized log-linear fit by proximal gradient descent.

    Minimizes ``-sum_x n(x) (M lam)_x + n log sum_x exp((M lam)_x)
    + nu sum_{A != {}} |lam_A|``, internally divided by ``n``.  The empty-set
    parameter is eliminated and restored by normalization at the end.  Steps
    are accelerated (FISTA) with a restart whenever the objective would
    increase; step sizes backtrack from the previous accepted step.
    Iteration stops when the relative objective change falls below ``tol``
    and the gradient mapping is below ``1e-8``.  When ``nu == 0`` and some cell is empty
    the MLE does not exist, so half a count is added to every cell.
    """
    if data.nvars > MAX_LASSO_VARS:
        raise ValueError(f"at most {MAX_LASSO_VARS} variables")
    if nu < 0:
        raise ValueError("penalty must be nonnegative")
    counts = data.counts.astype(float)
    if nu == 0 and np.any(counts == 0):
        counts = counts + 0.5
    n = counts.sum()
    phat = counts / n
    thr = nu / n
    N = counts.size
    lam = np.zeros(N) if init is None else np.array(init, dtype=float).ravel()
    if lam.size != N:
        raise ValueError("init has the wrong length")
    lam[0] = 0.0

    def smooth(l):
        eta = _fwht(l)
        p, lse = _softmax(eta)
        return float(-phat @ eta + lse), p

    def penalty(l):
        return thr * np.abs(l[1:]).sum()

    f, p = smooth(lam)
    obj = f + penalty(lam)
    y, fy, py = lam, f, p
    tk = 1.0
    L = 1.0
    it = 0
    change = np.inf
    for it in range(1, max_iter + 1):
        grad = _fwht(py - phat)
        grad[0] = 0.0
        while True:
            z = y - grad / L
            new = np.sign(z) * np.maximum(np.abs(z) - thr / L, 0.0)
            new[0] = 0.0
            fn, pn = smooth(new)
            d = new - y
            if fn <= fy + grad @ d + 0.5 * L * (d @ d) + 1e-15 * max(1.0, abs(fy)):
                break
            L *= 2.0
        newobj = fn + penalty(new)
        if newobj > obj and y is not lam:
            # momentum overshot: restart from the last iterate
            y, fy, py, tk = lam, f, p, 1.0
            continue
        gm = L * np.linalg.norm(d)
        change = abs(obj - newobj)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tk * tk))
        y = new + ((tk - 1.0) / t_next) * (new - lam)
        tk = t_next
        lam, f, p, obj = new, fn, pn, newobj
        if change <= tol * max(1.0, abs(obj)) and gm <= 1e-8:
            break
        fy, py = smooth(y)
        L = max(L / 2.0, 1e-12)
    else:
        raise SolverError(f"no convergence after {max_iter} iterations (last change {change:.3g})")
    eta = _fwht(lam)
    _, lse = _softmax(eta)
    out = lam.copy()
    out[0] = -lse
    support = frozenset(mask_subset(m, data.vars) for m in np.flatnonzero(lam) if m != 0)
    return LassoResult(LogLinearParams(data.vars, out), SparsityPattern(support), float(obj), it, float(nu))


# ---------------------------------------------------------------- learner

@dataclass
class LearnedStructure:
    nvars: int
    skeleton: Set[FrozenSet[int]]
    colliders: Set[Tuple[int, int, int]]
    residual: Set[Tuple[int, int, int]]
    higher_order: Set[Tuple[int, ...]] = field(default_factory=set)
    lasso: Optional[LassoResult] = None
    delta: float = float("nan")

    def __post_init__(self):
        for i, k, j in self.colliders:
            if frozenset((i, k)) not in self.skeleton or frozenset((k, j)) not in self.skeleton \
                    or frozenset((i, j)) in self.skeleton:
                raise ValueError(f"collider {(i, k, j)} is not an unshielded triple of the skeleton")

    def graph(self) -> MixedGraph:
        """Collider edges directed into the collider, other edges undirected.

        An edge oriented both ways by two colliders is drawn bidirected.
        """
        heads: Dict[FrozenSet[int], Set[int]] = {}
        for i, k, j in self.colliders:
            heads.setdefault(frozenset((i, k)), set()).add(k)
            heads.setdefault(frozenset((j, k)), set()).add(k)
        edges = []
        for e in sorted(self.skeleton, key=sorted):
            a, b = sorted(e)
            h = heads.get(e, set())
            if h == {a, b}:
                edges.append((a, "<->", b))
            elif h == {b}:
                edges.append((a, "->", b))
            elif h == {a}:
                edges.append((b, "->", a))
            else:
                edges.append((a, "--", b))
        return MixedGraph.from_edges(self.nvars, edges)

    def to_dict(self) -> dict:
        out = {
            "skeleton": sorted(sorted(e) for e in self.skeleton),
            "colliders": sorted(list(c) for c in self.colliders),
            "noncolliders": sorted(list(c) for c in self.residual),
            "higher_order": sorted(list(s) for s in self.higher_order),
            "delta": self.delta,
        }
        if self.lasso is not None:
            out["nu"] = self.lasso.nu
            out["objective"] = self.lasso.objective
            out["iterations"] = self.lasso.iterations
            out["lambda"] = {",".join(map(str, s)) or "{}": v for s, v in self.lasso.params.items()}
        return out


def learn_bn(data: CountTable, delta: float = 0.75, **lasso_kw) -> LearnedStructure:
    """Skeleton and colliders from the log-linear lasso with ``nu = n**delta``.

    ``i - j`` is in the skeleton iff ``lambda_ij`` survives; an unshielded
    triple ``i - k - j`` is a collider iff ``lambda_ijk`` survives.
    """
    if not 0.5 < delta < 1:
        raise InvalidConfigError("delta must lie in (1/2, 1)")
    res = loglin_lasso(data, float(data.n) ** delta, **lasso_kw)
    pos = {v: i for i, v in enumerate(data.vars)}
    pat = {tuple(sorted(pos[v] for v in s)) for s in res.pattern}
    skel = {frozenset(s) for s in pat if len(s) == 2}
    d = data.nvars
    coll, resid = set(), set()
    for k in range(d):
        nb = sorted(v for v in range(d) if frozenset((v, k)) in skel)
        for i, j in itr.combinations(nb, 2):
            if frozenset((i, j)) in skel:
                continue
            if tuple(sorted((i, j, k))) in pat:
                coll.add((i, k, j))
            else:
                resid.add((i, k, j))
    higher = {s for s in pat if len(s) >= 3} - {tuple(sorted(c)) for c in coll}
    return LearnedStructure(d, skel, coll, resid, higher, res, delta)


# ------------------------------------------------------------- generators

@dataclass(frozen=True)
class BayesNet:
    """Binary network with conditional-logistic local models.

    With ``s_v = (-1)**x_v``, ``log p(x_v | x_pa) = s_v eta_v - log(2 cosh eta_v)``
    where ``eta_v = sum_{B subset pa(v)} beta[(v, B)] prod_{u in B} s_u``.
    The first term contributes exactly ``lambda_{v u B} = beta[(v, B)]`` to
    the joint, so the tangent pattern at the uniform table is
    ``{{v} u B : B subset pa(v)}``.
    """

    parents: Tuple[Tuple[int, ...], ...]
    beta: Mapping[Tuple[int, Tuple[int, ...]], float]

    def __post_init__(self):
        pa = tuple(tuple(sorted(p)) for p in self.parents)
        d = len(pa)
        seen: Set[int] = set()
        order = []
        while len(order) < d:
            free = [v for v in range(d) if v not in seen and set(pa[v]) <= seen]
            if not free:
                raise ValueError("parent sets contain a cycle")
            order.extend(free)
            seen.update(free)
        beta = {}
        for (v, B), val in dict(self.beta).items():
            B = tuple(sorted(B))
            if not set(B) <= set(pa[v]):
                raise ValueError(f"coefficient {(v, B)} uses a non-parent")
            beta[(v, B)] = float(val)
        object.__setattr__(self, "parents", pa)
        object.__setattr__(self, "beta", beta)

    @property
    def nvars(self) -> int:
        return len(self.parents)

    def coordinates(self) -> List[Tuple[int, Tuple[int, ...]]]:
        """All coefficient slots ``(v, B)`` with ``B`` a subset of ``pa(v)``."""
        out = []
        for v, pa in enumerate(self.parents):
            for r in range(len(pa) + 1):
                out.extend((v, B) for B in itr.combinations(pa, r))
        return out

    def tangent_pattern(self) -> SparsityPattern:
        return SparsityPattern(frozenset(tuple(sorted((v,) + B)) for v, B in self.coordinates()))

    def with_beta(self, beta) -> "BayesNet":
        return BayesNet(self.parents, beta)

    def joint(self) -> JointTable:
        d = self.nvars
        idx = np.arange(2 ** d)
        S = np.stack([1 - 2 * ((idx >> v) & 1) for v in range(d)], axis=1).astype(float)
        logp = np.zeros(idx.size)
        for v in range(d):
            eta = np.zeros(idx.size)
            for (u, B), b in self.beta.items():
                if u == v:
                    eta += b * np.prod(S[:, list(B)], axis=1) if B else b
            logp += S[:, v] * eta - np.logaddexp(eta, -eta)
        p = np.exp(logp)
        return JointTable(p / p.sum(), (2,) * d)


def collider_table(a: float = 0.4, t: float = -0.3) -> JointTable:
    """``X -> Z <- Y`` on variables ``(X, Y, Z) = (0, 1, 2)`` with ``lambda_xy = 0``.

    ``lambda_xz = lambda_yz = a`` and ``lambda_xyz = t``; ``lambda_z`` solves
    ``2 sinh(2 lambda_z) sinh(2 t) = 1 - cosh(4 a)``, which makes ``X`` and
    ``Y`` marginally independent.
    """
    lz = 0.5 * np.arcsinh((1 - np.cosh(4 * a)) / (2 * np.sinh(2 * t)))
    lam = np.zeros(8)
    lam[subset_mask((2,), (0, 1, 2))] = lz
    lam[subset_mask((0, 2), (0, 1, 2))] = a
    lam[subset_mask((1, 2), (0, 1, 2))] = a
    lam[subset_mask((0, 1, 2), (0, 1, 2))] = t
    from .loglinear import from_loglinear
    return from_loglinear(LogLinearParams((0, 1, 2), lam))


def chain_table(a: float = 0.4, b: float = 0.4, lz: float = 0.2) -> JointTable:
    """``X -> Z -> Y`` on ``(X, Y, Z) = (0, 1, 2)``: ``lambda_xy = lambda_xyz = 0``."""
    lam = np.zeros(8)
    lam[subset_mask((2,), (0, 1, 2))] = lz
    lam[subset_mask((0, 2), (0, 1, 2))] = a
    lam[subset_mask((1, 2), (0, 1, 2))] = b
    from .loglinear import from_loglinear
    return from_loglinear(LogLinearParams((0, 1, 2), lam))


def collider_bn(beta=None) -> BayesNet:
    """``X -> Z <- Y`` with ``(X, Y, Z) = (0, 1, 2)``."""
    net = BayesNet(((), (), (0, 1)), {})
    if beta is None:
        beta = {c: 1.0 for c in net.coordinates()}
    return net.with_beta(beta)


def chain_bn(beta=None) -> BayesNet:
    """``X -> Z -> Y`` with ``(X, Y, Z) = (0, 1, 2)``."""
    net = BayesNet(((), (2,), (0,)), {})
    if beta is None:
        beta = {c: 1.0 for c in net.coordinates()}
    return net.with_beta(beta)


@dataclass
class RecoveryCurve:
    n_grid: List[int]
    recovery: List[float]
    replicates: int
    gamma: float
    delta: float
    target: SparsityPattern

    def rows(self):
        return [(n, r, self.replicates) for n, r in zip(self.n_grid, self.recovery)]


def validate_theorem71(net: BayesNet, h: Mapping, gamma: float) -> List[str]:
    """Violated hypotheses of the shrinking-alternative experiment, if any."""
    problems = []
    if not 0.25 < gamma < 0.5:
        problems.append(f"gamma={gamma} outside (1/4, 1/2)")
    for c in net.coordinates():
        if float(h.get(c, 0.0)) == 0.0:
            problems.append(f"h is zero on tangent coordinate {c}")
    return problems


def theorem71_experiment(net: BayesNet, gamma: float = 0.3, delta: float = 0.6,
                         n_grid: Sequence[int] = (1000, 10000, 100000, 1000000),
                         replicates: int = 100, seed: int = 0, h=None) -> RecoveryCurve:
    """Pattern recovery for parameters ``theta_n = n**-gamma * h`` at the uniform point.

    For every ``n`` the network with coefficients ``theta_n`` generates
    ``replicates`` count tables; the recorded value is the fraction whose
    lasso pattern (``nu = n**delta``) equals the tangent pattern of ``net``.
    Tangent entries scale like ``n**-gamma`` and the others like
    ``n**(-2 gamma)``, so the threshold ``n**(delta - 1)`` separates them
    when ``1 - 2 gamma < delta < 1 - gamma``.
    """
    if h is None:
        h = dict(net.beta)
    problems = validate_theorem71(net, h, gamma)
    if not 0.5 < delta < 1:
        problems.append(f"delta={delta} outside (1/2, 1)")
    if replicates < 1:
        problems.append("replicates must be positive")
    if problems:
        raise InvalidConfigError("; ".join(problems))
    target = net.tangent_pattern()
    rec = []
    for i, n in enumerate(n_grid):
        n = int(n)
        pn = net.with_beta({c: float(n) ** -gamma * float(v) for c, v in h.items()}).joint()
        hits = 0
        for r in range(replicates):
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i, r)))
            data = CountTable.sample(pn, n, rng)
            res = loglin_lasso(data, float(n) ** delta)
            hits += res.pattern.support == target.support
        rec.append(hits / replicates)
    return RecoveryCurve([int(n) for n in n_grid], rec, replicates, gamma, delta, target)


# ------------------------------------------------------------- covariance

def cov_select_moment(S: SampleCov, delta: float = 0.75, floor: float = 1e-8,
                      max_rounds: int = 100, tol: float = 1e-12):
    """Sparse positive-definite covariance by penalized moment matching.

    Minimizes ``|Sigma - S|_F^2 / 2 + t sum_{i<j} |sigma_ij|`` over
    ``Sigma >= floor I`` with ``t = n**(delta - 1)``.  Each off-diagonal
    pair appears twice in the Frobenius norm, so without the eigenvalue
    constraint the solution soft-thresholds off-diagonals at ``t/2``;
    when the result is not positive definite, a Dykstra-style alternation
    with the eigenvalue-floor projection runs until the two agree.
    Returns ``(Sigma_hat, pattern)`` with the pattern in 0-based pairs.
    """
    if not 0.5 < delta < 1:
        raise InvalidConfigError("delta must lie in (1/2, 1)")
    A = np.asarray(S.S, dtype=float)
    if not np.allclose(A, A.T, atol=1e-12):
        raise ValueError("S must be symmetric")
    A = (A + A.T) / 2
    t = float(S.n) ** (delta - 1)
    off = ~np.eye(len(A), dtype=bool)
    margin = floor * 1.01

    def soft(X):
        Y = X.copy()
        Y[off] = np.sign(X[off]) * np.maximum(np.abs(X[off]) - t / 2, 0.0)
        return Y

    def proj(X):
        w, V = np.linalg.eigh((X + X.T) / 2)
        return (V * np.maximum(w, margin)) @ V.T

    x = A.copy()
    pp = np.zeros_like(A)
    qq = np.zeros_like(A)
    y = soft(x)
    for _ in range(max_rounds):
        y = soft(x + pp)
        pp = x + pp - y
        xn = proj(y + qq)
        qq = y + qq - xn
        x = xn
        if np.linalg.eigvalsh(y).min() >= floor and np.abs(x - y).max() <= max(tol, 1e-9 * np.abs(y).max()):
            break
        if np.linalg.eigvalsh(y).min() >= floor and np.allclose(y, soft(A)):
            break
    else:
        raise SolverError("no positive-definite fixpoint found")
    y = (y + y.T) / 2
    if np.linalg.eigvalsh(y).min() < floor:
        raise SolverError("no positive-definite fixpoint found")
    d = len(y)
    pattern = SparsityPattern(frozenset((i, j) for i in range(d) for j in range(i + 1, d) if y[i, j] != 0))
    return y, pattern
