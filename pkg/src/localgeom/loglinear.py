"""Log-linear parameters of finite discrete distributions.

Cells and subsets use binary-counter order: for binary variables the cell
with ``x_v = 1`` exactly for ``v`` in ``B`` has index ``sum(2**v for v in B)``,
so subsets read ``{}, {0}, {1}, {0,1}, {2}, ...``.  General arities use the
mixed-radix analogue with the first variable varying fastest.
"""
from __future__ import annotations

import itertools as itr
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "MAX_DESIGN_VARS",
    "BoundaryError",
    "JointTable",
    "LogLinearParams",
    "design_matrix",
    "subset_mask",
    "mask_subset",
    "to_loglinear",
    "from_loglinear",
    "marginal_loglinear",
    "ci_constraint_params",
    "check_ci_discrete",
    "ci_residual",
    "general_loglinear",
    "general_loglinear_block",
    "loglinear_gradient",
    "derivative_span_residual",
    "parity_products",
]

MAX_DESIGN_VARS = 16


class BoundaryError(ValueError):
    """Raised for tables with zero or negative cells."""


def subset_mask(subset: Iterable[int], order: Sequence[int]) -> int:
    pos = {v: i for i, v in enumerate(order)}
    return sum(1 << pos[v] for v in subset)


def mask_subset(mask: int, order: Sequence[int]) -> Tuple[int, ...]:
    return tuple(v for i, v in enumerate(order) if mask >> i & 1)


@dataclass(frozen=True)
class JointTable:
    """Strictly positive joint distribution over ``vars`` with given arities."""

    probs: np.ndarray
    arities: Tuple[int, ...]
    vars: Tuple[int, ...] = ()

    def __post_init__(self):
        ar = tuple(int(a) for a in self.arities)
        p = np.array(self.probs, dtype=float).ravel()
        if any(a < 2 for a in ar):
            raise ValueError("arities must be at least 2")
        if p.size != int(np.prod(ar)):
            raise ValueError("probability vector does not match the state space")
        if np.any(p <= 0) or not np.all(np.isfinite(p)):
            raise BoundaryError("log-linear coordinates need strictly positive cells")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
        vs = tuple(self.vars) if self.vars else tuple(range(len(ar)))
        if len(vs) != len(ar):
            raise ValueError("one arity per variable")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "arities", ar)
        object.__setattr__(self, "vars", vs)

    @classmethod
    def binary(cls, probs, vars: Sequence[int] = ()) -> "JointTable":
        p = np.asarray(probs, dtype=float).ravel()
        d = int(round(np.log2(p.size)))
        if 2 ** d != p.size:
            raise ValueError("binary table needs 2**d cells")
        return cls(p, (2,) * d, tuple(vars))

    @classmethod
    def from_array(cls, arr, vars: Sequence[int] = ()) -> "JointTable":
        """From an ndarray whose axis ``i`` indexes variable ``i``."""
        arr = np.asarray(arr, dtype=float)
        return cls(arr.ravel(order="F"), arr.shape, tuple(vars))

    @classmethod
    def normalized(cls, weights, arities=None, vars: Sequence[int] = ()) -> "JointTable":
        w = np.asarray(weights, dtype=float).ravel()
        if arities is None:
            arities = (2,) * int(round(np.log2(w.size)))
        return cls(w / w.sum(), arities, tuple(vars))

    @property
    def nvars(self) -> int:
        return len(self.arities)

    @property
    def is_binary(self) -> bool:
        return all(a == 2 for a in self.arities)

    def array(self) -> np.ndarray:
        """View with axis ``i`` indexing variable ``vars[i]``."""
        return self.probs.reshape(self.arities, order="F")

    def cells(self) -> List[Tuple[int, ...]]:
        """Level tuples in storage order."""
        return [tuple(reversed(c)) for c in itr.product(*[range(a) for a in reversed(self.arities)])]

    def marginal(self, K: Iterable[int]) -> "JointTable":
        K = sorted(set(K), key=self.vars.index)
        axes = tuple(i for i, v in enumerate(self.vars) if v not in K)
        arr = self.array().sum(axis=axes)
        keep = [self.vars.index(v) for v in K]
        # sum keeps remaining axes in original order, which matches K's order
        return JointTable(arr.ravel(order="F"), tuple(self.arities[i] for i in keep), tuple(K))

    def permuted(self, perm: Sequence[int]) -> "JointTable":
        """Relabel variable at position ``i`` to position ``perm[i]``."""
        arr = self.array()
        axes = np.argsort(perm)
        return JointTable.from_array(np.transpose(arr, axes))

    def to_csv(self) -> str:
        head = ",".join(f"x{v}" for v in self.vars) + ",prob"
        rows = [",".join(map(str, c)) + "," + repr(float(q)) for c, q in zip(self.cells(), self.probs)]
        return "\n".join([head] + rows) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "JointTable":
        lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
        head = lines[0].split(",")
        d = len(head) - 1
        levels = []
        probs = []
        for ln in lines[1:]:
            parts = ln.split(",")
            levels.append(tuple(int(x) for x in parts[:d]))
            probs.append(float(parts[d]))
        ar = tuple(max(c[i] for c in levels) + 1 for i in range(d))
        arr = np.zeros(ar)
        for c, q in zip(levels, probs):
            arr[c] = q
        vars_ = tuple(int(h[1:]) if h.startswith("x") and h[1:].isdigit() else i
                      for i, h in enumerate(head[:d]))
        return cls.from_array(arr, vars_)


@dataclass(frozen=True)
class LogLinearParams:
    """Binary log-linear parameters over ``vars``; ``values[mask]`` is ``lambda_A``."""

    vars: Tuple[int, ...]
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float).ravel()
        if v.size != 2 ** len(self.vars):
            raise ValueError("need one value per subset")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "vars", tuple(self.vars))

    def __getitem__(self, subset) -> float:
        return float(self.values[subset_mask(subset, self.vars)])

    def items(self):
        for mask, val in enumerate(self.values):
            yield mask_subset(mask, self.vars), float(val)

    def as_dict(self) -> Dict[Tuple[int, ...], float]:
        return dict(self.items())

    def to_csv(self) -> str:
        rows = ["subset,value"] + [f"{m},{float(x)!r}" for m, x in enumerate(self.values)]
        return "\n".join(rows) + "\n"

    @classmethod
    def from_csv(cls, text: str, vars: Sequence[int] = ()) -> "LogLinearParams":
        pairs = []
        for ln in text.splitlines():
            if not ln.strip() or ln.startswith("#") or ln.startswith("subset"):
                continue
            m, x = ln.split(",")[:2]
            pairs.append((int(m), float(x)))
        size = max(m for m, _ in pairs) + 1
        d = int(round(np.log2(size)))
        vals = np.zeros(2 ** d)
        for m, x in pairs:
            vals[m] = x
        return cls(tuple(vars) if vars else tuple(range(d)), vals)


def design_matrix(nvars: int) -> np.ndarray:
    """``M[A, B] = (-1)**|A & B|`` as an int64 matrix in binary-counter order."""
    if nvars < 0 or nvars > MAX_DESIGN_VARS:
        raise ValueError(f"nvars must be in [0, {MAX_DESIGN_VARS}]")
    M = np.array([[1]], dtype=np.int64)
    base = np.array([[1, 1], [1, -1]], dtype=np.int64)
    for _ in range(nvars):
        M = np.kron(base, M)
    return M


def _fwht(x: np.ndarray) -> np.ndarray:
    """``M @ x`` along the last axis via the fast Walsh-Hadamard transform."""
    x = np.array(x, dtype=float)
    n = x.shape[-1]
    h = 1
    while h < n:
        y = x.reshape(x.shape[:-1] + (n // (2 * h), 2, h))
        a = y[..., 0, :].copy()
        b = y[..., 1, :]
        y[..., 0, :] = a + b
        y[..., 1, :] = a - b
        x = y.reshape(x.shape)
        h *= 2
    return x


def to_loglinear(p: JointTable) -> LogLinearParams:
    if not p.is_binary:
        raise ValueError("to_loglinear needs binary variables; see general_loglinear")
    eta = np.log(p.probs)
    return LogLinearParams(p.vars, _fwht(eta) / p.probs.size)


def from_loglinear(lam: LogLinearParams) -> JointTable:
    eta = _fwht(lam.values)
    eta -= eta.max()
    w = np.exp(eta)
    return JointTable(w / w.sum(), (2,) * len(lam.vars), lam.vars)


def marginal_loglinear(p: JointTable, K: Iterable[int]) -> LogLinearParams:
    K = list(K)
    if not K:
        raise ValueError("margin must be nonempty")
    return to_loglinear(p.marginal(K))


def ci_constraint_params(a: int, b: int, C: Iterable[int] = ()) -> List[Tuple[Tuple[int, ...], Tuple[int, ...]]]:
    """Identifiers ``(margin, subset)`` of ``lambda^{abC}_{abD}``, ``D`` ranging over subsets of ``C``.

    All of them vanish iff ``X_a _||_ X_b | X_C`` (binary variables).
    """
    C = sorted(set(C))
    if a == b or a in C or b in C:
        raise ValueError("need a != b, both outside C")
    margin = tuple(sorted({a, b, *C}))
    out = []
    for r in range(len(C) + 1):
        for D in itr.combinations(C, r):
            out.append((margin, tuple(sorted({a, b, *D}))))
    return out


def ci_residual(p: JointTable, i: int, j: int, C: Iterable[int] = ()) -> float:
    """``max |p(xi,xj,xC) p(xC) - p(xi,xC) p(xj,xC)|`` over cells."""
    C = list(C)
    arr = p.marginal([i, j, *C]).array()   # axes in the table's variable order
    order = [v for v in p.vars if v in {i, j, *C}]
    arr = np.moveaxis(arr, [order.index(i), order.index(j)], [0, 1])
    pC = arr.sum(axis=(0, 1))
    piC = arr.sum(axis=1)
    pjC = arr.sum(axis=0)
    resid = arr * pC[None, None] - piC[:, None] * pjC[None, :]
    return float(np.abs(resid).max())


def check_ci_discrete(p: JointTable, stmt, tol: float = 1e-10) -> bool:
    """Factorization test for ``X_i _||_ X_j | X_C``; ``stmt`` has ``i, j, C``."""
    return ci_residual(p, stmt.i, stmt.j, stmt.C) <= tol


def general_loglinear(p: JointTable, A: Iterable[int], x_A: Optional[Sequence[int]] = None) -> float:
    """``|X|^-1 sum_y log p(y) prod_{v in A} (|X_v| 1{x_v = y_v} - 1)``.

    For binary variables ``x_A = 0_A`` gives the usual ``lambda_A`` and
    ``x_A = 1_A`` gives ``(-1)**|A| lambda_A``.  The full block over all
    level assignments is redundant: it sums to zero over the levels of
    each variable in ``A``.
    """
    A = list(A)
    if x_A is None:
        x_A = [0] * len(A)
    if len(x_A) != len(A):
        raise ValueError("one level per variable in A")
    logp = np.log(p.array())
    w = np.ones(logp.shape)
    for v, lev in zip(A, x_A):
        ax = p.vars.index(v)
        k = p.arities[ax]
        f = np.full(k, -1.0)
        f[lev] = k - 1.0
        shape = [1] * logp.ndim
        shape[ax] = k
        w = w * f.reshape(shape)
    return float((w * logp).sum() / logp.size)


def general_loglinear_block(p: JointTable, A: Iterable[int]) -> np.ndarray:
    """All values ``lambda_A(x_A)``, array indexed by the levels of ``A``.

    The block is stored in full.  It is redundant: summing over the levels
    of any one variable in ``A`` gives zero, leaving ``prod(|X_a| - 1)``
    free entries.
    """
    A = list(A)
    ks = [p.arities[p.vars.index(v)] for v in A]
    out = np.empty(ks)
    for lev in itr.product(*[range(k) for k in ks]):
        out[lev] = general_loglinear(p, A, lev)
    return out


def loglinear_gradient(p: JointTable, A: Iterable[int], K: Optional[Iterable[int]] = None) -> np.ndarray:
    """Gradient of ``lambda^K_A`` with respect to the unnormalized cell vector.

    ``d lambda^K_A / d p(x) = M[A, x] / (2**|K| p(x_K))``.
    """
    V = p.vars
    K = list(V) if K is None else list(K)
    A = list(A)
    idx = np.arange(p.probs.size)
    sign = np.ones(p.probs.size)
    for v in A:
        sign *= np.where(idx >> V.index(v) & 1, -1.0, 1.0)
    pK = p.marginal(K)
    # map each full cell to its K-cell
    kcell = np.zeros(p.probs.size, dtype=int)
    for pos, v in enumerate(sorted(K, key=V.index)):
        kcell |= (idx >> V.index(v) & 1) << pos
    return sign / (2 ** len(K) * pK.probs[kcell])


def derivative_span_residual(p: JointTable, A: Iterable[int], K: Iterable[int]) -> float:
    """Relative residual of projecting ``grad lambda^K_A`` on ``{grad lambda^V_{A u C}}``.

    ``C`` ranges over subsets of ``V \\ A``.  Zero when the gradient lies in
    that span.
    """
    A = list(A)
    rest = [v for v in p.vars if v not in A]
    target = loglinear_gradient(p, A, K)
    basis = []
    for r in range(len(rest) + 1):
        for C in itr.combinations(rest, r):
            basis.append(loglinear_gradient(p, A + list(C)))
    Bm = np.array(basis).T
    coef, *_ = np.linalg.lstsq(Bm, target, rcond=None)
    return float(np.linalg.norm(Bm @ coef - target) / np.linalg.norm(target))


def parity_products(p: JointTable, A: Iterable[int]) -> Tuple[float, float]:
    """``(log prod_{|x_A| even} p, log prod_{|x_A| odd} p)`` for binary tables.

    ``lambda_A = c`` iff ``prod_even - exp(c 2**|V|) prod_odd = 0``.
    """
    V = p.vars
    idx = np.arange(p.probs.size)
    par = np.zeros(p.probs.size, dtype=int)
    for v in A:
        par ^= idx >> V.index(v) & 1
    logp = np.log(p.probs)
    return float(logp[par == 0].sum()), float(logp[par == 1].sum())
