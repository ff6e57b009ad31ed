"""Small executable demonstrations of local equivalence in practice.

* AR(p) and MA(p) share their first-order behavior at white noise.
* The Verma functional ``sum_l p(l | a) p(y | a, l, b)``.
* Bias of the naive estimator ``p(y | x)`` for ``sum_z p(z) p(y | x, z)``,
  which vanishes on two submodels and is quadratic near their intersection.
* A generic checker for that quadratic-vanishing mechanism.
"""
from __future__ import annotations

import itertools as itr
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import ImplicitModel, sample_model_in_ball, tangent_cone_sample, _seed_seq
from .loglinear import JointTable, LogLinearParams, design_matrix, from_loglinear

__all__ = [
    "ArmaSpec",
    "arma_autocovariance",
    "arma_tangent_check",
    "DiscreteCausalTable",
    "VermaResult",
    "verma_functional",
    "adjustment_bias",
    "QuadraticReport",
    "quadratic_vanishing_check",
    "bias_slope",
    "adjustment_bias_instance",
    "product_instance",
    "triple_robust_instance",
    "run_suite",
]


# ------------------------------------------------------------------ ARMA

@dataclass(frozen=True)
class ArmaSpec:
    """``X_t = e_t + sum_i phi_i X_{t-i} + sum_j theta_j e_{t-j}``, ``Var e_t = sigma2``."""

    phi: Tuple[float, ...] = ()
    theta: Tuple[float, ...] = ()
    sigma2: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "phi", tuple(float(x) for x in self.phi))
        object.__setattr__(self, "theta", tuple(float(x) for x in self.theta))
        if not self.sigma2 > 0:
            raise ValueError("innovation variance must be positive")
        if not self.is_stationary():
            raise ValueError(f"AR polynomial with phi={self.phi} is not stationary")

    def is_stationary(self) -> bool:
        if not self.phi:
            return True
        # roots of 1 - phi_1 z - ... - phi_p z^p must lie outside the unit circle
        coef = np.r_[-np.array(self.phi)[::-1], 1.0]
        return bool(np.all(np.abs(np.roots(coef)) > 1.0))


def _psi_weights(phi, theta, m):
    psi = np.zeros(m + 1)
    th = np.r_[1.0, theta]
    for j in range(m + 1):
        v = th[j] if j < len(th) else 0.0
        for i, f in enumerate(phi, start=1):
            if j - i >= 0:
                v += f * psi[j - i]
        psi[j] = v
    return psi


def arma_autocovariance(spec: ArmaSpec, max_lag: int) -> np.ndarray:
    """Exact ``gamma_0 .. gamma_max_lag``.

    The first ``max(p, q) + 1`` values solve the Yule-Walker equations with
    the MA cross terms on the right; the rest follow the AR recursion.
    """
    phi, theta = np.array(spec.phi), np.array(spec.theta)
    p, q = len(phi), len(theta)
    m = max(p, q)
    th = np.r_[1.0, theta]
    psi = _psi_weights(phi, theta, q)
    c = np.array([spec.sigma2 * sum(th[j] * psi[j - k] for j in range(k, q + 1)) for k in range(m + 1)])
    A = np.eye(m + 1)
    for k in range(m + 1):
        for i in range(1, p + 1):
            A[k, abs(k - i)] -= phi[i - 1]
    g = np.linalg.solve(A, c)
    out = np.zeros(max_lag + 1)
    out[: min(m, max_lag) + 1] = g[: min(m, max_lag) + 1]
    for k in range(m + 1, max_lag + 1):
        out[k] = sum(phi[i - 1] * out[k - i] for i in range(1, p + 1))
    return out


def arma_tangent_check(p_order: int, eps: float = 1e-4) -> dict:
    """Compare AR(p) and MA(p) autocovariance derivatives at white noise.

    First derivatives ``d gamma_k / d phi_i`` and ``d gamma_k / d theta_i``
    (lags ``0..p``) are central differences; both should equal the lag
    indicator.  The second derivative of ``gamma_2`` in the first
    coefficient is 2 for AR and 0 for MA.
    """
    if p_order < 1:
        raise ValueError("p_order must be at least 1")
    lags = max(p_order, 2)

    def gam(kind, vec):
        spec = ArmaSpec(phi=vec) if kind == "ar" else ArmaSpec(theta=vec)
        return arma_autocovariance(spec, lags)

    def jac(kind):
        J = np.zeros((lags + 1, p_order))
        for i in range(p_order):
            e = np.zeros(p_order)
            e[i] = eps
            J[:, i] = (gam(kind, e) - gam(kind, -e)) / (2 * eps)
        return J

    Jar, Jma = jac("ar"), jac("ma")
    indicator = np.zeros((lags + 1, p_order))
    for i in range(p_order):
        indicator[i + 1, i] = 1.0
    per_lag = np.abs(Jar - Jma).max(axis=1)

    h = 1e-3
    e1 = np.zeros(p_order)
    e1[0] = h
    z = np.zeros(p_order)
    d2 = {}
    for kind in ("ar", "ma"):
        d2[kind] = float((gam(kind, e1)[2] - 2 * gam(kind, z)[2] + gam(kind, -e1)[2]) / h ** 2)
    return {
        "p_order": p_order,
        "eps": eps,
        "jacobian_ar": Jar.tolist(),
        "jacobian_ma": Jma.tolist(),
        "discrepancy": float(per_lag.max()),
        "discrepancy_per_lag": per_lag.tolist(),
        "indicator_error": float(max(np.abs(Jar - indicator).max(), np.abs(Jma - indicator).max())),
        "second_ar": d2["ar"],
        "second_ma": d2["ma"],
        "second_order_differs": bool(abs(d2["ar"] - d2["ma"]) > 1e-3),
    }


# --------------------------------------------------------------- tables

@dataclass(frozen=True)
class DiscreteCausalTable:
    """A joint table whose variables carry role names such as ``("A", "L", "B", "Y")``."""

    table: JointTable
    roles: Tuple[str, ...]

    def __post_init__(self):
        if len(self.roles) != self.table.nvars:
            raise ValueError("one role per variable")
        if len(set(self.roles)) != len(self.roles):
            raise ValueError("role names must be distinct")
        object.__setattr__(self, "roles", tuple(self.roles))

    @classmethod
    def from_array(cls, arr, roles: Sequence[str]) -> "DiscreteCausalTable":
        return cls(JointTable.from_array(arr), tuple(roles))

    def array(self, order: Sequence[str]) -> np.ndarray:
        """Probabilities with axes in the given role order."""
        arr = self.table.array()
        return np.transpose(arr, [self.roles.index(r) for r in order])


@dataclass(frozen=True)
class VermaResult:
    q: np.ndarray          # q[a, b, y]
    variation: float


def verma_functional(p: DiscreteCausalTable, roles: Sequence[str] = ("A", "L", "B", "Y")) -> VermaResult:
    """``q(y; a, b) = sum_l p(l | a) p(y | a, l, b)`` and its spread over ``a``.

    ``variation`` is the largest, over ``(b, y)``, of ``max_a q - min_a q``.
    """
    P = p.array(roles)                       # a, l, b, y
    pal = P.sum(axis=(2, 3))
    pl_a = pal / pal.sum(axis=1, keepdims=True)
    palb = P.sum(axis=3, keepdims=True)
    py_alb = P / palb
    q = np.einsum("al,alby->aby", pl_a, py_alb)
    variation = float((q.max(axis=0) - q.min(axis=0)).max())
    return VermaResult(q, variation)


def _adjustment_terms(P):
    # P indexed x, y, z
    px = P.sum(axis=(1, 2))
    pz = P.sum(axis=(0, 1))
    py_x = P.sum(axis=2) / px[:, None]
    py_xz = P / P.sum(axis=1, keepdims=True)
    adj = np.einsum("z,xyz->xy", pz, py_xz)
    return py_x - adj


def adjustment_bias(p: DiscreteCausalTable, roles: Sequence[str] = ("X", "Y", "Z")) -> float:
    """``max_{x,y} |p(y | x) - sum_z p(z) p(y | x, z)|``."""
    return float(np.abs(_adjustment_terms(p.array(roles))).max())


def _binary_from_lambda(lam7) -> np.ndarray:
    """(x, y, z)-indexed table from the seven nonempty-subset parameters."""
    lam = LogLinearParams((0, 1, 2), np.r_[0.0, lam7])
    return from_loglinear(lam).array()


def bias_slope(octaves: int = 5, eps0: float = 0.25, direction=None) -> dict:
    """Log-log slope of the adjustment bias along a path from independence.

    The path scales ``lambda_XZ`` and ``lambda_YZ`` together by ``eps``;
    main effects and the other interactions stay fixed.
    """
    if direction is None:
        # order: x, y, xy, z, xz, yz, xyz
        direction = np.array([0.0, 0.0, 0.0, 0.0, 0.6, 0.8, 0.0])
    base = np.array([0.2, -0.1, 0.3, 0.15, 0.0, 0.0, 0.0])
    eps = eps0 * 2.0 ** -np.arange(octaves + 1)
    vals = []
    for e in eps:
        P = _binary_from_lambda(base + e * np.asarray(direction))
        vals.append(adjustment_bias(DiscreteCausalTable.from_array(P, ("X", "Y", "Z"))))
    vals = np.array(vals)
    slope = float(np.polyfit(np.log(eps), np.log(vals), 1)[0])
    return {"eps": eps.tolist(), "bias": vals.tolist(), "slope": slope}


# ----------------------------------------------------- quadratic vanishing

@dataclass
class QuadraticReport:
    passed: bool
    reason: str = ""
    witness: Optional[List[float]] = None
    max_on_submodels: float = 0.0
    tangent_rank: int = 0
    slopes: List[float] = field(default_factory=list)
    envelope_slope: float = float("nan")
    pairs: List[Tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "reason": self.reason,
            "witness": self.witness,
            "max_on_submodels": self.max_on_submodels,
            "tangent_rank": self.tangent_rank,
            "slopes": self.slopes,
            "envelope_slope": self.envelope_slope,
            "pairs": self.pairs,
        }


def quadratic_vanishing_check(f: Callable, submodels: Sequence[ImplicitModel], theta,
                              seed=0, vanish_tol: float = 1e-8, vanish_radius: float = 0.2,
                              vanish_samples: int = 60, ndirs: int = 20,
                              radii=tuple(2.0 ** -k for k in range(2, 9)),
                              min_slope: float = 1.9) -> QuadraticReport:
    """Check that ``f`` vanishing on submodels with spanning tangents is ``O(|h|^2)``.

    Preconditions are checked by sampling: ``|f| <= vanish_tol`` on points of
    each submodel near ``theta``, and the sampled tangent directions of all
    submodels span the ambient space.  Then, along ``ndirs`` random
    directions, the envelope ``max_u |f(theta + t u)|`` must have log-log
    slope at least ``min_slope`` in ``t``.  Per-direction slopes are kept
    as diagnostics only, since a single direction can sit near a null
    direction of the quadratic term.
    """
    theta = np.asarray(theta, dtype=float)
    d = theta.size
    ss = _seed_seq(seed)
    s_van, s_cone, s_dir = ss.spawn(3)
    worst = 0.0
    for M, sv in zip(submodels, s_van.spawn(len(submodels))):
        P = sample_model_in_ball(M, theta, vanish_radius, vanish_samples, sv)
        for x in P:
            v = abs(float(f(x)))
            worst = max(worst, v)
            if v > vanish_tol:
                return QuadraticReport(False, "f does not vanish on a submodel", x.tolist(), worst)
    dirs = [tangent_cone_sample(M, theta, seed=sc, nsamples=200).directions
            for M, sc in zip(submodels, s_cone.spawn(len(submodels)))]
    stack = np.vstack(dirs) if dirs else np.zeros((0, d))
    sv = np.linalg.svd(stack, compute_uv=False) if len(stack) else np.zeros(0)
    rank = int((sv > 1e-3 * (sv[0] if len(sv) else 1.0)).sum())
    if rank < d:
        return QuadraticReport(False, f"tangent directions span only rank {rank} < {d}",
                               None, worst, rank)
    rng = np.random.default_rng(s_dir)
    U = rng.standard_normal((ndirs, d))
    U /= np.linalg.norm(U, axis=1, keepdims=True)
    t = np.asarray(radii, dtype=float)
    V = np.array([[abs(float(f(theta + ti * u))) for ti in t] for u in U])
    pairs = [(float(a), float(b)) for row in V for a, b in zip(t, row)]
    slopes = []
    for row in V:
        good = row > 0
        if good.sum() >= 2:
            slopes.append(float(np.polyfit(np.log(t[good]), np.log(row[good]), 1)[0]))
    # the bound is on sup |f| / |h|^2, so fit the envelope over directions
    env = V.max(axis=0)
    if np.all(env <= 1e-300):
        es = float("inf")
    else:
        good = env > 0
        es = float(np.polyfit(np.log(t[good]), np.log(env[good]), 1)[0])
    ok = es >= min_slope
    reason = "" if ok else f"envelope slope {es:.3f} below {min_slope}"
    return QuadraticReport(ok, reason, None, worst, rank, slopes, es, pairs)


def _coord_model(d, idx: Sequence[int]) -> ImplicitModel:
    cons = tuple((lambda X, k=k: X[:, k]) for k in idx)

    def grad(k):
        def g(X):
            G = np.zeros_like(X)
            G[:, k] = 1.0
            return G
        return g

    return ImplicitModel(d, cons, tuple(grad(k) for k in idx), names=tuple(f"x{k + 1}" for k in idx))


def adjustment_bias_instance():
    """Signed bias at cell ``x = y = 0`` over the seven log-linear coordinates.

    Coordinates are the nonempty-subset parameters of ``(X, Y, Z)`` in
    binary-counter order ``x, y, xy, z, xz, yz, xyz``; the base point is
    the uniform table.  Submodels are ``X _||_ Z`` (the marginal
    ``lambda^{XZ}_{XZ} = 0``) and ``Y _||_ Z | X`` (``lambda_yz = lambda_xyz = 0``).
    """
    def f(lam7):
        P = _binary_from_lambda(lam7)
        return float(_adjustment_terms(P)[0, 0])

    M = design_matrix(3).astype(float)
    # sign of lambda_{xz} on the (x, z) cells of the margin, x fastest
    sgn = np.array([1.0, -1.0, -1.0, 1.0])

    def marg_xz(X):
        eta = np.c_[np.zeros(len(X)), X] @ M.T
        eta -= eta.max(axis=1, keepdims=True)
        P = np.exp(eta)
        P /= P.sum(axis=1, keepdims=True)
        Pxz = P.reshape(-1, 2, 2, 2).sum(axis=2)   # axes z, x
        return np.log(Pxz.reshape(-1, 4)) @ sgn / 4.0

    indep_xz = ImplicitModel(7, (marg_xz,), names=("lambda^{xz}_{xz}",))
    cond = _coord_model(7, [5, 6])
    return f, [indep_xz, cond], np.zeros(7)


def product_instance():
    f = lambda x: float(x[0] * x[1])
    return f, [_coord_model(2, [0]), _coord_model(2, [1])], np.zeros(2)


def triple_robust_instance():
    """``f = x1 x2 + x2 x3 + x1 x3`` on the three coordinate axes of ``R^3``.

    The axes are the pairwise intersections of the coordinate planes, so
    ``f`` vanishes whenever two of the three planes hold.
    """
    f = lambda x: float(x[0] * x[1] + x[1] * x[2] + x[0] * x[2])
    axes = [_coord_model(3, [1, 2]), _coord_model(3, [0, 2]), _coord_model(3, [0, 1])]
    return f, axes, np.zeros(3)


def run_suite(seed: int = 0) -> Dict[str, dict]:
    """All phenomena checks with their raw numbers."""
    rng = np.random.default_rng(seed)
    # Verma: L _||_ B | A holds when B depends on A only
    pa = rng.dirichlet(np.ones(2))
    pl_a = rng.dirichlet(np.ones(2), size=2)
    pb_a = rng.dirichlet(np.ones(2), size=2)
    py_alb = rng.dirichlet(np.ones(2), size=(2, 2, 2))
    P = np.einsum("a,al,ab,alby->alby", pa, pl_a, pb_a, py_alb)
    tab = DiscreteCausalTable.from_array(P, ("A", "L", "B", "Y"))
    q = verma_functional(tab).q
    pab = P.sum(axis=1)
    py_ab = pab / pab.sum(axis=2, keepdims=True)
    out = {
        "verma": {"max_error_vs_p_y_given_ab": float(np.abs(q - py_ab).max())},
        "adjustment_bias": bias_slope(),
        "arma_p1": arma_tangent_check(1),
        "arma_p3": arma_tangent_check(3),
    }
    for name, inst in [("quadratic_adjustment", adjustment_bias_instance),
                       ("quadratic_product", product_instance),
                       ("quadratic_triple", triple_robust_instance)]:
        f, subs, th = inst()
        out[name] = quadratic_vanishing_check(f, subs, th, seed=seed).to_dict()
    return out
