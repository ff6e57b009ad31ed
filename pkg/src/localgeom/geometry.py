"""Numerical local geometry of implicitly defined models.

Models are zero sets ``{x : g_1(x) = ... = g_m(x) = 0}``.  Everything here
is sampling based: nearest points come from a batched constrained Newton
iteration with multiple starts, local Hausdorff distances from projected
samples, and tangent cones from normalized secants at a small radius.
The estimators bound limiting quantities from finite radii, so the
classifications they report are evidence, not proofs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "ProjectionError",
    "DegenerateSamplerError",
    "ImplicitModel",
    "OrderEstimate",
    "ConeSample",
    "OverlapReport",
    "ModelPair",
    "project_to_model",
    "project_batch",
    "sample_model_in_ball",
    "local_hausdorff",
    "equivalence_order",
    "tangent_cone_sample",
    "overlap_probe",
    "catalog",
    "lookup",
    "DEFAULT_RADII",
]

DEFAULT_RADII = tuple(2.0 ** -k for k in range(3, 9))
_FD_STEP = 1e-6


class ProjectionError(RuntimeError):
    """No feasible point was found from any start."""


class DegenerateSamplerError(RuntimeError):
    """A model produced no sample points inside the requested ball."""


def _seed_seq(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, (tuple, list)):
        return np.random.SeedSequence([int(s) for s in seed])
    return np.random.SeedSequence(int(seed))


@dataclass(frozen=True)
class ImplicitModel:
    """Zero set of smooth constraints in ``R^ambient_dim``.

    Each constraint maps an ``(N, d)`` batch to ``(N,)``; each gradient, if
    given, maps ``(N, d)`` to ``(N, d)``.  Missing gradients fall back to
    central differences.
    """

    ambient_dim: int
    constraints: Tuple[Callable, ...]
    gradients: Optional[Tuple[Optional[Callable], ...]] = None
    membership_tol: float = 1e-9
    box: Optional[Tuple[np.ndarray, np.ndarray]] = None
    names: Tuple[str, ...] = ()

    def __post_init__(self):
        cons = tuple(self.constraints)
        if len(cons) < 1:
            raise ValueError("an implicit model needs at least one constraint")
        grads = self.gradients
        grads = (None,) * len(cons) if grads is None else tuple(grads)
        if len(grads) != len(cons):
            raise ValueError("one gradient slot per constraint")
        names = tuple(self.names) or tuple(f"g{i}" for i in range(len(cons)))
        object.__setattr__(self, "constraints", cons)
        object.__setattr__(self, "gradients", grads)
        object.__setattr__(self, "names", names)
        if self.box is not None:
            lo, hi = (np.asarray(b, dtype=float) for b in self.box)
            object.__setattr__(self, "box", (lo, hi))

    @property
    def ncons(self) -> int:
        return len(self.constraints)

    def values(self, X) -> np.ndarray:
        """Constraint values, shape ``(N, m)`` (or ``(m,)`` for a single point)."""
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        Xb = np.atleast_2d(X)
        G = np.stack([np.asarray(g(Xb), dtype=float).reshape(len(Xb)) for g in self.constraints], axis=1)
        return G[0] if single else G

    def jacobian(self, X) -> np.ndarray:
        """Jacobians, shape ``(N, m, d)`` (or ``(m, d)`` for a single point)."""
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        Xb = np.atleast_2d(X)
        N, d = Xb.shape
        rows = []
        for g, dg in zip(self.constraints, self.gradients):
            if dg is not None:
                rows.append(np.asarray(dg(Xb), dtype=float).reshape(N, d))
                continue
            J = np.empty((N, d))
            for k in range(d):
                h = _FD_STEP * (1.0 + np.abs(Xb[:, k]))
                Xp = Xb.copy()
                Xm = Xb.copy()
                Xp[:, k] += h
                Xm[:, k] -= h
                J[:, k] = (g(Xp) - g(Xm)) / (2 * h)
            rows.append(J)
        Jac = np.stack(rows, axis=1)
        return Jac[0] if single else Jac

    def residual(self, X) -> np.ndarray:
        return np.abs(np.atleast_2d(self.values(X))).max(axis=1)

    def contains(self, x) -> bool:
        return bool(self.residual(np.asarray(x, dtype=float))[0] <= self.membership_tol)

    def in_box(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        if self.box is None:
            return np.ones(len(X), dtype=bool)
        lo, hi = self.box
        return np.all((X >= lo) & (X <= hi), axis=1)

    def intersect(self, other: "ImplicitModel") -> "ImplicitModel":
        """Intersection as the model with concatenated constraints."""
        if other.ambient_dim != self.ambient_dim:
            raise ValueError("ambient dimensions differ")
        box = self.box if self.box is not None else other.box
        return ImplicitModel(
            self.ambient_dim,
            self.constraints + other.constraints,
            self.gradients + other.gradients,
            min(self.membership_tol, other.membership_tol),
            box,
            self.names + other.names,
        )


def _newton_project(M: ImplicitModel, X: np.ndarray, Y0: np.ndarray, iters: int, tol: float) -> np.ndarray:
    """Linearized nearest-point iteration from ``Y0`` toward the projection of ``X``.

    Each step solves ``min |y + d - x|`` subject to ``g(y) + J d = 0``.
    """
    Y = Y0.copy()
    active = np.ones(len(Y), dtype=bool)
    scale = 1.0 + np.linalg.norm(X, axis=1)
    for _ in range(iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        Ya, Xa = Y[idx], X[idx]
        G = M.values(Ya)
        J = M.jacobian(Ya)
        Jp = np.linalg.pinv(J, rcond=1e-12)
        R = Xa - Ya
        rhs = G + np.einsum("nmd,nd->nm", J, R)
        D = R - np.einsum("ndm,nm->nd", Jp, rhs)
        # damp steps that would jump far beyond the current offset
        lim = 2.0 * np.linalg.norm(R, axis=1) + np.abs(G).max(axis=1) + 1e-300
        nd = np.linalg.norm(D, axis=1)
        fac = np.minimum(1.0, lim / np.maximum(nd, 1e-300))
        D *= fac[:, None]
        Y[idx] = Ya + D
        done = (nd <= tol * scale[idx]) & (np.abs(G).max(axis=1) <= tol)
        active[idx[done]] = False
    # finish with pure restoration steps so the output sits on the model
    for _ in range(5):
        G = M.values(Y)
        if np.all(np.abs(G).max(axis=1) <= tol):
            break
        Jp = np.linalg.pinv(M.jacobian(Y), rcond=1e-12)
        Y = Y - np.einsum("ndm,nm->nd", Jp, G)
    return Y


def project_batch(M: ImplicitModel, X, seed=0, nstarts: int = 16, iters: int = 100,
                  tol: float = 1e-14) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest points on ``M`` for each row of ``X``.

    Returns ``(Y, ok)``; ``ok[i]`` is false when no start reached the model.
    The first start is the point itself; the others are random points in a
    ball around it whose radius is 1.5 times the first-start distance.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    N, d = X.shape
    Y1 = _newton_project(M, X, X, iters, tol)
    feas1 = M.residual(Y1) <= M.membership_tol
    dist1 = np.where(feas1, np.linalg.norm(Y1 - X, axis=1), np.inf)
    best, bestd = Y1, dist1
    if nstarts > 1:
        rng = np.random.default_rng(_seed_seq(seed))
        k = nstarts - 1
        U = rng.standard_normal((N, k, d))
        U /= np.linalg.norm(U, axis=2, keepdims=True)
        r = rng.uniform(size=(N, k, 1)) ** (1.0 / d)
        base = np.where(np.isfinite(dist1), dist1, np.linalg.norm(X, axis=1) + 1.0)
        rad = 1.5 * np.maximum(base, 1e-12)
        S = X[:, None, :] + rad[:, None, None] * r * U
        if M.box is not None:
            S = np.clip(S, M.box[0], M.box[1])
        XX = np.repeat(X, k, axis=0)
        Ys = _newton_project(M, XX, S.reshape(N * k, d), iters, tol)
        feas = M.residual(Ys) <= M.membership_tol
        ds = np.where(feas, np.linalg.norm(Ys - XX, axis=1), np.inf).reshape(N, k)
        Ys = Ys.reshape(N, k, d)
        j = np.argmin(ds, axis=1)
        dj = ds[np.arange(N), j]
        better = dj < bestd
        best = np.where(better[:, None], Ys[np.arange(N), j], best)
        bestd = np.where(better, dj, bestd)
    ok = np.isfinite(bestd)
    # points already on the model are their own projection
    on = M.residual(X) <= tol
    best[on] = X[on]
    ok |= on
    return best, ok


def project_to_model(M: ImplicitModel, x, seed=0, nstarts: int = 16, iters: int = 100,
                     tol: float = 1e-14) -> np.ndarray:
    """Nearest point of ``M`` to ``x`` found by multi-start descent."""
    x = np.asarray(x, dtype=float)
    if x.shape != (M.ambient_dim,):
        raise ValueError(f"expected a point in R^{M.ambient_dim}")
    if not M.in_box(x)[0]:
        raise ValueError("point lies outside the model's box")
    Y, ok = project_batch(M, x[None], seed, nstarts, iters, tol)
    if not ok[0]:
        raise ProjectionError("no feasible point found after all starts")
    return Y[0]


def sample_model_in_ball(M: ImplicitModel, theta, eps: float, nsamples: int, seed,
                         nstarts: int = 16) -> np.ndarray:
    """Points of ``M`` within ``eps`` of ``theta``.

    Random points of the ball of radius ``1.2 eps`` are projected onto the
    model and only projections inside the closed ``eps``-ball are kept.
    """
    theta = np.asarray(theta, dtype=float)
    d = theta.size
    ss = _seed_seq(seed)
    s_pts, s_proj = ss.spawn(2)
    rng = np.random.default_rng(s_pts)
    U = rng.standard_normal((nsamples, d))
    U /= np.linalg.norm(U, axis=1, keepdims=True)
    r = 1.2 * eps * rng.uniform(size=(nsamples, 1))
    Z = theta + r * U
    Y, ok = project_batch(M, Z, s_proj, nstarts)
    inside = ok & (np.linalg.norm(Y - theta, axis=1) <= eps)
    return Y[inside]


def _check_base(M: ImplicitModel, theta):
    if not M.contains(theta):
        raise ValueError("base point does not lie on the model")


def local_hausdorff(M1: ImplicitModel, M2: ImplicitModel, theta, eps: float,
                    nsamples: int = 400, seed=0, nstarts: int = 16) -> float:
    """Estimate of the Hausdorff distance of the two models inside the ``eps``-ball.

    Each side is sampled, every sample is projected onto the other model,
    and the largest of these distances over both sides is returned.
    """
    theta = np.asarray(theta, dtype=float)
    if eps <= 0:
        raise ValueError("eps must be positive")
    _check_base(M1, theta)
    _check_base(M2, theta)
    ss = _seed_seq(seed)
    seeds = ss.spawn(4)
    out = 0.0
    for side, (A, B) in enumerate([(M1, M2), (M2, M1)]):
        P = sample_model_in_ball(A, theta, eps, nsamples, seeds[2 * side], nstarts)
        if len(P) == 0:
            raise DegenerateSamplerError("a model has no sampled points in the ball")
        Q, ok = project_batch(B, P, seeds[2 * side + 1], nstarts)
        if not ok.all():
            raise ProjectionError("projection onto the other model failed")
        out = max(out, float(np.linalg.norm(P - Q, axis=1).max()))
    return out


@dataclass(frozen=True)
class OrderEstimate:
    radii: np.ndarray
    distances: np.ndarray
    slope: float
    slope_stderr: float
    r2: float = float("nan")
    truncated: bool = False

    def __post_init__(self):
        r = np.asarray(self.radii, dtype=float)
        dd = np.asarray(self.distances, dtype=float)
        if np.any(np.diff(r) >= 0) or np.any(r <= 0):
            raise ValueError("radii must be positive and strictly decreasing")
        if np.any(dd < 0):
            raise ValueError("distances must be nonnegative")
        object.__setattr__(self, "radii", r)
        object.__setattr__(self, "distances", dd)

    def order(self, slack: float = 0.15) -> int:
        """Largest integer ``c`` with ``slope >= c - slack``."""
        if not np.isfinite(self.slope):
            return 0
        return int(np.floor(self.slope + slack))

    def classification(self, slack: float = 0.15) -> str:
        c = self.order(slack)
        return f"at least {c}-near-equivalent" if c >= 1 else "not near-equivalent"

    def to_csv(self) -> str:
        rows = ["eps,distance"] + [f"{e!r},{v!r}" for e, v in zip(self.radii, self.distances)]
        rows.append(f"# slope={self.slope!r} stderr={self.slope_stderr!r} "
                    f"r2={self.r2!r} truncated={self.truncated}")
        return "\n".join(rows) + "\n"


def _loglog_fit(r, d):
    x = np.log(r)
    y = np.log(d)
    n = len(x)
    A = np.column_stack([x, np.ones(n)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    res = y - A @ coef
    sst = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((res ** 2).sum()) / sst if sst > 0 else 1.0
    if n > 2:
        s2 = float((res ** 2).sum()) / (n - 2)
        se = float(np.sqrt(s2 / ((x - x.mean()) ** 2).sum()))
    else:
        se = float("nan")
    return float(coef[0]), se, r2


def equivalence_order(M1: ImplicitModel, M2: ImplicitModel, theta, radii=DEFAULT_RADII,
                      nsamples: int = 400, seed=0, nstarts: int = 16) -> OrderEstimate:
    """Log-log slope of the local Hausdorff distance against the radius.

    The largest radius is dropped when the full fit looks curved
    (``R^2 < 0.98``) but the fit without it is clean (``R^2 >= 0.995``).
    """
    radii = np.sort(np.asarray(radii, dtype=float))[::-1]
    if len(radii) < 4 or np.log2(radii[0] / radii[-1]) < 3 - 1e-12:
        raise ValueError("need at least 4 radii spanning at least 3 octaves")
    ss = _seed_seq(seed)
    dist = np.array([
        local_hausdorff(M1, M2, theta, float(e), nsamples,
                        np.random.SeedSequence(ss.entropy, spawn_key=ss.spawn_key + (i,)), nstarts)
        for i, e in enumerate(radii)
    ])
    floor = 10 * max(M1.membership_tol, M2.membership_tol)
    if np.all(dist <= floor):
        return OrderEstimate(radii, dist, float("inf"), 0.0, 1.0, False)
    pos = dist > 0
    slope, se, r2 = _loglog_fit(radii[pos], dist[pos])
    truncated = False
    if r2 < 0.98 and pos[1:].sum() >= 3:
        s2, se2, r22 = _loglog_fit(radii[1:][pos[1:]], dist[1:][pos[1:]])
        if r22 >= 0.995:
            slope, se, r2, truncated = s2, se2, r22, True
    return OrderEstimate(radii, dist, slope, se, r2, truncated)


@dataclass(frozen=True)
class ConeSample:
    theta: np.ndarray
    directions: np.ndarray
    radii: Tuple[float, ...]

    def __post_init__(self):
        D = np.asarray(self.directions, dtype=float).reshape(-1, np.asarray(self.theta).size)
        if len(D) and np.abs(np.linalg.norm(D, axis=1) - 1).max() > 1e-12:
            raise ValueError("directions must be unit vectors")
        object.__setattr__(self, "directions", D)
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float))

    def __len__(self):
        return len(self.directions)

    def angles_to(self, h) -> np.ndarray:
        """Angles in degrees between ``h`` and every sampled direction."""
        h = np.asarray(h, dtype=float)
        h = h / np.linalg.norm(h)
        return np.degrees(np.arccos(np.clip(self.directions @ h, -1.0, 1.0)))

    def min_angle(self, h) -> float:
        return float(self.angles_to(h).min()) if len(self) else 180.0


def _dedup(D: np.ndarray, deg: float) -> np.ndarray:
    keep: List[np.ndarray] = []
    c = np.cos(np.radians(deg))
    for u in D:
        if not keep or np.max(np.array(keep) @ u) < c:
            keep.append(u)
    return np.array(keep).reshape(-1, D.shape[1])


def tangent_cone_sample(M: ImplicitModel, theta, radii=DEFAULT_RADII, nsamples: int = 400,
                        seed=0, dedup_deg: float = 2.0, nstarts: int = 16) -> ConeSample:
    """Normalized secant directions of ``M`` at the smallest radius.

    Points closer than ``0.05 eps`` to ``theta`` are ignored since their
    directions are dominated by projection error.
    """
    theta = np.asarray(theta, dtype=float)
    _check_base(M, theta)
    eps = float(np.min(radii))
    P = sample_model_in_ball(M, theta, eps, nsamples, seed, nstarts)
    V = P - theta
    nv = np.linalg.norm(V, axis=1)
    V = V[nv >= 0.05 * eps] / nv[nv >= 0.05 * eps, None]
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    return ConeSample(theta, _dedup(V, dedup_deg), tuple(float(r) for r in radii))


@dataclass
class OverlapReport:
    witnesses: np.ndarray
    verdict: str
    shared_deg: float = 5.0
    separation_deg: float = 15.0
    cone_sizes: Dict[str, int] = field(default_factory=dict)

    @property
    def has_overlap_evidence(self) -> bool:
        return len(self.witnesses) > 0

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "witnesses": self.witnesses.tolist(),
            "shared_deg": self.shared_deg,
            "separation_deg": self.separation_deg,
            "cone_sizes": self.cone_sizes,
        }


def overlap_probe(M1: ImplicitModel, M2: ImplicitModel, theta, radii=DEFAULT_RADII,
                  nsamples: int = 400, seed=0, shared_deg: float = 5.0,
                  separation_deg: float = 15.0) -> OverlapReport:
    """Search for directions shared by both cones but absent from the intersection's cone.

    A witness is a sampled direction of ``M1`` within ``shared_deg`` of a
    sampled direction of ``M2`` and at least ``separation_deg`` from every
    sampled direction of ``M1 & M2``.  This is a heuristic probe.
    """
    theta = np.asarray(theta, dtype=float)
    s1, s2, s3 = _seed_seq(seed).spawn(3)
    C1 = tangent_cone_sample(M1, theta, radii, nsamples, s1)
    C2 = tangent_cone_sample(M2, theta, radii, nsamples, s2)
    I = M1.intersect(M2)
    C3 = tangent_cone_sample(I, theta, radii, nsamples, s3)
    wit = [h for h in C1.directions
           if C2.min_angle(h) <= shared_deg and C3.min_angle(h) >= separation_deg]
    W = np.array(wit).reshape(-1, theta.size)
    verdict = "overlap evidence" if len(W) else "no overlap evidence"
    sizes = {"M1": len(C1), "M2": len(C2), "intersection": len(C3)}
    return OverlapReport(W, verdict, shared_deg, separation_deg, sizes)


# ---------------------------------------------------------------- catalog

@dataclass(frozen=True)
class ModelPair:
    name: str
    M1: ImplicitModel
    M2: ImplicitModel
    theta: np.ndarray
    description: str = ""
    coords: Tuple[str, ...] = ()

    def descriptor(self) -> str:
        return json.dumps({
            "name": self.name,
            "ambient_dim": self.M1.ambient_dim,
            "coordinates": list(self.coords),
            "M1": list(self.M1.names),
            "M2": list(self.M2.names),
            "base_point": np.asarray(self.theta).tolist(),
            "description": self.description,
        })


def _coord(k):
    return lambda X: X[:, k]


def _unit_grad(k, d):
    def g(X):
        G = np.zeros_like(X)
        G[:, k] = 1.0
        return G
    return g


def _linear(d: int, k: int, name: str) -> ImplicitModel:
    return ImplicitModel(d, (_coord(k),), (_unit_grad(k, d),), names=(name,))


def _example_1_1() -> ModelPair:
    M1 = _linear(2, 1, "theta2")
    M2 = ImplicitModel(
        2,
        (lambda X: X[:, 0] ** 2 - X[:, 1],),
        (lambda X: np.column_stack([2 * X[:, 0], -np.ones(len(X))]),),
        names=("theta1^2-theta2",),
    )
    return ModelPair("example_1_1", M1, M2, np.zeros(2),
                     "line theta2=0 against parabola theta2=theta1^2", ("theta1", "theta2"))


def _figure_3c() -> ModelPair:
    M1 = ImplicitModel(3, (_coord(1), _coord(2)), (_unit_grad(1, 3), _unit_grad(2, 3)),
                       names=("y", "z"))
    M2 = ImplicitModel(
        3,
        (lambda X: X[:, 2] + X[:, 0] ** 2,),
        (lambda X: np.column_stack([2 * X[:, 0], np.zeros(len(X)), np.ones(len(X))]),),
        names=("z+x^2",),
    )
    return ModelPair("figure_3c", M1, M2, np.zeros(3),
                     "x-axis against the surface z=-x^2", ("x", "y", "z"))


def _gauss_marg_vs_cond() -> ModelPair:
    # coordinates (rho_xy, rho_xz, rho_yz)
    M1 = _linear(3, 0, "rho_xy")
    M2 = ImplicitModel(
        3,
        (lambda X: X[:, 0] - X[:, 1] * X[:, 2],),
        (lambda X: np.column_stack([np.ones(len(X)), -X[:, 2], -X[:, 1]]),),
        names=("rho_xy-rho_xz*rho_yz",),
    )
    return ModelPair("gauss_marg_vs_cond", M1, M2, np.zeros(3),
                     "X indep Y against X indep Y given Z, in correlation coordinates",
                     ("rho_xy", "rho_xz", "rho_yz"))


def _discpath_k3() -> ModelPair:
    # coordinates (rho12, rho14, rho23, rho24, rho34), rho13 = 0
    def fb(X):
        return X[:, 1] - X[:, 0] * X[:, 3]

    def dfb(X):
        z = np.zeros(len(X))
        return np.column_stack([-X[:, 3], np.ones(len(X)), z, -X[:, 0], z])

    def fa(X):
        r12, r14, r23, r24, r34 = X.T
        return r14 - r12 * r24 + r12 * r34 * r23 - r14 * r23 ** 2

    def dfa(X):
        r12, r14, r23, r24, r34 = X.T
        return np.column_stack([
            -r24 + r34 * r23,
            1 - r23 ** 2,
            r12 * r34 - 2 * r14 * r23,
            -r12,
            r12 * r23,
        ])

    M1 = ImplicitModel(5, (fa,), (dfa,), names=("f_a",))
    M2 = ImplicitModel(5, (fb,), (dfb,), names=("f_b",))
    return ModelPair("discpath_k3", M1, M2, np.zeros(5),
                     "constraint surfaces of the k=3 discriminating-path pair",
                     ("rho12", "rho14", "rho23", "rho24", "rho34"))


def _transversal_lines() -> ModelPair:
    M1 = _linear(2, 1, "theta2")
    M2 = ImplicitModel(
        2,
        (lambda X: X[:, 1] - X[:, 0],),
        (lambda X: np.tile([-1.0, 1.0], (len(X), 1)),),
        names=("theta2-theta1",),
    )
    return ModelPair("transversal_lines", M1, M2, np.zeros(2),
                     "lines theta2=0 and theta2=theta1", ("theta1", "theta2"))


_BUILDERS = {
    "example_1_1": _example_1_1,
    "figure_3c": _figure_3c,
    "gauss_marg_vs_cond": _gauss_marg_vs_cond,
    "discpath_k3": _discpath_k3,
    "transversal_lines": _transversal_lines,
}


def catalog() -> Dict[str, ModelPair]:
    """All registered model pairs by name."""
    return {k: b() for k, b in _BUILDERS.items()}


def lookup(name: str) -> ModelPair:
    try:
        return _BUILDERS[name]()
    except KeyError:
        raise KeyError(f"unknown catalog entry {name!r}; known: {sorted(_BUILDERS)}") from None
