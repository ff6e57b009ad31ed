from __future__ import annotations

import io
import itertools as itr

import numpy as np
import pytest
from scipy.optimize import minimize

from localgeom.gaussian import (
    ConvergenceError,
    CorrMatrix,
    NotPositiveDefiniteError,
    SampleCov,
    SemParams,
    constraint_fa,
    constraint_fb,
    dag_regression_fit,
    deviance,
    disc_path_sem,
    fit_mag_gaussian,
    partial_correlation,
    read_matrix_csv,
    sample_cov,
    sem_to_covariance,
    write_matrix_csv,
)
from localgeom.graphs import MixedGraph, build_discpath_graphs, implied_independences, m_separated


def random_pd(p, rng):
    A = rng.normal(size=(p, p))
    return A @ A.T + p * np.eye(p)


def random_corr(p, rng, scale=1.0):
    return CorrMatrix.from_covariance(random_pd(p, rng)).entries


def numerical_mle_deviance(G, S, starts=4, seed=0):
    """Deviance minimized directly over (B, Omega) with BFGS."""
    p = G.n
    dirs = [(t, (j if t == i else i)) for (i, j), (kind, t) in G.edges.items() if kind == "->"]
    bis = [(i, j) for (i, j), (kind, t) in G.edges.items() if kind == "<->"]

    def unpack(x):
        B = np.zeros((p, p))
        m = len(dirs)
        for (a, b), v in zip(dirs, x[:m]):
            B[a, b] = v
        Om = np.diag(np.exp(x[m:m + p]))
        for (a, b), v in zip(bis, x[m + p:]):
            Om[a, b] = Om[b, a] = v
        return B, Om

    def obj(x):
        B, Om = unpack(x)
        if np.linalg.eigvalsh(Om).min() <= 1e-8:
            return 1e10
        A = np.linalg.inv(np.eye(p) - B)
        return deviance(S.S, A.T @ Om @ A, S.n)

    rng = np.random.default_rng(seed)
    best = np.inf
    for _ in range(starts):
        x0 = np.concatenate([rng.normal(0, 0.1, len(dirs)), np.log(np.diag(S.S)),
                             rng.normal(0, 0.1, len(bis))])
        r = minimize(obj, x0, method="BFGS", options=dict(gtol=1e-10, maxiter=5000))
        best = min(best, r.fun)
    return best


# -- types ----------------------------------------------------------------

def test_corr_matrix_validation():
    CorrMatrix(np.eye(3))
    with pytest.raises(ValueError):
        CorrMatrix(np.array([[1.0, 0.2], [0.2, 0.9]]))
    with pytest.raises(NotPositiveDefiniteError):
        CorrMatrix(np.array([[1.0, 1.0], [1.0, 1.0]]))


def test_sem_params_sparsity():
    G = MixedGraph.from_edges(2, [(0, "->", 1)])
    with pytest.raises(ValueError):
        SemParams(G, np.array([[0, 0], [0.3, 0]]), np.eye(2))
    with pytest.raises(ValueError):
        SemParams(G, np.zeros((2, 2)), np.array([[1, 0.1], [0.1, 1]]))


# -- covariance ---------------------------------------------------------------

def test_sem_covariance_examples():
    G0 = MixedGraph.from_edges(3, [])
    assert np.array_equal(sem_to_covariance(SemParams(G0, np.zeros((3, 3)), np.eye(3))), np.eye(3))
    G = MixedGraph.from_edges(2, [(0, "->", 1)])
    Sig = sem_to_covariance(SemParams(G, np.array([[0, 0.5], [0, 0]]), np.eye(2)))
    assert Sig[0, 1] == pytest.approx(0.5) and Sig[1, 1] == pytest.approx(1.25)
    Sig2 = sem_to_covariance(disc_path_sem(2, 0, "Gk"))
    assert Sig2[0, 1] == pytest.approx(0.4)


def test_disc_path_weights():
    p = disc_path_sem(2, 0, "Gk")
    assert p.Omega[0, 1] == pytest.approx(0.4) and p.Omega[1, 2] == pytest.approx(0.4)
    q = disc_path_sem(3, 1, "Gk'")
    assert q.Omega[0, 1] == q.Omega[1, 2] == pytest.approx(0.2)
    assert q.B[2, 3] == pytest.approx(0.2)
    assert q.B[1, 3] == pytest.approx(0.5)
    assert np.all(np.diag(q.Omega) == 1.0)
    with pytest.raises(ValueError):
        disc_path_sem(3, 0, "nope")


def test_disc_path_vanishing_path_correlations():
    Sig = sem_to_covariance(disc_path_sem(2, 30, "Gk"))
    assert abs(Sig[0, 1]) < 1e-8 and abs(Sig[1, 2]) < 1e-8


@pytest.mark.parametrize("k", [2, 3, 4, 5])
@pytest.mark.parametrize("variant", ["Gk", "Gk'"])
def test_sem_certifies_m_separations(k, variant):
    Gk, Gkp = build_discpath_graphs(k)
    G = Gk if variant == "Gk" else Gkp
    Sig = sem_to_covariance(disc_path_sem(k, 0, variant))
    for i, j in itr.combinations(range(G.n), 2):
        rest = [v for v in range(G.n) if v not in (i, j)]
        for r in range(len(rest) + 1):
            for C in itr.combinations(rest, r):
                pc = partial_correlation(Sig, i, j, C)
                assert (abs(pc) < 1e-10) == m_separated(G, i, j, C)


# -- partial correlation and constraints ---------------------------------------

def test_partial_correlation_identity_and_oracle():
    assert partial_correlation(np.eye(4), 0, 1, [2, 3]) == 0.0
    rng = np.random.default_rng(0)
    for _ in range(20):
        Sig = random_pd(5, rng)
        C = [2, 4]
        idx = [0, 3] + C
        K = np.linalg.inv(Sig[np.ix_(idx, idx)])
        oracle = -K[0, 1] / np.sqrt(K[0, 0] * K[1, 1])
        assert partial_correlation(Sig, 0, 3, C) == pytest.approx(oracle, abs=1e-12)


def test_partial_correlation_conditional_model():
    # rho_xy = rho_xz rho_zy
    rxz, rzy = 0.5, -0.4
    Pi = np.array([[1, rxz * rzy, rxz], [rxz * rzy, 1, rzy], [rxz, rzy, 1]])
    assert abs(partial_correlation(Pi, 0, 1, [2])) < 1e-14


def test_constraint_examples():
    assert constraint_fa(np.eye(4)) == constraint_fb(np.eye(4)) == 0.0
    P = np.eye(4)
    P[0, 3] = P[3, 0] = 0.3
    assert constraint_fb(CorrMatrix(P)) == pytest.approx(0.3)


def test_constraints_agree_to_third_order():
    rng = np.random.default_rng(1)
    for _ in range(5):
        D = rng.normal(size=(4, 4))
        D = (D + D.T) / 2
        np.fill_diagonal(D, 0)
        D[0, 2] = D[2, 0] = 0.0
        D /= np.abs(D).max()
        ratios = []
        for e in 0.2 * 2.0 ** -np.arange(6):
            P = np.eye(4) + e * D
            ratios.append(abs(constraint_fa(P) - constraint_fb(P)) / e ** 3)
        assert max(ratios) < 10
        assert ratios[-1] <= ratios[0] * 1.5


# -- sampling -------------------------------------------------------------------

def test_sample_cov_concentrates():
    S = sample_cov(np.eye(3), 10 ** 6, 11, method="direct")
    assert np.abs(S.S - np.eye(3)).max() < 0.01


def test_sample_cov_deterministic_and_checked():
    Sig = random_pd(3, np.random.default_rng(0))
    a = sample_cov(Sig, 100, 5)
    b = sample_cov(Sig, 100, 5)
    assert np.array_equal(a.S, b.S)
    with pytest.raises(ValueError):
        sample_cov(Sig, 3, 0)


def test_wishart_route_matches_direct_in_distribution():
    Sig = random_pd(3, np.random.default_rng(2))
    n, reps = 50, 3000
    direct = np.array([sample_cov(Sig, n, (1, r), "direct").S for r in range(reps)])
    wish = np.array([sample_cov(Sig, n, (2, r), "wishart").S for r in range(reps)])
    # entrywise variance of a Wishart/n: (s_ij^2 + s_ii s_jj) / n
    var = (Sig ** 2 + np.outer(np.diag(Sig), np.diag(Sig))) / n
    for arr in (direct, wish):
        assert np.all(np.abs(arr.mean(0) - Sig) < 5 * np.sqrt(var / reps))
        assert np.allclose(arr.var(0), var, rtol=0.15)


def test_matrix_csv_roundtrip():
    M = random_pd(4, np.random.default_rng(3))
    buf = io.StringIO()
    write_matrix_csv(M, buf)
    buf.seek(0)
    assert np.array_equal(read_matrix_csv(buf), M)


# -- fitting ---------------------------------------------------------------------

def test_saturated_dag_fits_exactly():
    rng = np.random.default_rng(4)
    G = MixedGraph.from_edges(3, [(0, "->", 1), (0, "->", 2), (1, "->", 2)])
    S = sample_cov(random_pd(3, rng), 40, 1)
    f = fit_mag_gaussian(G, S)
    assert np.allclose(f.Sigma, S.S, atol=1e-10)
    assert f.deviance == pytest.approx(0.0, abs=1e-8)


def test_empty_graph_closed_form():
    rng = np.random.default_rng(5)
    S = sample_cov(random_pd(4, rng), 60, 2)
    f = fit_mag_gaussian(MixedGraph.from_edges(4, []), S)
    assert np.allclose(f.Sigma, np.diag(np.diag(S.S)))
    R = CorrMatrix.from_covariance(S.S).entries
    assert f.deviance == pytest.approx(-S.n * np.linalg.slogdet(R)[1], rel=1e-10)


def test_dag_fit_matches_regression():
    rng = np.random.default_rng(6)
    for _ in range(10):
        n = int(rng.integers(3, 6))
        perm = rng.permutation(n)
        edges = [(int(perm[i]), "->", int(perm[j])) for i, j in itr.combinations(range(n), 2)
                 if rng.random() < 0.5]
        G = MixedGraph.from_edges(n, edges)
        S = sample_cov(random_pd(n, rng), 50, int(rng.integers(1e6)))
        a = fit_mag_gaussian(G, S)
        b = dag_regression_fit(G, S)
        assert a.deviance == pytest.approx(b.deviance, abs=1e-6)


@pytest.mark.parametrize("k", [2, 3, 4])
@pytest.mark.parametrize("which", [0, 1])
def test_ricf_matches_numerical_mle(k, which):
    G = build_discpath_graphs(k)[which]
    Sig = sem_to_covariance(disc_path_sem(k, 0, "Gk"))
    S = sample_cov(Sig, 60, np.random.SeedSequence([1, k]))
    f = fit_mag_gaussian(G, S)
    assert f.deviance == pytest.approx(numerical_mle_deviance(G, S), abs=1e-6)


def test_fit_satisfies_implied_independences():
    rng = np.random.default_rng(7)
    for k in (3, 4):
        for G in build_discpath_graphs(k):
            S = sample_cov(random_pd(G.n, rng), 80, int(rng.integers(1e6)))
            f = fit_mag_gaussian(G, S)
            for st in implied_independences(G).pairwise():
                assert abs(partial_correlation(f.Sigma, st.i, st.j, st.C)) < 1e-6


def test_deviance_relabel_invariant():
    rng = np.random.default_rng(8)
    Gk, _ = build_discpath_graphs(3)
    S = sample_cov(random_pd(4, rng), 70, 3)
    perm = [2, 0, 3, 1]
    a = fit_mag_gaussian(Gk, S)
    b = fit_mag_gaussian(Gk.relabel(perm), S.permuted(perm))
    assert a.deviance == pytest.approx(b.deviance, rel=1e-9)


def test_non_convergence_is_an_error():
    Gk, _ = build_discpath_graphs(4)
    S = sample_cov(sem_to_covariance(disc_path_sem(4, 0, "Gk")), 30, 1)
    with pytest.raises(ConvergenceError) as e:
        fit_mag_gaussian(Gk, S, tol=1e-300, max_sweeps=3)
    assert e.value.sweeps == 3 and e.value.last_iterate is not None


def test_fit_rejects_non_mag_and_small_n():
    bad = MixedGraph.from_edges(3, [(0, "->", 1), (1, "->", 2), (0, "<->", 2)])
    with pytest.raises(Exception):
        fit_mag_gaussian(bad, SampleCov(np.eye(3), 10))
    with pytest.raises(ValueError):
        fit_mag_gaussian(MixedGraph.from_edges(3, []), SampleCov(np.eye(3), 3))


def test_correct_graph_usually_wins():
    Gk, Gkp = build_discpath_graphs(3)
    Sig = sem_to_covariance(disc_path_sem(3, 0, "Gk"))
    wins = 0
    for r in range(200):
        S = sample_cov(Sig, 250, (99, r))
        wins += fit_mag_gaussian(Gk, S).deviance < fit_mag_gaussian(Gkp, S).deviance
    assert 0.68 < wins / 200 < 0.87
