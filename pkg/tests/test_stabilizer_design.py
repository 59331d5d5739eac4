import math

import numpy as np
import pytest
from scipy.linalg import expm

from stabilab.spectral_basis import RectDomain, build_basis
from stabilab.stabilizer_design import (
    DesignRejected, HypothesisError, assemble_design, audit_decay_margin, audit_simple_spectrum, boundary_gram,
    closed_loop_generator, feedback_u, gram_matrix, neumann_map_modes, neumann_modes, select_unstable,
)


def test_select_unstable_counts(basis40):
    N, mu = select_unstable(basis40, 5.0, 2.0)
    # lambdas 0,1,2,3,4,6 give mu <= 2; lambda 8 gives 3
    assert N == 6
    np.testing.assert_allclose(mu[:7], [-5, -4, -3, -2, -1, 1, 3])


def test_select_unstable_errors(basis40):
    with pytest.raises(ValueError):
        select_unstable(basis40, 5.0, 1.0)
    with pytest.raises(ValueError):
        select_unstable(basis40, 5.0, 3.0)        # rho equals mu_7
    with pytest.raises(ValueError):
        select_unstable(basis40, -10.0, 2.0)      # nothing unstable
    small = build_basis(RectDomain.aspect_sqrt2(4), 4)
    with pytest.raises(ValueError):
        select_unstable(small, 20.0, 2.0)         # N would equal J


def test_margin_threshold():
    # cond1 with lambda_N = 6, rho = 4: needs 2 alpha <= 4 - 0.74 - 1.5
    lam = np.array([0, 1, 2, 3, 4, 6.0])
    a_star = (4 - 0.74 - 1.5) / 2
    assert audit_decay_margin(a_star - 1e-6, 4.0, 6, lam)["per_condition"]["cond1"] <= 0
    assert audit_decay_margin(a_star + 1e-6, 4.0, 6, lam)["per_condition"]["cond1"] > 0


def test_margin_worst_condition_is_max():
    lam = np.array([0, 1, 2, 3, 4, 6.0])
    rep = audit_decay_margin(0.1, 2.0, 6, lam)
    assert rep["worst_margin"] == max(rep["per_condition"].values())
    assert not rep["ok"]


def test_simple_spectrum():
    assert audit_simple_spectrum([-5, -4, -3], 3)["ok"]
    assert not audit_simple_spectrum([-5, -5, -3], 3)["ok"]
    assert audit_simple_spectrum([-5], 1)["ok"]


def test_sqrt2_first_seven_simple(basis40):
    for c, rho in [(5.0, 2.0), (5.0, 3.5), (4.0, 3.8)]:
        N, mu = select_unstable(basis40, c, rho)
        if N <= 7:
            assert audit_simple_spectrum(mu, N)["ok"]


def test_tie_among_unstable_rejected():
    # square: lambda = 1 twice
    b = build_basis(RectDomain.for_modes(math.pi, math.pi, 12), 12)
    with pytest.raises(DesignRejected):
        assemble_design(b, 0.0, 1.5, 0.1)


def test_gram_symmetric_psd(design40):
    B = design40.B
    np.testing.assert_allclose(B, B.T, atol=1e-14)
    assert np.linalg.eigvalsh(B).min() > 0
    assert design40.gram_rank == design40.N


def test_adjacent_edges_lose_rank():
    b = build_basis(RectDomain.aspect_sqrt2(40, gamma1_edges=("bottom", "left")), 40)
    with pytest.raises(DesignRejected):
        gram_matrix(b, 6)
    B = boundary_gram(b, 6)
    s = np.linalg.svd(B, compute_uv=False)
    assert int(np.sum(s > 1e-10 * s.max())) == 4


def test_Bk_and_A(design40):
    d = design40
    for k in range(d.N):
        L = d.Lambdas[k]
        np.testing.assert_allclose(d.Bk[k], L @ d.B @ L, atol=1e-14)
    np.testing.assert_allclose(d.A @ d.Bk.sum(axis=0), np.eye(d.N), atol=1e-9)
    assert d.cond_sum < 1e12


def test_n1_scalar_design():
    b = build_basis(RectDomain.aspect_sqrt2(10), 10)
    d = assemble_design(b, -0.5, 1.2, 0.1)
    assert d.N == 1
    # one unstable mode: reduced matrix is -gamma_1
    np.testing.assert_allclose(d.reduced_matrix(), [[-d.gammas[0]]])


def test_default_gammas(design40):
    np.testing.assert_allclose(design40.gammas, 2.0 + np.arange(1, 7))


def test_invalid_gammas(basis40):
    with pytest.raises(ValueError):
        assemble_design(basis40, 5, 2, 0.1, gammas=[1.5, 3, 4, 5, 6, 7])
    with pytest.raises(ValueError):
        assemble_design(basis40, 5, 2, 0.1, gammas=[3, 3, 4, 5, 6, 7])
    with pytest.raises(ValueError):
        assemble_design(basis40, 5, 2, 0.1, gammas=[3, 4])


def test_require_margin(basis40):
    with pytest.raises(HypothesisError):
        assemble_design(basis40, 5, 2, 0.1, require_margin=True)
    d = assemble_design(basis40, 4.0, 3.8, 0.1, require_margin=True)
    assert d.margin["ok"] and d.N == 6


def test_feedback_zero_and_linear(design40):
    uk, u = feedback_u(design40, np.zeros(40))
    assert u.norm() == 0.0 and len(uk) == design40.N
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal(40), rng.standard_normal(40)
    _, ua = feedback_u(design40, a)
    _, ub = feedback_u(design40, b)
    _, uab = feedback_u(design40, 2 * a - b)
    np.testing.assert_allclose(uab.values, 2 * ua.values - ub.values, atol=1e-12)


def test_feedback_reads_only_unstable_modes(design40):
    y = np.random.default_rng(2).standard_normal(40)
    z = y.copy()
    z[design40.N:] = 0.0
    np.testing.assert_array_equal(feedback_u(design40, y)[1].values, feedback_u(design40, z)[1].values)


def test_neumann_map_modes_formula(design40):
    d = design40
    g = np.cos(np.arange(len(d.basis.trace_weights)))
    gamma = 7.5
    m = neumann_map_modes(d.basis, d.mu, d.N, g, gamma)
    proj = d.basis.trace_values.T @ (d.basis.trace_weights * g)
    np.testing.assert_allclose(m[: d.N], -proj[: d.N] / (gamma - d.mu[: d.N]))
    np.testing.assert_allclose(m[d.N:], -proj[d.N:] / (gamma + d.mu[d.N:]))
    np.testing.assert_allclose(neumann_modes(d, g, 0), neumann_map_modes(d.basis, d.mu, d.N, g, d.gammas[0]))
    with pytest.raises(DesignRejected):
        neumann_map_modes(d.basis, d.mu, d.N, g, float(d.mu[0]))


def test_feedback_identity_on_unstable_modes(design40):
    """sum_k <u_k, phi_j>_0 / (gamma_k - mu_j) over j <= N reproduces Y_N."""
    d = design40
    y = np.random.default_rng(3).standard_normal(40)
    uk, _ = feedback_u(d, y)
    acc = np.zeros(d.N)
    for k, f in enumerate(uk):
        proj = d.basis.trace_values[:, : d.N].T @ (f.weights * f.values)
        acc += proj / (d.gammas[k] - d.mu[: d.N])
    np.testing.assert_allclose(acc, y[: d.N], atol=1e-9)


def test_reduced_matrix_matches_generator(design40):
    d = design40
    G = closed_loop_generator(d)
    np.testing.assert_allclose(G[: d.N, : d.N], d.reduced_matrix(), atol=1e-10)
    np.testing.assert_allclose(G[d.N:, : d.N], -(d.coupling() @ d.A)[d.N:], atol=1e-10)
    np.testing.assert_allclose(G[: d.N, d.N:], 0.0)


def test_closed_loop_is_stable(design40):
    ev = np.linalg.eigvals(closed_loop_generator(design40))
    assert ev.real.max() < -design40.rho
    K = design40.reduced_matrix()
    # the reduced flow contracts at rate gamma_1 in the A-weighted norm
    A = design40.A
    for t in (0.3, 1.0, 2.0):
        Q = expm(K * t)
        M = Q.T @ A @ Q
        assert np.linalg.eigvalsh(np.linalg.solve(A, M)).max() <= math.exp(-2 * design40.gammas[0] * t) * (1 + 1e-8)


def test_summary_keys(design40):
    s = design40.summary()
    assert s["N"] == 6 and s["J"] == 40
    assert len(s["B"]) == 6


def test_margin_single_mode_threshold():
    # N = 1, lambda_1 = 0, alpha = 0.1: the first condition dominates at -rho + 0.94
    per = audit_decay_margin(0.1, 2.0, 1, [0.0])["per_condition"]
    assert per["cond1"] == pytest.approx(-2.0 + 0.94)
    assert max(per, key=per.get) == "cond1"
    assert audit_decay_margin(0.1, 0.94 + 1e-9, 1, [0.0])["ok"]
    assert not audit_decay_margin(0.1, 0.94 - 1e-9, 1, [0.0])["ok"]


def test_bottom_edge_gram_entry():
    b = build_basis(RectDomain(math.pi, math.pi, 16, 16, ("bottom",)), 3)
    j = [i for i, p in enumerate(b.pairs) if (p.kx, p.ky) == (1, 0)][0]
    assert boundary_gram(b)[j, j] == pytest.approx(1.0 / math.pi, rel=1e-12)
