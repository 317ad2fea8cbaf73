import numpy as np
import pytest

from tlspose.errors import IllConditionedSystemError
from tlspose.estimator import assemble_at_truth, idx_u
from tlspose.generate import GenerationRecipe, gen_scenario
from tlspose.scenario import NoiseModel, Scenario
from tlspose.sensitivity import rcond, scale_depth_variances
from tlspose.so3 import random_rotation
from tlspose.uncertainty import (_estimate_cov, _observation_blocks, _residual_cov,
                                 covariance_of_unknowns, delta_a_covariance_check, delta_a_deviation,
                                 efficiency_ratios, estimate_covariance, fisher_information,
                                 inverse_residual, observation_gain, report_at_estimate,
                                 report_at_truth, residual_covariance)


def _iso_scenario(n=3, s2=1e-6, depth_var=1e4):
    r = np.array([[1.0, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0], [0, 1, 1]])[:n]
    r /= np.linalg.norm(r, axis=1)[:, None]
    eye = np.tile(s2 * np.eye(3), (n, 1, 1))
    noise = NoiseModel(eye, eye, np.full(n, depth_var), np.full(n, depth_var))
    return Scenario.from_reference(np.eye(3), np.array([0.1, -0.2, 0.3]), r,
                                   np.linspace(10, 30, n), noise)


def test_isotropic_depth_diagonal():
    s2, Ru = 1e-6, 1e4
    s = _iso_scenario(s2=s2, depth_var=Ru)
    F = fisher_information(s)
    for i in range(s.n):
        q = (s.u[i] ** 2 + s.v[i] ** 2) * s2
        assert F[idx_u(i), idx_u(i)] == pytest.approx(1 / Ru + 1 / q, rel=1e-12)


def test_fixture_information(reference):
    F = fisher_information(reference)
    assert np.all(np.linalg.eigvalsh(F / np.sqrt(np.outer(np.diag(F), np.diag(F)))) > 0)
    scaled = scale_depth_variances(reference, 1900.0)
    assert rcond(fisher_information(scaled)) < rcond(F)


def test_covariance_of_unknowns():
    d = np.array([1.0, 4.0, 1e-6, 1e8])
    assert np.allclose(covariance_of_unknowns(np.diag(d)), np.diag(1 / d), rtol=1e-15, atol=0)
    with pytest.raises(IllConditionedSystemError):
        covariance_of_unknowns(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(IllConditionedSystemError):
        covariance_of_unknowns(np.diag([1.0, 0.0]))


def test_inverse_check_well_conditioned():
    for seed in range(10):
        s = gen_scenario(GenerationRecipe(n_features=4, seed=seed, eps_uv=1.0))
        rep = report_at_truth(s)
        F = rep.F
        D = np.sqrt(np.diag(F))
        cond = np.linalg.cond(F / np.outer(D, D))
        if cond * np.finfo(float).eps < 1e-10:
            assert rep.inverse_check() <= 1e-8


def test_inverse_check_fixture(reference):
    rep = report_at_truth(reference)
    F = rep.F
    D = np.sqrt(np.diag(F))
    cond = np.linalg.cond(F / np.outer(D, D))
    # the residual of a backward-stable inverse is bounded by a small multiple of cond * eps
    assert rep.inverse_check() <= 10 * cond * np.finfo(float).eps
    assert np.allclose(rep.cov_x, rep.cov_x.T, rtol=0, atol=0)


def test_fixture_covariance_properties(reference):
    rep = report_at_truth(reference)
    assert np.all(np.linalg.eigvalsh(rep.cov_x / np.outer(rep.sigma, rep.sigma)) > 0)
    for i in range(reference.n):
        res = rep.cov_residual[i]
        assert np.array_equal(res, res.T)
        w = np.linalg.eigvalsh(res)
        assert w.min() >= -1e-10 * w.max()
        # estimation refines the raw measurements
        assert np.trace(rep.cov_estimate[i]) < np.trace(reference.noise.stacked(i))
    # attitude 3 sigma is of order 1e-3 to 1e-2 deg... or above for this weak geometry
    three_sigma_deg = np.rad2deg(3 * rep.sigma[:3])
    assert np.all((three_sigma_deg > 1e-3) & (three_sigma_deg < 1.0))


def test_gain_examples(reference):
    # u = 1, v = 0, A = I, R = I: S = [0, -I], Q = I, C = [0; -I]
    noise = NoiseModel(np.eye(3)[None], np.eye(3)[None], np.ones(1), np.ones(1))
    S, R, Q, C = _observation_blocks(np.eye(3), np.ones(1), np.zeros(1), noise)
    assert np.allclose(S[0], np.hstack([np.zeros((3, 3)), -np.eye(3)]))
    assert np.allclose(Q[0], np.eye(3)) and np.allclose(C[0], np.vstack([np.zeros((3, 3)), -np.eye(3)]))
    s2, u, v = 1e-4, 3.0, 4.0
    iso = NoiseModel(s2 * np.eye(3)[None], s2 * np.eye(3)[None], np.ones(1), np.ones(1))
    _, _, _, C = _observation_blocks(np.eye(3), np.array([u]), np.array([v]), iso)
    assert np.allclose(C[0], np.vstack([v * np.eye(3), -u * np.eye(3)]) / (u * u + v * v))
    s = reference
    S, R, Q, C = _observation_blocks(s.A, s.u, s.v, s.noise)
    lhs = C[0] @ Q[0] @ C[0].T
    rhs = R[0] @ S[0].T @ np.linalg.solve(Q[0], S[0] @ R[0])
    assert np.allclose(lhs, rhs, rtol=1e-10, atol=1e-24)
    assert np.allclose(lhs, lhs.T, rtol=1e-12, atol=1e-26)
    assert np.array_equal(observation_gain(s, 0), C[0])


def test_residual_covariance_limits(reference):
    s = reference
    S, R, Q, C = _observation_blocks(s.A, s.u, s.v, s.noise)
    G = assemble_at_truth(s).G
    # a perfect prior on the unknowns leaves C Q C^T
    res = _residual_cov(C[0], Q[0], G[0], np.zeros_like(assemble_at_truth(s).F))
    assert np.allclose(res, C[0] @ Q[0] @ C[0].T)
    F = fisher_information(s)
    assert np.allclose(residual_covariance(s, 2, F), report_at_truth(s).cov_residual[2])
    assert np.allclose(estimate_covariance(s, 2, F), report_at_truth(s).cov_estimate[2])
    # noise-free limit
    zero = _estimate_cov(0 * C[0], 0 * Q[0], G[0], S[0], 0 * R[0], np.zeros_like(F))
    assert not np.any(zero)


def test_Q_minus_GPG_is_psd():
    # whitened by Q, the matrix is I - W with W a contraction; what remains
    # negative is rounding, bounded by cond(F) * eps after equilibration
    for seed in range(50):
        s = gen_scenario(GenerationRecipe(n_features=3 + seed % 5, seed=seed))
        system = assemble_at_truth(s)
        F = system.F
        D = np.sqrt(np.diag(F))
        bound = np.linalg.cond(F / np.outer(D, D)) * np.finfo(float).eps
        P = covariance_of_unknowns(F)
        for i in range(s.n):
            L = np.linalg.cholesky(system.Q[i])
            W = np.linalg.solve(L, system.G[i])
            M = np.eye(3) - W @ P @ W.T
            assert np.linalg.eigvalsh(0.5 * (M + M.T)).min() >= -bound


def test_report_at_estimate(reference):
    from tlspose.estimator import solve
    sol = solve(reference.exact_measurements())
    rep = report_at_estimate(reference.exact_measurements(), sol)
    ref = report_at_truth(reference)
    assert rep.evaluation_mode == "at-estimate"
    assert np.allclose(rep.sigma, ref.sigma, rtol=1e-6)


def test_delta_a_examples(reference):
    rng = np.random.default_rng(0)
    zero = np.zeros((3, 3))
    assert delta_a_deviation(np.eye(3), 2.0, 3.0, zero, zero, 1000, rng) == 0.0
    A = random_rotation(rng)
    dev = delta_a_deviation(A, 2.0, 3.0, 1e-4 * np.eye(3), 1e-4 * np.eye(3), 100_000, rng)
    assert dev <= 3 * np.sqrt(2 / 100_000)
    assert delta_a_covariance_check(reference, 0, 100_000, seed=1) <= 0.02
    with pytest.raises(ValueError):
        delta_a_deviation(A, 1.0, 1.0, zero, zero, 10, rng)


def test_efficiency_checker_self_test(reference):
    cov = covariance_of_unknowns(fisher_information(reference))
    rng = np.random.default_rng(3)
    L = np.linalg.cholesky(cov / np.outer(np.sqrt(np.diag(cov)), np.sqrt(np.diag(cov))))
    x = (rng.standard_normal((10_000, len(cov))) @ L.T) * np.sqrt(np.diag(cov))
    check = efficiency_ratios(x, cov, band=(0.95, 1.05))
    assert check.equal
    inflated = efficiency_ratios(x * 10, cov)
    assert not inflated.equal


def test_inverse_residual_is_scale_free():
    rng = np.random.default_rng(0)
    M = rng.standard_normal((5, 5))
    F = M @ M.T + 5 * np.eye(5)
    D = np.diag(10.0 ** np.arange(5))
    Fs = D @ F @ D
    assert inverse_residual(Fs, np.linalg.inv(Fs)) < 1e-12
