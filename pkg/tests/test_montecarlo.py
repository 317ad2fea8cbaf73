import numpy as np
import pytest

from tlspose.errors import InvalidNoiseModelError
from tlspose.montecarlo import (TrialRecord, aggregate, compare_covariances, coverage, gaussian_blocks,
                                run_records, run_trials, sample_measurements, trial_rng,
                                write_trials_csv)
from tlspose.uncertainty import psd_factor, report_at_truth


def test_zero_covariances_give_truth(reference):
    s = reference
    assert not np.any(gaussian_blocks(np.zeros((4, 3, 3)), np.random.default_rng(0)))
    m = sample_measurements(s, np.random.default_rng(0), scale=0.0)
    assert np.array_equal(m.r, s.r) and np.array_equal(m.b, s.b)
    assert np.array_equal(m.u, s.u) and np.array_equal(m.v, s.v)


def test_sampling_is_deterministic(reference):
    a = sample_measurements(reference, trial_rng(3, 7))
    b = sample_measurements(reference, trial_rng(3, 7))
    assert np.array_equal(a.d, b.d) and np.array_equal(a.u, b.u) and np.array_equal(a.v, b.v)
    c = sample_measurements(reference, trial_rng(3, 8))
    assert not np.array_equal(a.d, c.d)


def test_direction_noise_matches_covariance(reference):
    s = reference
    rng = np.random.default_rng(11)
    dr = np.array([sample_measurements(s, rng).r[0] - s.r[0] for _ in range(100_000)])
    ratio = np.diag(np.cov(dr.T)) / np.diag(s.noise.R_r[0])
    assert np.all(np.abs(ratio - 1) <= 0.02)


def test_invalid_noise_rejected():
    covs = np.array([np.eye(3), np.diag([1.0, 1.0, -1.0])])
    with pytest.raises(InvalidNoiseModelError):
        gaussian_blocks(covs, np.random.default_rng(0))


def test_single_zero_noise_trial(reference):
    rep, records = run_trials(reference, 1, 0, scale=0.0)
    assert rep.failures == 0 and records[0].converged
    assert np.max(np.abs(rep.errors)) <= 1e-7
    assert np.all(rep.coverage == 1.0)


def test_coverage_examples():
    sig = np.array([1.0, 2.0])
    assert np.array_equal(coverage(np.zeros((5, 2)), sig), [1.0, 1.0])
    assert np.array_equal(coverage(np.tile(3.0001 * sig, (4, 1)), sig), [0.0, 0.0])
    assert np.array_equal(coverage(np.tile(3.0 * sig, (4, 1)), sig), [1.0, 1.0])
    N = 200_000
    x = np.random.default_rng(2).standard_normal((N, 2)) * sig
    p = 0.9973
    assert np.all(np.abs(coverage(x, sig) - p) <= 3 * np.sqrt(p * (1 - p) / N))
    with pytest.raises(ValueError):
        coverage(x, [1.0, 0.0])


def test_bookkeeping_and_determinism(reference):
    rep, records = run_trials(reference, 20, 5)
    rep2, _ = run_trials(reference, 20, 5)
    assert np.array_equal(rep.errors, rep2.errors) and np.array_equal(rep.coverage, rep2.coverage)
    for rec in records:
        m = sample_measurements(reference, trial_rng(5, rec.trial))
        # (d~ - d^) + (d^ - d) = d~ - d
        assert np.allclose(rec.residual_d + rec.estimate_error_d, m.d - reference.d, rtol=0, atol=1e-12)
    assert rep.low_sample and rep.n_trials == 20


def test_parallel_matches_serial(reference, tmp_path):
    serial = run_records(reference, 12, 9, threads=1)
    parallel = run_records(reference, 12, 9, threads=3)
    write_trials_csv(serial, reference.n, tmp_path / "a.csv")
    write_trials_csv(parallel, reference.n, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    with pytest.raises(ValueError):
        run_records(reference, 0, 9)


def test_compare_covariances_self_test(reference):
    # samples straight from the analytical Gaussian must agree within 5%
    analytical = report_at_truth(reference)
    rep, _ = run_trials(reference, 2, 0, scale=0.0)
    rng = np.random.default_rng(4)
    N = 10_000

    def draw(cov):
        # residual covariances are rank deficient, so factor through eigenvalues
        D = np.sqrt(np.diag(cov))
        L = psd_factor(cov / np.outer(D, D))
        return (rng.standard_normal((N, L.shape[1])) @ L.T) * D

    errors = draw(analytical.cov_x)
    res = np.stack([draw(c) for c in analytical.cov_residual], axis=1)
    est = np.stack([draw(c) for c in analytical.cov_estimate], axis=1)
    n = reference.n
    records = []
    for t in range(N):
        e = errors[t]
        records.append(TrialRecord(t, True, 1, e[:3], e[3:6], e[6::2], e[7::2], res[t], est[t], np.zeros(3)))
    synth = aggregate(records, n, 0, analytical.cov_x)
    table = compare_covariances(synth, analytical, band=(0.95, 1.05))
    assert table.consistent, table.flags
    with pytest.raises(ValueError):
        compare_covariances(rep, analytical)
