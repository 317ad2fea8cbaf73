"""Fisher information and the covariances that follow from it.

Everything here is first order. With ``rho_i ~ -S_i dd_i - G_i dx`` for
observation errors ``dd_i = [dr_i; db_i]`` and estimate error ``dx``, the
observation residual ``d~_i - d^_i`` is ``C_i (S_i dd_i + G_i dx)`` with the
gain ``C_i = R_i S_i^T Q_i^-1``. Its covariance and that of the estimate
error ``d^_i - d_i`` are

    cov_residual_i = C_i (Q_i - G_i F^-1 G_i^T) C_i^T
    cov_estimate_i = R_i + C_i (Q_i + G_i F^-1 G_i^T) C_i^T
                     - C_i S_i R_i - R_i S_i^T C_i^T

The second-order dependence of ``Q_i`` on the unknowns is left out on
purpose; it does not enter at this order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import IllConditionedSystemError
from .estimator import LinearizedSystem, PoseSolution, assemble, assemble_at_truth, idx_u, idx_v
from .scenario import MeasurementSet, Scenario

BLOCKS = ("alpha", "p", "u", "v")


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def block_indices(n: int) -> dict[str, np.ndarray]:
    """Positions of the attitude, position and depth blocks in the packed state."""
    return {
        "alpha": np.arange(0, 3),
        "p": np.arange(3, 6),
        "u": np.array([idx_u(i) for i in range(n)]),
        "v": np.array([idx_v(i) for i in range(n)]),
    }


def component_names(n: int) -> list[str]:
    names = ["dalpha_x", "dalpha_y", "dalpha_z", "dp_x", "dp_y", "dp_z"]
    for i in range(1, n + 1):
        names += [f"du_{i}", f"dv_{i}"]
    return names


def fisher_information(scenario: Scenario) -> np.ndarray:
    """Information matrix at the true pose with true directions."""
    return assemble_at_truth(scenario).F


def covariance_of_unknowns(F: np.ndarray) -> np.ndarray:
    """``F^-1`` by Cholesky factorization of the equilibrated matrix."""
    F = np.asarray(F, dtype=float)
    d = np.sqrt(np.diag(F)) if np.all(np.diag(F) > 0.0) else None
    if d is None or not np.all(np.isfinite(F)):
        raise IllConditionedSystemError("information matrix has a non-positive diagonal")
    Fs = F / np.outer(d, d)
    try:
        c = scipy.linalg.cho_factor(Fs, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise IllConditionedSystemError("information matrix is not positive definite") from exc
    # a pivot at rounding level means F is singular to working precision
    if np.min(np.diag(c[0])) ** 2 <= len(F) * np.finfo(float).eps:
        raise IllConditionedSystemError("information matrix is numerically singular")
    inv = scipy.linalg.cho_solve(c, np.eye(len(F)), check_finite=False) / np.outer(d, d)
    return _sym(inv)


def inverse_residual(F: np.ndarray, cov: np.ndarray) -> float:
    d = np.sqrt(np.diag(F))
    D = np.outer(d, d)
    return float(np.max(np.abs((F / D) @ (cov * D) - np.eye(len(F)))))


def _observation_blocks(A, u, v, noise):
    """Per-feature ``S`` (n, 3, 6), ``R`` (n, 6, 6), ``Q`` (n, 3, 3) and ``C`` (n, 6, 3)."""
    n = len(u)
    S = np.zeros((n, 3, 6))
    S[:, :, :3] = v[:, None, None] * A
    S[:, :, 3:] = -u[:, None, None] * np.eye(3)
    R = np.zeros((n, 6, 6))
    R[:, :3, :3] = noise.R_r
    R[:, 3:, 3:] = noise.R_b
    Q = _sym(S @ R @ np.swapaxes(S, 1, 2))
    C = R @ np.swapaxes(S, 1, 2) @ np.linalg.inv(Q)
    return S, R, Q, C


def observation_gain(scenario: Scenario, i: int) -> np.ndarray:
    """``C_i = R_i S_i^T Q_i^-1`` at the truth, 6x3."""
    s = scenario
    _, _, _, C = _observation_blocks(s.A, s.u, s.v, s.noise)
    return C[i]


def _residual_cov(C, Q, G, cov_x):
    GPG = G @ cov_x @ G.T
    return _sym(C @ (Q - GPG) @ C.T)


def _estimate_cov(C, Q, G, S, R, cov_x):
    GPG = G @ cov_x @ G.T
    CSR = C @ S @ R
    return _sym(R + C @ (Q + GPG) @ C.T - CSR - CSR.T)


def residual_covariance(scenario: Scenario, i: int, F: np.ndarray) -> np.ndarray:
    """Covariance of the observation residual ``d~_i - d^_i`` (6x6)."""
    system = assemble_at_truth(scenario)
    s = scenario
    _, _, Q, C = _observation_blocks(s.A, s.u, s.v, s.noise)
    return _residual_cov(C[i], Q[i], system.G[i], covariance_of_unknowns(F))


def estimate_covariance(scenario: Scenario, i: int, F: np.ndarray) -> np.ndarray:
    """Covariance of the observation estimate error ``d^_i - d_i`` (6x6)."""
    system = assemble_at_truth(scenario)
    s = scenario
    S, R, Q, C = _observation_blocks(s.A, s.u, s.v, s.noise)
    return _estimate_cov(C[i], Q[i], system.G[i], S[i], R[i], covariance_of_unknowns(F))


@dataclass(frozen=True, eq=False)
class UncertaintyReport:
    F: np.ndarray
    cov_x: np.ndarray
    C: np.ndarray                # (n, 6, 3)
    cov_residual: np.ndarray     # (n, 6, 6)
    cov_estimate: np.ndarray     # (n, 6, 6)
    evaluation_mode: str         # "at-truth" or "at-estimate"

    @property
    def n(self) -> int:
        return len(self.C)

    @property
    def sigma(self) -> np.ndarray:
        """Standard deviations of the packed error state."""
        return np.sqrt(np.diag(self.cov_x))

    def inverse_check(self) -> float:
        """``max |F cov_x - I|`` after scaling ``F`` to unit diagonal.

        The unscaled product mixes radians and meters; its rounding floor is
        set by the units rather than by the accuracy of the inverse.
        """
        return inverse_residual(self.F, self.cov_x)


def _report(system: LinearizedSystem, A, u, v, noise, mode: str) -> UncertaintyReport:
    cov_x = covariance_of_unknowns(system.F)
    S, R, Q, C = _observation_blocks(A, u, v, noise)
    GPG = system.G @ cov_x @ np.swapaxes(system.G, 1, 2)
    CT = np.swapaxes(C, 1, 2)
    cov_res = _sym(C @ (Q - GPG) @ CT)
    CSR = C @ S @ R
    cov_est = _sym(R + C @ (Q + GPG) @ CT - CSR - np.swapaxes(CSR, 1, 2))
    return UncertaintyReport(F=system.F, cov_x=cov_x, C=C, cov_residual=cov_res,
                             cov_estimate=cov_est, evaluation_mode=mode)


def report_at_truth(scenario: Scenario) -> UncertaintyReport:
    s = scenario
    return _report(assemble_at_truth(s), s.A, s.u, s.v, s.noise, "at-truth")


def report_at_estimate(meas: MeasurementSet, solution: PoseSolution) -> UncertaintyReport:
    """The same quantities evaluated at a solution with its recovered directions.

    ``F`` and ``G_i`` use the measured directions, as in the solver; ``S_i``
    and ``Q_i`` use the estimated attitude and depths.
    """
    sol = solution
    system = assemble(meas, sol.A_hat, sol.p_hat, sol.u_hat, sol.v_hat)
    return _report(system, sol.A_hat, sol.u_hat, sol.v_hat, meas.noise, "at-estimate")


def psd_factor(C: np.ndarray) -> np.ndarray:
    """``L`` with ``L L^T = C`` for a symmetric positive semidefinite ``C``."""
    w, V = np.linalg.eigh(_sym(np.asarray(C, dtype=float)))
    return V * np.sqrt(np.clip(w, 0.0, None))


def delta_a_deviation(A, u: float, v: float, R_r, R_b, n_samples: int,
                      rng: np.random.Generator) -> float:
    """Max relative diagonal deviation of ``cov(u db - v A dr)`` from ``Q``.

    Zero covariances give an exact zero.
    """
    if n_samples < 1000:
        raise ValueError("n_samples must be at least 1000")
    A = np.asarray(A, dtype=float)
    Q = v * v * (A @ np.asarray(R_r) @ A.T) + u * u * np.asarray(R_b)
    dr = rng.standard_normal((n_samples, 3)) @ psd_factor(R_r).T
    db = rng.standard_normal((n_samples, 3)) @ psd_factor(R_b).T
    da = u * db - v * dr @ A.T
    sample = da.T @ da / n_samples
    diag = np.diag(Q)
    if np.all(diag == 0.0):
        return float(np.max(np.abs(np.diag(sample))))
    return float(np.max(np.abs(np.diag(sample) - diag) / diag))


def delta_a_covariance_check(scenario: Scenario, i: int, n_samples: int, seed: int) -> float:
    """Sampling check of ``E{da da^T} = Q_i`` for feature ``i`` of a scenario."""
    s = scenario
    return delta_a_deviation(s.A, s.u[i], s.v[i], s.noise.R_r[i], s.noise.R_b[i], n_samples,
                             np.random.default_rng(seed))


@dataclass(frozen=True)
class EfficiencyCheck:
    ratios: dict            # block name -> array of sample/analytical variance ratios
    band: tuple
    equal: bool             # every ratio inside the band


def efficiency_ratios(errors: np.ndarray, cov_x: np.ndarray, band=(0.85, 1.15)) -> EfficiencyCheck:
    """Sample-to-analytical variance ratios per block of the packed error state.

    ``errors`` is ``(trials, 6 + 2n)``; the sample variance is taken about
    the sample mean.
    """
    errors = np.asarray(errors, dtype=float)
    n = (errors.shape[1] - 6) // 2
    var = np.var(errors, axis=0, ddof=1)
    ratio = var / np.diag(cov_x)
    out = {name: ratio[idx] for name, idx in block_indices(n).items()}
    equal = all(np.all((r >= band[0]) & (r <= band[1])) for r in out.values())
    return EfficiencyCheck(ratios=out, band=tuple(band), equal=bool(equal))


def crlb_equality_check(scenario: Scenario, mc_report, band=(0.85, 1.15)) -> EfficiencyCheck:
    """Compare Monte Carlo error variances with the inverse information at truth."""
    if mc_report.n_used < 2000:
        raise ValueError(f"need at least 2000 converged trials, got {mc_report.n_used}")
    return efficiency_ratios(mc_report.errors, covariance_of_unknowns(fisher_information(scenario)),
                             band)
