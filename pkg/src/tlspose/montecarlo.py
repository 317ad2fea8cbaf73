"""Monte Carlo trials: sample noisy measurements, solve, compare with the analytics.

Trial ``t`` draws from ``np.random.default_rng([master_seed, t])`` so every
trial is reproducible on its own and the results do not depend on how the
trials are spread over worker processes. Aggregation runs in trial order.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import InvalidNoiseModelError, TLSPoseError
from .estimator import SolverConfig, solve
from .scenario import MeasurementSet, Scenario
from .so3 import euler321, log_so3, wrap_angle
from .uncertainty import (UncertaintyReport, block_indices, component_names,
                          covariance_of_unknowns, fisher_information)

LOW_SAMPLE = 2000
RATIO_BAND = (0.85, 1.15)


def gaussian_blocks(covs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw from ``N(0, C)`` for each 3x3 block of an ``(n, 3, 3)`` stack.

    All-zero blocks give zero draws; blocks that are not positive definite
    raise :class:`InvalidNoiseModelError`. One standard normal triple is
    consumed per block either way.
    """
    covs = np.asarray(covs, dtype=float)
    z = rng.standard_normal(covs.shape[:-1])
    out = np.zeros_like(z)
    for i, C in enumerate(covs):
        if not np.any(C):
            continue
        try:
            L = np.linalg.cholesky(C)
        except np.linalg.LinAlgError as exc:
            raise InvalidNoiseModelError(f"feature {i}: covariance block is not positive definite") from exc
        out[i] = L @ z[i]
    return out


def sample_measurements(scenario: Scenario, rng: np.random.Generator, scale: float = 1.0) -> MeasurementSet:
    """Additive Gaussian noise on every direction and depth; no renormalization.

    Draw order: ``dr`` for all features, then ``db``, ``du``, ``dv``.
    ``scale`` multiplies the standard deviations (``0`` gives exact data).
    """
    s = scenario
    N = s.noise
    dr = gaussian_blocks(N.R_r, rng)
    db = gaussian_blocks(N.R_b, rng)
    du = np.sqrt(N.R_u) * rng.standard_normal(s.n)
    dv = np.sqrt(N.R_v) * rng.standard_normal(s.n)
    return MeasurementSet(s.r + scale * dr, s.b + scale * db, s.u + scale * du, s.v + scale * dv, N)


def trial_rng(master_seed: int, t: int) -> np.random.Generator:
    return np.random.default_rng([master_seed, t])


@dataclass(frozen=True, eq=False)
class TrialRecord:
    trial: int
    converged: bool
    iterations: int
    dalpha: np.ndarray              # -log(A_hat A^T), rad
    dp: np.ndarray
    du: np.ndarray                  # u_hat - u
    dv: np.ndarray
    residual_d: np.ndarray          # (n, 6), d~ - d^
    estimate_error_d: np.ndarray    # (n, 6), d^ - d
    rpy_error: np.ndarray           # differenced roll, pitch, yaw, rad

    @property
    def error_state(self) -> np.ndarray:
        """Packed ``[dalpha, dp, du_1, dv_1, ...]``."""
        dep = np.empty(2 * len(self.du))
        dep[0::2] = self.du
        dep[1::2] = self.dv
        return np.concatenate([self.dalpha, self.dp, dep])


def _failed(t: int, n: int, iterations: int = 0) -> TrialRecord:
    nan3 = np.full(3, np.nan)
    return TrialRecord(t, False, iterations, nan3, nan3, np.full(n, np.nan), np.full(n, np.nan),
                       np.full((n, 6), np.nan), np.full((n, 6), np.nan), nan3)


def run_trial(scenario: Scenario, t: int, master_seed: int, config: SolverConfig = SolverConfig(),
              scale: float = 1.0) -> TrialRecord:
    s = scenario
    meas = sample_measurements(s, trial_rng(master_seed, t), scale)
    try:
        sol = solve(meas, config)
    except TLSPoseError:
        return _failed(t, s.n)
    if not sol.converged:
        return _failed(t, s.n, sol.iterations)
    return TrialRecord(
        trial=t,
        converged=True,
        iterations=sol.iterations,
        dalpha=-log_so3(sol.A_hat @ s.A.T),
        dp=sol.p_hat - s.p,
        du=sol.u_hat - s.u,
        dv=sol.v_hat - s.v,
        residual_d=meas.d - sol.d_hat,
        estimate_error_d=sol.d_hat - s.d,
        rpy_error=wrap_angle(euler321(sol.A_hat) - euler321(s.A)),
    )


def _run_chunk(args):
    scenario, trials, master_seed, config, scale = args
    return [run_trial(scenario, t, master_seed, config, scale) for t in trials]


def resolve_threads(threads: int) -> int:
    if threads < 0:
        raise ValueError("threads must be >= 0")
    return threads or (os.cpu_count() or 1)


def run_records(scenario: Scenario, n_trials: int, master_seed: int,
                config: SolverConfig = SolverConfig(), threads: int = 1,
                scale: float = 1.0) -> list[TrialRecord]:
    """All trial records in index order, computed in ``threads`` processes."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    workers = min(resolve_threads(threads), n_trials)
    if workers == 1:
        return _run_chunk((scenario, range(n_trials), master_seed, config, scale))
    # contiguous chunks, several per worker to even out the load
    bounds = np.linspace(0, n_trials, 4 * workers + 1).astype(int)
    jobs = [(scenario, range(a, b), master_seed, config, scale) for a, b in zip(bounds, bounds[1:]) if b > a]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        chunks = list(pool.map(_run_chunk, jobs))
    return [rec for chunk in chunks for rec in chunk]


def coverage(errors: np.ndarray, sigmas: np.ndarray) -> np.ndarray:
    """Fraction of rows with ``|error_k| <= 3 sigma_k`` for each column ``k``."""
    errors = np.atleast_2d(np.asarray(errors, dtype=float))
    sigmas = np.asarray(sigmas, dtype=float)
    if np.any(sigmas <= 0.0):
        raise ValueError("sigmas must be positive")
    return np.mean(np.abs(errors) <= 3.0 * sigmas, axis=0)


def _sample_cov(x: np.ndarray) -> np.ndarray:
    """Covariance about the sample mean along axis 0."""
    xc = x - x.mean(axis=0)
    return xc.T @ xc / (len(x) - 1)


@dataclass(frozen=True, eq=False)
class MonteCarloReport:
    n_trials: int
    seed: int
    n: int
    failures: int
    errors: np.ndarray              # (n_used, 6 + 2n), converged trials only
    residuals: np.ndarray           # (n_used, n, 6)
    estimate_errors: np.ndarray     # (n_used, n, 6)
    sigmas: np.ndarray              # analytical 1-sigma of the packed state
    coverage: np.ndarray            # per component of the packed state
    sample_cov: np.ndarray
    residual_cov: np.ndarray        # (n, 6, 6)
    estimate_cov: np.ndarray        # (n, 6, 6)
    mean_iterations: float

    @property
    def n_used(self) -> int:
        return len(self.errors)

    @property
    def low_sample(self) -> bool:
        return self.n_used < LOW_SAMPLE

    @property
    def names(self) -> list[str]:
        return component_names(self.n)

    @property
    def mean(self) -> np.ndarray:
        return self.errors.mean(axis=0)

    def to_dict(self) -> dict:
        return {
            "n_trials": self.n_trials,
            "seed": self.seed,
            "n_features": self.n,
            "n_used": self.n_used,
            "failures": self.failures,
            "low_sample": self.low_sample,
            "mean_iterations": self.mean_iterations,
            "components": self.names,
            "sigma_analytic": self.sigmas.tolist(),
            "coverage_3sigma": self.coverage.tolist(),
            "mean_error": self.mean.tolist(),
            "sample_cov": self.sample_cov.tolist(),
            "residual_cov": self.residual_cov.tolist(),
            "estimate_cov": self.estimate_cov.tolist(),
        }


def aggregate(records: list[TrialRecord], n: int, seed: int, cov_x: np.ndarray) -> MonteCarloReport:
    ok = [r for r in records if r.converged]
    N = 6 + 2 * n
    errors = np.array([r.error_state for r in ok]).reshape(-1, N)
    res = np.array([r.residual_d for r in ok]).reshape(-1, n, 6)
    est = np.array([r.estimate_error_d for r in ok]).reshape(-1, n, 6)
    sigmas = np.sqrt(np.diag(cov_x))
    if len(ok) >= 2:
        res_cov = np.array([_sample_cov(res[:, i]) for i in range(n)])
        est_cov = np.array([_sample_cov(est[:, i]) for i in range(n)])
        sample_cov = _sample_cov(errors)
    else:
        res_cov = est_cov = np.full((n, 6, 6), np.nan)
        sample_cov = np.full((N, N), np.nan)
    return MonteCarloReport(
        n_trials=len(records),
        seed=seed,
        n=n,
        failures=len(records) - len(ok),
        errors=errors,
        residuals=res,
        estimate_errors=est,
        sigmas=sigmas,
        coverage=coverage(errors, sigmas) if len(ok) else np.full(N, np.nan),
        sample_cov=sample_cov,
        residual_cov=res_cov,
        estimate_cov=est_cov,
        mean_iterations=float(np.mean([r.iterations for r in ok])) if ok else float("nan"),
    )


def run_trials(scenario: Scenario, n_trials: int, master_seed: int,
               config: SolverConfig = SolverConfig(), threads: int = 1,
               scale: float = 1.0) -> tuple[MonteCarloReport, list[TrialRecord]]:
    """Run the trials and aggregate against ``F^-1`` at truth."""
    records = run_records(scenario, n_trials, master_seed, config, threads, scale)
    cov_x = covariance_of_unknowns(fisher_information(scenario))
    return aggregate(records, scenario.n, master_seed, cov_x), records


@dataclass(frozen=True, eq=False)
class ConsistencyTable:
    state_ratio: np.ndarray          # sample / analytical variance per packed component
    residual_ratio: np.ndarray       # (n, 6) diagonal ratios
    estimate_ratio: np.ndarray       # (n, 6)
    band: tuple
    names: list

    @property
    def flags(self) -> list[str]:
        lo, hi = self.band
        out = [f"{name}: {r:.4f}" for name, r in zip(self.names, self.state_ratio) if not lo <= r <= hi]
        for label, table in (("residual", self.residual_ratio), ("estimate", self.estimate_ratio)):
            for i, row in enumerate(table):
                for c, r in enumerate(row):
                    if not lo <= r <= hi:
                        out.append(f"{label} feature {i + 1} {D_COMPONENTS[c]}: {r:.4f}")
        return out

    @property
    def consistent(self) -> bool:
        return not self.flags

    def block(self, name: str) -> np.ndarray:
        n = len(self.residual_ratio)
        return self.state_ratio[block_indices(n)[name]]

    def rows(self):
        """``(quantity, component, ratio)`` rows in a fixed order."""
        for name, r in zip(self.names, self.state_ratio):
            yield "state", name, r
        for label, table in (("residual", self.residual_ratio), ("estimate", self.estimate_ratio)):
            for i, row in enumerate(table):
                for c, r in enumerate(row):
                    yield label, f"{D_COMPONENTS[c]}_{i + 1}", r


D_COMPONENTS = ("r_x", "r_y", "r_z", "b_x", "b_y", "b_z")


def compare_covariances(report: MonteCarloReport, analytical: UncertaintyReport,
                        band=RATIO_BAND, min_trials: int = LOW_SAMPLE) -> ConsistencyTable:
    """Sample-to-analytical variance ratios for the state and the observations."""
    if report.n_used < min_trials:
        raise ValueError(f"need at least {min_trials} converged trials, got {report.n_used}")
    diag = lambda M: np.diagonal(M, axis1=-2, axis2=-1)
    return ConsistencyTable(
        state_ratio=np.diag(report.sample_cov) / np.diag(analytical.cov_x),
        residual_ratio=diag(report.residual_cov) / diag(analytical.cov_residual),
        estimate_ratio=diag(report.estimate_cov) / diag(analytical.cov_estimate),
        band=tuple(band),
        names=report.names,
    )


def dump_header(n: int) -> list[str]:
    head = ["trial", "converged", "iters"] + component_names(n)
    for label in ("res", "est"):
        for i in range(1, n + 1):
            head += [f"{label}_{c}_{i}" for c in D_COMPONENTS]
    return head + ["roll_err", "pitch_err", "yaw_err"]


def write_trials_csv(records: list[TrialRecord], n: int, path) -> None:
    """One row per trial; floats written with ``repr`` so reruns are byte-identical."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(dump_header(n))
        for r in records:
            vals = np.concatenate([r.error_state, r.residual_d.ravel(), r.estimate_error_d.ravel(),
                                   r.rpy_error])
            w.writerow([r.trial, int(r.converged), r.iterations] + [repr(float(x)) for x in vals])


def write_comparison_csv(table: ConsistencyTable, report: MonteCarloReport, path) -> None:
    lo, hi = table.band
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quantity", "component", "ratio", "in_band"])
        for quantity, comp, r in table.rows():
            w.writerow([quantity, comp, repr(float(r)), int(lo <= r <= hi)])


def write_coverage_csv(report: MonteCarloReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["component", "sigma", "coverage_3sigma"])
        for name, s, c in zip(report.names, report.sigmas, report.coverage):
            w.writerow([name, repr(float(s)), repr(float(c))])


def write_report_json(report: MonteCarloReport, path, extra: dict | None = None) -> None:
    doc = report.to_dict()
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, allow_nan=True)
        fh.write("\n")
