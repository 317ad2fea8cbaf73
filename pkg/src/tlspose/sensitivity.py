"""Derivatives with respect to the virtual-depth variances, and conditioning sweeps.

The depth variances enter the information matrix only through the diagonal
terms ``e_i^T e_i / R_u_i`` and ``f_i^T f_i / R_v_i``, so every derivative
is a rank-one update through ``F^-1 e_i^T``:

    d dx / dR        = -F^-1 e^T (du - e dx) / R^2
    d F^-1 / dR      = +F^-1 e^T e F^-1 / R^2
    d cov_res_j / dR = -C_j G_j (d F^-1 / dR) G_j^T C_j^T
    d cov_est_j / dR = +C_j G_j (d F^-1 / dR) G_j^T C_j^T
    d log|F| / dR    = -(F^-1)_kk / R^2

with ``dx = F^-1 g`` and ``du`` the measured-minus-evaluated depth. The
signs were fixed against central finite differences (see ``fd_check``).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import mpmath as mp
import numpy as np

from . import uncertainty as unc
from .estimator import LinearizedSystem, assemble_at_truth, idx_u, idx_v, spd_solve
from .scenario import MeasurementSet, Scenario

BASELINE_EPS = 190.0
PARAMETERS = ("R_u", "R_v")


def _index(i: int, parameter: str) -> int:
    if parameter == "R_u":
        return idx_u(i)
    if parameter == "R_v":
        return idx_v(i)
    raise ValueError(f"unknown parameter {parameter!r}")


def _variance(noise, i: int, parameter: str) -> float:
    return float(noise.R_u[i] if parameter == "R_u" else noise.R_v[i])


def _d_estimate(system: LinearizedSystem, k: int, residual: float, R: float) -> np.ndarray:
    dx = system.solve()
    e = np.zeros(len(dx))
    e[k] = 1.0
    return -spd_solve(system.F, e) * (residual - dx[k]) / R**2


def d_estimate_d_Ru(system: LinearizedSystem, i: int, residual_u_i: float | None = None) -> np.ndarray:
    """Derivative of ``dx = F^-1 g`` with respect to ``R_u_i``.

    ``residual_u_i`` defaults to the depth residual stored in ``system``.
    """
    residual = system.du[i] if residual_u_i is None else residual_u_i
    return _d_estimate(system, idx_u(i), float(residual), float(system.R_u[i]))


def d_estimate_d_Rv(system: LinearizedSystem, i: int, residual_v_i: float | None = None) -> np.ndarray:
    residual = system.dv[i] if residual_v_i is None else residual_v_i
    return _d_estimate(system, idx_v(i), float(residual), float(system.R_v[i]))


def _d_cov(F: np.ndarray, k: int, R: float, cov: np.ndarray | None = None) -> np.ndarray:
    cov = unc.covariance_of_unknowns(F) if cov is None else cov
    c = cov[:, k]
    return np.outer(c, c) / R**2


def d_cov_d_Ru(F: np.ndarray, i: int, R_u_i: float) -> np.ndarray:
    """Derivative of ``F^-1`` with respect to ``R_u_i``; PSD rank one."""
    return _d_cov(F, idx_u(i), R_u_i)


def d_cov_d_Rv(F: np.ndarray, i: int, R_v_i: float) -> np.ndarray:
    return _d_cov(F, idx_v(i), R_v_i)


def _rank_one_rescov(CG: np.ndarray, c: np.ndarray, R: float) -> np.ndarray:
    # -x x^T / R^2 with x = C G F^-1 e^T; forming the outer product of c
    # first would cancel badly, since c can be 1e9 times larger than x
    x = CG @ c
    return -(x[..., :, None] * x[..., None, :]) / R**2


def _d_rescov(F, scenario: Scenario, k: int, R: float, j: int) -> np.ndarray:
    s = scenario
    CG = unc.observation_gain(s, j) @ assemble_at_truth(s).G[j]
    return _rank_one_rescov(CG, unc.covariance_of_unknowns(F)[:, k], R)


def d_rescov_d_Ru(F: np.ndarray, scenario: Scenario, i: int, j: int) -> np.ndarray:
    """Derivative of the residual covariance of feature ``j`` w.r.t. ``R_u_i``."""
    return _d_rescov(F, scenario, idx_u(i), float(scenario.noise.R_u[i]), j)


def d_rescov_d_Rv(F: np.ndarray, scenario: Scenario, i: int, j: int) -> np.ndarray:
    return _d_rescov(F, scenario, idx_v(i), float(scenario.noise.R_v[i]), j)


def d_estcov_d_Ru(F: np.ndarray, scenario: Scenario, i: int, j: int) -> np.ndarray:
    """Derivative of the estimate covariance of feature ``j``; the negative of the residual one."""
    return -d_rescov_d_Ru(F, scenario, i, j)


def d_estcov_d_Rv(F: np.ndarray, scenario: Scenario, i: int, j: int) -> np.ndarray:
    return -d_rescov_d_Rv(F, scenario, i, j)


def d_logdetF_d_Ru(F: np.ndarray, i: int, R_u_i: float) -> float:
    """Derivative of ``log|F|`` with respect to ``R_u_i``; always negative."""
    return float(-unc.covariance_of_unknowns(F)[idx_u(i), idx_u(i)] / R_u_i**2)


def d_logdetF_d_Rv(F: np.ndarray, i: int, R_v_i: float) -> float:
    return float(-unc.covariance_of_unknowns(F)[idx_v(i), idx_v(i)] / R_v_i**2)


def logdet(F: np.ndarray) -> float:
    sign, value = np.linalg.slogdet(F)
    if sign <= 0:
        return float("-inf")
    return float(value)


def rcond(F: np.ndarray) -> float:
    """Ratio of the smallest to the largest singular value."""
    sv = np.linalg.svd(F, compute_uv=False)
    return float(sv[-1] / sv[0])


def scale_depth_variances(scenario: Scenario, eps: float) -> Scenario:
    """Scenario with every ``R_u``, ``R_v`` scaled by ``(eps / 190)^2``."""
    if not eps > 0.0:
        raise ValueError(f"eps must be positive, got {eps!r}")
    f = (eps / BASELINE_EPS) ** 2
    noise = scenario.noise
    return scenario.with_noise(noise.with_depth_variances(noise.R_u * f, noise.R_v * f))


@dataclass(frozen=True)
class SweepRow:
    eps_uv: float
    rcond_F: float
    logdet_F: float


def conditioning_sweep(scenario: Scenario, eps_values) -> list[SweepRow]:
    """``rcond(F)`` and ``log|F|`` at truth for each depth-noise scale."""
    eps_values = [float(e) for e in eps_values]
    if not eps_values:
        raise ValueError("eps_values is empty")
    if any(not e > 0.0 for e in eps_values):
        raise ValueError("eps values must be positive")
    if any(b <= a for a, b in zip(eps_values, eps_values[1:])):
        raise ValueError("eps values must be strictly ascending")
    rows = []
    for eps in eps_values:
        F = unc.fisher_information(scale_depth_variances(scenario, eps))
        rows.append(SweepRow(eps, rcond(F), logdet(F)))
    return rows


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["eps_uv", "rcond_F", "logdet_F"])
        for row in rows:
            w.writerow([repr(row.eps_uv), repr(row.rcond_F), repr(row.logdet_F)])


def _structure(scenario: Scenario, meas: MeasurementSet):
    """Pieces of the truth linearization that do not depend on ``R_u``, ``R_v``."""
    system = assemble_at_truth(scenario, meas)
    rep = unc.report_at_truth(scenario)
    return system, rep, rep.C @ system.G


def _mp_quantities(F0, g0, CG, k: int, residual: float, R):
    """Every differentiated quantity at variance ``R`` in extended precision.

    ``F = F0 + e e^T / R`` and ``g = g0 + e residual / R``; that is exactly how
    the depth priors enter the assembled system.
    """
    F = mp.matrix(F0.tolist())
    g = mp.matrix(g0.tolist())
    F[k, k] += 1 / R
    g[k] += mp.mpf(residual) / R
    cov = F ** -1
    out = {"d_estimate": cov * g, "d_cov": cov, "d_logdetF": mp.log(mp.det(F))}
    out["d_rescov"] = [-(mp.matrix(T.tolist()) * cov * mp.matrix(T.T.tolist())) for T in CG]
    return out


def analytic_derivatives(scenario: Scenario, meas: MeasurementSet, i: int, parameter: str) -> dict:
    """All derivatives with respect to one depth variance, at truth.

    ``meas`` supplies the frozen noise draw that drives ``dx``.
    """
    k = _index(i, parameter)
    R = _variance(scenario.noise, i, parameter)
    system = assemble_at_truth(scenario, meas)
    residual = system.du[i] if parameter == "R_u" else system.dv[i]
    F = system.F
    cov = unc.covariance_of_unknowns(F)
    dcov = _d_cov(F, k, R, cov)
    rep = unc.report_at_truth(scenario)
    dres = _rank_one_rescov(rep.C @ system.G, cov[:, k], R)
    return {
        "d_estimate": _d_estimate(system, k, float(residual), R),
        "d_cov": dcov,
        "d_rescov": dres,
        "d_estcov": -dres,
        "d_logdetF": float(-cov[k, k] / R**2),
    }


def _relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = np.max(np.abs(b))
    if scale == 0.0:
        return float(np.max(np.abs(a)))
    return float(np.max(np.abs(a - b)) / scale)


def fd_check(scenario: Scenario, meas: MeasurementSet, i: int, parameter: str,
             rel_step: float = 1e-4, dps: int = 40) -> dict:
    """Relative error of each analytic derivative against central differences.

    The error is ``max|analytic - fd| / max|fd|`` over all entries, with the
    step ``R * rel_step`` and the noise draw in ``meas`` held fixed. The
    differences are taken in ``dps``-digit arithmetic: in double precision a
    1e-4 change of a depth variance moves ``F`` by less than its rounding
    error relative to the attitude block, so the quotient would be noise.
    """
    k = _index(i, parameter)
    R = _variance(scenario.noise, i, parameter)
    system, _, CG = _structure(scenario, meas)
    residual = float(system.du[i] if parameter == "R_u" else system.dv[i])
    # the snapshot without this feature's prior term
    F0 = np.array(system.F)
    F0[k, k] -= 1.0 / R
    g0 = np.array(system.g)
    g0[k] -= residual / R
    analytic = analytic_derivatives(scenario, meas, i, parameter)
    with mp.workdps(dps):
        Rm = mp.mpf(R)
        h = Rm * mp.mpf(rel_step)
        plus = _mp_quantities(F0, g0, CG, k, residual, Rm + h)
        minus = _mp_quantities(F0, g0, CG, k, residual, Rm - h)
        fd = {}
        for name in plus:
            if name == "d_rescov":
                diff = [(a - b) / (2 * h) for a, b in zip(plus[name], minus[name])]
                fd[name] = np.array([np.array(d.tolist(), dtype=float) for d in diff])
            elif name == "d_logdetF":
                fd[name] = float((plus[name] - minus[name]) / (2 * h))
            else:
                fd[name] = np.array(((plus[name] - minus[name]) / (2 * h)).tolist(), dtype=float)
    fd["d_estimate"] = fd["d_estimate"].ravel()
    fd["d_estcov"] = -fd["d_rescov"]
    return {name: _relative_error(analytic[name], fd[name]) for name in analytic}


@dataclass(frozen=True, eq=False)
class SensitivityReport:
    # (feature index, parameter) -> analytic derivatives
    derivatives: dict
    # (feature index, parameter) -> relative error against finite differences
    fd_errors: dict = field(default_factory=dict)
    sweep: list = field(default_factory=list)
    tolerance: float = 0.01

    @property
    def fd_passed(self) -> bool:
        return all(err <= self.tolerance for errs in self.fd_errors.values() for err in errs.values())

    @property
    def logdet_negative(self) -> bool:
        return all(d["d_logdetF"] < 0.0 for d in self.derivatives.values())


def sensitivity_report(scenario: Scenario, meas: MeasurementSet | None = None, eps_values=(),
                       validate: bool = True) -> SensitivityReport:
    """Derivatives for every feature and both depth variances, plus an optional sweep."""
    meas = scenario.exact_measurements() if meas is None else meas
    derivs, errors = {}, {}
    for i in range(scenario.n):
        for parameter in PARAMETERS:
            derivs[(i, parameter)] = analytic_derivatives(scenario, meas, i, parameter)
            if validate:
                errors[(i, parameter)] = fd_check(scenario, meas, i, parameter)
    sweep = conditioning_sweep(scenario, eps_values) if len(eps_values) else []
    return SensitivityReport(derivs, errors, sweep)
