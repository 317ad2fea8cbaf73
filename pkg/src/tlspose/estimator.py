"""Total-least-squares pose estimation from line-of-sight pairs.

The unknowns are the attitude ``A``, the position ``p`` and the two virtual
depths ``u_i, v_i`` of every feature. After eliminating the observation
estimates with Lagrange multipliers the cost is

    J = 1/2 sum_i (u~_i - u_i)^2 / R_u_i + (v~_i - v_i)^2 / R_v_i
                  + rho_i^T Q_i^-1 rho_i

    rho_i = u_i b~_i - v_i A r~_i + p
    Q_i   = v_i^2 A R_r_i A^T + u_i^2 R_b_i

Perturbations are packed as ``x = [alpha, p, u_1, v_1, ..., u_n, v_n]`` and
applied as ``A <- exp(-[alpha x]) A``, ``p <- p + dp``, ``u <- u + du`` and
``v <- v + dv``. With that convention ``rho(x + eps) ~ rho - G eps`` and the
Gauss-Newton normal equations are ``F eps = g``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.stats

from .errors import (DegenerateConfigurationError, IllConditionedSystemError,
                     TLSPoseError)
from .scenario import MIN_FEATURES, MeasurementSet, NoiseModel, Scenario
from .so3 import as_rotation, exp_so3, project_to_so3, skew_batch

RCOND_MIN = 1e-15
# predicted decrease below this fraction of the cost counts as stationary
STATIONARY_TOL = 1e-12


def idx_u(i: int) -> int:
    """Position of ``du_i`` (0-based feature index) in the packed state."""
    return 6 + 2 * i


def idx_v(i: int) -> int:
    return 7 + 2 * i


def state_dim(n: int) -> int:
    return 6 + 2 * n


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 50
    step_tolerance: float = 1e-10
    cost_tolerance: float = 1e-12
    line_search: bool = True
    max_halvings: int = 8
    # "newton" adds the second-order terms of the reduced cost to F when that
    # keeps the matrix positive definite; "gauss-newton" always steps with F.
    curvature: str = "newton"
    # re-solve from other depth basins for features whose depth is poorly
    # fixed by their own directions (conditional sigma / depth above the ratio)
    basin_check: bool = True
    weak_depth_ratio: float = 0.2

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.step_tolerance <= 0 or self.cost_tolerance <= 0:
            raise ValueError("tolerances must be positive")
        if self.curvature not in ("newton", "gauss-newton"):
            raise ValueError(f"unknown curvature model {self.curvature!r}")


@dataclass(frozen=True, eq=False)
class LinearizedSystem:
    """Quadratic model of the cost around one evaluation point.

    ``F`` is the information matrix, ``g`` the right-hand side of ``F dx = g``.
    Per feature: ``G`` (n, 3, N), ``Q`` (n, 3, 3), ``S = [v A, -u I]`` (n, 3, 6)
    and the residuals ``du``, ``dv``, ``da`` that enter ``g``.
    """

    F: np.ndarray
    g: np.ndarray
    G: np.ndarray
    Q: np.ndarray
    S: np.ndarray
    R_u: np.ndarray
    R_v: np.ndarray
    du: np.ndarray
    dv: np.ndarray
    da: np.ndarray
    mode: str

    @property
    def n(self) -> int:
        return len(self.R_u)

    def solve(self) -> np.ndarray:
        return spd_solve(self.F, self.g)


@dataclass(frozen=True, eq=False)
class PoseSolution:
    A_hat: np.ndarray
    p_hat: np.ndarray
    u_hat: np.ndarray
    v_hat: np.ndarray
    d_hat: np.ndarray
    lam: np.ndarray
    iterations: int
    final_cost: float
    converged: bool
    cost_trace: list = field(default_factory=list)
    restarts: int = 0

    @property
    def r_hat(self) -> np.ndarray:
        return self.d_hat[:, :3]

    @property
    def b_hat(self) -> np.ndarray:
        return self.d_hat[:, 3:]

    def constraint_violation(self) -> float:
        rho = (self.u_hat[:, None] * self.b_hat - self.v_hat[:, None] * (self.r_hat @ self.A_hat.T)
               + self.p_hat)
        return float(np.max(np.linalg.norm(rho, axis=1)))


def spd_solve(F: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``F x = rhs`` for symmetric positive definite ``F``.

    The solve is done on the diagonally equilibrated matrix, since attitude
    and depth blocks of ``F`` differ by ten or more orders of magnitude.
    """
    d = np.sqrt(np.diag(F))
    if not np.all(d > 0.0) or not np.all(np.isfinite(F)):
        raise IllConditionedSystemError("information matrix has a non-positive diagonal")
    Fs = F / np.outer(d, d)
    try:
        c = scipy.linalg.cho_factor(Fs, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise IllConditionedSystemError("information matrix is not positive definite") from exc
    diag = np.diag(c[0]) ** 2
    if diag.min() / diag.max() < RCOND_MIN:
        raise IllConditionedSystemError(
            f"information matrix is numerically singular (pivot ratio {diag.min() / diag.max():.2e})")
    rhs = np.asarray(rhs, dtype=float)
    scale = d if rhs.ndim == 1 else d[:, None]
    return scipy.linalg.cho_solve(c, rhs / scale, check_finite=False) / scale


def build_Q_lambda(A, u: float, v: float, R_r, R_b) -> np.ndarray:
    """``v^2 A R_r A^T + u^2 R_b``, the covariance of one constraint residual."""
    A = np.asarray(A, dtype=float)
    Q = v * v * (A @ np.asarray(R_r) @ A.T) + u * u * np.asarray(R_b)
    return 0.5 * (Q + Q.T)


def _q_batch(A, u, v, noise: NoiseModel):
    M = A @ noise.R_r @ A.T
    Q = (v * v)[:, None, None] * M + (u * u)[:, None, None] * noise.R_b
    return 0.5 * (Q + np.swapaxes(Q, 1, 2)), M


def residuals(meas: MeasurementSet, A, p, u, v) -> np.ndarray:
    """Constraint residuals ``rho_i`` at a candidate solution, ``(n, 3)``."""
    return u[:, None] * meas.b - v[:, None] * (meas.r @ A.T) + p


def reduced_cost(meas: MeasurementSet, A, p, u, v) -> float:
    A = np.asarray(A, dtype=float)
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    noise = meas.noise
    rho = residuals(meas, A, p, u, v)
    Q, _ = _q_batch(A, u, v, noise)
    w = np.linalg.solve(Q, rho[..., None])[..., 0]
    return 0.5 * float(np.sum((meas.u - u) ** 2 / noise.R_u) + np.sum((meas.v - v) ** 2 / noise.R_v)
                       + np.sum(rho * w))


def _linearize(r_dir, b_dir, A, p, u, v, meas: MeasurementSet, noise: NoiseModel, mode: str,
               newton: bool = False):
    n = len(u)
    N = state_dim(n)
    rows = np.arange(n)
    y = r_dir @ A.T
    G = np.zeros((n, 3, N))
    G[:, :, 0:3] = v[:, None, None] * skew_batch(y)
    G[:, :, 3:6] = -np.eye(3)
    G[rows, :, 6 + 2 * rows] = -b_dir
    G[rows, :, 7 + 2 * rows] = y
    Q, M = _q_batch(A, u, v, noise)
    Qinv = np.linalg.inv(Q)
    Qinv = 0.5 * (Qinv + np.swapaxes(Qinv, 1, 2))
    W = Qinv @ G
    F = np.einsum("nki,nkj->ij", G, W)
    F[6 + 2 * rows, 6 + 2 * rows] += 1.0 / noise.R_u
    F[7 + 2 * rows, 7 + 2 * rows] += 1.0 / noise.R_v
    F = 0.5 * (F + F.T)

    du = meas.u - u
    dv = meas.v - v
    da = residuals(meas, A, p, u, v)
    g = np.einsum("nki,nk->i", W, da)
    g[6 + 2 * rows] += du / noise.R_u
    g[7 + 2 * rows] += dv / noise.R_v

    H = None
    if mode == "estimate":
        # dQ/dx terms: with them g is the exact negative gradient of the cost
        w = np.einsum("nij,nj->ni", Qinv, da)
        Mw = np.einsum("nij,nj->ni", M, w)
        g[0:3] += np.sum((v * v)[:, None] * np.cross(w, Mw), axis=0)
        g[6 + 2 * rows] += u * np.einsum("ni,nij,nj->n", w, noise.R_b, w)
        g[7 + 2 * rows] += v * np.einsum("ni,ni->n", w, Mw)
        if newton:
            H = F + _second_order_terms(y, A, u, v, w, Qinv, M, G, noise)

    S = np.zeros((n, 3, 6))
    S[:, :, :3] = v[:, None, None] * A
    S[:, :, 3:] = -u[:, None, None] * np.eye(3)
    system = LinearizedSystem(F=F, g=g, G=G, Q=Q, S=S, R_u=np.array(noise.R_u),
                              R_v=np.array(noise.R_v), du=du, dv=dv, da=da, mode=mode)
    return system, H


_E = skew_batch(np.eye(3))


def _second_order_terms(y, A, u, v, w, Qinv, M, G, noise: NoiseModel) -> np.ndarray:
    """Hessian of the residual part of the cost minus its Gauss-Newton part.

    Per feature, with local variables ``t = [alpha, p, u, v]``, ``w = Q^-1 rho``,
    ``rho_k = -G_k`` and ``Q_k = dQ/dt_k``:

        H_kl - (GN)_kl = - w^T Q_l Q^-1 rho_k - w^T Q_k Q^-1 rho_l
                         + w^T Q_l Q^-1 Q_k w + w^T rho_kl - 1/2 w^T Q_kl w
    """
    n = len(u)
    N = G.shape[2]
    rows = np.arange(n)
    # local Jacobian columns: 8 per feature
    cols = np.zeros((n, 8), dtype=int)
    cols[:, :6] = np.arange(6)
    cols[:, 6] = 6 + 2 * rows
    cols[:, 7] = 7 + 2 * rows
    rho_k = -np.take_along_axis(G, cols[:, None, :], axis=2)  # (n, 3, 8)

    EM = _E[None] @ M[:, None]            # E_k M, (n, 3, 3, 3)
    ME = M[:, None] @ _E[None]            # M E_k
    Qk = np.zeros((n, 8, 3, 3))
    Qk[:, 0:3] = (v * v)[:, None, None, None] * (ME - EM)
    Qk[:, 6] = 2.0 * u[:, None, None] * noise.R_b
    Qk[:, 7] = 2.0 * v[:, None, None] * M

    Qkw = np.einsum("nkij,nj->nki", Qk, w)            # Q_k w
    QinvQkw = np.einsum("nij,nkj->nki", Qinv, Qkw)    # Q^-1 Q_k w
    cross = np.einsum("nki,nil->nkl", QinvQkw, rho_k)  # w^T Q_k Q^-1 rho_l
    h = -cross - np.swapaxes(cross, 1, 2)
    h += np.einsum("nki,nli->nkl", Qkw, QinvQkw)

    # second derivatives of rho and Q; only alpha/alpha, alpha/v, u/u, v/v survive
    EE = _E[:, None] @ _E[None, :]
    EEs = EE + np.swapaxes(EE, 0, 1)                                 # E_k E_l + E_l E_k
    rho_aa = -0.5 * v[:, None, None, None] * np.einsum("klij,nj->nkli", EEs, y)
    h[:, 0:3, 0:3] += np.einsum("ni,nkli->nkl", w, rho_aa)
    rho_av = np.einsum("kij,nj->nki", _E, y)                         # d/dv of alpha column
    t = np.einsum("ni,nki->nk", w, rho_av)
    h[:, 0:3, 7] += t
    h[:, 7, 0:3] += t

    EkMEl = np.einsum("kij,njm,lmq->nkliq", _E, M, _E)
    Qaa = (v * v)[:, None, None, None, None] * (
        0.5 * (np.einsum("klij,njm->nklim", EEs, M) + np.einsum("nij,kljm->nklim", M, EEs))
        - (EkMEl + np.swapaxes(EkMEl, 1, 2)))
    h[:, 0:3, 0:3] -= 0.5 * np.einsum("ni,nklij,nj->nkl", w, Qaa, w)
    Qav = 2.0 * v[:, None, None, None] * (ME - EM)
    t = -0.5 * np.einsum("ni,nkij,nj->nk", w, Qav, w)
    h[:, 0:3, 7] += t
    h[:, 7, 0:3] += t
    h[:, 6, 6] -= np.einsum("ni,nij,nj->n", w, noise.R_b, w)
    h[:, 7, 7] -= np.einsum("ni,nij,nj->n", w, M, w)

    out = np.zeros((N, N))
    for i in range(n):
        c = cols[i]
        out[np.ix_(c, c)] += h[i]
    return 0.5 * (out + out.T)


def assemble(meas: MeasurementSet, A, p, u, v) -> LinearizedSystem:
    """Linearize at a candidate solution using the measured directions.

    ``g`` is the exact negative gradient of :func:`reduced_cost` with respect
    to the packed perturbation, i.e. it includes the terms coming from the
    dependence of ``Q_i`` on the unknowns.
    """
    A = np.asarray(A, dtype=float)
    p = np.asarray(p, dtype=float)
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    system, _ = _linearize(meas.r, meas.b, A, p, u, v, meas, meas.noise, "estimate")
    return system


def assemble_at_truth(scenario: Scenario, meas: MeasurementSet | None = None) -> LinearizedSystem:
    """Linearize at the true pose with true directions (error analysis).

    With ``meas`` given, ``g`` is the first-order right-hand side driven by its
    errors ``du = u~ - u``, ``dv = v~ - v`` and ``da = u db - v A dr``;
    without it ``g`` is zero.
    """
    s = scenario
    if meas is None:
        meas = s.exact_measurements()
    system, _ = _linearize(s.r, s.b, s.A, s.p, s.u, s.v, meas, meas.noise, "truth")
    return system


def solve_ls_baseline(H, y, R_yy) -> tuple[np.ndarray, np.ndarray]:
    """Weighted linear least squares for ``y = H x + noise``, noise ~ N(0, R_yy)."""
    H = np.atleast_2d(np.asarray(H, dtype=float))
    y = np.asarray(y, dtype=float)
    R_yy = np.atleast_2d(np.asarray(R_yy, dtype=float))
    if H.shape[0] == 1 and y.size > 1:
        H = H.T
    if np.linalg.matrix_rank(H) < H.shape[1]:
        raise DegenerateConfigurationError("design matrix does not have full column rank")
    L = np.linalg.cholesky(R_yy)
    Hw = scipy.linalg.solve_triangular(L, H, lower=True)
    yw = scipy.linalg.solve_triangular(L, y, lower=True)
    normal = Hw.T @ Hw
    x_hat = np.linalg.solve(normal, Hw.T @ yw)
    cov = np.linalg.inv(normal)
    return x_hat, 0.5 * (cov + cov.T)


def register_points(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rigid registration ``y_i ~ A x_i - p`` (Kabsch).

    The rotation comes from the SVD of the centred cross-covariance, with the
    smallest singular direction reflected when needed to keep ``det(A) = +1``;
    ``p`` follows from the centroids.
    """
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    U, s, Vt = np.linalg.svd(xc.T @ yc)
    if s[0] <= 0.0 or s[1] <= 1e-9 * s[0]:
        raise DegenerateConfigurationError("features are collinear; attitude is unobservable")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    A = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    p = A @ x.mean(axis=0) - y.mean(axis=0)
    return A, p


def _linear_depth_fit(meas: MeasurementSet, A, u_ref, v_ref):
    """Weighted linear fit of ``(p, u, v)`` for a fixed attitude.

    ``Q`` is frozen at ``u_ref, v_ref`` so the constraint residuals are linear
    in the unknowns; the depth priors enter as ordinary observations. Each
    feature's depth pair is eliminated by its own 2x2 Schur complement, which
    leaves a 3x3 system for ``p``. Returns ``z = [p, u_1, v_1, ...]`` and the
    whitened residual vector. ``A`` may be a stack ``(m, 3, 3)``; the outputs
    then gain the same leading axis.
    """
    A = np.asarray(A, dtype=float)
    single = A.ndim == 2
    A = A[None] if single else A
    noise = meas.noise
    n = meas.n
    y = np.einsum("mij,nj->mni", A, meas.r)                              # (m, n, 3)
    M = A[:, None] @ noise.R_r[None] @ np.swapaxes(A, 1, 2)[:, None]     # (m, n, 3, 3)
    Q = (np.asarray(v_ref) ** 2)[:, None, None] * M + (np.asarray(u_ref) ** 2)[:, None, None] * noise.R_b
    W = np.linalg.inv(0.5 * (Q + np.swapaxes(Q, -1, -2)))
    # per-feature columns [p (3) | u | v]: K = [I, b, -y]
    Wb = np.einsum("mnij,nj->mni", W, meas.b)
    Wy = np.einsum("mnij,mnj->mni", W, y)
    Ppd = np.stack([Wb, -Wy], axis=-1)                                   # (m, n, 3, 2)
    Pdd = np.empty(y.shape[:2] + (2, 2))
    Pdd[..., 0, 0] = np.einsum("ni,mni->mn", meas.b, Wb) + 1.0 / noise.R_u
    Pdd[..., 0, 1] = Pdd[..., 1, 0] = -np.einsum("ni,mni->mn", meas.b, Wy)
    Pdd[..., 1, 1] = np.einsum("mni,mni->mn", y, Wy) + 1.0 / noise.R_v
    rd = np.stack([meas.u / noise.R_u, meas.v / noise.R_v], axis=1)     # (n, 2)
    Pdd_inv = np.linalg.inv(Pdd)
    T = Ppd @ Pdd_inv                                                    # (m, n, 3, 2)
    S = np.sum(W - T @ np.swapaxes(Ppd, -1, -2), axis=1)
    rp = -np.einsum("mnij,nj->mi", T, rd)
    try:
        p = np.linalg.solve(S, rp[..., None])[..., 0]
    except np.linalg.LinAlgError:
        p = np.array([np.linalg.lstsq(Sk, rk, rcond=None)[0] for Sk, rk in zip(S, rp)])
    d = np.einsum("mnij,mnj->mni", Pdd_inv, rd - np.einsum("mnji,mj->mni", Ppd, p))
    u, v = d[..., 0], d[..., 1]
    rho = u[..., None] * meas.b - v[..., None] * y + p[:, None, :]
    L = np.linalg.cholesky(W)
    res = np.concatenate([
        np.einsum("mnji,mnj->mni", L, rho).reshape(len(A), -1),
        (u - meas.u) / np.sqrt(noise.R_u),
        (v - meas.v) / np.sqrt(noise.R_v),
    ], axis=1)
    z = np.empty((len(A), 3 + 2 * n))
    z[:, :3] = p
    z[:, 3::2] = u
    z[:, 4::2] = v
    if single:
        return z[0], res[0]
    return z, res


def seed_depths(meas: MeasurementSet, A, u_ref, v_ref) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Position and depths minimizing the cost for a fixed attitude, ``Q`` frozen."""
    z, _ = _linear_depth_fit(meas, np.asarray(A, dtype=float), u_ref, v_ref)
    return z[:3], z[3::2], z[4::2]


def _wahba(meas: MeasurementSet) -> np.ndarray:
    """Attitude from directions alone, ``b~ ~ A r~`` (ignores parallax)."""
    U, _, Vt = np.linalg.svd(meas.b.T @ meas.r)
    d = np.sign(np.linalg.det(U @ Vt))
    return U @ np.diag([1.0, 1.0, d]) @ Vt


def _refine_attitude(meas: MeasurementSet, A, u_ref, v_ref, max_iterations: int = 15):
    """Variable projection over attitude: Gauss-Newton on three parameters.

    For a fixed attitude, position and depths solve a linear weighted fit
    (``Q`` frozen at ``u_ref, v_ref``), so only ``alpha`` is iterated. The
    Jacobian is taken by forward differences. Returns the refined attitude,
    the fitted ``z = [p, u_1, v_1, ...]`` and the fit's squared residual.
    """
    h = 1e-7
    probes = np.stack([np.eye(3)] + [exp_so3(-h * e) for e in np.eye(3)])
    z, res = _linear_depth_fit(meas, A, u_ref, v_ref)
    cost = float(res @ res)
    for _ in range(max_iterations):
        zs, rs = _linear_depth_fit(meas, probes @ A, u_ref, v_ref)
        z, res = zs[0], rs[0]
        J = (rs[1:] - res).T / h
        step = np.linalg.lstsq(J, -res, rcond=None)[0]
        t = 1.0
        for _ in range(10):
            A1 = exp_so3(-t * step) @ A
            z1, res1 = _linear_depth_fit(meas, A1, u_ref, v_ref)
            cost1 = float(res1 @ res1)
            if cost1 <= cost:
                break
            t *= 0.5
        else:
            break
        # a starting point only needs to be inside the solver's basin
        A, z, res, done = A1, z1, res1, cost - cost1 <= 1e-9 * cost
        cost = cost1
        if done or t * np.max(np.abs(step)) < 1e-8:
            break
    return A, z, cost


def initialize(meas: MeasurementSet, rank: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Starting point ``(A, p, u, v)`` for :func:`solve`.

    Two attitude seeds are tried: rigid registration of body points
    ``u~ b~`` to reference points ``v~ r~`` (unit depths stand in when a
    measured depth is not positive) and a direction-only registration
    ``b~ ~ A r~``. Each is refined by variable projection: for a fixed
    attitude, position and depths follow from a linear weighted fit, so only
    three attitude parameters are searched. Registration alone is not enough
    because depth noise is much larger than the parallax of distant
    features. Seeds are ranked by their fit residual after a few
    iterations; ``rank`` selects which one is finished (0 is the best).
    Depths that come out non-positive are lifted to a tenth of the median
    fitted depth; for ``rank > 0`` the floor is a tenth of the median
    measured depth instead, which keeps a fit that collapsed toward zero
    scale out of that basin. When the registration fits the measured points
    to rounding, it is returned as is with the measured depths.
    """
    if meas.n < MIN_FEATURES:
        raise DegenerateConfigurationError(f"need at least {MIN_FEATURES} features")
    u, v = np.array(meas.u, dtype=float), np.array(meas.v, dtype=float)
    if np.any(u <= 0.0) or np.any(v <= 0.0):
        u, v = np.ones(meas.n), np.ones(meas.n)
    x, y = v[:, None] * meas.r, u[:, None] * meas.b
    A_reg, p_reg = register_points(x, y)
    # consistent measurements: registration is already exact
    if np.max(np.abs(x @ A_reg.T - p_reg - y)) <= 1e-12 * np.max(np.abs(y)):
        return A_reg, p_reg, u, v
    seeds = [A_reg, _wahba(meas)]

    # frozen weights at one common depth; per-feature values are too noisy
    pos = np.concatenate([meas.u[meas.u > 0.0], meas.v[meas.v > 0.0]])
    depth = float(np.median(pos)) if pos.size else 1.0
    ref = np.full(meas.n, depth)
    # a few iterations tell the seeds apart; only the chosen one is finished
    cands = sorted((_refine_attitude(meas, A0, ref, ref, max_iterations=3) for A0 in seeds),
                   key=lambda c: c[2])
    A, _, _ = cands[min(rank, len(cands) - 1)]
    A, z, _ = _refine_attitude(meas, A, ref, ref, max_iterations=6 if rank == 0 else 15)
    A = project_to_so3(A)
    p, u, v = z[:3], z[3::2], z[4::2]
    median = max(float(np.median(np.concatenate([u, v]))), 1e-9)
    floor = 0.1 * (median if rank == 0 else depth)
    u, v = np.maximum(u, floor), np.maximum(v, floor)

    # given (A, p) the cost splits by feature: move each feature to the lowest
    # point of its ray when that beats the fitted depths
    # the grid spans both the fitted and the measured depth scale, since a
    # collapsed fit leaves the former far too small
    lo, hi = min(median, depth), max(median, depth)
    U, V, J = ray_profiles(meas, A, p, np.geomspace(1e-2 * lo, 1e2 * hi, 161))
    g = np.argmin(J, axis=1)
    rows = np.arange(meas.n)
    _, _, J_fit = _feature_costs(meas, A, p, u, v)
    better = J[rows, g] < J_fit
    u = np.where(better, U[rows, g], u)
    v = np.where(better, V[rows, g], v)
    return A, p, u, v


N_SEEDS = 2


def fit_bound(n: int, tail: float = 1e-4) -> float:
    """Cost above which a minimum is rejected as a poor fit.

    At the minimum twice the cost is roughly chi-square with ``3n - 6``
    degrees of freedom (``3n`` constraint residuals plus ``2n`` depth priors
    against ``6 + 2n`` unknowns); the bound is its upper ``tail`` quantile.
    """
    return 0.5 * float(scipy.stats.chi2.isf(tail, max(3 * n - 6, 1)))


def _feature_costs(meas: MeasurementSet, A, p, u, v):
    """Each feature's share of the reduced cost (``ray_profiles`` at one point)."""
    noise = meas.noise
    rho = residuals(meas, A, p, u, v)
    Q, _ = _q_batch(A, u, v, noise)
    w = np.linalg.solve(Q, rho[..., None])[..., 0]
    J = 0.5 * ((meas.u - u) ** 2 / noise.R_u + (meas.v - v) ** 2 / noise.R_v + np.sum(rho * w, axis=1))
    return u, v, J


@dataclass
class SolverState:
    A: np.ndarray
    p: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def retract(self, step: np.ndarray) -> "SolverState":
        A = exp_so3(-step[0:3]) @ self.A
        return SolverState(A, self.p + step[3:6], self.u + step[6::2], self.v + step[7::2])


def _positive(state: SolverState) -> bool:
    return bool(np.all(state.u > 0.0) and np.all(state.v > 0.0))


def _step(meas: MeasurementSet, state: SolverState, config: SolverConfig):
    newton = config.curvature == "newton"
    system, H = _linearize(meas.r, meas.b, state.A, state.p, state.u, state.v, meas, meas.noise,
                           "estimate", newton=newton)
    cost0 = reduced_cost(meas, state.A, state.p, state.u, state.v)
    gn = system.solve()
    # g^T F^-1 g: twice the cost decrease predicted by the Gauss-Newton model
    decrement = float(system.g @ gn)
    step = None
    if H is not None:
        try:
            step = spd_solve(H, system.g)
        except IllConditionedSystemError:
            step = None
    if step is None:
        step = gn
    if not np.any(step):
        return state, step, cost0, cost0, decrement

    t = 1.0
    any_positive = False
    for _ in range(config.max_halvings + 1):
        trial = state.retract(t * step)
        if _positive(trial):
            any_positive = True
            cost1 = reduced_cost(meas, trial.A, trial.p, trial.u, trial.v)
            if not config.line_search or cost1 <= cost0:
                return trial, t * step, cost0, cost1, decrement
        t *= 0.5
    if not config.line_search:
        raise TLSPoseError(f"depths stay non-positive after {config.max_halvings} step halvings")

    # far from the minimum the quadratic model can be poor along the whole
    # ray; fall back to Levenberg-Marquardt damping of the Gauss-Newton matrix
    D = np.diag(np.diag(system.F))
    for mu in 10.0 ** np.arange(-4, 9):
        try:
            damped = spd_solve(system.F + mu * D, system.g)
        except IllConditionedSystemError:
            continue
        trial = state.retract(damped)
        if _positive(trial):
            any_positive = True
            cost1 = reduced_cost(meas, trial.A, trial.p, trial.u, trial.v)
            if cost1 < cost0:
                return trial, damped, cost0, cost1, decrement
    if not any_positive:
        raise TLSPoseError(f"depths stay non-positive after {config.max_halvings} step halvings")
    # no decrease found in any direction: the iterate is at the cost's numerical floor
    return state, np.zeros_like(step), cost0, cost0, decrement


def gn_step(meas: MeasurementSet, state: SolverState, config: SolverConfig = SolverConfig()):
    """One damped Newton or Gauss-Newton step.

    Returns ``(new_state, step, cost_before, cost_after)``. The step solves
    ``F step = g`` (or the same system with the exact Hessian when
    ``config.curvature == "newton"`` and that Hessian is positive definite)
    and is applied with the same sign to every block; the attitude moves by
    ``exp(-[step_alpha x])``. The step is halved until the depths stay
    positive and, with line search on, the cost does not go up. If eight
    halvings do not find a decrease, Levenberg-Marquardt damped steps are
    tried before giving up with a zero step.
    """
    state, step, cost0, cost1, _ = _step(meas, state, config)
    return state, step, cost0, cost1


def _recover_observations(meas: MeasurementSet, A, p, u, v):
    noise = meas.noise
    Q, _ = _q_batch(A, u, v, noise)
    rho = residuals(meas, A, p, u, v)
    # lam = Q^-1 (S d~ - p) = -Q^-1 rho
    lam = -np.linalg.solve(Q, rho[..., None])[..., 0]
    # d^ = d~ - R S^T lam; S^T lam = [v A^T lam; -u lam]
    corr_r = np.einsum("nij,nj->ni", noise.R_r, v[:, None] * (lam @ A))
    corr_b = np.einsum("nij,nj->ni", noise.R_b, -u[:, None] * lam)
    d_hat = np.hstack([meas.r - corr_r, meas.b - corr_b])
    return d_hat, lam


def _descend(meas: MeasurementSet, config: SolverConfig, init):
    A, p, u, v = init
    state = SolverState(as_rotation(A), np.array(p, dtype=float), np.array(u, dtype=float),
                   np.array(v, dtype=float))
    if not _positive(state):
        raise ValueError("initial depths must be positive")
    trace = [reduced_cost(meas, state.A, state.p, state.u, state.v)]
    converged = False
    iterations = 0
    for iterations in range(1, config.max_iterations + 1):
        state, step, c0, c1, decrement = _step(meas, state, config)
        state.A = project_to_so3(state.A)
        trace.append(c1)
        stationary = decrement <= STATIONARY_TOL * max(c0, 1.0)
        if not np.any(step):
            converged = stationary
            break
        if np.max(np.abs(step)) <= config.step_tolerance:
            converged = True
            break
        if c0 - c1 <= config.cost_tolerance * max(c0, 1e-300) and stationary:
            converged = True
            break
    return state, iterations, converged, trace


def ray_profiles(meas: MeasurementSet, A, p, v_grid):
    """Per-feature cost along the measured ray for a fixed pose.

    For each ``v`` on the grid the body depth is the projection
    ``u = b~ . (v A r~ - p) / |b~|^2``. Returns ``(U, V, J)``, each
    ``(n, len(v_grid))``; ``J`` is the feature's share of the reduced cost
    (``inf`` where ``u <= 0``).
    """
    noise = meas.noise
    y = meas.r @ np.asarray(A).T
    V = np.broadcast_to(np.asarray(v_grid, dtype=float), (meas.n, len(v_grid)))
    X = V[..., None] * y[:, None, :] - p
    U = np.einsum("ngk,nk->ng", X, meas.b) / np.sum(meas.b ** 2, axis=1)[:, None]
    rho = U[..., None] * meas.b[:, None, :] - X
    M = A @ noise.R_r @ np.asarray(A).T
    Q = (V ** 2)[..., None, None] * M[:, None] + (U ** 2)[..., None, None] * noise.R_b[:, None]
    w = np.linalg.solve(Q, rho[..., None])[..., 0]
    J = 0.5 * ((meas.u[:, None] - U) ** 2 / noise.R_u[:, None]
               + (meas.v[:, None] - V) ** 2 / noise.R_v[:, None] + np.sum(rho * w, axis=-1))
    return U, V, np.where(U > 0.0, J, np.inf)


def weak_depth_ratios(meas: MeasurementSet, A, p, u, v) -> np.ndarray:
    """Conditional depth sigma over depth, per feature, with the pose held fixed."""
    system = assemble(meas, A, p, u, v)
    out = np.empty(meas.n)
    for k in range(meas.n):
        ii = [idx_u(k), idx_v(k)]
        C = np.linalg.inv(system.F[np.ix_(ii, ii)])
        out[k] = np.sqrt(np.linalg.eigvalsh(C)[-1]) / (0.5 * (u[k] + v[k]))
    return out


def _basin_check(meas: MeasurementSet, config: SolverConfig, state: SolverState, cost: float):
    """Look for a lower minimum along the rays of weakly fixed features.

    A feature with little parallax pulls the attitude toward whichever depth
    basin it sits in, so the cost can have several minima that differ mainly
    in that feature's depth. For each such feature the problem is re-solved
    without it, the feature is placed at the lowest point of its ray profile
    for that pose, and the full problem is solved from there. Returns the
    better state (or ``None``) and the number of extra solves.
    """
    if meas.n <= MIN_FEATURES:
        return None, 0
    ratios = weak_depth_ratios(meas, state.A, state.p, state.u, state.v)
    best, extra = None, 0
    for k in np.flatnonzero(ratios > config.weak_depth_ratio):
        keep = np.array([i for i in range(meas.n) if i != k])
        try:
            sub, _, _, _ = _descend(meas.subset(keep), config,
                                    (state.A, state.p, state.u[keep], state.v[keep]))
        except TLSPoseError:
            continue
        extra += 1
        grid = np.median(np.concatenate([sub.u, sub.v])) * np.geomspace(1e-2, 1e2, 161)
        U, V, J = ray_profiles(meas, sub.A, sub.p, grid)
        g = int(np.argmin(J[k]))
        # same basin as the current solution: nothing new to learn
        if not np.isfinite(J[k, g]) or abs(np.log(V[k, g] / state.v[k])) < np.log(1.5):
            continue
        u = np.empty(meas.n)
        v = np.empty(meas.n)
        u[keep], v[keep] = sub.u, sub.v
        u[k], v[k] = U[k, g], V[k, g]
        try:
            alt, it, conv, trace = _descend(meas, config, (sub.A, sub.p, u, v))
        except TLSPoseError:
            continue
        extra += 1
        if conv and trace[-1] < cost - 1e-9 * max(cost, 1.0):
            best, cost = (alt, it, conv, trace), trace[-1]
    return best, extra


def solve(meas: MeasurementSet, config: SolverConfig = SolverConfig(), init=None) -> PoseSolution:
    """Minimize the reduced cost from :func:`initialize` (or ``init``).

    Iteration stops when ``max|step| <= step_tolerance``, or when the relative
    cost decrease drops below ``cost_tolerance`` while the predicted decrease
    ``g^T F^-1 g / 2`` is also negligible. Hitting ``max_iterations`` or a
    stalled line search away from a stationary point is not an error; the
    last iterate is returned with ``converged=False``. Without ``init``, a
    run that does not converge or ends above :func:`fit_bound` is repeated
    from the next attitude seed and the better result is kept. With
    ``config.basin_check`` on, weakly observed depths are probed for a lower
    minimum afterwards (see :func:`_basin_check`).
    """
    starts = [init] if init is not None else [None] * N_SEEDS
    bound = fit_bound(meas.n)
    best, restarts = None, 0
    for rank, start in enumerate(starts):
        if start is None:
            start = initialize(meas, rank)
        try:
            run = _descend(meas, config, start)
        except TLSPoseError:
            if rank == len(starts) - 1 and best is None:
                raise
            continue
        restarts += rank > 0
        if best is None or (run[2], -run[3][-1]) > (best[2], -best[3][-1]):
            best = run
        if best[2] and best[3][-1] <= bound:
            break
    state, iterations, converged, trace = best
    if config.basin_check and converged:
        better, extra = _basin_check(meas, config, state, trace[-1])
        restarts += extra
        if better is not None:
            state, iterations, converged, trace = better
    d_hat, lam = _recover_observations(meas, state.A, state.p, state.u, state.v)
    return PoseSolution(A_hat=state.A, p_hat=state.p, u_hat=state.u, v_hat=state.v, d_hat=d_hat,
                        lam=lam, iterations=iterations, final_cost=trace[-1], converged=converged,
                        cost_trace=trace, restarts=restarts)
