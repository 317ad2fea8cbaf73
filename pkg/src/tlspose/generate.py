"""Random scenarios following the simulation recipe.

Directions come from Gaussian points with a per-axis scale of
``direction_sigma`` meters; the point's distance is the truth depth ``v``
and its normalized direction is ``r``. Direction covariances are
``c^2 M M^T / lambda_max(M M^T)`` with ``c`` the angle coefficient in
radians, so ``c^2`` is the largest eigenvalue. Depth variances are
``(eps_uv |N(0, 1)|)^2`` with ``|N|`` redrawn until it lies in
``[0.2, 4]``, which keeps them inside 1e3..1e6 m^2 at the default ``eps_uv``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError, IllConditionedSystemError
from .scenario import MIN_FEATURES, NoiseModel, Scenario, complete_feature
from .so3 import random_rotation
from .uncertainty import covariance_of_unknowns, fisher_information

MAX_DRAWS = 100
SCALE_RANGE = (0.2, 4.0)


@dataclass(frozen=True)
class GenerationRecipe:
    n_features: int = 6
    direction_sigma: float = 100.0
    angle_coeff_deg: float = 0.006
    eps_uv: float = 190.0
    depth_floor: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_features < MIN_FEATURES:
            raise ValueError(f"n_features must be >= {MIN_FEATURES}, got {self.n_features}")
        for name in ("direction_sigma", "angle_coeff_deg", "eps_uv", "depth_floor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


def random_spd(rng: np.random.Generator, scale: float) -> np.ndarray:
    """``scale * M M^T / lambda_max`` for a standard normal 3x3 ``M``."""
    M = rng.standard_normal((3, 3))
    MMt = M @ M.T
    MMt = 0.5 * (MMt + MMt.T)
    return scale * MMt / np.linalg.eigvalsh(MMt)[-1]


def abs_normal(rng: np.random.Generator, size: int) -> np.ndarray:
    out = np.abs(rng.standard_normal(size))
    lo, hi = SCALE_RANGE
    bad = (out < lo) | (out > hi)
    while np.any(bad):
        out[bad] = np.abs(rng.standard_normal(int(bad.sum())))
        bad = (out < lo) | (out > hi)
    return out


def _draw(recipe: GenerationRecipe, rng: np.random.Generator) -> Scenario:
    n = recipe.n_features
    A = random_rotation(rng)
    p = rng.standard_normal(3)
    X = recipe.direction_sigma * rng.standard_normal((n, 3))
    dist = np.linalg.norm(X, axis=1)
    if np.any(dist == 0.0):
        raise DegenerateGeometryError("zero-length direction draw")
    r = X / dist[:, None]
    r /= np.linalg.norm(r, axis=1)[:, None]
    v = np.maximum(dist, recipe.depth_floor)
    c2 = np.deg2rad(recipe.angle_coeff_deg) ** 2
    R_r = np.array([random_spd(rng, c2) for _ in range(n)])
    R_b = np.array([random_spd(rng, c2) for _ in range(n)])
    R_u = (recipe.eps_uv * abs_normal(rng, n)) ** 2
    R_v = (recipe.eps_uv * abs_normal(rng, n)) ** 2
    noise = NoiseModel(R_r, R_b, R_u, R_v)
    pairs = [complete_feature(A, p, r[i], v[i]) for i in range(n)]
    if min(u for _, u in pairs) < recipe.depth_floor:
        raise DegenerateGeometryError("feature closer to the camera than the depth floor")
    scenario = Scenario.from_reference(A, p, r, v, noise)
    covariance_of_unknowns(fisher_information(scenario))
    return scenario


def gen_scenario(recipe: GenerationRecipe) -> Scenario:
    """Draw a scenario; degenerate draws are retried up to ``MAX_DRAWS`` times."""
    rng = np.random.default_rng(recipe.seed)
    for _ in range(MAX_DRAWS):
        try:
            return _draw(recipe, rng)
        except (DegenerateGeometryError, IllConditionedSystemError):
            continue
    raise DegenerateGeometryError(f"no usable geometry in {MAX_DRAWS} draws")
