"""Ground-truth scenarios, noise models and measurement sets.

A scenario holds the true pose ``(A, p)`` and, per feature, the unit
line-of-sight vectors ``r`` (reference frame) and ``b`` (body frame) with
their depths ``v`` and ``u``. Every feature satisfies

    u * b = v * A @ r - p

exactly. Features are stored as stacked arrays (``r`` is ``(n, 3)``,
``R_r`` is ``(n, 3, 3)`` and so on) so that the estimator can work on all
of them at once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import DegenerateGeometryError
from .so3 import as_rotation

MIN_FEATURES = 3
UNIT_TOL = 1e-12
CONSTRAINT_TOL = 1e-9
SYMMETRY_TOL = 1e-14


def _frozen(a, shape=None) -> np.ndarray:
    out = np.array(a, dtype=float)
    if shape is not None and out.shape != shape:
        raise ValueError(f"expected shape {shape}, got {out.shape}")
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class FeatureTruth:
    r: np.ndarray
    b: np.ndarray
    u: float
    v: float


@dataclass(frozen=True)
class FeatureNoise:
    R_r: np.ndarray
    R_b: np.ndarray
    R_u: float
    R_v: float


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Per-feature measurement covariances.

    Direction and depth errors are mutually uncorrelated and uncorrelated
    across features, so the stacked covariance of ``[r; b]`` for one feature
    is ``blockdiag(R_r, R_b)``.
    """

    R_r: np.ndarray
    R_b: np.ndarray
    R_u: np.ndarray
    R_v: np.ndarray

    def __post_init__(self):
        n = len(self.R_u)
        object.__setattr__(self, "R_r", _frozen(self.R_r, (n, 3, 3)))
        object.__setattr__(self, "R_b", _frozen(self.R_b, (n, 3, 3)))
        object.__setattr__(self, "R_u", _frozen(self.R_u, (n,)))
        object.__setattr__(self, "R_v", _frozen(self.R_v, (n,)))
        for name in ("R_r", "R_b"):
            blocks = getattr(self, name)
            for i, block in enumerate(blocks):
                if np.max(np.abs(block - block.T)) > SYMMETRY_TOL * max(1.0, np.max(np.abs(block))):
                    raise ValueError(f"feature {i}: {name} is not symmetric")
                if np.linalg.eigvalsh(block)[0] <= 0.0:
                    raise ValueError(f"feature {i}: {name} is not positive definite")
        if np.any(self.R_u <= 0.0) or np.any(self.R_v <= 0.0):
            raise ValueError("depth variances R_u, R_v must be positive")

    @property
    def n(self) -> int:
        return len(self.R_u)

    def stacked(self, i: int) -> np.ndarray:
        """6x6 covariance of ``[r_i; b_i]``."""
        out = np.zeros((6, 6))
        out[:3, :3] = self.R_r[i]
        out[3:, 3:] = self.R_b[i]
        return out

    def feature(self, i: int) -> FeatureNoise:
        return FeatureNoise(self.R_r[i], self.R_b[i], float(self.R_u[i]), float(self.R_v[i]))

    def with_depth_variances(self, R_u, R_v) -> "NoiseModel":
        return NoiseModel(self.R_r, self.R_b, R_u, R_v)

    def subset(self, index) -> "NoiseModel":
        return NoiseModel(self.R_r[index], self.R_b[index], self.R_u[index], self.R_v[index])


@dataclass(frozen=True, eq=False)
class MeasurementSet:
    """Noisy observations of every feature plus the noise model they came from.

    ``r`` and ``b`` are generally not unit vectors: noise is additive.
    """

    r: np.ndarray
    b: np.ndarray
    u: np.ndarray
    v: np.ndarray
    noise: NoiseModel

    def __post_init__(self):
        n = self.noise.n
        object.__setattr__(self, "r", _frozen(self.r, (n, 3)))
        object.__setattr__(self, "b", _frozen(self.b, (n, 3)))
        object.__setattr__(self, "u", _frozen(self.u, (n,)))
        object.__setattr__(self, "v", _frozen(self.v, (n,)))

    @property
    def n(self) -> int:
        return self.noise.n

    @property
    def d(self) -> np.ndarray:
        """Stacked ``[r; b]`` observation vectors, ``(n, 6)``."""
        return np.hstack([self.r, self.b])

    def subset(self, index) -> "MeasurementSet":
        """The measurements of the listed features only."""
        return MeasurementSet(self.r[index], self.b[index], self.u[index], self.v[index],
                              self.noise.subset(index))


@dataclass(frozen=True, eq=False)
class Scenario:
    A: np.ndarray
    p: np.ndarray
    r: np.ndarray
    b: np.ndarray
    u: np.ndarray
    v: np.ndarray
    noise: NoiseModel

    def __post_init__(self):
        n = len(self.u)
        if n < MIN_FEATURES:
            raise ValueError(f"a scenario needs at least {MIN_FEATURES} features, got {n}")
        object.__setattr__(self, "A", as_rotation(self.A))
        object.__setattr__(self, "p", _frozen(self.p, (3,)))
        for name, shape in (("r", (n, 3)), ("b", (n, 3)), ("u", (n,)), ("v", (n,))):
            object.__setattr__(self, name, _frozen(getattr(self, name), shape))
        if self.noise.n != n:
            raise ValueError(f"noise model has {self.noise.n} features, scenario has {n}")
        for name in ("r", "b"):
            norms = np.linalg.norm(getattr(self, name), axis=1)
            bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_TOL)
            if bad.size:
                raise ValueError(f"feature {bad[0]}: {name} is not a unit vector (norm {norms[bad[0]]!r})")
        if np.any(self.u <= 0.0) or np.any(self.v <= 0.0):
            raise ValueError("depths u, v must be positive")
        res = np.linalg.norm(constraint_residuals(self.A, self.p, self.r, self.b, self.u, self.v), axis=1)
        scale = np.maximum(self.u, self.v)
        bad = np.flatnonzero(res > CONSTRAINT_TOL * scale)
        if bad.size:
            raise ValueError(f"feature {bad[0]} violates u b = v A r - p by {res[bad[0]]:.3e}")

    @property
    def n(self) -> int:
        return len(self.u)

    @property
    def d(self) -> np.ndarray:
        return np.hstack([self.r, self.b])

    @property
    def features(self) -> Iterator[tuple[FeatureTruth, FeatureNoise]]:
        for i in range(self.n):
            yield (FeatureTruth(self.r[i], self.b[i], float(self.u[i]), float(self.v[i])),
                   self.noise.feature(i))

    def exact_measurements(self) -> MeasurementSet:
        """Noise-free measurement set equal to the truth."""
        return MeasurementSet(self.r, self.b, self.u, self.v, self.noise)

    def with_noise(self, noise: NoiseModel) -> "Scenario":
        return Scenario(self.A, self.p, self.r, self.b, self.u, self.v, noise)

    @classmethod
    def from_reference(cls, A, p, r, v, noise: NoiseModel) -> "Scenario":
        """Build a scenario from reference-frame data, completing ``b`` and ``u``."""
        r = np.asarray(r, dtype=float)
        v = np.asarray(v, dtype=float)
        pairs = [complete_feature(A, p, r[i], v[i]) for i in range(len(v))]
        b = np.array([pb for pb, _ in pairs]).reshape(-1, 3)
        u = np.array([pu for _, pu in pairs])
        return cls(A, p, r, b, u, v, noise)


def complete_feature(A, p, r, v: float) -> tuple[np.ndarray, float]:
    """Body-frame direction and depth implied by ``u b = v A r - p``."""
    y = v * (np.asarray(A, dtype=float) @ np.asarray(r, dtype=float)) - np.asarray(p, dtype=float)
    u = float(np.linalg.norm(y))
    if u <= 1e-12:
        raise DegenerateGeometryError("camera centre coincides with the feature (v A r = p)")
    return y / u, u


def constraint_residuals(A, p, r, b, u, v) -> np.ndarray:
    """``u b - v A r + p`` for every feature, ``(n, 3)``."""
    r = np.asarray(r, dtype=float)
    return (np.asarray(u, dtype=float)[:, None] * np.asarray(b, dtype=float)
            - np.asarray(v, dtype=float)[:, None] * (r @ np.asarray(A, dtype=float).T)
            + np.asarray(p, dtype=float))


def constraint_residual(scenario: Scenario, i: int) -> np.ndarray:
    s = scenario
    return s.u[i] * s.b[i] - s.v[i] * (s.A @ s.r[i]) + s.p
