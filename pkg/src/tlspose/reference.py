"""Six-feature reference scenario used throughout the tests and the CLI.

The attitude, position, reference-frame directions, reference depths and all
noise covariances are taken as given (four significant digits). Repairs
applied to make the data usable:

* ``r_i`` are renormalized to unit length (rounding leaves |r| - 1 ~ 6e-5);
* ``b_i`` and ``u_i`` are regenerated from ``u b = v A r - p``; the printed
  values do not satisfy that constraint;
* ``R_b4`` is printed with an asymmetric (1,3)/(3,1) pair; the upper-triangle
  value is used for both entries;
* ``R_r6`` is slightly indefinite after rounding; its eigenvalues are floored
  at 1e-10 rad^2 (the printing resolution).
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .scenario import NoiseModel, Scenario

_C = np.cos(np.pi / 4)
_S = np.sin(np.pi / 4)

ATTITUDE = np.array([[_C, _S, 0.0], [-_S, _C, 0.0], [0.0, 0.0, 1.0]])
POSITION = np.array([0.7512, 1.7783, 1.2231])

R_DIRECTIONS = np.array([
    [0.6930, -0.0639, 0.7181],
    [0.5074, 0.8032, 0.3120],
    [0.1558, 0.0360, 0.9871],
    [-0.4723, -0.7507, -0.4618],
    [-0.9202, -0.3649, -0.1418],
    [-0.3115, 0.7715, 0.5548],
])
V_DEPTHS = np.array([125.1189, 36.2025, 282.3673, 246.9957, 118.8191, 70.1661])

# printed values, kept for reference; not consistent with the constraint
PRINTED_B = np.array([
    [0.3037, -0.6373, 0.7082],
    [0.9562, -0.0606, 0.2863],
    [0.1102, -0.1204, 0.9866],
    [-0.8856, 0.0003, -0.4645],
    [-0.8020, 0.5776, -0.1524],
    [0.4981, 0.6662, 0.5551],
])
PRINTED_U = np.array([125.1371, 35.1825, 281.2848, 248.2209, 118.5592, 67.9268])

R_U = np.array([1.5609e4, 1.2334e4, 1.2882e4, 9.9700e4, 4.8596e4, 1.0926e5])
R_V = np.array([1.9356e4, 6.2020e4, 8.1318e4, 3.1038e4, 1.1476e4, 4.7077e4])

_R_R = 1e-8 * np.array([
    [[4.04, 2.53, -0.335], [2.53, 10.1, -5.75], [-0.335, -5.75, 4.39]],
    [[0.15, -0.20, 0.36], [-0.20, 4.24, -0.08], [0.36, -0.08, 3.37]],
    [[8.25, 0.41, 1.33], [0.41, 3.50, -2.01], [1.33, -2.01, 1.51]],
    [[8.84, -2.08, -0.06], [-2.08, 0.55, -0.32], [-0.06, -0.32, 2.10]],
    [[4.38, -1.93, -3.51], [-1.93, 2.31, -0.74], [-3.51, -0.74, 6.87]],
    [[7.16, 1.00, 3.01], [1.00, 0.46, 0.24], [3.01, 0.24, 1.36]],
])
_R_B = 1e-8 * np.array([
    [[1.42, 1.44, -1.35], [1.44, 1.48, -1.46], [-1.35, -1.46, 2.07]],
    [[5.06, 3.03, 1.18], [3.03, 3.22, 1.02], [1.18, 1.02, 1.57]],
    [[0.83, -0.51, -0.50], [-0.51, 0.61, 0.67], [-0.50, 0.67, 5.73]],
    [[3.55, -1.53, 1.82], [-1.53, 5.19, -0.06], [1.82, -0.06, 1.17]],
    [[14.5, 3.18, 8.50], [3.18, 0.80, 1.70], [8.50, 1.70, 5.94]],
    [[2.86, -1.04, -0.43], [-1.04, 2.33, -1.49], [-0.43, -1.49, 1.48]],
])

EIG_FLOOR = 1e-10


def floor_eigenvalues(C: np.ndarray, floor: float = EIG_FLOOR) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (C + C.T))
    if w[0] >= floor:
        return 0.5 * (C + C.T)
    out = (V * np.maximum(w, floor)) @ V.T
    return 0.5 * (out + out.T)


def reference_noise() -> NoiseModel:
    R_r = np.array([floor_eigenvalues(C) for C in _R_R])
    R_b = np.array([floor_eigenvalues(C) for C in _R_B])
    return NoiseModel(R_r, R_b, R_U.copy(), R_V.copy())


@lru_cache(maxsize=None)
def reference_scenario() -> Scenario:
    """The six-feature reference scenario with constraint-consistent ``b``, ``u``."""
    r = R_DIRECTIONS / np.linalg.norm(R_DIRECTIONS, axis=1, keepdims=True)
    return Scenario.from_reference(ATTITUDE, POSITION, r, V_DEPTHS, reference_noise())
