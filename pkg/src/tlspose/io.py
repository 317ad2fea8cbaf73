"""JSON documents for scenarios, measurement sets and solution reports.

A scenario document looks like

    {"attitude": [[...], [...], [...]],
     "position": [x, y, z],
     "features": [{"r": [...], "v": 1.0, "b": [...], "u": 1.0,
                   "R_r": [[...]], "R_b": [[...]], "R_u": 1.0, "R_v": 1.0}, ...]}

``b`` and ``u`` are optional and regenerated from the constraint when both
are absent. Floats are written with the shortest round-trip repr, so a
written scenario reads back bit for bit.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DegenerateGeometryError, ScenarioFormatError
from .estimator import PoseSolution
from .scenario import MeasurementSet, NoiseModel, Scenario, complete_feature
from .uncertainty import UncertaintyReport

REFERENCE_FILE = "reference_scenario.json"


def _load_json(text: str, source: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioFormatError(f"{source}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None


def _array(value, shape, where: str) -> np.ndarray:
    try:
        out = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise ScenarioFormatError(f"{where}: expected numbers") from None
    if out.shape != shape:
        raise ScenarioFormatError(f"{where}: expected shape {shape}, got {out.shape}")
    if not np.all(np.isfinite(out)):
        raise ScenarioFormatError(f"{where}: values must be finite")
    return out


def _field(obj: dict, name: str, shape, where: str) -> np.ndarray:
    if not isinstance(obj, dict):
        raise ScenarioFormatError(f"{where}: expected an object")
    if name not in obj:
        raise ScenarioFormatError(f"{where}: missing field '{name}'")
    return _array(obj[name], shape, f"{where}: field '{name}'")


def scenario_from_dict(doc: dict) -> Scenario:
    if not isinstance(doc, dict):
        raise ScenarioFormatError("scenario: expected an object at top level")
    A = _field(doc, "attitude", (3, 3), "scenario")
    p = _field(doc, "position", (3,), "scenario")
    feats = doc.get("features")
    if not isinstance(feats, list):
        raise ScenarioFormatError("scenario: missing field 'features' (a list)")
    r, b, u, v, R_r, R_b, R_u, R_v = ([] for _ in range(8))
    for i, f in enumerate(feats):
        where = f"features[{i}]"
        r.append(_field(f, "r", (3,), where))
        v.append(float(_field(f, "v", (), where)))
        R_r.append(_field(f, "R_r", (3, 3), where))
        R_b.append(_field(f, "R_b", (3, 3), where))
        R_u.append(float(_field(f, "R_u", (), where)))
        R_v.append(float(_field(f, "R_v", (), where)))
        has_b, has_u = "b" in f, "u" in f
        if has_b != has_u:
            raise ScenarioFormatError(f"{where}: fields 'b' and 'u' must be given together")
        if has_b:
            b.append(_field(f, "b", (3,), where))
            u.append(float(_field(f, "u", (), where)))
        else:
            try:
                bi, ui = complete_feature(A, p, r[-1], v[-1])
            except DegenerateGeometryError as exc:
                raise ScenarioFormatError(f"{where}: {exc}") from None
            b.append(bi)
            u.append(ui)
    try:
        noise = NoiseModel(np.array(R_r).reshape(-1, 3, 3), np.array(R_b).reshape(-1, 3, 3),
                           np.array(R_u), np.array(R_v))
        return Scenario(A, p, np.array(r).reshape(-1, 3), np.array(b).reshape(-1, 3), np.array(u),
                        np.array(v), noise)
    except ValueError as exc:
        raise ScenarioFormatError(f"scenario: {exc}") from None


def _floats(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def scenario_to_dict(scenario: Scenario) -> dict:
    s = scenario
    feats = []
    for i in range(s.n):
        feats.append({
            "r": _floats(s.r[i]),
            "v": float(s.v[i]),
            "b": _floats(s.b[i]),
            "u": float(s.u[i]),
            "R_r": _floats(s.noise.R_r[i]),
            "R_b": _floats(s.noise.R_b[i]),
            "R_u": float(s.noise.R_u[i]),
            "R_v": float(s.noise.R_v[i]),
        })
    return {"attitude": _floats(s.A), "position": _floats(s.p), "features": feats}


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=1) + "\n"


def load_scenario(path=None) -> Scenario:
    """Read a scenario document; ``None`` loads the bundled reference scenario."""
    if path is None:
        text = resources.files("tlspose").joinpath("data").joinpath(REFERENCE_FILE).read_text(encoding="utf-8")
        return scenario_from_dict(_load_json(text, REFERENCE_FILE))
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioFormatError(f"{path}: {exc.strerror}") from None
    return scenario_from_dict(_load_json(text, str(path)))


def save_scenario(scenario: Scenario, path) -> None:
    Path(path).write_text(dumps(scenario_to_dict(scenario)), encoding="utf-8")


def measurements_to_dict(meas: MeasurementSet) -> dict:
    return {"measurements": [
        {"r": _floats(meas.r[i]), "b": _floats(meas.b[i]), "u": float(meas.u[i]), "v": float(meas.v[i])}
        for i in range(meas.n)
    ]}


def measurements_from_dict(doc: dict, noise: NoiseModel) -> MeasurementSet:
    items = doc.get("measurements") if isinstance(doc, dict) else None
    if not isinstance(items, list):
        raise ScenarioFormatError("measurements: missing field 'measurements' (a list)")
    if len(items) != noise.n:
        raise ScenarioFormatError(f"measurements: {len(items)} features, scenario has {noise.n}")
    r, b, u, v = [], [], [], []
    for i, m in enumerate(items):
        where = f"measurements[{i}]"
        r.append(_field(m, "r", (3,), where))
        b.append(_field(m, "b", (3,), where))
        u.append(float(_field(m, "u", (), where)))
        v.append(float(_field(m, "v", (), where)))
    return MeasurementSet(np.array(r), np.array(b), np.array(u), np.array(v), noise)


def load_measurements(path, noise: NoiseModel) -> MeasurementSet:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioFormatError(f"{path}: {exc.strerror}") from None
    return measurements_from_dict(_load_json(text, str(path)), noise)


def save_measurements(meas: MeasurementSet, path) -> None:
    Path(path).write_text(dumps(measurements_to_dict(meas)), encoding="utf-8")


def uncertainty_to_dict(rep: UncertaintyReport) -> dict:
    return {
        "evaluation_mode": rep.evaluation_mode,
        "sigma": _floats(rep.sigma),
        "F": _floats(rep.F),
        "cov_x": _floats(rep.cov_x),
        "C": _floats(rep.C),
        "cov_residual": _floats(rep.cov_residual),
        "cov_estimate": _floats(rep.cov_estimate),
    }


def solution_to_dict(sol: PoseSolution, rep: UncertaintyReport | None = None) -> dict:
    doc = {
        "attitude": _floats(sol.A_hat),
        "position": _floats(sol.p_hat),
        "u": _floats(sol.u_hat),
        "v": _floats(sol.v_hat),
        "d_hat": _floats(sol.d_hat),
        "lambda": _floats(sol.lam),
        "iterations": int(sol.iterations),
        "restarts": int(sol.restarts),
        "final_cost": float(sol.final_cost),
        "converged": bool(sol.converged),
        "constraint_violation": sol.constraint_violation(),
    }
    if rep is not None:
        doc["uncertainty"] = uncertainty_to_dict(rep)
    return doc
