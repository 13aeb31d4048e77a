"""Fitted functional principal-component model and its file format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from robfpca.smoothing import basis_from_knots

FORMAT_VERSION = 1


@dataclass
class FpcaModel:
    """Center, smooth principal directions and case scores.

    Fitted values are ``mu + scores @ directions.T``. When the directions
    come from a spline basis, ``alpha`` holds their coefficients and
    ``directions == B @ alpha.T`` where ``B`` is the basis evaluated on
    ``grid`` (rebuilt from ``knots`` and ``degree``).
    """

    grid: np.ndarray
    mu: np.ndarray
    directions: np.ndarray
    scores: np.ndarray
    estimator: str
    alpha: Optional[np.ndarray] = None
    knots: Optional[np.ndarray] = None
    degree: int = 3
    sigma_stages: list = field(default_factory=list)
    variance_trace: list = field(default_factory=list)
    explained: float = float("nan")
    case_ids: tuple = ()
    flags: dict = field(default_factory=dict)

    @property
    def q(self):
        return self.directions.shape[1]

    @property
    def n(self):
        return self.scores.shape[0]

    def basis(self):
        if self.knots is None:
            return None
        return basis_from_knots(self.grid, self.knots, self.degree)

    def predict(self, case_scores):
        """Curve values on the grid for one q-vector (or rows of an n x q array) of scores."""
        case_scores = np.asarray(case_scores, dtype=float)
        # elementwise accumulation: one case and all cases agree bit for bit
        out = np.broadcast_to(self.mu, case_scores.shape[:-1] + self.mu.shape).copy()
        for k in range(self.directions.shape[1]):
            out += case_scores[..., k, None] * self.directions[:, k]
        return out

    def fitted_values(self):
        return self.predict(self.scores)

    def case_mae(self, data):
        """Per-case mean absolute error over observed cells."""
        resid = np.abs(np.where(data.mask, data.values - self.fitted_values(), 0.0))
        return resid.sum(axis=1) / data.mask.sum(axis=1)


def explained_proportion(model: FpcaModel):
    """``1 - V_q / V_0`` from the model's unexplained-variance trace, clamped to [0, 1]."""
    trace = model.variance_trace
    if not trace:
        return float(np.clip(model.explained, 0.0, 1.0))
    v0, vq = trace[0], trace[-1]
    if v0 <= 0:
        raise ValueError("V_0 is zero: explained proportion undefined")
    return float(np.clip(1.0 - vq / v0, 0.0, 1.0))


def _arr(a):
    return None if a is None else np.asarray(a, dtype=float).tolist()


def model_to_dict(model: FpcaModel):
    return {
        "format_version": FORMAT_VERSION,
        "estimator": model.estimator,
        "grid": _arr(model.grid),
        "mu": _arr(model.mu),
        "knots": _arr(model.knots),
        "degree": int(model.degree),
        "alpha": _arr(model.alpha),
        "directions": _arr(model.directions),
        "scores": _arr(model.scores),
        "sigma_stages": [_arr(s) for s in model.sigma_stages],
        "variance_trace": [float(v) for v in model.variance_trace],
        "explained": float(model.explained),
        "case_ids": list(model.case_ids),
        "flags": model.flags,
    }


def model_from_dict(d):
    if d.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {d.get('format_version')!r}")

    def arr(key):
        v = d.get(key)
        return None if v is None else np.array(v, dtype=float)

    p = len(d["grid"])
    q = len(d["directions"][0]) if d["directions"] else 0
    return FpcaModel(
        grid=arr("grid"),
        mu=arr("mu"),
        directions=arr("directions").reshape(p, q),
        scores=arr("scores").reshape(-1, q),
        estimator=d["estimator"],
        alpha=None if d.get("alpha") is None else arr("alpha").reshape(q, -1),
        knots=arr("knots"),
        degree=int(d.get("degree", 3)),
        sigma_stages=[np.array(s, dtype=float) for s in d.get("sigma_stages", [])],
        variance_trace=list(d.get("variance_trace", [])),
        explained=float(d.get("explained", float("nan"))),
        case_ids=tuple(d.get("case_ids", ())),
        flags=d.get("flags", {}),
    )


def save_model(model: FpcaModel, path):
    """JSON serialization; floats are written with full round-trip precision."""
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1), encoding="utf-8")


def load_model(path):
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
