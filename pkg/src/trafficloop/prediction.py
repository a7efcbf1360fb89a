"""Per-approach ARX flow forecasting.

The model for one approach is

    flow(t) = alpha + sum_k beta[k] * flow(t - 1 - k) + sum_j gamma[j] * z_j(t)

fitted by (optionally ridge-penalised) least squares. Forecasts are clamped
at zero and multi-step forecasts feed each prediction back as the newest lag.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_scalar
from sklearn.utils.validation import check_array, check_is_fitted

from .core import ExogenousRecord, FlowObservation

logger = logging.getLogger(__name__)

SINGULAR_FALLBACK_RIDGE = 1e-8


class InsufficientHistoryError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionModel:
    approach_id: str
    alpha: float
    beta: tuple[float, ...]
    gamma: tuple[float, ...] = ()
    exog_names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        object.__setattr__(self, "gamma", tuple(float(g) for g in self.gamma))
        object.__setattr__(self, "exog_names", tuple(self.exog_names))
        if len(self.beta) < 1:
            raise ValueError("an ARX model needs at least one lag (p >= 1)")
        coefs = (self.alpha, *self.beta, *self.gamma)
        if not all(math.isfinite(c) for c in coefs):
            raise ValueError(f"non-finite coefficient in model for {self.approach_id}")
        if self.exog_names and len(self.exog_names) != len(self.gamma):
            raise ValueError("exog_names must have one entry per gamma coefficient")

    @property
    def p(self) -> int:
        return len(self.beta)

    @property
    def q(self) -> int:
        return len(self.gamma)

    def coef_vector(self) -> np.ndarray:
        return np.array([self.alpha, *self.beta, *self.gamma])

    def to_dict(self) -> dict:
        return {
            "approach_id": self.approach_id,
            "p": self.p,
            "q": self.q,
            "alpha": self.alpha,
            "beta": list(self.beta),
            "gamma": list(self.gamma),
            "exog_names": list(self.exog_names),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PredictionModel":
        model = cls(
            approach_id=str(doc["approach_id"]),
            alpha=float(doc["alpha"]),
            beta=doc["beta"],
            gamma=doc.get("gamma", ()),
            exog_names=doc.get("exog_names", ()),
        )
        for key, actual in (("p", model.p), ("q", model.q)):
            if key in doc and int(doc[key]) != actual:
                raise ValueError(f"model {model.approach_id}: {key}={doc[key]} but coefficients give {actual}")
        return model


@dataclass(frozen=True)
class FitReport:
    residual_rmse: float
    n_samples: int
    condition_warning: bool = False


def dump_models(models: Sequence[PredictionModel], reports: Sequence[FitReport] | None = None) -> str:
    doc = {"models": [m.to_dict() for m in models]}
    if reports is not None:
        doc["fit_reports"] = [
            {"approach_id": m.approach_id, "residual_rmse": r.residual_rmse,
             "n_samples": r.n_samples, "condition_warning": r.condition_warning}
            for m, r in zip(models, reports)
        ]
    return json.dumps(doc, indent=2, sort_keys=True)


def load_models(text: str) -> list[PredictionModel]:
    doc = json.loads(text)
    items = doc["models"] if isinstance(doc, dict) and "models" in doc else doc
    if isinstance(items, dict):
        items = [items]
    return [PredictionModel.from_dict(d) for d in items]


def _design(flows: np.ndarray, exog: np.ndarray, p: int):
    n = len(flows)
    rows = n - p
    cols = [np.ones(rows)]
    for k in range(1, p + 1):
        cols.append(flows[p - k:n - k])
    for j in range(exog.shape[1]):
        cols.append(exog[p:, j])
    return np.column_stack(cols), flows[p:]


def _solve(design: np.ndarray, target: np.ndarray, ridge: float):
    k = design.shape[1]
    if ridge > 0:
        a = np.vstack([design, math.sqrt(ridge) * np.eye(k)])
        b = np.concatenate([target, np.zeros(k)])
    else:
        a, b = design, target
    coef, _, rank, _ = np.linalg.lstsq(a, b, rcond=None)
    return coef, rank


def fit_arrays(flows, exog=None, p: int = 1, ridge: float = 0.0, approach_id: str = "a1",
               exog_names: Sequence[str] = ()):
    """Fit on aligned arrays: ``flows`` shape (n,), ``exog`` shape (n, q) or None."""
    flows = check_array(flows, ensure_2d=False, dtype=float)
    if flows.ndim != 1:
        raise ValueError("flows must be one-dimensional")
    if exog is None:
        exog = np.zeros((len(flows), 0))
    else:
        exog = check_array(exog, dtype=float, ensure_min_features=0)
    if exog.shape[0] != len(flows):
        raise ValueError(f"exog has {exog.shape[0]} rows for {len(flows)} flows")
    check_scalar(p, "p", int, min_val=1)
    check_scalar(ridge, "ridge", (int, float), min_val=0.0)
    q = exog.shape[1]
    if len(flows) < p + q + 5:
        raise InsufficientHistoryError(
            f"{approach_id}: need at least p + q + 5 = {p + q + 5} observations, got {len(flows)}"
        )

    design, target = _design(flows, exog, p)
    coef, rank = _solve(design, target, ridge)
    warned = False
    if ridge == 0 and rank < design.shape[1]:
        warned = True
        logger.warning("%s: singular ARX design (rank %d < %d); refitting with ridge=%g",
                       approach_id, rank, design.shape[1], SINGULAR_FALLBACK_RIDGE)
        coef, _ = _solve(design, target, SINGULAR_FALLBACK_RIDGE)
    resid = target - design @ coef
    rmse = float(np.sqrt(np.mean(resid ** 2)))
    model = PredictionModel(
        approach_id=approach_id,
        alpha=float(coef[0]),
        beta=coef[1:p + 1],
        gamma=coef[p + 1:],
        exog_names=tuple(exog_names) if len(exog_names) == q else (),
    )
    return model, FitReport(residual_rmse=rmse, n_samples=len(target), condition_warning=warned)


def fit(history: Sequence[FlowObservation], exog: Sequence[ExogenousRecord], p: int, q: int,
        ridge: float = 0.0, exog_names: Sequence[str] = ()):
    """Fit one approach's model from time-ordered observations.

    ``exog`` must contain a record for every ``t`` in ``history`` with exactly
    ``q`` values.
    """
    if not history:
        raise InsufficientHistoryError("empty history")
    ids = {obs.approach_id for obs in history}
    if len(ids) != 1:
        raise ValueError(f"history mixes approaches: {sorted(ids)}")
    ts = [obs.t for obs in history]
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise ValueError("history must be strictly time-ordered")
    by_t = {rec.t: rec.values for rec in exog}
    rows = []
    for t in ts:
        if t not in by_t:
            raise ValueError(f"exogenous series has no record for t={t}")
        if len(by_t[t]) != q:
            raise ValueError(f"exogenous record t={t} has {len(by_t[t])} values, expected q={q}")
        rows.append(by_t[t])
    flows = np.array([obs.flow_veh_per_interval for obs in history], dtype=float)
    z = np.array(rows, dtype=float).reshape(len(history), q)
    return fit_arrays(flows, z if q else None, p=p, ridge=ridge,
                      approach_id=history[0].approach_id, exog_names=exog_names)


def forecast_one(model: PredictionModel, recent: Sequence[float], z_now: Sequence[float] = ()) -> float:
    """One-step forecast; ``recent`` holds the last p flows, most recent first."""
    if len(recent) != model.p:
        raise ValueError(f"{model.approach_id}: need {model.p} recent flows, got {len(recent)}")
    if len(z_now) != model.q:
        raise ValueError(f"{model.approach_id}: need {model.q} exogenous values, got {len(z_now)}")
    value = model.alpha
    for b, lam in zip(model.beta, recent):
        value += b * lam
    for g, z in zip(model.gamma, z_now):
        value += g * z
    return max(0.0, value)


def forecast_horizon(model: PredictionModel, recent: Sequence[float],
                     exog_future: Sequence[Sequence[float]], steps: int) -> list[float]:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if len(exog_future) != steps:
        raise ValueError(f"exog_future has {len(exog_future)} rows for {steps} steps")
    lags = list(recent)
    out = []
    for z in exog_future:
        y = forecast_one(model, lags, z)
        out.append(y)
        lags = [y] + lags[:-1]
    return out


class ARXForecaster(BaseEstimator):
    """Estimator wrapper around the ARX fit for one approach.

    Parameters
    ----------
    p : int
        Number of flow lags.
    ridge : float
        L2 penalty on (alpha, beta, gamma).
    approach_id : str
        Label carried into the fitted :class:`PredictionModel`.

    Examples
    --------
    >>> import numpy as np
    >>> y = [50.0]
    >>> for _ in range(30):
    ...     y.append(10 + 0.5 * y[-1])
    >>> est = ARXForecaster(p=1).fit(np.array(y))
    >>> round(est.intercept_, 6), np.round(est.coef_lags_, 6).tolist()
    (10.0, [0.5])
    """

    def __init__(self, p=1, ridge=0.0, approach_id="a1"):
        self.p = p
        self.ridge = ridge
        self.approach_id = approach_id

    def fit(self, y, X=None):
        model, report = fit_arrays(y, X, p=self.p, ridge=self.ridge, approach_id=self.approach_id)
        self.model_ = model
        self.report_ = report
        self.intercept_ = model.alpha
        self.coef_lags_ = np.array(model.beta)
        self.coef_exog_ = np.array(model.gamma)
        self.n_features_in_ = model.q
        self._last_ = np.asarray(y, dtype=float)[::-1][: self.p].tolist()
        return self

    def predict(self, X=None, steps=None, recent=None):
        """Recursive forecast continuing the training series (or ``recent``).

        ``X`` holds the future exogenous rows, one per step.
        """
        check_is_fitted(self, "model_")
        if X is None:
            if self.n_features_in_:
                raise ValueError("model was fitted with exogenous inputs; pass X")
            steps = 1 if steps is None else steps
            X = np.zeros((steps, 0))
        else:
            X = check_array(X, dtype=float, ensure_min_features=0)
            if X.shape[1] != self.n_features_in_:
                raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        lags = self._last_ if recent is None else list(recent)
        return np.array(forecast_horizon(self.model_, lags, X.tolist(), len(X)))
