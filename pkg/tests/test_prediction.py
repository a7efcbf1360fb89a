import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from trafficloop.core import ExogenousRecord, FlowObservation
from trafficloop.prediction import (
    ARXForecaster,
    InsufficientHistoryError,
    PredictionModel,
    dump_models,
    fit,
    fit_arrays,
    forecast_horizon,
    forecast_one,
    load_models,
)


def generate(alpha, beta, gamma, z, n, y0=None, noise=0.0, rng=None):
    """Simulate the recursion directly; the synthetic oracle for every recovery test."""
    p = len(beta)
    y = list(y0 if y0 is not None else [alpha] * p)
    for t in range(p, n):
        v = alpha + sum(b * y[t - k - 1] for k, b in enumerate(beta))
        if len(gamma):
            v += float(np.dot(gamma, z[t]))
        if noise:
            v += rng.normal(0, noise)
        y.append(v)
    return np.array(y)


def observations(flows, aid="a1"):
    return [FlowObservation(t=300.0 * i, approach_id=aid, flow_veh_per_interval=float(f))
            for i, f in enumerate(flows)]


class TestFit:
    def test_recovers_first_order(self):
        y = generate(10, [0.5], [], None, 40, y0=[50.0])
        model, report = fit(observations(y), [ExogenousRecord(300.0 * i, ()) for i in range(40)], 1, 0)
        assert model.alpha == pytest.approx(10, abs=1e-6)
        assert model.beta[0] == pytest.approx(0.5, abs=1e-6)
        assert report.residual_rmse < 1e-8
        assert report.n_samples == 39

    def test_zero_series_forecasts_zero(self):
        model, _ = fit_arrays(np.zeros(20), p=1)
        assert forecast_one(model, [0.0]) == pytest.approx(0.0, abs=1e-9)
        assert forecast_horizon(model, [0.0], [()] * 4, 4) == pytest.approx([0.0] * 4, abs=1e-9)

    def test_recovers_event_gamma(self):
        rng = np.random.default_rng(3)
        z = (rng.random((80, 1)) < 0.3).astype(float)
        y = generate(100, [0.3], [40.0], z, 80)
        model, _ = fit_arrays(y, z, p=1)
        assert model.gamma[0] == pytest.approx(40, abs=1e-6)

    def test_insufficient_history(self):
        with pytest.raises(InsufficientHistoryError):
            fit_arrays(np.arange(7.0), np.zeros((7, 2)), p=1)  # needs 1 + 2 + 5

    def test_misaligned_exog(self):
        obs = observations(np.arange(10.0))
        recs = [ExogenousRecord(300.0 * i, (0.0,)) for i in range(9)]
        with pytest.raises(ValueError, match="no record"):
            fit(obs, recs, 1, 1)
        recs = [ExogenousRecord(300.0 * i, (0.0, 1.0)) for i in range(10)]
        with pytest.raises(ValueError, match="expected q=1"):
            fit(obs, recs, 1, 1)

    def test_unordered_history(self):
        obs = observations(np.arange(10.0))
        obs[3], obs[4] = obs[4], obs[3]
        with pytest.raises(ValueError, match="time-ordered"):
            fit(obs, [ExogenousRecord(o.t, ()) for o in obs], 1, 0)

    def test_singular_design_falls_back_to_ridge(self):
        y = generate(10, [0.5], [], None, 30, y0=[50.0])
        z = np.ones((30, 1))  # collinear with the intercept
        model, report = fit_arrays(y, z, p=1)
        assert report.condition_warning
        assert np.all(np.isfinite(model.coef_vector()))
        assert forecast_one(model, [y[-1]], [1.0]) == pytest.approx(10 + 0.5 * y[-1], abs=1e-4)

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        y = 200 + rng.normal(0, 5, 100)
        z = rng.normal(size=(100, 2))
        a, _ = fit_arrays(y, z, p=2, ridge=0.1)
        b, _ = fit_arrays(y.copy(), z.copy(), p=2, ridge=0.1)
        assert a.coef_vector().tobytes() == b.coef_vector().tobytes()

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 31), st.floats(0, 50), st.floats(0, 50))
    def test_ridge_monotone(self, seed, r1, dr):
        rng = np.random.default_rng(seed)
        y = rng.uniform(0, 300, 40)
        z = rng.normal(size=(40, 1))
        small, _ = fit_arrays(y, z, p=2, ridge=r1)
        big, _ = fit_arrays(y, z, p=2, ridge=r1 + dr)
        assert np.linalg.norm(big.coef_vector()) <= np.linalg.norm(small.coef_vector()) * (1 + 1e-9) + 1e-9


class TestForecast:
    def test_degenerate_returns_alpha(self):
        m = PredictionModel("a1", 42.0, [0.0], [0.0])
        assert forecast_one(m, [123.0], [1.0]) == 42.0

    def test_clamp(self):
        m = PredictionModel("a1", -5.0, [0.0])
        assert forecast_one(m, [10.0]) == 0.0

    def test_dimension_mismatch(self):
        m = PredictionModel("a1", 0.0, [0.5, 0.1], [1.0])
        with pytest.raises(ValueError):
            forecast_one(m, [1.0], [0.0])
        with pytest.raises(ValueError):
            forecast_one(m, [1.0, 2.0], [])

    def test_identity_recursion(self):
        m = PredictionModel("a1", 0.0, [1.0])
        assert forecast_horizon(m, [100.0], [()] * 5, 5) == [100.0] * 5

    def test_hand_iteration(self):
        m = PredictionModel("a1", 10.0, [0.5])
        assert forecast_horizon(m, [100.0], [()] * 3, 3) == pytest.approx([60, 40, 30])

    def test_one_step_horizon_is_forecast_one(self):
        m = PredictionModel("a1", 3.0, [0.2, 0.1], [2.0])
        assert forecast_horizon(m, [10.0, 20.0], [[1.5]], 1) == [forecast_one(m, [10.0, 20.0], [1.5])]

    def test_case_study_model(self, rush_hour):
        names = rush_hour.exogenous.names
        z = rush_hour.exogenous.at(300.0)  # 17:05
        assert dict(zip(names, z)) == {"rain_mm_per_h": 5.0, "match_active": 1.0}
        m = rush_hour.models[0]
        assert forecast_one(m, [300.0], z) == pytest.approx(340.0, abs=1e-9)
        before = rush_hour.exogenous.at(0.0)
        assert forecast_one(m, [300.0], before) == pytest.approx(300.0, abs=1e-9)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-500, 500), st.lists(st.floats(-2, 2), min_size=1, max_size=3),
           st.lists(st.floats(0, 1000), min_size=3, max_size=3))
    def test_never_negative(self, alpha, beta, recent):
        m = PredictionModel("a1", alpha, beta)
        out = forecast_horizon(m, recent[: len(beta)], [()] * 4, 4)
        assert all(v >= 0 for v in out)


class TestSerialisation:
    def test_roundtrip(self):
        m = PredictionModel("a2", 1.5, [0.25, 0.125], [3.0], exog_names=("rain",))
        text = dump_models([m])
        (back,) = load_models(text)
        assert back == m
        assert set(__import__("json").loads(text)["models"][0]) == {
            "approach_id", "p", "q", "alpha", "beta", "gamma", "exog_names"}

    def test_inconsistent_p_rejected(self):
        doc = PredictionModel("a1", 1.0, [0.5]).to_dict()
        doc["p"] = 2
        with pytest.raises(ValueError):
            PredictionModel.from_dict(doc)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            PredictionModel("a1", float("nan"), [0.5])


class TestEstimator:
    def test_params_and_clone(self):
        est = ARXForecaster(p=2, ridge=0.5)
        assert est.get_params() == {"p": 2, "ridge": 0.5, "approach_id": "a1"}
        assert clone(est).get_params() == est.get_params()

    def test_fit_predict_with_exog(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(60, 1))
        y = generate(50, [0.4], [7.0], z, 60)
        est = ARXForecaster(p=1).fit(y, z)
        assert est.coef_exog_[0] == pytest.approx(7.0, abs=1e-6)
        nxt = est.predict(np.array([[1.0], [0.0]]))
        assert nxt[0] == pytest.approx(50 + 0.4 * y[-1] + 7.0, abs=1e-6)
        assert nxt[1] == pytest.approx(50 + 0.4 * nxt[0], abs=1e-6)

    def test_predict_requires_exog_when_fitted_with_it(self):
        est = ARXForecaster().fit(np.arange(20.0), np.ones((20, 1)) * np.arange(20.0)[:, None] % 3)
        with pytest.raises(ValueError):
            est.predict()

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            ARXForecaster().predict()
