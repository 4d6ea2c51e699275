import json

import numpy as np
import pytest
from scipy.linalg import subspace_angles

from tr2r.io import dump_json
from tr2r.monitoring import (
    ChartSuite,
    EwmaChartState,
    calibrate_ewma_limit,
    control_residual,
    ewma_covariance_factor,
    ewma_run_lengths,
    fit_charts,
    monitor_step,
    monitor_stream,
    mpca_fit,
    t2_limit,
)
from tr2r.seeding import derive_rng
from tr2r.simulation import make_sin_basis
from tr2r.tensor import multi_mode_product

SHAPE = (6, 5, 2)
P_MON = (2, 3, 1)


def gaussian_residuals(rng, n, scale=1.0):
    """Structured in-control residuals: a random Tucker core plus small isotropic noise."""
    U = [np.linalg.qr(np.random.default_rng(k).standard_normal((q, p)))[0] for k, (q, p) in enumerate(zip(SHAPE, P_MON))]
    core_sd = np.array([3.0, 2.5, 2.0, 1.5, 1.2, 1.0]).reshape(P_MON, order="F")
    cores = core_sd * rng.standard_normal((n,) + P_MON)
    return scale * (multi_mode_product(cores, U, first_mode=1) + 0.3 * rng.standard_normal((n,) + SHAPE))


@pytest.fixture(scope="module")
def suite():
    return fit_charts(gaussian_residuals(derive_rng(0, "phase1"), 20_000), P_MON)


class TestControlResidual:
    def _factors(self):
        return [make_sin_basis(6, 2), make_sin_basis(5, 3), np.eye(2)[:, :1]]

    def test_in_span_and_orthogonal(self, rng):
        F = self._factors()
        inside = multi_mode_product(rng.standard_normal((2, 3, 1)), F)
        np.testing.assert_allclose(control_residual(inside, F), 0.0, atol=1e-12)
        Y = rng.standard_normal(SHAPE)
        outside = control_residual(Y, F)
        np.testing.assert_allclose(control_residual(outside, F), outside, atol=1e-12)

    def test_projector_properties(self, rng):
        F = self._factors()
        Y = rng.standard_normal(SHAPE)
        R = control_residual(Y, F)
        assert abs(np.sum(R * (Y - R))) <= 1e-9
        # idempotent up to rounding of the near-zero in-span component
        np.testing.assert_allclose(control_residual(R, F), R, rtol=0, atol=1e-14)
        np.testing.assert_allclose(np.sum(Y**2), np.sum((Y - R) ** 2) + np.sum(R**2), rtol=1e-8)

    def test_stacked_matches_single(self, rng):
        F = self._factors()
        Ys = rng.standard_normal((3,) + SHAPE)
        np.testing.assert_allclose(control_residual(Ys, F, first_mode=1)[1], control_residual(Ys[1], F), atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            control_residual(np.zeros((4, 5, 2)), self._factors())


class TestMpca:
    def test_exact_tucker(self, rng):
        U = [np.linalg.qr(rng.standard_normal((q, p)))[0] for q, p in zip(SHAPE, P_MON)]
        R = multi_mode_product(rng.standard_normal((40,) + P_MON), U, first_mode=1)
        cores, factors, errors = mpca_fit(R, P_MON)
        assert errors[-1] < 1e-8 * np.sum(R**2)
        np.testing.assert_allclose(multi_mode_product(cores, factors, first_mode=1), R, atol=1e-8)
        for V, Ut in zip(factors, U):
            np.testing.assert_allclose(V.T @ V, np.eye(V.shape[1]), atol=1e-10)
            assert np.max(subspace_angles(V, Ut)) < 1e-6

    def test_full_rank_is_lossless(self, rng):
        R = rng.standard_normal((60,) + SHAPE)
        _, _, errors = mpca_fit(R, SHAPE)
        assert errors[-1] < 1e-8 * np.sum(R**2)

    def test_rank_one_leading_direction(self, rng):
        a, b, c = (v / np.linalg.norm(v) for v in (rng.standard_normal(q) for q in SHAPE))
        s = 3.0 * rng.standard_normal(200)
        R = s[:, None, None, None] * np.einsum("i,j,k->ijk", a, b, c) + 0.05 * rng.standard_normal((200,) + SHAPE)
        _, factors, errors = mpca_fit(R, (1, 1, 1))
        dense = np.linalg.svd(R.transpose(1, 0, 2, 3).reshape(SHAPE[0], -1), full_matrices=False)[0][:, :1]
        assert np.rad2deg(subspace_angles(factors[0], dense)[0]) < 5.0
        assert np.rad2deg(subspace_angles(factors[0], a[:, None])[0]) < 5.0
        assert np.all(np.diff(errors) <= 1e-9 * errors[0])

    def test_too_few_samples(self, rng):
        with pytest.raises(ValueError):
            mpca_fit(rng.standard_normal((5,) + SHAPE), P_MON)


class TestCharts:
    def test_suite_invariants(self, suite):
        assert suite.W == 6 and suite.P_mon == P_MON
        np.testing.assert_allclose(suite.cov, suite.cov.T)
        assert np.linalg.eigvalsh(suite.cov).min() > 1e-12 * np.trace(suite.cov) / 6
        assert suite.q_g > 0 and suite.q_h > 0 and 0 < suite.omega <= 1
        assert suite.t2_limit == pytest.approx(t2_limit(0.025, 6, suite.n))

    def test_false_alarm_rates(self, suite):
        alarms = monitor_stream(suite, gaussian_residuals(derive_rng(0, "phase2"), 10_000))
        assert abs(alarms.t2_alarm.mean() - 0.025) <= 0.01
        assert abs(alarms.q_alarm.mean() - 0.025) <= 0.01

    def test_ewma_arl(self, suite):
        lengths = ewma_run_lengths(suite, gaussian_residuals(derive_rng(0, "arl"), 100_000))
        assert len(lengths) > 300
        assert 180 <= lengths.mean() <= 220

    def test_calibrated_limit_on_whitened_model(self):
        L = calibrate_ewma_limit(6, 0.2, 200.0)
        assert L == calibrate_ewma_limit(6, 0.2, 200.0)
        assert L > 0

    def test_ewma_covariance_limit(self, suite):
        np.testing.assert_allclose(suite.ewma_cov(500), suite.asymptotic_ewma_cov(), rtol=1e-6)
        assert ewma_covariance_factor(0.2, 1) == pytest.approx(0.2**2)

    def test_mean_pattern_is_quiet(self, suite):
        core = suite.mean.reshape(P_MON, order="F")
        row, _ = monitor_step(suite, multi_mode_product(core, suite.factors))
        t2, q = row[0], row[1]
        assert t2 < 1e-12 and q < 1e-12
        assert not row[3] and not row[4] and not row[5]

    def test_variance_shift_caught_by_q(self, suite):
        hits = 0
        for rep in range(100):
            rng = derive_rng(rep, "var_shift")
            stream = np.concatenate([gaussian_residuals(rng, 20), gaussian_residuals(rng, 20, scale=2.0)])
            first = monitor_stream(suite, stream).first_alarm("q", 21)
            hits += first is not None and first <= 23
        assert hits >= 90

    def test_step_matches_stream(self, suite):
        R = gaussian_residuals(derive_rng(3, "stream"), 30)
        batch = monitor_stream(suite, R)
        state = EwmaChartState()
        for t in range(30):
            row, state = monitor_step(suite, R[t], state)
            np.testing.assert_allclose(row[:3], [batch.t2[t], batch.q[t], batch.tz2[t]], rtol=1e-9)
            assert row[3:] == (batch.t2_alarm[t], batch.q_alarm[t], batch.ewma_alarm[t])

    def test_first_alarm_and_rows(self, suite):
        R = gaussian_residuals(derive_rng(4, "stream"), 10)
        R[6:] += 50.0
        rec = monitor_stream(suite, R)
        assert rec.first_alarm("q", 7) == 7
        assert rec.rows()[6][0] == 7 and len(rec.rows()[0]) == len(rec.header)

    def test_json_round_trip(self, suite, tmp_path):
        dump_json(tmp_path / "charts.json", suite.to_dict())
        back = ChartSuite.from_dict(json.loads((tmp_path / "charts.json").read_text()))
        R = gaussian_residuals(derive_rng(5, "stream"), 5)
        a, b = monitor_stream(suite, R), monitor_stream(back, R)
        np.testing.assert_allclose(a.t2, b.t2, rtol=1e-9)
        np.testing.assert_allclose(a.tz2, b.tz2, rtol=1e-9)

    def test_degenerate_covariance(self, rng):
        R = np.repeat(gaussian_residuals(rng, 1), 50, axis=0)
        with pytest.raises(ValueError, match="degenerate"):
            fit_charts(R, P_MON)

    @pytest.mark.parametrize("kw", [dict(alpha=0.0), dict(holdout=1.0), dict(omega=0.0)])
    def test_argument_validation(self, rng, kw):
        with pytest.raises(ValueError):
            fit_charts(gaussian_residuals(rng, 100), P_MON, **kw)

    def test_non_finite(self, suite):
        bad = np.zeros(SHAPE)
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            monitor_step(suite, bad)
