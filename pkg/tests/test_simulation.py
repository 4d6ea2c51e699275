from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tr2r.experiments import Scenario, fit_scenario, make_controller
from tr2r.seeding import derive_rng
from tr2r.simulation import (
    ControllerError,
    DisturbanceSpec,
    DisturbanceState,
    NoiseFieldSpec,
    NoiseState,
    PlantConfig,
    generate_noise_field,
    generate_offline,
    generate_parameter,
    make_sin_basis,
    no_control,
    plant_output,
    simulate_closed_loop,
    step_disturbance,
)
from tr2r.tensor import unfold


class TestSinBasis:
    def test_square_is_identity(self):
        np.testing.assert_array_equal(make_sin_basis(2, 2), np.eye(2))

    def test_gram_and_template(self):
        for Q, P in [(20, 2), (30, 3), (200, 3)]:
            V = make_sin_basis(Q, P)
            np.testing.assert_allclose(V.T @ V, np.eye(P), atol=1e-10)
            j = np.arange(1, Q + 1) / Q
            raw = np.column_stack([np.sin(np.pi * k * j) for k in range(1, P + 1)])
            # same column space, same leading (Gram-Schmidt) direction
            np.testing.assert_allclose(V @ (V.T @ raw), raw, atol=1e-10)
            np.testing.assert_allclose(V[:, 0], raw[:, 0] / np.linalg.norm(raw[:, 0]), atol=1e-12)

    def test_too_many_columns(self):
        with pytest.raises(ValueError):
            make_sin_basis(3, 4)


class TestParameter:
    @pytest.mark.parametrize("rows", [0, 1, 3, 6])
    def test_row_sparsity(self, rows, rng):
        model = generate_parameter(PlantConfig(sparsity_rows=rows), rng)
        norms = np.linalg.norm(model.core_matrix, axis=1)
        assert model.core_matrix.shape == (6, 12)
        assert np.count_nonzero(norms) == rows

    def test_zero_rows_gives_pure_disturbance(self, rng):
        cfg = PlantConfig(sparsity_rows=0, n_cycles=1, runs_per_cycle=5)
        model, data = generate_offline(cfg, DisturbanceSpec.iid(1.0), rng)
        assert not np.any(model.B)
        np.testing.assert_array_equal(data.Y, data.E)

    def test_dense_default_when_none(self, rng):
        model = generate_parameter(PlantConfig(sparsity_rows=None), rng)
        assert np.all(np.linalg.norm(model.core_matrix, axis=1) > 0)

    @pytest.mark.parametrize("kw", [dict(P=(21, 3, 2)), dict(m=0), dict(noise_sd=0.0), dict(sparsity_rows=7)])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            PlantConfig(**kw)


class TestOffline:
    def test_sizes(self, rng):
        _, data = generate_offline(PlantConfig(), DisturbanceSpec.iid(), rng)
        assert data.n == 300
        assert data.Y.shape == (300, 20, 30, 2)

    def test_process_equation_exact(self, rng):
        cfg = PlantConfig(n_cycles=2, runs_per_cycle=4)
        model, data = generate_offline(cfg, DisturbanceSpec.scaled_identity(20.0, 6), rng)
        for t in range(data.n):
            resid = data.Y[t] - np.tensordot(data.U[t] + data.D[t], model.B, axes=(0, 0)) - data.E[t]
            # batched and single-run contractions may round differently
            assert np.linalg.norm(resid) <= 1e-13 * np.linalg.norm(data.Y[t])

    def test_noiseless_uncorrelated_is_linear_in_u(self, rng):
        cfg = PlantConfig(noise_sd=1e-300, n_cycles=1, runs_per_cycle=5)
        model, data = generate_offline(cfg, DisturbanceSpec.scaled_identity(0.0, 6, sd=0.0), rng)
        np.testing.assert_allclose(data.Y, plant_output(model.B, data.U, 0.0), atol=1e-12)

    def test_deterministic(self):
        cfg = PlantConfig(n_cycles=2, runs_per_cycle=3)
        a = generate_offline(cfg, DisturbanceSpec.ima(0.5), derive_rng(3, "x"))
        b = generate_offline(cfg, DisturbanceSpec.ima(0.5), derive_rng(3, "x"))
        np.testing.assert_array_equal(a[1].Y, b[1].Y)
        np.testing.assert_array_equal(a[0].B, b[0].B)


class _FixedRng:
    """Feeds a prescribed innovation sequence to step_disturbance."""

    def __init__(self, values):
        self.values = list(values)

    def standard_normal(self, size):
        return np.full(size, self.values.pop(0))


class TestDisturbance:
    def test_ima_hand_recursion(self):
        spec = DisturbanceSpec.ima(0.5, sd=1.0)
        state = DisturbanceState.zeros(1)
        rng = _FixedRng([1.0, -2.0, 0.5])
        out = []
        for _ in range(3):
            d, state = step_disturbance(spec, state, np.zeros(1), rng)
            out.append(d[0])
        # d1 = 1; d2 = 1 - 2 - 0.5*1 = -1.5; d3 = -1.5 + 0.5 + 0.5*2 * 1 = 0.0
        np.testing.assert_allclose(out, [1.0, -1.5, 0.0])

    def test_arima_hand_recursion(self):
        spec = DisturbanceSpec.arima(0.75, 0.3, sd=1.0)
        state = DisturbanceState.zeros(1)
        rng = _FixedRng([1.0, 1.0, -1.0])
        out = []
        for _ in range(3):
            d, state = step_disturbance(spec, state, np.zeros(1), rng)
            out.append(d[0])
        # diffs: 1; 0.75 + 1 - 0.3 = 1.45; 0.75*1.45 - 1 - 0.3 = -0.2125
        np.testing.assert_allclose(out, [1.0, 2.45, 2.2375])

    def test_ima_zero_sd_constant(self, rng):
        spec = DisturbanceSpec.ima(0.0, sd=0.0)
        state = DisturbanceState(np.full(3, 2.0), np.zeros(3), np.zeros(3))
        for _ in range(5):
            d, state = step_disturbance(spec, state, np.zeros(3), rng)
            np.testing.assert_array_equal(d, 2.0)

    def test_linear(self, rng):
        A = np.diag([1.0, -2.0])
        d, _ = step_disturbance(DisturbanceSpec.linear(A, sd=0.0), DisturbanceState.zeros(2), np.array([3.0, 1.0]), rng)
        np.testing.assert_array_equal(d, [3.0, -2.0])

    @pytest.mark.parametrize("phi,theta", [(0.0, 0.3), (0.0, 0.7), (0.25, 0.5), (0.75, 0.3), (-0.5, 0.2)])
    def test_difference_variance(self, phi, theta):
        spec = DisturbanceSpec.arima(phi, theta, sd=0.7) if phi else DisturbanceSpec.ima(theta, sd=0.7)
        rng = derive_rng(11, "variance", str(phi), str(theta))
        state = DisturbanceState.zeros(4)
        diffs = []
        for _ in range(10_000):
            d_prev = state.d_prev
            d, state = step_disturbance(spec, state, np.zeros(4), rng)
            diffs.append(d - d_prev)
        diffs = np.array(diffs)[100:]
        expected = 0.49 * (1 + theta**2 - 2 * phi * theta) / (1 - phi**2)
        assert np.var(diffs) == pytest.approx(expected, rel=0.05)

    @pytest.mark.parametrize("kw", [dict(kind="ima", theta=1.0), dict(kind="arima", phi=-1.2), dict(kind="linear"),
                                    dict(kind="bogus")])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            DisturbanceSpec(**kw)


class TestNoiseField:
    def _draw(self, spec, T, shape=(10, 10, 2), seed=0):
        rng = derive_rng(seed, "noise", spec.case)
        state = NoiseState()
        out = []
        for t in range(1, T + 1):
            E, state = generate_noise_field(spec, t, state, rng, shape)
            out.append(E)
        return np.array(out)

    def test_ic_mean(self):
        E = self._draw(NoiseFieldSpec("ic", sigma0=1.0), 50)
        assert E.size >= 10_000
        assert abs(E.mean()) < 0.05
        assert E.std() == pytest.approx(1.0, rel=0.03)

    def test_mean_shift(self):
        E = self._draw(NoiseFieldSpec("mean_shift", sigma0=1.0, t_c=21), 40)
        assert abs(E[:20].mean()) < 0.05
        assert E[20:].mean() == pytest.approx(3.0, abs=0.05)

    def test_var_shift(self):
        E = self._draw(NoiseFieldSpec("var_shift", sigma0=1.0, t_c=21), 60)
        assert E[20:].var() == pytest.approx(4.0, rel=0.05)
        assert E[:20].var() == pytest.approx(1.0, rel=0.05)

    def test_drift_starts_from_last_ic_value(self):
        spec = NoiseFieldSpec("ima", sigma0=1.0, t_c=5, theta=0.5)
        rng = derive_rng(0, "drift")
        state = NoiseState()
        fields = []
        for t in range(1, 8):
            E, state = generate_noise_field(spec, t, state, rng, (3,))
            fields.append(E)
        # reconstruct the innovations: pre-change fields are the innovations themselves
        eps_prev = fields[3]
        eps5 = fields[4] - fields[3] + 0.5 * eps_prev
        eps6 = fields[5] - fields[4] + 0.5 * eps5
        rng2 = derive_rng(0, "drift")
        z = np.array([rng2.standard_normal(3) for _ in range(7)])
        np.testing.assert_allclose([eps5, eps6], z[4:6], atol=1e-12)

    def test_drift_elements_wander(self):
        E = self._draw(NoiseFieldSpec("arima", sigma0=1.0, t_c=21, theta=0.3, phi=0.5), 120)
        assert E[100:].var(axis=0).mean() > 3.0 * E[:20].var()

    def test_t_starts_at_one(self, rng):
        with pytest.raises(ValueError):
            generate_noise_field(NoiseFieldSpec(), 0, NoiseState(), rng, (2,))

    @pytest.mark.parametrize("kw", [dict(sigma1=0.0), dict(t_c=0), dict(case="nope"), dict(sigma0=-1.0)])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            NoiseFieldSpec(**kw)


class _BadController:
    def start(self):
        return np.zeros(6), None

    def step(self, state, Y):
        return np.full(6, np.nan), None


class TestClosedLoop:
    def test_zero_everything(self, rng):
        model = generate_parameter(PlantConfig(), rng)
        rec = simulate_closed_loop(model, no_control(6), DisturbanceSpec.iid(0.0),
                                   NoiseFieldSpec(sigma0=1e-300), 20, rng)
        assert rec.mae == pytest.approx(0.0, abs=1e-250)

    def test_record_consistency(self, rng):
        model = generate_parameter(PlantConfig(), rng)
        rec = simulate_closed_loop(model, no_control(6), DisturbanceSpec.ima(0.5, 0.1),
                                   NoiseFieldSpec(sigma0=0.01), 15, rng)
        assert len(rec.u) == len(rec.d) == len(rec.Y) == len(rec.E) == rec.n_runs == 15
        for t in range(15):
            assert np.linalg.norm(rec.Y[t] - plant_output(model.B, rec.u[t] + rec.d[t], rec.E[t])) == 0.0
        assert rec.mae == pytest.approx(np.mean([np.linalg.norm(y) for y in rec.Y]), rel=1e-14)
        np.testing.assert_allclose(rec.running_mae()[-1], rec.mae)

    def test_nocontrol_baseline_magnitude(self):
        sc = replace(Scenario(), controller="none")
        maes = []
        for rep in range(5):
            model, _, est = fit_scenario(sc, derive_rng(rep, "offline"))
            rec = simulate_closed_loop(model, make_controller(sc, est), sc.online, sc.noise, sc.T,
                                       derive_rng(rep, "online"), store=False)
            maes.append(rec.mae)
        assert 0.15 <= np.mean(maes) <= 0.45

    def test_negative_correlation_small_lambda_diverges(self):
        sc = replace(Scenario(), a=-0.9, lam=0.3)
        model, _, est = fit_scenario(sc, derive_rng(0, "offline"))
        rec = simulate_closed_loop(model, make_controller(sc, est), sc.online, sc.noise, sc.T,
                                   derive_rng(0, "online"), store=False)
        assert rec.diverged
        assert rec.mae == float("inf")
        assert rec.n_runs < sc.T

    def test_invalid_recipe_raises(self, rng):
        model = generate_parameter(PlantConfig(), rng)
        with pytest.raises(ControllerError):
            simulate_closed_loop(model, _BadController(), DisturbanceSpec.iid(), NoiseFieldSpec(), 5, rng)

    def test_bit_identical(self):
        model = generate_parameter(PlantConfig(), derive_rng(1, "m"))
        runs = [simulate_closed_loop(model, no_control(6), DisturbanceSpec.arima(0.25, 0.5), NoiseFieldSpec(),
                                     10, derive_rng(1, "o")) for _ in range(2)]
        np.testing.assert_array_equal(runs[0].Y, runs[1].Y)
        np.testing.assert_array_equal(runs[0].d, runs[1].d)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 6), st.integers(0, 2**32))
def test_row_sparsity_property(rows, seed):
    model = generate_parameter(PlantConfig(sparsity_rows=rows), np.random.default_rng(seed))
    assert np.count_nonzero(np.linalg.norm(unfold(model.core, 0), axis=1)) == rows
