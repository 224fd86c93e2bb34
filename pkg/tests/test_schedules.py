import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentflow.schedules import (
    ScheduleSpec,
    inference_schedule,
    logsnr,
    mu_for_length,
    sample_timestep_disc,
    sample_timestep_train,
    shift_timestep,
    t_from_logsnr,
)

# frozen against high-precision evaluation of the shift / sigmoid formulas
SHIFT_HALF_MU115 = 0.7595109169491111
SHIFT_02_MU05 = 0.2918751327405783
T0_GRID = 0.9979746796109501
T8_GRID = 0.1192029220221176


class TestShift:
    def test_identity_at_mu_zero(self):
        ts = np.linspace(1e-6, 1 - 1e-6, 1001)
        assert np.max(np.abs(shift_timestep(ts, 0.0) - ts)) <= 1e-12

    def test_endpoints_exact(self):
        assert shift_timestep(0.0, 1.15) == 0.0
        assert shift_timestep(1.0, 0.7) == 1.0

    def test_known_values(self):
        assert abs(shift_timestep(0.5, 1.15) - SHIFT_HALF_MU115) < 1e-12
        assert abs(shift_timestep(0.2, 0.5) - SHIFT_02_MU05) < 1e-12
        assert abs(shift_timestep(0.5, 0.0) - 0.5) < 1e-15

    @given(st.floats(min_value=0.5, max_value=1.15))
    @settings(max_examples=50, deadline=None)
    def test_strictly_increasing_and_above_identity(self, mu):
        ts = np.linspace(0.001, 0.999, 1000)
        out = shift_timestep(ts, mu)
        assert np.all(np.diff(out) > 0)
        assert np.all(out >= ts)  # mu > 0 pushes toward higher noise


class TestMuForLength:
    def test_extremes(self):
        spec = ScheduleSpec()
        assert mu_for_length(1000, 10, 1000, spec) == pytest.approx(1.15)
        assert mu_for_length(10, 10, 1000, spec) == pytest.approx(0.5)

    def test_midpoint(self):
        spec = ScheduleSpec()
        assert mu_for_length(505, 10, 1000, spec) == pytest.approx(0.825)

    def test_clamped_outside(self):
        spec = ScheduleSpec()
        assert mu_for_length(5, 10, 1000, spec) == pytest.approx(0.5)
        assert mu_for_length(5000, 10, 1000, spec) == pytest.approx(1.15)

    def test_degenerate_range(self):
        spec = ScheduleSpec()
        assert mu_for_length(10, 10, 10, spec) == spec.mu_max


class TestTrainTimestep:
    def test_in_unit_interval(self):
        rng = np.random.default_rng(0)
        ts = sample_timestep_train(rng, ScheduleSpec(), size=100_000)
        assert ts.min() >= 0.0
        assert ts.max() <= 1.0

    def test_ks_against_rejection_oracle(self):
        # independent Monte-Carlo oracle: rejection-resampled logit-normal
        spec = ScheduleSpec()
        rng = np.random.default_rng(7)
        n = 100_000
        draws = []
        while len(draws) < n:
            t = 1.0 / (1.0 + np.exp(-rng.standard_normal(n)))
            draws.extend(t[t >= spec.truncation].tolist())
        oracle = (np.array(draws[:n]) - spec.truncation) / (1.0 - spec.truncation)
        ours = sample_timestep_train(np.random.default_rng(8), spec, size=n)
        a, b = np.sort(oracle), np.sort(ours)
        grid = np.concatenate([a, b])
        cdf_a = np.searchsorted(a, grid, side="right") / n
        cdf_b = np.searchsorted(b, grid, side="right") / n
        assert np.abs(cdf_a - cdf_b).max() < 0.01

    def test_seeded_determinism(self):
        s1 = sample_timestep_train(np.random.default_rng(5), ScheduleSpec(), size=64)
        s2 = sample_timestep_train(np.random.default_rng(5), ScheduleSpec(), size=64)
        np.testing.assert_array_equal(s1, s2)


class TestDiscTimestep:
    def test_median_near_half(self):
        ts = sample_timestep_disc(np.random.default_rng(3), size=100_000)
        assert abs(np.median(ts) - 0.5) < 0.01

    def test_open_interval(self):
        ts = sample_timestep_disc(np.random.default_rng(4), size=100_000)
        assert np.all((ts > 0) & (ts < 1))

    def test_seeded_determinism(self):
        a = sample_timestep_disc(np.random.default_rng(11), size=16)
        b = sample_timestep_disc(np.random.default_rng(11), size=16)
        np.testing.assert_array_equal(a, b)


class TestInferenceSchedule:
    def test_grid_endpoints(self):
        ts = inference_schedule(ScheduleSpec())
        assert len(ts) == 9
        assert abs(ts[0] - T0_GRID) < 1e-12
        assert abs(ts[-1] - T8_GRID) < 1e-12
        # the endpoint values match the coarser published roundings
        assert abs(ts[0] - 0.997976) < 1e-5
        assert abs(ts[-1] - 0.119203) < 1e-5

    def test_strictly_decreasing(self):
        ts = inference_schedule(ScheduleSpec(steps=17))
        assert np.all(np.diff(ts) < 0)

    def test_zero_logsnr_maps_to_half(self):
        assert t_from_logsnr(0.0) == pytest.approx(0.5, abs=1e-15)

    def test_logsnr_inverse_property(self):
        ts = np.linspace(1e-4, 1 - 1e-4, 1000)
        assert np.max(np.abs(t_from_logsnr(logsnr(ts)) - ts)) < 1e-12
        lams = np.linspace(-12, 12, 1000)
        assert np.max(np.abs(logsnr(t_from_logsnr(lams)) - lams)) < 1e-10


class TestSpecValidation:
    def test_bad_truncation(self):
        with pytest.raises(ValueError):
            ScheduleSpec(truncation=0.0)

    def test_bad_lambda_order(self):
        with pytest.raises(ValueError):
            ScheduleSpec(lambda_min=3.0, lambda_max=1.0)

    def test_bad_steps(self):
        with pytest.raises(ValueError):
            ScheduleSpec(steps=0)
