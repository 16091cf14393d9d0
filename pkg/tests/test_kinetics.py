import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from petpost.kinetics import (
    AlignmentError,
    DEFAULT_FRAME_BLOCKS,
    FrameSchedule,
    ForwardModel,
    InvalidGridError,
    KineticParams,
    KineticsError,
    Measurement,
    NoiseModel,
    ReferenceTac,
    add_noise,
    default_reference_tac,
    exp_convolution,
    integrate_frames,
    load_reference_tac,
    make_grid,
    save_reference_tac,
    srtm_ode_oracle,
    srtm_target_tac,
)

positive = st.floats(min_value=1e-3, max_value=5.0, allow_nan=False)


class TestSchedule:
    def test_default_has_54_frames_over_two_hours(self, schedule):
        assert schedule.n_frames == 54
        assert schedule.total == 7200.0

    def test_boundaries_are_cumulative(self, schedule):
        b = schedule.boundaries
        assert b[0] == 0.0
        np.testing.assert_allclose(np.diff(b), schedule.durations)
        assert b[-1] == schedule.total

    def test_blocks_expand_in_order(self):
        s = FrameSchedule.from_blocks(DEFAULT_FRAME_BLOCKS)
        assert list(s.durations[:6]) == [10.0] * 6
        assert list(s.durations[-18:]) == [300.0] * 18

    @pytest.mark.parametrize("bad", [[], [10.0, 0.0], [-5.0]])
    def test_rejects_non_positive_durations(self, bad):
        with pytest.raises(KineticsError):
            FrameSchedule(np.array(bad))

    def test_noise_weights(self, schedule):
        np.testing.assert_allclose(schedule.noise_weights() ** 2, schedule.durations / 7200.0)


class TestKineticParams:
    @pytest.mark.parametrize("triple", [(0.0, 1e-3, 1.0), (1.0, -1e-3, 1.0), (1.0, 1e-3, 0.0)])
    def test_requires_positive_values(self, triple):
        with pytest.raises(KineticsError):
            KineticParams(*triple)

    def test_array_round_trip(self):
        p = KineticParams(1.1, 6e-4, 0.7)
        assert KineticParams.from_array(p.as_array()) == p


class TestReferenceTac:
    def test_starts_at_zero(self, reference):
        assert reference.values[0] == 0.0

    def test_non_negative(self, reference):
        assert np.all(reference.values >= 0)

    def test_early_peak_then_decay(self, reference, schedule):
        peak = np.argmax(reference.values)
        assert reference.grid[peak] < 0.1 * schedule.total
        assert reference.values[-1] < reference.values[peak]

    @pytest.mark.parametrize("grid", [np.array([]), np.array([0.0]), np.array([0.0, 1.0, 3.0]),
                                      np.array([2.0, 1.0, 0.0])])
    def test_invalid_grid(self, grid):
        with pytest.raises(InvalidGridError):
            default_reference_tac(grid)

    def test_make_grid_rejects_non_divisor(self):
        with pytest.raises(InvalidGridError):
            make_grid(10.0, 0.3)

    def test_file_round_trip(self, tmp_path):
        grid = make_grid(100.0, 0.5)
        ref = default_reference_tac(grid)
        path = tmp_path / "ref.csv"
        save_reference_tac(ref, path)
        assert path.read_text().splitlines()[0] == "time_s,value"
        loaded = load_reference_tac(path, step=0.5)
        np.testing.assert_array_equal(loaded.values, ref.values)

    def test_file_is_resampled_to_step(self, tmp_path):
        path = tmp_path / "coarse.csv"
        path.write_text("time_s,value\n0,0\n10,1\n20,1\n")
        ref = load_reference_tac(path, step=0.1)
        assert ref.grid[-1] == pytest.approx(20.0)
        assert ref.values[50] == pytest.approx(0.5)

    def test_file_with_unsorted_times(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("time_s,value\n0,0\n10,1\n5,1\n")
        with pytest.raises(InvalidGridError):
            load_reference_tac(path)

    def test_negative_values_rejected(self):
        with pytest.raises(KineticsError):
            ReferenceTac(np.array([0.0, 1.0]), np.array([0.0, -1.0]))


class TestSrtm:
    def test_identity_collapse(self, reference):
        """dvr = r1 = 1 zeroes the convolution coefficient."""
        for k2 in (1e-4, 6e-4, 0.3):
            ct = srtm_target_tac(KineticParams(1.0, k2, 1.0), reference)
            np.testing.assert_allclose(ct, reference.values, rtol=0, atol=1e-15)

    def test_vanishing_rate(self, reference):
        ct = srtm_target_tac(KineticParams(1.3, 1e-12, 0.8), reference)
        np.testing.assert_allclose(ct, 0.8 * reference.values, rtol=1e-9, atol=1e-18)

    def test_reference_case_matches_ode(self, reference):
        p = KineticParams(1.0, 0.0006, 0.74)
        analytic = srtm_target_tac(p, reference)
        ode = srtm_ode_oracle(p, reference)
        peak = np.max(np.abs(ode))
        assert np.max(np.abs(analytic - ode)) / peak < 1e-4

    def test_ode_oracle_identity_and_zero(self, reference):
        np.testing.assert_allclose(srtm_ode_oracle((1.0, 6e-4, 1.0), reference), reference.values,
                                   atol=1e-12 * reference.values.max())
        assert np.all(srtm_ode_oracle((1.0, 0.0, 0.0), reference) == 0.0)

    def test_affine_in_r1(self, reference):
        """At fixed k2 and DVR the curve is affine in R1: three points are collinear."""
        curves = [srtm_target_tac(KineticParams(1.4, 0.02, r1), reference) for r1 in (0.5, 0.9, 1.3)]
        np.testing.assert_allclose(curves[1], 0.5 * (curves[0] + curves[2]), rtol=1e-10, atol=1e-18)

    def test_k2_unit_is_per_minute(self):
        """A step reference with r1 = 0 gives k2 (1 - e^{-lam t}) / lam, lam in s^-1."""
        grid = make_grid(600.0, 0.1)
        ref = ReferenceTac(grid, np.ones_like(grid))
        k2_min, dvr = 0.6, 2.0
        lam = k2_min / 60.0 / dvr
        ct = srtm_target_tac(KineticParams(dvr, k2_min, 1e-300), ref)
        expected = (k2_min / 60.0) * (-np.expm1(-lam * grid)) / lam
        np.testing.assert_allclose(ct, expected, rtol=1e-10, atol=1e-14)

    @settings(max_examples=25, deadline=None)
    @given(lam=st.floats(min_value=0.0, max_value=5.0), h=st.sampled_from([0.05, 0.1, 1.0]))
    def test_convolution_exact_for_linear_reference(self, lam, h):
        """For C_R(t) = t the convolution is (lam t - 1 + e^{-lam t}) / lam^2."""
        grid = make_grid(20.0, h)
        ref = ReferenceTac(grid, grid.copy())
        got = exp_convolution(ref, lam)
        if lam < 1e-8:
            expected = grid**2 / 2
        else:
            expected = (lam * grid + np.expm1(-lam * grid)) / lam**2
        np.testing.assert_allclose(got, expected, rtol=1e-9, atol=1e-12)


class TestIntegrateFrames:
    def test_constant_curve(self):
        grid = make_grid(10.0, 0.1)
        m = integrate_frames(np.full(grid.size, 3.0), grid, FrameSchedule(np.array([10.0])))
        assert m.y[0] == pytest.approx(30.0)

    def test_zero_curve(self, fine_grid, schedule):
        assert np.all(integrate_frames(np.zeros_like(fine_grid), fine_grid, schedule).y == 0)

    def test_linear_curve(self):
        grid = make_grid(10.0, 0.1)
        m = integrate_frames(grid, grid, FrameSchedule(np.array([10.0])))
        assert m.y[0] == pytest.approx(50.0, rel=1e-12)

    def test_additive_under_frame_split(self, reference):
        whole = integrate_frames(reference.values, reference.grid, FrameSchedule(np.array([600.0, 6600.0])))
        split = integrate_frames(reference.values, reference.grid,
                                 FrameSchedule(np.array([250.0, 350.0, 6600.0])))
        assert split.y[0] + split.y[1] == pytest.approx(whole.y[0], rel=1e-13)

    def test_off_grid_boundary(self):
        grid = make_grid(10.0, 1.0)
        with pytest.raises(AlignmentError):
            integrate_frames(np.ones_like(grid), grid, FrameSchedule(np.array([2.5, 7.5])))

    def test_schedule_longer_than_curve(self):
        grid = make_grid(10.0, 1.0)
        with pytest.raises(AlignmentError):
            integrate_frames(np.ones_like(grid), grid, FrameSchedule(np.array([20.0])))

    def test_forward_model_matches_pipeline(self, forward, reference, schedule):
        p = KineticParams(1.2, 0.003, 0.8)
        direct = integrate_frames(srtm_target_tac(p, reference), reference.grid, schedule).y
        np.testing.assert_allclose(forward(p), direct, rtol=1e-11)

    def test_measurement_length_checked(self, schedule):
        with pytest.raises(KineticsError):
            Measurement(np.zeros(53), schedule)


class TestNoise:
    def test_zero_sigma_is_identity(self, forward, rng):
        clean = forward.measurement(KineticParams(1.0, 6e-4, 0.74))
        noisy, s = add_noise(clean, NoiseModel(), rng, noise_sigma=0.0)
        assert s == 0.0
        np.testing.assert_array_equal(noisy.y, clean.y)

    def test_per_frame_std(self, schedule):
        """Law of large numbers: empirical std per frame is s sqrt(dt/T) within 2%."""
        s = 2.5e-4
        rng = np.random.default_rng(1)
        eps = rng.standard_normal((100_000, schedule.n_frames))
        # same arithmetic as add_noise, vectorized over draws
        clean = Measurement(np.zeros(schedule.n_frames), schedule)
        one, _ = add_noise(clean, NoiseModel(), np.random.default_rng(7), noise_sigma=s)
        assert np.all(np.isfinite(one.y))
        draws = s * schedule.noise_weights() * eps
        emp = draws.std(axis=0)
        np.testing.assert_allclose(emp, s * schedule.noise_weights(), rtol=0.02)

    def test_per_frame_variance_chi2(self, schedule):
        """add_noise itself, 10^5 calls per frame statistic, chi-square at 1%."""
        s = 1e-4
        rng = np.random.default_rng(11)
        clean = Measurement(np.zeros(schedule.n_frames), schedule)
        n = 100_000
        draws = np.array([add_noise(clean, NoiseModel(), rng, noise_sigma=s)[0].y for _ in range(n)])
        var = s**2 * schedule.noise_weights() ** 2
        stat = (draws**2 / var).sum(axis=0)
        lo, hi = stats.chi2.ppf([0.005, 0.995], df=n)
        assert np.all((stat > lo) & (stat < hi))

    def test_sigma_mean(self):
        rng = np.random.default_rng(3)
        sig = np.array([NoiseModel().draw_sigma(rng) for _ in range(100_000)])
        assert sig.mean() == pytest.approx(1e-4, rel=0.03)
        assert np.all(sig >= 0)

    def test_log_prior_rejects_non_positive(self):
        assert NoiseModel().log_prior(0.0) == -np.inf


@pytest.mark.parametrize("dvr,k2,r1", [(1.0, 6e-4, 0.74), (0.5, 0.1, 1.5), (3.0, 0.02, 0.2)])
def test_forward_model_is_deterministic(forward, dvr, k2, r1):
    a = forward.frames(dvr, k2, r1)
    b = forward.frames(dvr, k2, r1)
    assert np.array_equal(a, b)
    assert isinstance(forward, ForwardModel)
