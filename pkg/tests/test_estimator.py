import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats
from scipy.linalg import expm

from spinfilter import kernels
from spinfilter.errors import DimensionMismatch, DomainError, EstimationFailed
from spinfilter.estimator import (
    EstimateResult, SamplerConfig, _argmin_first, backaction_free_sums, estimate_backaction_free,
    estimate_separable, heisenberg_sigma_z, margin_is_noise, optimum_bound, qv_cost, sample_cap, sample_sphere,
    separable_fidelity_curve, sigma_z_series,
)
from spinfilter.projection import FilterParams, filter_step
from spinfilter.sde import IntegratorConfig, stream, wiener_path
from spinfilter.spin import bloch_from_angles
from spinfilter.trajectory import STREAM_FLAT, ControlWaveform, MeasurementRecord, sample_control, simulate_truth, truth_direction

SX = np.array([[0, 1], [1, 0]], complex)
SY = np.array([[0, -1j], [1j, 0]])
SZ = np.diag([1.0, -1.0]).astype(complex)


def nn_angles(pts):
    c = np.clip(pts @ pts.T, -1, 1)
    np.fill_diagonal(c, -2)
    return np.arccos(np.clip(c.max(axis=1), -1, 1))


class TestSampling:
    def test_sphere_radius_and_isotropy(self):
        pts = sample_sphere(3, 100_000, 0.75)
        np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 0.75, rtol=1e-14)
        assert np.linalg.norm(pts.mean(axis=0)) < 0.02 * 0.75

    def test_sphere_nearest_neighbour_gap(self):
        means, maxes = [], []
        for seed in range(20):
            a = np.degrees(nn_angles(sample_sphere(seed, 250)))
            means.append(a.mean())
            maxes.append(a.max())
        assert 5.0 < np.mean(means) < 7.5
        assert 12.0 < np.median(maxes) < 25.0

    @pytest.mark.parametrize("theta_max", [0.1, np.pi / 4, 2.0])
    def test_cap_bound(self, theta_max):
        axis = np.array([0.3, -0.4, 0.8]) / np.linalg.norm([0.3, -0.4, 0.8])
        pts = sample_cap(7, 5000, axis, theta_max)
        np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-14)
        assert np.all(pts @ axis >= np.cos(theta_max) - 1e-12)
        # uniform over the cap means cos(angle) is uniform on [cos theta_max, 1]
        u = (pts @ axis - np.cos(theta_max)) / (1 - np.cos(theta_max))
        assert stats.kstest(u, "uniform").pvalue > 1e-3

    def test_full_cap_is_sphere(self):
        a = sample_cap(11, 4000, np.array([0.0, 1.0, 0.0]), np.pi)
        b = sample_sphere(12, 4000)
        for k in range(3):
            assert stats.ks_2samp(a[:, k], b[:, k]).pvalue > 1e-3

    def test_cap_neighbour_fidelity(self):
        fids = []
        for seed in range(10):
            pts = sample_cap(seed, 250, np.array([0.0, 0.0, 1.0]), np.pi / 4)
            fids.append(np.mean(0.5 * (1 + np.cos(nn_angles(pts)))))
        assert 0.9990 < np.mean(fids) < 0.9997

    def test_validation(self):
        with pytest.raises(DomainError):
            sample_sphere(0, 10, 1.5)
        for kw in ({"r_mixed": 1.0}, {"theta_max": 0.0}, {"theta_max": 4.0}, {"m": 0}):
            with pytest.raises(DomainError):
                SamplerConfig(**kw)

    def test_deterministic(self):
        np.testing.assert_array_equal(sample_sphere(5, 10), sample_sphere(5, 10))
        assert not np.array_equal(sample_sphere(5, 10), sample_sphere(6, 10))


class TestQV:
    def test_zero(self):
        rec = MeasurementRecord(1e-3, 1.0, 1, 0, np.zeros(100))
        assert qv_cost(rec, np.zeros(100)) == 0.0

    def test_true_series_gives_wiener_qv(self):
        dt, steps, kappa = 1e-6, 200_000, 1.3
        t = np.arange(steps) * dt
        jz = 3.0 * np.cos(40 * t)
        w = wiener_path(4, steps, dt).increments
        rec = MeasurementRecord(dt, kappa, 6, 4, 2 * np.sqrt(kappa) * jz * dt + w)
        assert qv_cost(rec, jz) == pytest.approx(steps * dt, rel=0.01)

    def test_offset_inflation(self):
        dt, steps, kappa, c = 1e-5, 20_000, 1.0, 5.0
        jz = np.zeros(steps)
        w = wiener_path(9, steps, dt).increments
        rec = MeasurementRecord(dt, kappa, 4, 0, w)
        extra = qv_cost(rec, jz + c) - qv_cost(rec, jz)
        # exact: (2 sqrt(k) c dt)^2 N - 4 sqrt(k) c dt sum(w)
        expect = (2 * np.sqrt(kappa) * c) ** 2 * dt * steps * dt
        assert extra == pytest.approx(expect - 4 * np.sqrt(kappa) * c * dt * w.sum(), rel=1e-9)
        assert abs(extra - expect) < 4 * np.sqrt(kappa) * c * dt * 5 * np.sqrt(steps * dt)

    def test_length_mismatch(self):
        rec = MeasurementRecord(1e-3, 1.0, 1, 0, np.zeros(10))
        with pytest.raises(DimensionMismatch):
            qv_cost(rec, np.zeros(9))

    @given(st.integers(0, 10**6), st.integers(1, 49))
    def test_non_anticipative(self, seed, k):
        rng = np.random.default_rng(seed)
        dy = rng.normal(size=50)
        x0 = sample_sphere(seed, 4, 0.75)
        a = kernels.filter_batch(dy, None, 0, x0, 3, 1.0, 1e-3, checkpoints=[k])
        dy2 = dy.copy()
        dy2[k:] = rng.permutation(dy2[k:]) + 1.0
        b = kernels.filter_batch(dy2, None, 0, x0, 3, 1.0, 1e-3, checkpoints=[k])
        np.testing.assert_array_equal(a["qv"], b["qv"])

    def test_margin_rule(self):
        assert margin_is_noise(3.9e-6, 1e-6)
        assert not margin_is_noise(4.1e-6, 1e-6)

    def test_argmin_first_index(self):
        assert _argmin_first(np.array([2.0, 1.0, 1.0, np.nan])) == 1
        with pytest.raises(EstimationFailed):
            _argmin_first(np.array([np.nan, np.inf]))


class TestOptimumBound:
    def test_values(self):
        assert optimum_bound(1) == pytest.approx(2 / 3)
        assert optimum_bound(25) == pytest.approx(26 / 27)
        assert optimum_bound(25) == pytest.approx(0.962963, abs=1e-6)
        b = [optimum_bound(n) for n in range(1, 200)]
        assert np.all(np.diff(b) > 0)
        np.testing.assert_allclose(b, 1 - 1 / (np.arange(1, 200) + 2), rtol=1e-15)

    def test_invalid(self):
        with pytest.raises(DomainError):
            optimum_bound(0)


class TestHeisenberg:
    def test_x_gate(self):
        ctl = ControlWaveform(5e-3, [[1.0, 0.0, 0.0]])
        np.testing.assert_allclose(heisenberg_sigma_z(ctl, [5e-3])[0], [0, 1, 0], atol=1e-12)

    def test_zero_field(self):
        c = heisenberg_sigma_z(ControlWaveform.none(), np.linspace(0, 1, 5))
        np.testing.assert_array_equal(c, np.tile([0.0, 0.0, 1.0], (5, 1)))

    def test_unit_norm_and_matrix_oracle(self):
        ctl = sample_control(3, 6, 5e-3)
        grid = np.linspace(0, 0.035, 71)
        c = heisenberg_sigma_z(ctl, grid)
        np.testing.assert_allclose(np.linalg.norm(c, axis=1), 1.0, atol=1e-12)
        # sigma_z(t) = U^dag sigma_z U with U the time-ordered product of gate propagators
        for t, ct in zip(grid[::7], c[::7]):
            U = np.eye(2, dtype=complex)
            for g, f in enumerate(ctl.fields):
                s = np.clip(t - g * ctl.tau, 0, ctl.tau)
                U = expm(-0.5j * s * (f[0] * SX + f[1] * SY + f[2] * SZ)) @ U
            sz_t = U.conj().T @ SZ @ U
            coeff = [0.5 * np.trace(sz_t @ p).real for p in (SX, SY, SZ)]
            np.testing.assert_allclose(ct, coeff, atol=1e-12)

    def test_series_matches_grid(self):
        ctl = sample_control(5, 4, 1e-3)
        dt = 1e-5
        steps = 450
        np.testing.assert_allclose(sigma_z_series(ctl, dt, steps), heisenberg_sigma_z(ctl, np.arange(steps) * dt),
                                   atol=1e-12)


def noise_free_pure_record(x0, n, kappa, dt, steps, control):
    """Record whose innovation vanishes for the pure filter started at x0."""
    params = FilterParams(n, kappa)
    x = np.asarray(x0, float)
    spg = control.steps_per_gate(dt) if control.gate_count else 0
    dy = np.empty(steps)
    for i in range(steps):
        f = control.fields[i // spg] if spg and i // spg < control.gate_count else np.zeros(3)
        dy[i] = n * np.sqrt(kappa) * x[2] * dt
        x, _, _ = filter_step(x, dy[i], dt, f, params, pure=True)
    return MeasurementRecord(dt, kappa, n, 0, dy)


class TestEstimators:
    def test_noise_free_truth_candidate_separable(self):
        ctl = sample_control(1, 4, 1e-3)
        truth = bloch_from_angles(1.1, 2.3)
        rec = noise_free_pure_record(truth, 5, 1.0, 1e-5, 400, ctl)
        cands = np.vstack([sample_cap(2, 30, truth, 0.3), truth])
        out = kernels.filter_batch(rec.dy, ctl.fields, ctl.steps_per_gate(rec.dt), cands, 5, 1.0, rec.dt, pure=True)
        assert _argmin_first(out["qv"][:, -1]) == 30
        assert out["qv"][30, -1] < 1e-25

    def test_noise_free_truth_candidate_backaction_free(self):
        ctl = sample_control(1, 4, 1e-3)
        dt, steps, n, kappa = 1e-5, 400, 7, 1.0
        cands = sample_sphere(stream(0, STREAM_FLAT), 1700)
        truth = cands[123]
        c = sigma_z_series(ctl, dt, steps)
        rec = MeasurementRecord(dt, kappa, n, 0, n * np.sqrt(kappa) * dt * (c @ truth))
        res = estimate_backaction_free(rec, ctl, SamplerConfig(), seed=0, truth=truth)
        np.testing.assert_array_equal(res.chosen, truth)
        assert res.fidelity == pytest.approx(1.0)
        assert abs(res.qv_min) < 1e-12 * np.dot(rec.dy, rec.dy)

    @given(st.integers(0, 10**6))
    def test_quadratic_form_matches_direct_sum(self, seed):
        rng = np.random.default_rng(seed)
        ctl = sample_control(seed, 3, 1e-3)
        dt, n, kappa = 1e-5, 4, 1.7
        rec = MeasurementRecord(dt, kappa, n, 0, rng.normal(0, np.sqrt(dt), 300))
        x = sample_sphere(seed, 5)
        sums = backaction_free_sums(rec, ctl, [100, 300])
        c = sigma_z_series(ctl, dt, 300)
        for i in range(5):
            jz = 0.5 * n * (c @ x[i])
            direct = [qv_cost(rec.prefix(k), jz[:k]) for k in (100, 300)]
            np.testing.assert_allclose(sums.qv(x[i])[0], direct, rtol=1e-12)

    def test_argmin_invariant_under_affine_rescaling(self):
        rng = np.random.default_rng(0)
        q = rng.normal(size=250)
        assert _argmin_first(q) == _argmin_first(3.5 * q + 17.0)

    def test_separable_small_run(self):
        ctl = sample_control(11, 10, 1e-3)
        th, ph = truth_direction(0, 0)
        truth = bloch_from_angles(th, ph)
        rec, _ = simulate_truth(th, ph, 10, ctl, 1.0, 0.02, seed=3, log_every=0)
        res = estimate_separable(rec, ctl, SamplerConfig(m=60), seed=4, truth=truth)
        assert np.linalg.norm(res.chosen) == pytest.approx(1.0)
        assert res.qv_min == res.qv_values.min()
        assert res.qv_values[res.diagnostics["stage2_index"]] == res.qv_min
        assert 0 <= res.fidelity <= 1
        again = estimate_separable(rec, ctl, SamplerConfig(m=60), seed=4, truth=truth)
        np.testing.assert_array_equal(res.chosen, again.chosen)
        data = json.loads(res.to_json(10, 4))
        assert set(data) == {"chosen", "fidelity", "qv_min", "stage1_axis", "n", "seed"}
        curve = separable_fidelity_curve(rec, ctl, truth, [5000, 10000, 20000], SamplerConfig(m=60), seed=4)
        assert np.all((curve >= 0) & (curve <= 1))
        if not res.diagnostics["full_sphere_fallback"]:
            assert curve[-1] == pytest.approx(res.fidelity)

    def test_all_candidates_diverge(self):
        rec = MeasurementRecord(1e-3, 1.0, 2, 0, np.full(5, np.nan))
        with pytest.raises(EstimationFailed):
            estimate_separable(rec, ControlWaveform.none(), SamplerConfig(m=5))

    def test_result_json_without_truth(self):
        r = EstimateResult(np.array([0.0, 0.0, 1.0]), np.array([1.0]), 1.0)
        assert json.loads(r.to_json(3, 1))["fidelity"] is None


@pytest.mark.slow
def test_weak_backaction_regime_estimators_agree():
    # zeta = n kappa t_f = 0.1: backaction is negligible, so both cost models coincide
    n, kappa, t_f, dt = 25, 0.02, 0.2, 1e-5
    ctl = sample_control(11, 40, 5e-3)
    diffs = []
    for t in range(24):
        th, ph = truth_direction(5, t)
        truth = bloch_from_angles(th, ph)
        rec, _ = simulate_truth(th, ph, n, ctl, kappa, t_f, seed=500 + t, log_every=0,
                                config=IntegratorConfig(dt=dt))
        a = estimate_separable(rec, ctl, seed=t, truth=truth).fidelity
        b = estimate_backaction_free(rec, ctl, seed=t, truth=truth).fidelity
        diffs.append(a - b)
    diffs = np.array(diffs)
    se = diffs.std(ddof=1) / np.sqrt(len(diffs))
    assert abs(diffs.mean()) < 3 * se + 0.01


@pytest.mark.slow
def test_separable_fidelity_rises_with_record_length():
    n, nu = 25, 40
    ctl = sample_control(11, 40, 5e-3)
    cps = np.arange(40_000, 200_001, 40_000)
    curves = []
    for t in range(nu):
        th, ph = truth_direction(7, t)
        rec, _ = simulate_truth(th, ph, n, ctl, 1.0, 0.2, seed=2000 + t, log_every=0)
        curves.append(separable_fidelity_curve(rec, ctl, bloch_from_angles(th, ph), cps, seed=t))
    curves = np.array(curves)
    mean = curves.mean(axis=0)
    se = curves.std(axis=0, ddof=1) / np.sqrt(nu)
    for k in range(len(cps) - 1):
        assert mean[k + 1] > mean[k] - 2 * np.hypot(se[k], se[k + 1])
