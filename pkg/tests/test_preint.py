import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_samples, random_state
from oracles import (high_rate_preintegration, imu_jacobian_case, loglog_slope, repropagation_gaps)
from robvio import preint
from robvio.geometry import quat_to_rot
from robvio.preint import ImuNoiseParams, ImuSample
from robvio.sim import generate

G = np.array([0.0, 0.0, -9.81])


def constant_samples(a, w, duration=1.0, rate=200.0):
    n = int(round(duration * rate)) + 1
    return [ImuSample(i / rate, np.asarray(a, float), np.asarray(w, float)) for i in range(n)]


def test_null_motion():
    pre = preint.integrate(constant_samples([0, 0, 0], [0, 0, 0]), np.zeros(3), np.zeros(3))
    np.testing.assert_array_equal(pre.alpha, 0.0)
    np.testing.assert_array_equal(pre.beta, 0.0)
    np.testing.assert_array_equal(pre.gamma, [1, 0, 0, 0])


def test_constant_acceleration():
    pre = preint.integrate(constant_samples([1, 0, 0], [0, 0, 0]), np.zeros(3), np.zeros(3))
    np.testing.assert_allclose(pre.beta, [1, 0, 0], atol=1e-6)
    np.testing.assert_allclose(pre.alpha, [0.5, 0, 0], atol=1e-6)
    assert pre.dt_total == pytest.approx(1.0, abs=1e-9)


def test_insufficient_data():
    with pytest.raises(preint.InsufficientImuData):
        preint.integrate([], np.zeros(3), np.zeros(3))
    with pytest.raises(preint.InsufficientImuData):
        preint.integrate(constant_samples([0, 0, 0], [0, 0, 0])[:1], np.zeros(3), np.zeros(3))


def test_non_increasing_stamps_rejected():
    s = constant_samples([0, 0, 0], [0, 0, 0], duration=0.05)
    with pytest.raises(ValueError):
        preint.integrate([s[0], s[0]] + s[1:], np.zeros(3), np.zeros(3))


def test_matches_high_rate_integration(rng):
    """200 Hz midpoint preintegration against an adaptive ODE solution of the
    continuous signals."""
    for _ in range(3):
        ca, fa = rng.normal(size=3), rng.uniform(0.5, 2.0, 3)
        cw, fw = 0.5 * rng.normal(size=3), rng.uniform(0.5, 2.0, 3)
        b_a, b_w = 0.05 * rng.normal(size=3), 0.01 * rng.normal(size=3)
        acc = lambda t: ca + np.sin(fa * t)  # noqa: E731
        gyro = lambda t: cw + 0.3 * np.cos(fw * t)  # noqa: E731
        t = np.arange(201) / 200.0
        samples = [ImuSample(float(ti), acc(ti), gyro(ti)) for ti in t]
        pre = preint.integrate(samples, b_a, b_w)
        alpha, beta, R = high_rate_preintegration(acc, gyro, 0.0, 1.0, b_a, b_w)
        np.testing.assert_allclose(pre.alpha, alpha, atol=1e-4)
        np.testing.assert_allclose(pre.beta, beta, atol=1e-4)
        np.testing.assert_allclose(quat_to_rot(pre.gamma), R, atol=1e-4)


def test_unit_gamma_and_dt(rng):
    samples = random_samples(rng, duration=0.73)
    pre = preint.integrate(samples, np.zeros(3), np.zeros(3))
    assert abs(np.linalg.norm(pre.gamma) - 1) < 1e-9
    assert pre.dt_total == pytest.approx(sum(b.stamp - a.stamp for a, b in zip(samples, samples[1:])), abs=1e-9)


def test_covariance_psd_over_1000_steps(rng):
    pre = preint.integrate(random_samples(rng, duration=5.0), np.zeros(3), np.zeros(3))
    assert len(pre.samples) == 1001
    np.testing.assert_array_equal(pre.P, pre.P.T)
    assert np.linalg.eigvalsh(pre.P).min() > -1e-10


# ---------------------------------------------------------------- repropagation

def test_repropagate_zero_is_identity(rng):
    pre = preint.integrate(random_samples(rng), 0.1 * np.ones(3), 0.01 * np.ones(3))
    out = preint.repropagate(pre, pre.lin_b_a.copy(), pre.lin_b_w.copy())
    np.testing.assert_array_equal(out.alpha, pre.alpha)
    np.testing.assert_array_equal(out.beta, pre.beta)
    np.testing.assert_allclose(out.gamma, pre.gamma, atol=1e-12)


def test_repropagate_accel_bias_definition():
    pre = preint.integrate(constant_samples([0.3, -0.2, 9.81], [0, 0, 0]), np.zeros(3), np.zeros(3))
    eps = np.array([1e-3, 0.0, 0.0])
    out = preint.repropagate(pre, eps, np.zeros(3))
    np.testing.assert_array_equal(out.alpha, pre.alpha + pre.J_alpha_ba @ eps)
    # without rotation the correction is exact
    full = preint.integrate(pre.samples, eps, np.zeros(3))
    np.testing.assert_allclose(out.alpha, full.alpha, atol=1e-12)


def test_repropagate_keeps_linearization_point(rng):
    pre = preint.integrate(random_samples(rng), np.zeros(3), np.zeros(3))
    out = preint.repropagate(pre, 0.01 * np.ones(3), 0.001 * np.ones(3))
    np.testing.assert_array_equal(out.lin_b_a, pre.lin_b_a)
    assert out.J_alpha_ba is pre.J_alpha_ba
    out2 = preint.repropagate(out, 0.02 * np.ones(3), np.zeros(3))
    np.testing.assert_allclose(out2.alpha, pre.corrected(0.02 * np.ones(3), np.zeros(3))[0])


def test_repropagate_small_step_matches_reintegration(rng):
    for _ in range(10):
        pre = preint.integrate(random_samples(rng), np.zeros(3), np.zeros(3))
        dba, dbw = 1e-3 * rng.normal(size=3), 1e-3 * rng.normal(size=3)
        out = preint.repropagate(pre, dba, dbw)
        full = preint.integrate(pre.samples, dba, dbw)
        assert np.linalg.norm(out.alpha - full.alpha) / np.linalg.norm(full.alpha) < 1e-4
        assert np.linalg.norm(out.beta - full.beta) / np.linalg.norm(full.beta) < 1e-4


def test_repropagate_threshold():
    pre = preint.integrate(constant_samples([0, 0, 9.81], [0, 0, 0]), np.zeros(3), np.zeros(3))
    with pytest.raises(preint.RelinearizationRequired):
        preint.repropagate(pre, np.array([0.2, 0, 0]), np.zeros(3))
    with pytest.raises(preint.RelinearizationRequired):
        preint.repropagate(pre, np.zeros(3), np.array([0, 0.11, 0]))


def test_first_order_error_is_quadratic(rng):
    m, gaps = repropagation_gaps(rng)
    assert abs(loglog_slope(m, gaps) - 2.0) < 0.2


# ---------------------------------------------------------------- residual

def test_residual_vanishes_on_noise_free_truth(quiet_static):
    """Generator and residual model agree on noise-free data: every pair of
    consecutive frames, and spans of five frames (0.25 s)."""
    b = generate(quiet_static)
    n = len(b.frames)
    pairs = [(k, k + 1) for k in range(n - 1)] + [(k, k + 5) for k in range(0, n - 5, 5)]
    for k0, k1 in pairs:
        f0, f1 = b.frames[k0], b.frames[k1]
        pre = preint.integrate(b.imu_samples(f0.imu_index, f1.imu_index), b.gt_states[k0].b_a, b.gt_states[k0].b_w)
        r, _, _ = preint.imu_residual(pre, b.gt_states[k0], b.gt_states[k1], G, whiten=False)
        assert np.linalg.norm(r) < 1e-6


def test_bias_rows_zero_for_equal_biases(rng):
    pre = preint.integrate(random_samples(rng), np.zeros(3), np.zeros(3))
    x0 = random_state(rng)
    x1 = random_state(rng).copy(b_a=x0.b_a.copy(), b_w=x0.b_w.copy())
    r, _, _ = preint.imu_residual(pre, x0, x1, G, whiten=False)
    np.testing.assert_array_equal(r[9:], 0.0)


def test_residual_rejects_non_finite(rng):
    pre = preint.integrate(random_samples(rng), np.zeros(3), np.zeros(3))
    x0 = random_state(rng)
    with pytest.raises(ValueError):
        preint.imu_residual(pre, x0, x0.copy(p_wb=np.array([np.nan, 0, 0])), G)


def test_whitening_uses_covariance(rng):
    pre = preint.integrate(random_samples(rng), np.zeros(3), np.zeros(3))
    x0 = random_state(rng)
    x1 = preint.predict(x0, pre, G)
    x1 = x1.copy(p_wb=x1.p_wb + 0.01)
    raw, _, _ = preint.imu_residual(pre, x0, x1, G, whiten=False)
    white, _, _ = preint.imu_residual(pre, x0, x1, G)
    assert float(white @ white) == pytest.approx(float(raw @ np.linalg.solve(pre.P, raw)), rel=1e-8)


def test_predict_is_zero_residual(rng):
    pre = preint.integrate(random_samples(rng), 0.02 * np.ones(3), np.zeros(3))
    x0 = random_state(rng)
    r, _, _ = preint.imu_residual(pre, x0, preint.predict(x0, pre, G), G, whiten=False)
    assert np.linalg.norm(r) < 1e-12


def test_jacobians_against_finite_differences(rng):
    for _ in range(10):
        ek, ek1 = imu_jacobian_case(rng)
        assert ek < 1e-5 and ek1 < 1e-5


@given(st.integers(0, 2 ** 31))
def test_noise_params_non_negative(seed):
    rng = np.random.default_rng(seed)
    vals = rng.uniform(0, 1, 4)
    ImuNoiseParams(*vals)
    with pytest.raises(ValueError):
        ImuNoiseParams(-vals[0], *vals[1:])
