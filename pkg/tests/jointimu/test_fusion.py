from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from jointimu.chain_model import (
    JointState, example_leg, link_kinematics, random_chain, stacked_jacobian,
)
from jointimu.errors import FilterStepError, InvalidCutoff
from jointimu.fusion import (
    EkfTuning, FilterInput, KfTuning, bias_ekf_init, bias_ekf_propagate,
    bias_ekf_step, butterworth2_design, estimate_lag, filter_stream,
    normalized_innovation, process_jacobian, velocity_kf_init,
    velocity_kf_step, velocity_measurement_covariance,
)
from jointimu.imu_sim import (
    BaseMotion, NoiseConfig, TrajectoryConfig, simulate_stream,
)
from jointimu.so3_math import pseudo_inverse, rotation_exp, rotation_log


def test_butterworth_response_at_cutoff():
    biquad = butterworth2_design(25.0, 1000.0)
    assert biquad.magnitude(25.0)[0] == pytest.approx(1 / np.sqrt(2),
                                                      abs=1e-4)
    assert biquad.magnitude(0.0)[0] == pytest.approx(1.0, abs=1e-12)
    assert biquad.magnitude(400.0)[0] < 0.01
    assert biquad.is_stable()
    assert sum(biquad.b) / sum(biquad.a) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize('cutoff, rate', [(25.0, 1000.0), (10.0, 200.0),
                                          (90.0, 200.0)])
def test_butterworth_matches_prewarped_analog_prototype(cutoff, rate):
    biquad = butterworth2_design(cutoff, rate)
    f = np.linspace(0.0, 0.49 * rate, 200)
    ratio = np.tan(np.pi * f / rate) / np.tan(np.pi * cutoff / rate)
    expected = 1.0 / np.sqrt(1.0 + ratio ** 4)
    assert np.allclose(biquad.magnitude(f), expected, rtol=0, atol=1e-10)


def test_invalid_cutoffs():
    for cutoff in (0.0, -1.0, 500.0, 800.0):
        with pytest.raises(InvalidCutoff):
            butterworth2_design(cutoff, 1000.0)


def test_streaming_step_matches_batch_filter():
    biquad = butterworth2_design(10.0, 200.0)
    x = np.random.default_rng(0).standard_normal((400, 3))
    batch = biquad.filter(x)
    biquad.reset()
    streamed = np.array([biquad.step(row) for row in x])
    assert np.allclose(streamed, batch, rtol=0, atol=1e-12)


def test_process_jacobian_matches_finite_differences():
    rng = np.random.default_rng(1)
    model = random_chain(rng, [3, 1, 3], floating_base=True)
    dt = 0.01
    n, m = model.dof_count, 3 * model.n_links
    h = 1e-6
    for _ in range(50):
        theta = rng.uniform(-1.0, 1.0, n)
        bias = 0.1 * rng.standard_normal(m)
        gyros = rng.standard_normal((model.n_links, 3))
        jac = process_jacobian(model, theta, bias, gyros, dt)
        for c in range(model.base_dof, n + m):
            offset = np.zeros(n + m)
            offset[c] = h
            plus = bias_ekf_propagate(model, theta + offset[:n],
                                      bias + offset[n:], gyros, dt)[0]
            minus = bias_ekf_propagate(model, theta - offset[:n],
                                       bias - offset[n:], gyros, dt)[0]
            column = (plus - minus) / (2.0 * h)
            scale = max(np.linalg.norm(column), 1.0)
            assert np.linalg.norm(jac[:n, c] - column) / scale < 1e-4
        assert np.array_equal(jac[n:, n:], np.eye(m))


def test_bias_ekf_is_exact_on_constant_rates():
    rng = np.random.default_rng(2)
    model = random_chain(rng, [3, 1], floating_base=True)
    base0 = rotation_exp([0.2, -0.1, 0.3])
    omega = np.array([0.3, -0.2, 0.5])
    q0 = rng.uniform(-0.5, 0.5, model.joint_dof_count)
    q_dot = rng.uniform(-0.5, 0.5, model.joint_dof_count)
    dt = 0.01
    records, truth = [], []
    for k in range(200):
        t = k * dt
        theta = np.concatenate([
            rotation_log(base0 @ rotation_exp(omega * t)), q0 + q_dot * t
        ])
        state = JointState(theta, np.concatenate([omega, q_dot]),
                           np.zeros(model.dof_count))
        gyros = link_kinematics(model, state).omega
        records.append(FilterInput(t, theta, gyros))
        truth.append(theta)
    tuning = EkfTuning(joint_noise_rad=1e-3, gyro_noise_rad_s=1e-3,
                       bias_walk_rad_s_sqrt_s=1e-4)
    estimates = filter_stream(records, 'bias_ekf', tuning, model)
    assert len(estimates) == len(records)
    for state, theta in zip(estimates, truth):
        estimate = state.global_theta(model)
        assert np.allclose(rotation_exp(estimate[:3]),
                           rotation_exp(theta[:3]), rtol=0, atol=1e-9)
        assert np.allclose(estimate[3:], theta[3:], rtol=0, atol=1e-9)
        assert np.allclose(state.bias, 0.0, rtol=0, atol=1e-9)
        p = state.covariance
        assert np.array_equal(p, p.T)
        assert np.linalg.eigvalsh(p).min() > 0
        assert np.allclose(state.base_reference.T @ state.base_reference,
                           np.eye(3), rtol=0, atol=1e-14)


def test_bias_ekf_learns_a_large_static_bias():
    rng = np.random.default_rng(5)
    model = random_chain(rng, [1], floating_base=True)
    theta = np.array([0.1, 0.2, -0.1, 0.3])
    true_bias = np.array([0.2, -0.1, 0.15, 0.0, 0.0, 0.0])
    gyros = true_bias.reshape(-1, 3)
    records = [FilterInput(0.01 * k, theta, gyros) for k in range(2000)]
    tuning = EkfTuning(joint_noise_rad=1e-3, gyro_noise_rad_s=1e-3,
                       bias_walk_rad_s_sqrt_s=1e-4)
    estimates = filter_stream(records, 'bias_ekf', tuning, model)

    t_pinv = pseudo_inverse(stacked_jacobian(model, theta))
    assert np.linalg.norm(t_pinv @ true_bias) > 0.1
    final = estimates[-1]
    # only the part of the bias that moves the joint estimate is observable
    assert np.linalg.norm(t_pinv @ (true_bias - final.bias)) < 1e-3
    assert np.allclose(final.global_theta(model), theta, rtol=0, atol=1e-3)


def test_bias_ekf_tracks_drifting_biases():
    rng = np.random.default_rng(3)
    model = random_chain(rng, [3, 3], floating_base=True)
    cfg = TrajectoryConfig.uniform(
        model.joint_dof_count, 0.2, 0.3, duration_s=15.0,
        base=BaseMotion('sine', [0.3, 0.2, 0.2], [0.2, 0.25, 0.3]),
    )
    noise = NoiseConfig(
        gyro_noise_rad_s=5e-3, joint_noise_rad=1e-3,
        initial_bias_rad_s=0.1, gyro_bias_walk_rad_s_sqrt_s=0.02,
        sample_rate_hz=100.0,
    )
    result = simulate_stream(model, cfg, noise, rng)
    records = []
    true_bias = []
    for t, samples, reading in zip(result.times, result.samples,
                                   result.joint_readings):
        primary = sorted((s for s in samples if s.slot == 0),
                         key=lambda s: s.link)
        records.append(FilterInput(t, reading,
                                   np.array([s.gyro for s in primary])))
        true_bias.append(np.concatenate([s.bias for s in primary]))
    tuning = EkfTuning(joint_noise_rad=1e-3, gyro_noise_rad_s=5e-3,
                       bias_walk_rad_s_sqrt_s=0.02, initial_variance=1e-2)
    estimates = filter_stream(records, 'bias_ekf', tuning, model)
    settled = result.times >= 5.0
    errors = np.array([e.bias for e in estimates]) - np.array(true_bias)
    rmse = np.sqrt(np.mean(errors[settled] ** 2))
    assert rmse < 0.3 * 0.1
    for state in estimates:
        p = state.covariance
        assert np.allclose(p, p.T, rtol=0, atol=1e-15)
        assert np.linalg.eigvalsh(p).min() > -1e-12


def test_filter_stream_reports_failing_step():
    model = example_leg(floating_base=False)
    n = model.dof_count
    gyros = np.zeros((model.n_links, 3))
    records = [FilterInput(0.01 * k, np.zeros(n), gyros) for k in range(5)]
    records[3] = FilterInput(0.03, np.full(n, np.nan), gyros)
    with pytest.raises(FilterStepError) as info:
        filter_stream(records, 'bias_ekf', EkfTuning(), model)
    assert info.value.step == 3

    tight = EkfTuning(initial_variance=1.0, variance_ceiling=1e-3)
    records = [FilterInput(0.01 * k, np.zeros(n), gyros) for k in range(3)]
    with pytest.raises(FilterStepError) as info:
        filter_stream(records, 'bias_ekf', tight, model)
    assert isinstance(info.value.error, ArithmeticError)


def test_bias_ekf_rejects_bad_steps():
    model = example_leg(floating_base=False)
    state = bias_ekf_init(model, np.zeros(model.dof_count))
    gyros = np.zeros((model.n_links, 3))
    with pytest.raises(ValueError):
        bias_ekf_step(state, gyros, np.zeros(model.dof_count), model, 0.0)
    with pytest.raises(ValueError):
        bias_ekf_init(model, np.zeros(3))
    with pytest.raises(ValueError):
        filter_stream([FilterInput(0.0, np.zeros(model.dof_count), gyros)],
                      'bias_ekf', EkfTuning())


def test_velocity_kf_is_exact_under_constant_acceleration():
    theta0 = np.array([0.1, -0.3])
    v0 = np.array([0.5, 0.2])
    accel = np.array([-1.0, 2.0])
    dt = 0.002
    records = []
    for k in range(300):
        t = k * dt
        records.append(FilterInput(
            t, theta0 + v0 * t + 0.5 * accel * t * t,
            theta_dot_meas=v0 + accel * t, theta_ddot_input=accel,
        ))
    tuning = KfTuning(joint_noise_rad=1e-3, velocity_noise_rad_s=1e-2)
    estimates = filter_stream(records, 'velocity_kf', tuning)
    for state, record in zip(estimates, records):
        assert np.allclose(state.theta, record.theta_meas, rtol=0, atol=1e-9)
        assert np.allclose(state.theta_dot, record.theta_dot_meas,
                           rtol=0, atol=1e-9)


def test_velocity_kf_needs_acceleration_unless_zero_mode():
    state = velocity_kf_init([0.0], [0.0], tuning=KfTuning(mode='desired'))
    with pytest.raises(ValueError):
        velocity_kf_step(state, [0.0], [0.0], None, 0.01)
    zero = velocity_kf_init([0.0], [0.0], tuning=KfTuning(mode='zero'))
    stepped = velocity_kf_step(zero, [0.0], [0.0], None, 0.01)
    assert stepped.mode == 'zero'
    assert replace(KfTuning(), mode='accelerometer').mode == 'accelerometer'
    with pytest.raises(ValueError):
        KfTuning(mode='predicted')


def _sine_records(seed, fs=500.0, samples=1600):
    # 1 Hz; 1600 samples less 2 x 50 of lag margin leaves three periods
    rng = np.random.default_rng(seed)
    t = np.arange(samples) / fs
    w = 2.0 * np.pi
    theta = np.sin(w * t)
    theta_dot = w * np.cos(w * t)
    # mean acceleration over the step that ends at each sample
    theta_ddot = -w * w * np.sin(w * (t - 0.5 / fs))
    theta_meas = theta + 1e-4 * rng.standard_normal(t.size)
    rate_meas = theta_dot + 1e-3 * rng.standard_normal(t.size)
    records = [FilterInput(t[k], [theta_meas[k]],
                           theta_dot_meas=[rate_meas[k]],
                           theta_ddot_input=[theta_ddot[k]])
               for k in range(t.size)]
    return records, theta_dot


def test_desired_acceleration_reduces_velocity_lag():
    for seed in range(10):
        records, truth = _sine_records(seed)
        lags = {}
        for mode in ('desired', 'zero'):
            tuning = KfTuning(joint_noise_rad=0.01, velocity_noise_rad_s=0.2,
                              accel_noise_rad_s2=20.0, mode=mode)
            states = filter_stream(records, 'velocity_kf', tuning)
            estimate = np.array([s.theta_dot[0] for s in states])
            lags[mode] = estimate_lag(truth, estimate, max_lag=50)
        assert 0 <= lags['desired'] < lags['zero']


def test_estimate_lag_of_shifted_signal():
    t = np.arange(2080) / 1000.0
    reference = np.sin(2.0 * np.pi * 2.0 * t)
    delayed = 0.8 * np.sin(2.0 * np.pi * 2.0 * (t - 0.012))
    assert estimate_lag(reference, delayed, max_lag=40) == 12
    assert estimate_lag(delayed, reference, max_lag=40) == -12
    with pytest.raises(ValueError):
        estimate_lag(reference, delayed[:-1], max_lag=40)


def test_velocity_kf_innovations_are_consistent():
    rng = np.random.default_rng(4)
    sigma_theta, sigma_v, sigma_a = 2e-3, 1e-2, 3.0
    dt, steps, n = 0.01, 1000, 2
    x = np.zeros(2 * n)
    eye = np.eye(n)
    transition = np.block([[eye, dt * eye], [np.zeros((n, n)), eye]])
    g = np.concatenate([0.5 * dt * dt * np.ones(n), dt * np.ones(n)])
    records = []
    for k in range(steps):
        # the input of record k drives the step that ends at it
        u = np.sin(0.05 * k) * np.ones(n)
        if k:
            x = transition @ x + g * np.tile(
                u + sigma_a * rng.standard_normal(n), 2
            )
        y = x + np.concatenate([sigma_theta * rng.standard_normal(n),
                                sigma_v * rng.standard_normal(n)])
        records.append(FilterInput(k * dt, y[:n], theta_dot_meas=y[n:],
                                   theta_ddot_input=u))
    tuning = KfTuning(joint_noise_rad=sigma_theta,
                      velocity_noise_rad_s=sigma_v,
                      accel_noise_rad_s2=sigma_a, initial_variance=1e-2)
    states = filter_stream(records, 'velocity_kf', tuning)
    nis = np.array([normalized_innovation(s.innovation, s.innovation_cov)
                    for s in states[50:]])
    dof = nis.size * 2 * n
    low = stats.chi2.ppf(0.0005, dof) / dof
    high = stats.chi2.ppf(0.9995, dof) / dof
    assert low < nis.mean() < high


def test_velocity_kf_smooths_a_static_joint():
    rng = np.random.default_rng(6)
    dt, steps = 0.001, 3000
    raw = 5e-3 * rng.standard_normal(steps)
    records = [FilterInput(k * dt, [0.2 + 1e-3 * rng.standard_normal()],
                           theta_dot_meas=[raw[k]])
               for k in range(steps)]
    tuning = KfTuning(joint_noise_rad=1e-3, velocity_noise_rad_s=5e-3,
                      mode='zero')
    states = filter_stream(records, 'velocity_kf', tuning)
    estimate = np.array([s.theta_dot[0] for s in states])
    assert np.var(estimate[500:]) < 0.5 * np.var(raw[500:])
    assert abs(np.mean(estimate[500:])) < 1e-3


def test_filter_stream_short_and_repeated_inputs():
    model = example_leg(floating_base=False)
    n = model.dof_count
    gyros = np.zeros((model.n_links, 3))
    assert filter_stream([], 'bias_ekf', EkfTuning(), model) == []
    assert filter_stream([], 'velocity_kf', KfTuning()) == []

    single = filter_stream([FilterInput(0.5, np.full(n, 0.1), gyros)],
                           'bias_ekf', EkfTuning(), model)
    assert len(single) == 1
    assert single[0].timestamp == 0.5
    assert np.array_equal(single[0].theta, np.full(n, 0.1))
    single = filter_stream(
        [FilterInput(0.5, [0.1], theta_dot_meas=[0.3])], 'velocity_kf',
        KfTuning(mode='zero'),
    )
    assert len(single) == 1
    assert np.array_equal(single[0].mean, [0.1, 0.3])

    rng = np.random.default_rng(7)
    records = [FilterInput(0.01 * k, 0.1 * rng.standard_normal(n),
                           0.1 * rng.standard_normal((model.n_links, 3)))
               for k in range(50)]
    runs = [filter_stream(records, 'bias_ekf', EkfTuning(), model)
            for _ in range(2)]
    for first, second in zip(*runs):
        assert np.array_equal(first.mean, second.mean)
        assert np.array_equal(first.covariance, second.covariance)


def test_velocity_measurement_covariance_shape():
    model = example_leg()
    theta = np.zeros(model.dof_count)
    cov = velocity_measurement_covariance(model, theta, 5e-3)
    assert cov.shape == (model.joint_dof_count, model.joint_dof_count)
    assert np.allclose(cov, cov.T)
    assert np.all(np.linalg.eigvalsh(cov) > 0)


if __name__ == '__main__':
    pytest.main([__file__])
