import numpy as np
import pytest

from jointimu.calib import (
    REFERENCE, CalibrationLog, MountCalibration, calibrate,
    calibrate_orientation, calibrate_position, numeric_angular_accel,
    read_calibration, verify_locked, write_calibration, zero_delay_filter,
)
from jointimu.chain_model import (
    ChainModel, ImuMount, JointSpec, JointState, random_chain,
)
from jointimu.errors import (
    IllConditionedWarning, LockedJointViolation, SignalTooShort,
)
from jointimu.estimator import gather, joint_velocities_constrained
from jointimu.imu_sim import (
    NoiseConfig, calibration_motion, simulate_stream, synthesize_imu,
)
from jointimu.so3_math import geodesic_distance


def _tumble_log(model, duration_s, sample_rate_hz, seed=0):
    rng = np.random.default_rng(seed)
    motion = calibration_motion(model, duration_s, rng,
                                sample_rate_hz=sample_rate_hz)
    result = simulate_stream(model, motion,
                             NoiseConfig(sample_rate_hz=sample_rate_hz), rng)
    return CalibrationLog.from_samples(result.times, result.samples,
                                       result.joint_readings)


@pytest.fixture(scope='module')
def tumble():
    model = random_chain(np.random.default_rng(10), [3, 1, 2],
                         misaligned=True)
    return model, _tumble_log(model, 6.0, 2000.0)


def _others(model):
    return [(m.link, m.slot) for m in model.mounts
            if (m.link, m.slot) != REFERENCE]


def _played_backwards(log):
    """Same motion in reverse time; rates change sign."""
    return CalibrationLog(
        log.times[-1] - log.times[::-1],
        {k: -v[::-1] for k, v in log.gyro.items()},
        {k: v[::-1] for k, v in log.accel.items()},
        log.theta[::-1],
    )


def test_noiseless_orientation_recovery(tumble):
    model, log = tumble
    for key in _others(model):
        fit = calibrate_orientation(log, model, *key)
        assert geodesic_distance(fit.rotation,
                                 model.mount(*key).orientation) < 1e-8
        assert fit.residual < 1e-8
        assert np.linalg.det(fit.rotation) == pytest.approx(1.0, abs=1e-12)


def test_noisy_orientation_recovery():
    model = random_chain(np.random.default_rng(11), [3, 1, 2],
                         misaligned=True)
    clean = _tumble_log(model, 5.0, 200.0)
    rng = np.random.default_rng(12)
    errors = []
    for _ in range(20):
        noisy = CalibrationLog(
            clean.times,
            {k: v + 0.005 * rng.standard_normal(v.shape)
             for k, v in clean.gyro.items()},
            clean.accel,
            clean.theta,
        )
        for key in _others(model):
            fit = calibrate_orientation(noisy, model, *key)
            errors.append(geodesic_distance(fit.rotation,
                                            model.mount(*key).orientation))
    assert np.percentile(errors, 95) < np.deg2rad(1.0)


def test_orientation_fit_is_unchanged_by_time_reversal(tumble):
    model, log = tumble
    backwards = _played_backwards(log)
    assert np.all(np.diff(backwards.times) > 0)
    for key in _others(model):
        forward = calibrate_orientation(log, model, *key).rotation
        reverse = calibrate_orientation(backwards, model, *key).rotation
        assert geodesic_distance(forward, reverse) < 1e-10


def test_short_log_is_rejected(tumble):
    model, log = tumble
    with pytest.raises(SignalTooShort):
        calibrate_orientation(log, model, 1, min_samples=log.sample_count + 1)


def test_moving_joint_fails_the_lock_check(tumble):
    model, log = tumble
    rng = np.random.default_rng(13)
    jittered = log.theta.copy()
    jittered[:, model.base_dof:] += 5e-4 * rng.standard_normal(
        jittered[:, model.base_dof:].shape
    )
    quiet = CalibrationLog(log.times, log.gyro, log.accel, jittered)
    assert verify_locked(quiet, model) < 1e-3

    drifting = log.theta.copy()
    drifting[:, -1] += np.linspace(0.0, 0.01, log.sample_count)
    moved = CalibrationLog(log.times, log.gyro, log.accel, drifting)
    with pytest.raises(LockedJointViolation):
        verify_locked(moved, model)
    with pytest.raises(LockedJointViolation):
        calibrate_orientation(moved, model, 1)


def test_zero_delay_filter():
    fs = 1000.0
    constant = np.full((500, 3), 2.5)
    assert np.allclose(zero_delay_filter(constant, 25.0, fs), 2.5,
                       rtol=0, atol=1e-12)

    t = np.arange(2000) / fs
    slow = np.sin(2.0 * np.pi * 1.0 * t)
    smooth = zero_delay_filter(slow, 25.0, fs)
    assert np.max(np.abs(smooth - slow)[100:-100]) < 1e-4

    noise = np.random.default_rng(14).standard_normal(4000)
    assert np.var(zero_delay_filter(noise, 25.0, fs)) < 0.2 * np.var(noise)

    zero_delay_filter(np.zeros(54), 25.0, fs)
    with pytest.raises(SignalTooShort):
        zero_delay_filter(np.zeros(53), 25.0, fs)


def test_numeric_angular_accel():
    fs = 500.0
    t = np.arange(1000) / fs
    ramp = np.outer(t, [0.5, -1.0, 2.0])
    alpha = numeric_angular_accel(ramp, fs, cutoff_hz=None)
    assert np.allclose(alpha, [0.5, -1.0, 2.0], rtol=0, atol=1e-9)

    w = 2.0 * np.pi * 0.5
    omega = np.sin(w * t)
    alpha = numeric_angular_accel(omega, fs)
    assert np.allclose(alpha[50:-50], w * np.cos(w * t)[50:-50],
                       rtol=0, atol=1e-3)
    assert np.allclose(numeric_angular_accel(np.ones((200, 3)), fs), 0.0,
                       rtol=0, atol=1e-9)


def test_noiseless_position_recovery(tumble):
    model, log = tumble
    rotations = {(m.link, m.slot): m.orientation for m in model.mounts}
    fit = calibrate_position(log, model, rotations)
    assert not fit.ill_conditioned
    assert sorted(fit.positions_link) == sorted(_others(model))
    for key, position in fit.positions_link.items():
        assert np.allclose(position, model.mount(*key).position_m,
                           rtol=0, atol=1e-6)


def test_shared_factorization_matches_single_solves(tumble):
    model, log = tumble
    rotations = {(m.link, m.slot): m.orientation for m in model.mounts}
    together = calibrate_position(log, model, rotations)
    for key in _others(model):
        alone = calibrate_position(log, model, rotations, keys=[key])
        assert np.allclose(alone.positions_base[key],
                           together.positions_base[key], rtol=0, atol=1e-12)


def test_single_axis_spin_is_ill_conditioned():
    model = ChainModel(
        (JointSpec(axes=[[0.0, 0.0, 1.0]]),),
        (ImuMount(0), ImuMount(1, [0.1, 0.0, 0.0])),
        floating_base=True,
    )
    m = 400
    spin = np.tile([0.0, 0.0, 1.0], (m, 1))
    log = CalibrationLog(
        np.arange(m) / 200.0,
        {(0, 0): spin, (1, 0): spin},
        {(0, 0): np.zeros((m, 3)), (1, 0): np.zeros((m, 3))},
        np.zeros((m, model.dof_count)),
    )
    with pytest.warns(IllConditionedWarning):
        fit = calibrate_position(log, model, {(1, 0): np.eye(3)})
    assert fit.ill_conditioned


def test_calibrate_corrects_a_nominal_model(tumble, tmp_path):
    model, log = tumble
    calibration = calibrate(log, model)
    corrected = calibration.apply_to(model.nominal())
    for true, fitted in zip(model.mounts, corrected.mounts):
        assert geodesic_distance(true.orientation, fitted.orientation) < 1e-8
        assert np.allclose(true.position_m, fitted.position_m,
                           rtol=0, atol=1e-6)

    path = tmp_path / 'calibration.yaml'
    write_calibration(calibration, path)
    restored = read_calibration(path)
    assert sorted(restored.rotations) == sorted(calibration.rotations)
    for key, rotation in calibration.rotations.items():
        assert np.array_equal(restored.rotation(*key), rotation)
    for key, position in calibration.positions_link.items():
        assert np.array_equal(restored.positions_link[key], position)
    assert restored.position_condition == calibration.position_condition
    assert restored.position_residuals == calibration.position_residuals


def test_calibrated_model_feeds_the_velocity_estimator(tumble):
    model, log = tumble
    calibration = calibrate(log, model)
    corrected = calibration.apply_to(model.nominal())
    rng = np.random.default_rng(16)
    for _ in range(10):
        theta = rng.uniform(-0.8, 0.8, model.dof_count)
        theta_dot = rng.uniform(-1.0, 1.0, model.dof_count)
        state = JointState(theta, theta_dot, np.zeros(model.dof_count))
        gyros = gather(synthesize_imu(model, state, NoiseConfig(), None,
                                      rng))
        fitted = joint_velocities_constrained(corrected, theta, gyros,
                                              calibration)
        assert np.allclose(fitted.theta_dot, theta_dot, rtol=0, atol=1e-6)
        nominal = joint_velocities_constrained(model.nominal(), theta, gyros)
        assert np.max(np.abs(nominal.theta_dot - theta_dot)) > 1e-3


def test_orientation_fit_improves_with_excitation():
    model = random_chain(np.random.default_rng(17), [3, 1], misaligned=True)
    key = _others(model)[0]
    truth = model.mount(*key).orientation
    errors, relative = [], []
    for scale in (0.1, 0.3, 1.0):
        rng = np.random.default_rng(18)
        motion = calibration_motion(
            model, 5.0, rng, sample_rate_hz=200.0,
            amplitude_rad=(1.2 * scale, 0.9 * scale, 1.0 * scale),
        )
        result = simulate_stream(model, motion,
                                 NoiseConfig(gyro_noise_rad_s=0.005,
                                             sample_rate_hz=200.0), rng)
        log = CalibrationLog.from_samples(result.times, result.samples,
                                          result.joint_readings)
        fit = calibrate_orientation(log, model, *key)
        signal_rms = np.sqrt(np.mean(log.gyro[key] ** 2))
        errors.append(geodesic_distance(fit.rotation, truth))
        relative.append(fit.residual / signal_rms)
    assert errors[0] > errors[1] > errors[2]
    assert relative[0] > relative[1] > relative[2]


def test_calibration_from_model_restates_mounts():
    model = random_chain(np.random.default_rng(15), [2], misaligned=True)
    calibration = MountCalibration.from_model(model)
    restated = calibration.apply_to(model.nominal())
    for a, b in zip(restated.mounts, model.mounts):
        assert np.array_equal(a.orientation, b.orientation)
        assert np.array_equal(a.position_m, b.position_m)
    with pytest.raises(KeyError):
        calibration.rotation(5)


def test_read_calibration_rejects_other_files(tmp_path):
    path = tmp_path / 'other.yaml'
    path.write_text('format: something else\nimus: {}\n')
    with pytest.raises(ValueError):
        read_calibration(path)


if __name__ == '__main__':
    pytest.main([__file__])
