# Copyright 2022 Softpoint Consultores SL. All Rights Reserved.
#
# Licensed under MIT License (the "License");
# you may not use this file except in compliance with the License.
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
# ==============================================================================

import logging
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from .chain_model import (
    JointSpec, JointState, link_kinematics, propagate_joint,
)
from .so3_math import as_finite, rotation_exp, rotation_log

logger = logging.getLogger(__name__)

GRAVITY = np.array([0.0, 0.0, -9.81])

# successive body axes (z, then y, then x) driving a prescribed base
BASE_AXES = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
_BASE_GIMBAL = JointSpec(axes=BASE_AXES, name='base')


@dataclass(frozen=True)
class NoiseConfig:
    """
    Sensor error model.

    White-noise terms are per-sample standard deviations. The gyro bias
    random walk is a density: b' = b + σ_b·√dt·n.
    """
    gyro_noise_rad_s: float = 0.0
    gyro_bias_walk_rad_s_sqrt_s: float = 0.0
    initial_bias_rad_s: float = 0.0
    accel_noise_m_s2: float = 0.0
    accel_bias_m_s2: float = 0.0
    joint_noise_rad: float = 0.0
    sample_rate_hz: float = 1000.0
    seed: int = 0

    def __post_init__(self):
        for name in (
            'gyro_noise_rad_s', 'gyro_bias_walk_rad_s_sqrt_s',
            'initial_bias_rad_s', 'accel_noise_m_s2', 'accel_bias_m_s2',
            'joint_noise_rad',
        ):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f'{name} must be finite and ≥ 0, got {value}')
        if not self.sample_rate_hz > 0:
            raise ValueError(
                f'sample_rate_hz must be > 0, got {self.sample_rate_hz}'
            )

    @property
    def dt(self):
        return 1.0 / self.sample_rate_hz


@dataclass(frozen=True, eq=False)
class ImuSample:
    """One reading of the IMU in `slot` on `link`, sensor frame."""
    timestamp: float
    link: int
    slot: int
    gyro: np.ndarray
    accel: np.ndarray
    bias: np.ndarray = None


@dataclass(frozen=True, eq=False)
class BaseMotion:
    """
    Base orientation profile: 'fixed' holds the offset angles, 'sine'
    drives three successive body-axis rotations (z, y, x) sinusoidally.
    """
    kind: str = 'fixed'
    amplitude_rad: np.ndarray = field(default_factory=lambda: np.zeros(3))
    frequency_hz: np.ndarray = field(default_factory=lambda: np.zeros(3))
    phase_rad: np.ndarray = field(default_factory=lambda: np.zeros(3))
    offset_rad: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.kind not in ('fixed', 'sine'):
            raise ValueError(f"base motion must be 'fixed' or 'sine', "
                             f"got {self.kind!r}")
        for name in ('amplitude_rad', 'frequency_hz', 'phase_rad',
                     'offset_rad'):
            value = np.broadcast_to(
                as_finite(getattr(self, name), name), (3,)
            ).copy()
            object.__setattr__(self, name, value)


@dataclass(frozen=True, eq=False)
class TrajectoryConfig:
    """
    Per-DoF sines for the actuated joints plus an optional base profile
    (None for a chain whose base is fixed in the world).
    """
    amplitude_rad: np.ndarray
    frequency_hz: np.ndarray
    phase_rad: np.ndarray = None
    offset_rad: np.ndarray = None
    base: BaseMotion = None
    duration_s: float = 10.0

    def __post_init__(self):
        amplitude = as_finite(self.amplitude_rad, 'amplitude_rad').reshape(-1)
        n = amplitude.size
        for name in ('frequency_hz', 'phase_rad', 'offset_rad'):
            value = getattr(self, name)
            value = np.zeros(n) if value is None else \
                np.broadcast_to(as_finite(value, name), (n,)).copy()
            object.__setattr__(self, name, value)
        object.__setattr__(self, 'amplitude_rad', amplitude)
        if not self.duration_s > 0:
            raise ValueError(f'duration_s must be > 0, got {self.duration_s}')

    @property
    def joint_dof_count(self):
        return self.amplitude_rad.size

    @classmethod
    def uniform(cls, n, amplitude_rad, frequency_hz, base=None,
                duration_s=10.0, phase_rad=0.0, offset_rad=0.0):
        return cls(
            amplitude_rad=np.full(n, float(amplitude_rad)),
            frequency_hz=np.full(n, float(frequency_hz)),
            phase_rad=np.full(n, float(phase_rad)),
            offset_rad=np.full(n, float(offset_rad)),
            base=base,
            duration_s=duration_s,
        )


def sine_values(amplitude, frequency, phase, offset, t):
    """Sine, first and second derivative; t may be a scalar or array."""
    w = 2.0 * np.pi * np.asarray(frequency)
    arg = np.multiply.outer(t, w) + phase
    s, c = np.sin(arg), np.cos(arg)
    return offset + amplitude * s, amplitude * w * c, -amplitude * w * w * s


def base_state(base, t):
    """Rotation vector, body angular velocity and acceleration of the base."""
    angles, rates, accels = sine_values(
        base.amplitude_rad if base.kind == 'sine' else np.zeros(3),
        base.frequency_hz, base.phase_rad, base.offset_rad, t,
    )
    rotation, omega, alpha = propagate_joint(
        _BASE_GIMBAL, angles, rates, accels, np.zeros(3), np.zeros(3)
    )
    return rotation_log(rotation), omega, alpha


def sine_trajectory(cfg, t):
    """
    Args:
        cfg(TrajectoryConfig):
            trajectory description
        t(float):
            time in s, 0 ≤ t ≤ duration

    Returns:
        JointState with analytic positions, velocities and accelerations.
    """
    if not -1e-9 <= t <= cfg.duration_s + 1e-9:
        raise ValueError(f't = {t} outside [0, {cfg.duration_s}]')
    theta, theta_dot, theta_ddot = sine_values(
        cfg.amplitude_rad, cfg.frequency_hz, cfg.phase_rad,
        cfg.offset_rad, t,
    )
    if cfg.base is None:
        return JointState(theta, theta_dot, theta_ddot)
    rotvec, omega, alpha = base_state(cfg.base, t)
    return JointState(
        np.concatenate([rotvec, theta]),
        np.concatenate([omega, theta_dot]),
        np.concatenate([alpha, theta_ddot]),
    )


def sample_times(duration_s, sample_rate_hz):
    count = int(np.floor(duration_s * sample_rate_hz + 1e-9)) + 1
    return np.arange(count) / sample_rate_hz


@dataclass
class SensorBiases:
    """Gyro and accelerometer biases keyed by (link, slot)."""
    gyro: dict
    accel: dict

    def copy(self):
        return SensorBiases(
            {k: v.copy() for k, v in self.gyro.items()},
            {k: v.copy() for k, v in self.accel.items()},
        )


def _random_direction(rng):
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def initial_biases(model, noise, rng):
    """Biases of random direction with the configured magnitudes."""
    gyro, accel = {}, {}
    for mount in model.mounts:
        key = (mount.link, mount.slot)
        gyro[key] = noise.initial_bias_rad_s * _random_direction(rng)
        accel[key] = noise.accel_bias_m_s2 * _random_direction(rng)
    return SensorBiases(gyro, accel)


def step_bias(b, sigma_b, dt, rng):
    """Brownian bias step b' = b + σ_b·√dt·n."""
    if not dt > 0:
        raise ValueError(f'dt must be > 0, got {dt}')
    return b + sigma_b * np.sqrt(dt) * rng.standard_normal(3)


def step_biases(biases, noise, dt, rng):
    stepped = {
        key: step_bias(b, noise.gyro_bias_walk_rad_s_sqrt_s, dt, rng)
        for key, b in biases.gyro.items()
    }
    return SensorBiases(stepped, dict(biases.accel))


def synthesize_imu(model, state, noise, biases, rng, timestamp=0.0,
                   world_rotation=None, gravity=GRAVITY):
    """
    Gyro and accelerometer readings of every mounted IMU.

    The gyro reads R_sᵀω_link + b + w and the accelerometer the specific
    force R_sᵀ(a_mount − g_link) + b_a + w_a, R_s being the sensor → link
    orientation of the mount. Noise is added in the sensor frame.

    Args:
        model(ChainModel):
            chain with the true mount poses
        state(JointState):
            generalized motion at this instant
        noise(NoiseConfig):
            sensor error model
        biases(SensorBiases or None):
            current biases, None for bias-free sensors
        rng(np.random.Generator):
            noise source
        timestamp(float):
            stamped on the samples
        world_rotation:
            optional rotation of the whole scene
        gravity:
            gravity vector in the world frame

    Returns:
        list of ImuSample, one per mount, in model order
    """
    kin = link_kinematics(model, state, world_rotation)
    gravity = np.asarray(gravity, dtype=float)
    samples = []
    for mount in model.mounts:
        key = (mount.link, mount.slot)
        to_sensor = mount.orientation.T
        g_link = kin.orientation_world[mount.link].T @ gravity
        specific_force = kin.mount_acceleration(mount) - g_link
        gyro_bias = np.zeros(3) if biases is None else biases.gyro[key]
        accel_bias = np.zeros(3) if biases is None else biases.accel[key]
        w = rng.standard_normal(6)
        gyro = to_sensor @ kin.omega[mount.link] + gyro_bias \
            + noise.gyro_noise_rad_s * w[:3]
        accel = to_sensor @ specific_force + accel_bias \
            + noise.accel_noise_m_s2 * w[3:]
        samples.append(ImuSample(
            timestamp, mount.link, mount.slot, gyro, accel, gyro_bias.copy()
        ))
    return samples


def measure_joints(model, state, noise, rng):
    """Joint-sensor readings; a floating base is read as an attitude."""
    n = rng.standard_normal(model.dof_count)
    theta = state.theta + noise.joint_noise_rad * n
    if model.floating_base:
        attitude = rotation_exp(state.theta[:3]) \
            @ rotation_exp(noise.joint_noise_rad * n[:3])
        theta[:3] = rotation_log(attitude)
    return theta


def calibration_trajectory(model, duration_s, rng,
                           amplitude_rad=(1.2, 0.9, 1.0),
                           frequency_hz=(0.15, 0.2, 0.25),
                           lock_range_rad=0.5):
    """
    Rigid-body tumble: joints locked at a random configuration, base
    swinging about all three axes at distinct frequencies.
    """
    n = model.joint_dof_count
    return TrajectoryConfig(
        amplitude_rad=np.zeros(n),
        frequency_hz=np.zeros(n),
        offset_rad=rng.uniform(-lock_range_rad, lock_range_rad, n),
        base=BaseMotion(
            kind='sine',
            amplitude_rad=amplitude_rad,
            frequency_hz=frequency_hz,
            phase_rad=rng.uniform(0.0, 2.0 * np.pi, 3),
        ),
        duration_s=duration_s,
    )


def calibration_motion(model, duration_s, rng, sample_rate_hz=1000.0,
                       **profile):
    """
    Returns:
        list of (timestamp, JointState) with the joints locked.
    """
    if not duration_s > 0:
        raise ValueError(f'duration_s must be > 0, got {duration_s}')
    if not model.floating_base:
        raise ValueError('a calibration tumble needs a floating base')
    cfg = calibration_trajectory(model, duration_s, rng, **profile)
    return [(t, sine_trajectory(cfg, t))
            for t in sample_times(duration_s, sample_rate_hz)]


@dataclass(frozen=True, eq=False)
class SimulationResult:
    """
    times:        (M,) sample times
    states:       M ground-truth JointState values
    samples:      M lists of ImuSample
    joint_readings: (M, DoF) joint-sensor readings
    """
    times: np.ndarray
    states: list
    samples: list
    joint_readings: np.ndarray


def simulate_stream(model, motion, noise, rng, world_rotation=None,
                    gravity=GRAVITY, biases=None, show_tqdm=False):
    """
    Args:
        model(ChainModel):
            chain with the true mount poses
        motion:
            TrajectoryConfig, or a list of (timestamp, JointState)
        noise(NoiseConfig):
            sensor error model; its sample rate sets the time grid
        rng(np.random.Generator):
            single source for every random draw
        world_rotation, gravity:
            passed on to synthesize_imu
        biases(SensorBiases):
            starting biases, drawn from `noise` when None
        show_tqdm(bool):
            progress bar

    Returns:
        SimulationResult
    """
    if isinstance(motion, TrajectoryConfig):
        motion = [(t, sine_trajectory(motion, t))
                  for t in sample_times(motion.duration_s,
                                        noise.sample_rate_hz)]
    if biases is None:
        biases = initial_biases(model, noise, rng)
    times, states, samples, readings = [], [], [], []
    previous = None
    for t, state in tqdm(motion, disable=not show_tqdm):
        if previous is not None:
            biases = step_biases(biases, noise, t - previous, rng)
        previous = t
        times.append(t)
        states.append(state)
        samples.append(synthesize_imu(
            model, state, noise, biases, rng, t, world_rotation, gravity
        ))
        readings.append(measure_joints(model, state, noise, rng))
    logger.debug('simulated %d steps of %d IMUs', len(times),
                 len(model.mounts))
    return SimulationResult(
        np.asarray(times), states, samples,
        np.asarray(readings).reshape(len(times), model.dof_count),
    )
