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
"""
Single-joint PD sine tracking on a surrogate torque-driven plant, with
the velocity feedback taken from one of three pipelines:

    butterworth_numeric  position sensor, backward difference, causal
                         second-order Butterworth
    gyro_direct          constrained gyro solve over the synthesized
                         readings of the base and joint-link IMUs
    kf_filtered          velocity Kalman filter on position and the
                         gyro solve, driven by the desired acceleration

A run may hand the loop from one pipeline and gain pair to another part
way through; every pipeline is updated from the start so the incoming
one is already settled.
"""

import logging
import math
from collections import deque
from dataclasses import dataclass

import numpy as np
import pandas as pd
import plotly.graph_objects as go
from tqdm import tqdm

from .chain_model import ChainModel, ImuMount, JointSpec, JointState
from .errors import NoStableGain
from .estimator import gather, joint_velocities_constrained
from .fusion import (
    KfTuning, butterworth2_design, estimate_lag, velocity_kf_init,
    velocity_kf_step, velocity_measurement_covariance,
)
from .imu_sim import (
    NoiseConfig, TrajectoryConfig, sample_times, sine_values, synthesize_imu,
)

logger = logging.getLogger(__name__)

SOURCES = ('butterworth_numeric', 'gyro_direct', 'kf_filtered')


@dataclass(frozen=True)
class PlantConfig:
    inertia_kgm2: float = 0.5
    damping_nms: float = 0.1
    torque_limit_nm: float = 1e4
    actuator_lag_s: float = 0.005
    sample_rate_hz: float = 1000.0
    delay_samples: int = 1
    position_noise_rad: float = 2e-4
    gyro_noise_rad_s: float = 5e-3
    cutoff_hz: float = 25.0
    substeps: int = 4
    transient_s: float = 1.0
    stability_floor_rad: float = 0.05

    def __post_init__(self):
        if not self.inertia_kgm2 > 0:
            raise ValueError(f'inertia must be > 0, got {self.inertia_kgm2}')
        if self.delay_samples < 0:
            raise ValueError(
                f'delay_samples must be ≥ 0, got {self.delay_samples}'
            )
        if self.actuator_lag_s < 0 or self.substeps < 1:
            raise ValueError('actuator_lag_s must be ≥ 0 and substeps ≥ 1')

    @property
    def dt(self):
        return 1.0 / self.sample_rate_hz


@dataclass(frozen=True, eq=False)
class TrackingResult:
    rms_position_rad: float
    rms_velocity_rad_s: float
    stable: bool
    p_gain: float
    d_gain: float
    source: str
    series: pd.DataFrame = None
    switch_source: str = None

    def as_row(self):
        return {
            'source': self.source,
            'switch_source': self.switch_source or '',
            'p_gain': self.p_gain,
            'd_gain': self.d_gain,
            'rms_position_rad': self.rms_position_rad,
            'rms_velocity_rad_s': self.rms_velocity_rad_s,
            'stable': self.stable,
        }


@dataclass(frozen=True)
class Scenario:
    """
    switch_time_s, when set, hands the loop to switch_source with the
    switch gains (default: unchanged) at that time.
    """
    name: str
    p_gain: float
    d_gain: float
    frequency_hz: float
    amplitude_rad: float = 0.25
    switch_time_s: float = None
    switch_source: str = 'gyro_direct'
    switch_p_gain: float = None
    switch_d_gain: float = None

    def switch(self):
        """(time_s, source, gains) for run_tracking, or None."""
        if self.switch_time_s is None:
            return None
        gains = (
            self.p_gain if self.switch_p_gain is None else self.switch_p_gain,
            self.d_gain if self.switch_d_gain is None else self.switch_d_gain,
        )
        return self.switch_time_s, self.switch_source, gains


def scenario_grid():
    """Gain and frequency combinations of the tracking comparison."""
    return [
        Scenario('p1000_d12_0.5hz', 1000.0, 12.0, 0.5),
        Scenario('p1500_d12_0.5hz', 1500.0, 12.0, 0.5),
        Scenario('p250_d26_0.5hz', 250.0, 26.0, 0.5),
        Scenario('p800_d12_3hz', 800.0, 12.0, 3.0, 0.1),
        Scenario('p1500_d12_3hz', 1500.0, 12.0, 3.0, 0.1),
        Scenario('p800_to_p1500_d12_3hz', 800.0, 12.0, 3.0, 0.1,
                 switch_time_s=3.0, switch_p_gain=1500.0),
    ]


def pd_step(theta_ref, theta_dot_ref, theta_fb, theta_dot_fb, p_gain,
            d_gain, torque_limit=math.inf):
    """τ = P(θ_ref − θ) + D(θ̇_ref − θ̇), clamped to ±torque_limit."""
    torque = p_gain * (theta_ref - theta_fb) \
        + d_gain * (theta_dot_ref - theta_dot_fb)
    return min(max(torque, -torque_limit), torque_limit)


def single_joint_model():
    """Fixed base and one revolute joint about z, one IMU on each link."""
    return ChainModel(
        (JointSpec(axes=[[0.0, 0.0, 1.0]], name='joint'),),
        (ImuMount(0), ImuMount(1)),
        floating_base=False,
    )


class JointSensors(object):
    """
    Position sensor and the two link gyros of the single-joint rig.

    Position and gyro noise are drawn from separate streams spawned from
    one seed, so equal seeds give equal readings whichever pipelines are
    fed.
    """

    def __init__(self, plant, seed=0, model=None):
        self.plant = plant
        self.model = single_joint_model() if model is None else model
        self.noise = NoiseConfig(
            gyro_noise_rad_s=plant.gyro_noise_rad_s,
            sample_rate_hz=plant.sample_rate_hz,
        )
        position_seed, gyro_seed = np.random.SeedSequence(seed).spawn(2)
        self._position_rng = np.random.default_rng(position_seed)
        self._gyro_rng = np.random.default_rng(gyro_seed)

    def read(self, theta, theta_dot, gyros=True):
        """
        Returns:
            (position reading, N×3 sensor-frame gyro readings or None)
        """
        position = theta + self.plant.position_noise_rad \
            * self._position_rng.standard_normal()
        if not gyros:
            return position, None
        # accelerometers are not read
        state = JointState([theta], [theta_dot], [0.0])
        samples = synthesize_imu(self.model, state, self.noise, None,
                                 self._gyro_rng)
        return position, gather(samples)


class VelocitySource(object):
    """Turns one sample of sensor readings into a velocity estimate."""
    tag = None
    uses_gyros = True

    def __init__(self, plant, model=None):
        self.plant = plant
        self.model = single_joint_model() if model is None else model

    def gyro_velocity(self, position, gyros):
        """Joint rate from the constrained solve over both link gyros."""
        report = joint_velocities_constrained(self.model, [position], gyros)
        return float(report.theta_dot[0])

    def update(self, position, gyros, accel_ref):
        raise NotImplementedError


class NumericSource(VelocitySource):
    tag = 'butterworth_numeric'
    uses_gyros = False

    def __init__(self, plant, model=None):
        super().__init__(plant, model)
        self.biquad = butterworth2_design(plant.cutoff_hz,
                                          plant.sample_rate_hz)
        self.previous = None

    def update(self, position, gyros, accel_ref):
        diff = 0.0 if self.previous is None \
            else (position - self.previous) * self.plant.sample_rate_hz
        self.previous = position
        return self.biquad.step(diff)


class GyroSource(VelocitySource):
    tag = 'gyro_direct'

    def update(self, position, gyros, accel_ref):
        return self.gyro_velocity(position, gyros)


class KalmanSource(VelocitySource):
    tag = 'kf_filtered'

    def __init__(self, plant, tuning=None, model=None):
        super().__init__(plant, model)
        self.tuning = tuning or KfTuning(
            joint_noise_rad=max(plant.position_noise_rad, 1e-6),
            gyro_noise_rad_s=max(plant.gyro_noise_rad_s, 1e-6),
            mode='desired',
        )
        # constant on this rig: the base is fixed and the axis is z
        self.velocity_cov = velocity_measurement_covariance(
            self.model, np.zeros(self.model.dof_count),
            self.tuning.gyro_noise_rad_s,
        )
        self.state = None

    def update(self, position, gyros, accel_ref):
        rate = self.gyro_velocity(position, gyros)
        if self.state is None:
            self.state = velocity_kf_init([position], [rate],
                                          tuning=self.tuning)
            return rate
        self.state = velocity_kf_step(
            self.state, [position], [rate], [accel_ref], self.plant.dt,
            velocity_cov=self.velocity_cov,
        )
        return float(self.state.theta_dot[0])


_SOURCE_TYPES = {cls.tag: cls for cls in (NumericSource, GyroSource,
                                          KalmanSource)}


def make_source(source, plant):
    if isinstance(source, VelocitySource):
        return source
    try:
        return _SOURCE_TYPES[source](plant)
    except KeyError:
        raise ValueError(
            f'unknown velocity source {source!r}, expected one of {SOURCES}'
        ) from None


def single_joint_trajectory(amplitude_rad, frequency_hz, duration_s,
                            phase_rad=0.0):
    return TrajectoryConfig.uniform(
        1, amplitude_rad, frequency_hz, duration_s=duration_s,
        phase_rad=phase_rad,
    )


def _rms(values):
    values = np.asarray(values)
    return float(np.sqrt(np.mean(values * values))) if values.size else 0.0


def run_tracking(plant, traj, gains, source='gyro_direct', duration_s=None,
                 seed=0, record=False, switch=None):
    """
    Closed-loop simulation of one joint tracking a sine.

    Args:
        plant(PlantConfig):
            surrogate plant and sensor settings
        traj(TrajectoryConfig):
            single-DoF reference
        gains:
            (P, D) pair
        source:
            velocity source tag or VelocitySource instance
        duration_s(float):
            run length, default traj.duration_s
        seed(int):
            noise seed; equal seeds give equal noise across sources
        record(bool):
            attach the time series to the result
        switch:
            optional (time_s, source, gains): from time_s on the loop
            takes its velocity from that source with that gain pair

    Returns:
        TrackingResult; RMS values cover whole reference periods after
        the transient. Instability ends the run early and is reported in
        the verdict.
    """
    p_gain, d_gain = (float(g) for g in gains)
    duration_s = traj.duration_s if duration_s is None else duration_s
    sources = [make_source(source, plant)]
    gain_pairs = [(p_gain, d_gain)]
    switch_step = None
    if switch is not None:
        switch_time_s, switch_source, switch_gains = switch
        sources.append(make_source(switch_source, plant))
        gain_pairs.append(tuple(float(g) for g in switch_gains))
        switch_step = int(round(switch_time_s * plant.sample_rate_hz))
    sensors = JointSensors(plant, seed)
    read_gyros = any(s.uses_gyros for s in sources)

    times = sample_times(duration_s, plant.sample_rate_hz)
    count = times.size
    ref, ref_dot, ref_ddot = (
        v[:, 0].tolist() for v in sine_values(
            traj.amplitude_rad, traj.frequency_hz, traj.phase_rad,
            traj.offset_rad, times,
        )
    )

    amplitude = float(abs(traj.amplitude_rad[0]))
    bound = max(10.0 * amplitude, plant.stability_floor_rad)
    dt = plant.dt
    h = dt / plant.substeps
    decay = math.exp(-h / plant.actuator_lag_s) \
        if plant.actuator_lag_s > 0 else 0.0
    inertia, damping = plant.inertia_kgm2, plant.damping_nms

    theta = ref[0]
    theta_dot = 0.0
    torque = 0.0
    active = 0
    pipeline = deque(maxlen=plant.delay_samples + 1)
    position_log, velocity_log, feedback_log = [], [], []
    stable = True
    for k in range(count):
        if not (math.isfinite(theta) and abs(theta - ref[k]) < bound):
            stable = False
            break
        if k == switch_step:
            active = 1
            logger.debug('switched to %s at step %d', sources[1].tag, k)
        position, gyros = sensors.read(theta, theta_dot, read_gyros)
        velocity = [
            s.update(position, gyros, ref_ddot[k]) for s in sources
        ][active]
        if not pipeline:
            pipeline.extend([(position, velocity)] * (plant.delay_samples + 1))
        else:
            pipeline.append((position, velocity))
        fb_position, fb_velocity = pipeline[0]
        command = pd_step(ref[k], ref_dot[k], fb_position, fb_velocity,
                          *gain_pairs[active], plant.torque_limit_nm)

        position_log.append(theta)
        velocity_log.append(theta_dot)
        feedback_log.append(velocity)

        for _ in range(plant.substeps):
            torque = command + (torque - command) * decay
            theta_dot += h * (torque - damping * theta_dot) / inertia
            theta += h * theta_dot

    steps = len(position_log)
    start = int(round(plant.transient_s * plant.sample_rate_hz))
    frequency = float(traj.frequency_hz[0])
    stop = steps
    if frequency > 0:
        periods = math.floor((duration_s - plant.transient_s) * frequency)
        if periods >= 1:
            stop = min(steps, start + int(round(
                periods / frequency * plant.sample_rate_hz)))
    window = slice(min(start, stop), stop)
    pos_error = np.subtract(ref[:steps], position_log)[window]
    vel_error = np.subtract(ref_dot[:steps], velocity_log)[window]

    series = None
    if record:
        series = pd.DataFrame({
            't_s': times[:steps],
            'theta_ref_rad': ref[:steps],
            'theta_rad': position_log,
            'theta_dot_ref_rad_s': ref_dot[:steps],
            'theta_dot_rad_s': velocity_log,
            'theta_dot_feedback_rad_s': feedback_log,
        })
    return TrackingResult(
        rms_position_rad=_rms(pos_error),
        rms_velocity_rad_s=_rms(vel_error),
        stable=stable,
        p_gain=p_gain,
        d_gain=d_gain,
        source=sources[0].tag,
        series=series,
        switch_source=None if switch is None else sources[1].tag,
    )


def feedback_velocity(plant, theta, theta_dot, accel_ref, source, seed=0):
    """
    Run a velocity source open loop over a recorded motion; returns the
    estimate sequence.
    """
    velocity_source = make_source(source, plant)
    sensors = JointSensors(plant, seed)
    estimates = []
    for t, v, a in zip(theta, theta_dot, accel_ref):
        position, gyros = sensors.read(t, v, velocity_source.uses_gyros)
        estimates.append(velocity_source.update(position, gyros, a))
    return np.array(estimates)


def feedback_lags(plant, traj, sources=SOURCES, max_lag=50, seed=0):
    """
    Delay in samples of each source's open-loop estimate behind the true
    rate of the reference motion.

    Returns:
        dict source → lag
    """
    times = sample_times(traj.duration_s, plant.sample_rate_hz)
    theta, theta_dot, theta_ddot = (
        v[:, 0] for v in sine_values(
            traj.amplitude_rad, traj.frequency_hz, traj.phase_rad,
            traj.offset_rad, times,
        )
    )
    return {
        source: estimate_lag(
            theta_dot,
            feedback_velocity(plant, theta, theta_dot, theta_ddot, source,
                              seed),
            max_lag,
        )
        for source in sources
    }


def find_gain_limit(plant, traj, axis, fixed_gain, source, lower, upper,
                    grid_points=16, duration_s=None, seed=0):
    """
    Largest stable gain on a geometric grid between lower and upper,
    found by bisection on the grid index.

    Args:
        axis(str):
            'P' sweeps the position gain with D = fixed_gain, 'D' the
            reverse

    Returns:
        float, a grid value
    """
    if axis not in ('P', 'D'):
        raise ValueError(f"axis must be 'P' or 'D', got {axis!r}")
    grid = np.geomspace(lower, upper, grid_points)

    def stable(index):
        gain = grid[index]
        gains = (gain, fixed_gain) if axis == 'P' else (fixed_gain, gain)
        result = run_tracking(plant, traj, gains, source, duration_s, seed)
        logger.debug('%s=%.4g with %s: stable=%s', axis, gain,
                     result.source, result.stable)
        return result.stable

    if not stable(0):
        raise NoStableGain(
            f'{axis} = {grid[0]:.4g} already unstable with {source}'
        )
    if stable(grid_points - 1):
        return float(grid[-1])
    good, bad = 0, grid_points - 1
    while bad - good > 1:
        middle = (good + bad) // 2
        if stable(middle):
            good = middle
        else:
            bad = middle
    return float(grid[good])


def run_scenarios(plant, scenarios=None, sources=SOURCES, duration_s=6.0,
                  seed=0, show_tqdm=False):
    """
    Every scenario with every source; one table row per run. A switching
    scenario starts from each source in turn and hands over to its
    switch_source.
    """
    scenarios = scenario_grid() if scenarios is None else scenarios
    rows = []
    jobs = [(s, src) for s in scenarios for src in sources]
    for scenario, source in tqdm(jobs, disable=not show_tqdm):
        traj = single_joint_trajectory(
            scenario.amplitude_rad, scenario.frequency_hz, duration_s
        )
        result = run_tracking(
            plant, traj, (scenario.p_gain, scenario.d_gain), source,
            duration_s, seed, switch=scenario.switch(),
        )
        row = {'scenario': scenario.name,
               'frequency_hz': scenario.frequency_hz}
        row.update(result.as_row())
        rows.append(row)
    return pd.DataFrame(rows)


def gain_limit_table(plant, traj, sweeps, sources=SOURCES, seed=0,
                     show_tqdm=False):
    """
    Args:
        sweeps:
            iterable of (axis, fixed_gain, lower, upper)

    Returns:
        DataFrame with one row per sweep and source.
    """
    rows = []
    jobs = [(sweep, src) for sweep in sweeps for src in sources]
    for (axis, fixed, lower, upper), source in tqdm(
            jobs, disable=not show_tqdm):
        try:
            limit = find_gain_limit(plant, traj, axis, fixed, source,
                                    lower, upper, seed=seed)
        except NoStableGain:
            limit = float('nan')
        rows.append({'axis': axis, 'fixed_gain': fixed, 'source': source,
                     'gain_limit': limit})
    return pd.DataFrame(rows)


def comparison_table(results):
    """
    Scenario × source pivot of RMS tracking errors and stability.
    """
    table = results.pivot_table(
        index='scenario',
        columns='source',
        values=['rms_position_rad', 'rms_velocity_rad_s'],
        aggfunc='mean',
        sort=False,
    )
    table.columns = [f'{value}:{source}' for value, source in table.columns]
    stable = results.groupby('scenario', sort=False)['stable'].all()
    table['all_stable'] = stable
    return table.reset_index()


def plot_tracking(series, title='Joint tracking'):
    """Reference, actual and feedback traces of a recorded run."""
    fig = go.Figure()
    fig.add_trace(go.Scatter(x=series['t_s'], y=series['theta_ref_rad'],
                             mode='lines', name='θ ref'))
    fig.add_trace(go.Scatter(x=series['t_s'], y=series['theta_rad'],
                             mode='lines', name='θ'))
    fig.add_trace(go.Scatter(x=series['t_s'],
                             y=series['theta_dot_feedback_rad_s'],
                             mode='lines', name='θ̇ feedback',
                             yaxis='y2'))
    fig.update_layout(
        title=title,
        xaxis_title='t [s]',
        yaxis=dict(title='position [rad]'),
        yaxis2=dict(title='velocity [rad/s]', overlaying='y', side='right'),
    )
    return fig
