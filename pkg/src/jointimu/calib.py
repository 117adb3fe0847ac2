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
IMU mounting calibration from a log recorded while the whole chain is
swung about with its joints locked, so that it moves as one rigid body.
The base IMU (link 0, slot 0) is the reference with a known pose.
"""

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import yaml
from scipy import signal

from .chain_model import forward_kinematics
from .errors import (
    IllConditionedWarning, LockedJointViolation, SignalTooShort,
)
from .fusion import butterworth2_design
from .so3_math import SvdSolver, as_finite, kabsch_fit, skew

logger = logging.getLogger(__name__)

REFERENCE = (0, 0)
CALIBRATION_FORMAT = 'jointimu-calibration v1'


@dataclass(frozen=True, eq=False)
class CalibrationLog:
    """
    times:  (M,) sample times, uniformly spaced
    gyro:   (link, slot) → (M, 3) sensor-frame gyro readings
    accel:  (link, slot) → (M, 3) sensor-frame accelerometer readings
    theta:  (M, DoF) joint-sensor readings
    """
    times: np.ndarray
    gyro: dict
    accel: dict
    theta: np.ndarray

    def __post_init__(self):
        times = as_finite(self.times, 'times').reshape(-1)
        object.__setattr__(self, 'times', times)
        object.__setattr__(
            self, 'theta',
            as_finite(self.theta, 'theta').reshape(times.size, -1),
        )
        for name in ('gyro', 'accel'):
            for key, value in getattr(self, name).items():
                if np.shape(value) != (times.size, 3):
                    raise ValueError(
                        f'{name}{key} has shape {np.shape(value)}, '
                        f'expected ({times.size}, 3)'
                    )

    @property
    def sample_count(self):
        return self.times.size

    @property
    def sample_rate_hz(self):
        return (self.times.size - 1) / (self.times[-1] - self.times[0])

    @classmethod
    def from_samples(cls, times, sample_lists, joint_readings):
        gyro, accel = {}, {}
        for samples in sample_lists:
            for s in samples:
                gyro.setdefault((s.link, s.slot), []).append(s.gyro)
                accel.setdefault((s.link, s.slot), []).append(s.accel)
        return cls(
            np.asarray(times),
            {k: np.asarray(v) for k, v in gyro.items()},
            {k: np.asarray(v) for k, v in accel.items()},
            np.asarray(joint_readings),
        )


@dataclass(frozen=True, eq=False)
class OrientationFit:
    rotation: np.ndarray
    residual: float
    excitation: float


@dataclass(frozen=True, eq=False)
class PositionFit:
    """Base-frame and link-frame IMU positions keyed by (link, slot)."""
    positions_base: dict
    positions_link: dict
    residuals: dict
    condition: float
    ill_conditioned: bool


@dataclass(frozen=True, eq=False)
class MountCalibration:
    """
    Calibrated IMU poses keyed by (link, slot). `rotations` map sensor
    readings into the link frame; positions are relative to the base IMU
    in the base frame, and absolute in the link frame.
    """
    rotations: dict
    positions_base: dict = field(default_factory=dict)
    positions_link: dict = field(default_factory=dict)
    orientation_residuals: dict = field(default_factory=dict)
    orientation_excitation: dict = field(default_factory=dict)
    position_residuals: dict = field(default_factory=dict)
    position_condition: float = None

    def rotation(self, link, slot=0):
        try:
            return self.rotations[(link, slot)]
        except KeyError:
            raise KeyError(
                f'no calibrated orientation for link {link}, slot {slot}'
            ) from None

    @classmethod
    def from_model(cls, model):
        """Calibration that simply restates the model's mount poses."""
        return cls(
            rotations={(m.link, m.slot): m.orientation for m in model.mounts},
            positions_link={
                (m.link, m.slot): m.position_m for m in model.mounts
            },
        )

    def apply_to(self, model):
        """Model whose mounts carry the calibrated poses."""
        mounts = []
        for mount in model.mounts:
            key = (mount.link, mount.slot)
            mounts.append(replace(
                mount,
                orientation=self.rotations.get(key, mount.orientation),
                position_m=self.positions_link.get(key, mount.position_m),
            ))
        return model.with_mounts(mounts)


def locked_configuration(log):
    return np.median(log.theta, axis=0)


def verify_locked(log, model, threshold_rad=1e-3, cutoff_hz=1.0):
    """
    Raise LockedJointViolation when any joint drifts by threshold_rad or
    more from its median over the log. Readings are low-passed first so
    that sensor noise alone does not trip the gate.
    """
    joints = log.theta[:, model.base_dof:]
    if joints.shape[1] == 0:
        return 0.0
    smooth = zero_delay_filter(joints, cutoff_hz, log.sample_rate_hz)
    motion = float(np.max(np.abs(smooth - np.median(joints, axis=0))))
    if motion >= threshold_rad:
        raise LockedJointViolation(motion, threshold_rad)
    return motion


def _check_log(log, model, min_samples):
    if log.sample_count < min_samples:
        raise SignalTooShort(
            f'calibration log has {log.sample_count} samples, '
            f'{min_samples} required'
        )
    verify_locked(log, model)


def _reference_omega(log, model):
    """Base angular velocity in the base frame from the reference IMU."""
    return log.gyro[REFERENCE] @ model.mount(*REFERENCE).orientation.T


def calibrate_orientation(log, model, link, slot=0, min_samples=200,
                          excitation_floor=1e-3):
    """
    Rotational correction of one IMU by orthogonal Procrustes.

    Rows ω̄ᵢ of the IMU are matched against the reference readings
    carried into link i, R_1^i ω̄_1; the Kabsch fit R̂ satisfies
    R̂ ω̄ᵢ ≈ R_1^i ω̄_1.

    Args:
        log(CalibrationLog):
            locked-joint log with startup gyro biases removed
        model(ChainModel):
            chain with the reference IMU pose
        link, slot(int):
            the IMU to calibrate
        min_samples(int):
            minimum log length
        excitation_floor(float):
            σ₂(AᵀB)/M below which an IllConditionedWarning is issued

    Returns:
        OrientationFit with residual ‖A R̂ᵀ − B‖_F / √M
    """
    _check_log(log, model, min_samples)
    orientations, _ = forward_kinematics(model, locked_configuration(log))
    a = log.gyro[(link, slot)]
    b = _reference_omega(log, model) @ orientations[link]
    rotation = kabsch_fit(a, b)
    m = log.sample_count
    excitation = float(np.linalg.svd(a.T @ b, compute_uv=False)[1] / m)
    if excitation < excitation_floor:
        warnings.warn(
            f'weak angular excitation for IMU {(link, slot)}: '
            f'σ₂/M = {excitation:.3e}',
            IllConditionedWarning,
            stacklevel=2,
        )
    residual = float(np.linalg.norm(a @ rotation.T - b) / np.sqrt(m))
    logger.info('IMU %s orientation residual %.3e', (link, slot), residual)
    return OrientationFit(rotation, residual, excitation)


def zero_delay_filter(x, cutoff_hz, sample_rate_hz):
    """
    Forward-backward second-order Butterworth low-pass along axis 0.
    """
    biquad = butterworth2_design(cutoff_hz, sample_rate_hz)
    x = np.asarray(x, dtype=float)
    if x.shape[0] < 6 * biquad.warmup_length:
        raise SignalTooShort(
            f'{x.shape[0]} samples, at least {6 * biquad.warmup_length} '
            f'needed for zero-delay filtering'
        )
    return signal.filtfilt(biquad.b, biquad.a, x, axis=0)


def numeric_angular_accel(omega, sample_rate_hz, cutoff_hz=25.0):
    """
    Angular acceleration by central differences (one-sided at both
    ends) of the zero-delay filtered rates; cutoff_hz None skips the
    filter.
    """
    omega = np.asarray(omega, dtype=float)
    if cutoff_hz is not None:
        omega = zero_delay_filter(omega, cutoff_hz, sample_rate_hz)
    return np.gradient(omega, 1.0 / sample_rate_hz, axis=0)


def position_system(omega, alpha):
    """Stacked [(ω×)² + α×] blocks, one 3×3 block per sample."""
    return np.concatenate([
        skew(w) @ skew(w) + skew(a) for w, a in zip(omega, alpha)
    ])


def calibrate_position(log, model, rotations, keys=None, cutoff_hz=25.0,
                       trim_s=0.25, min_samples=200,
                       condition_limit=1e4):
    """
    IMU positions from rigid-body accelerations:

        [(ω×)² + α×] r = R_i¹ R̂ᵢ āᵢ − ā₁

    stacked over the log, with ω, α of the base (α from filtered numeric
    differentiation). The stacked matrix is factorized once and every IMU
    is a separate right-hand side.

    Args:
        log(CalibrationLog):
            locked-joint log
        model(ChainModel):
            chain with the reference IMU pose
        rotations(dict):
            (link, slot) → calibrated orientation
        keys:
            IMUs to locate, default every key of `rotations` except the
            reference
        cutoff_hz(float):
            zero-delay filter cutoff
        trim_s(float):
            samples this close to either end are dropped (filter warm-up)
        min_samples(int):
            minimum log length
        condition_limit(float):
            condition number above which the solve is flagged

    Returns:
        PositionFit
    """
    _check_log(log, model, min_samples)
    fs = log.sample_rate_hz
    keys = [k for k in (keys or rotations) if k != REFERENCE]
    theta = locked_configuration(log)
    orientations, positions = forward_kinematics(model, theta)

    omega = zero_delay_filter(_reference_omega(log, model), cutoff_hz, fs)
    alpha = numeric_angular_accel(omega, fs, cutoff_hz=None)
    trim = int(round(trim_s * fs))
    keep = slice(trim, log.sample_count - trim)
    if keep.stop - keep.start < 3:
        raise SignalTooShort('nothing left after trimming the filter warm-up')

    lhs = position_system(omega[keep], alpha[keep])
    ref_accel = log.accel[REFERENCE] @ model.mount(*REFERENCE).orientation.T
    rhs = np.column_stack([
        (
            log.accel[key] @ (orientations[key[0]] @ rotations[key]).T
            - ref_accel
        )[keep].reshape(-1)
        for key in keys
    ]) if keys else np.zeros((lhs.shape[0], 0))

    solver = SvdSolver(lhs, condition_limit)
    solution = solver.solve(rhs)
    if solver.ill_conditioned:
        warnings.warn(
            f'position calibration condition number {solver.condition:.3e} '
            f'exceeds {condition_limit:.1e}; excite more angular motion',
            IllConditionedWarning,
            stacklevel=2,
        )
    reference_position = model.mount(*REFERENCE).position_m
    positions_base, positions_link, residuals = {}, {}, {}
    rows = lhs.shape[0]
    for column, key in enumerate(keys):
        r = solution[:, column]
        positions_base[key] = r
        positions_link[key] = orientations[key[0]].T \
            @ (reference_position + r - positions[key[0]])
        residuals[key] = float(
            np.linalg.norm(lhs @ r - rhs[:, column]) / np.sqrt(rows)
        )
    return PositionFit(
        positions_base, positions_link, residuals,
        solver.condition, solver.ill_conditioned,
    )


def calibrate(log, model, cutoff_hz=25.0, trim_s=0.25, min_samples=200):
    """Orientation then position calibration of every non-reference IMU."""
    reference = model.mount(*REFERENCE)
    rotations = {REFERENCE: reference.orientation}
    residuals, excitation = {}, {}
    for mount in model.mounts:
        key = (mount.link, mount.slot)
        if key == REFERENCE:
            continue
        fit = calibrate_orientation(log, model, *key, min_samples=min_samples)
        rotations[key] = fit.rotation
        residuals[key] = fit.residual
        excitation[key] = fit.excitation
    positions = calibrate_position(
        log, model, rotations, cutoff_hz=cutoff_hz, trim_s=trim_s,
        min_samples=min_samples,
    )
    positions_link = dict(positions.positions_link)
    positions_link[REFERENCE] = reference.position_m
    return MountCalibration(
        rotations=rotations,
        positions_base=positions.positions_base,
        positions_link=positions_link,
        orientation_residuals=residuals,
        orientation_excitation=excitation,
        position_residuals=positions.residuals,
        position_condition=positions.condition,
    )


def _key_name(key):
    return f'imu_{key[0]}_{key[1]}'


def _floats(values):
    return [float(v) for v in np.asarray(values).reshape(-1)]


def write_calibration(calibration, path):
    """YAML key-value file, rotations row-major."""
    imus = {}
    for key in sorted(calibration.rotations):
        entry = {'rotation': _floats(calibration.rotations[key])}
        if key in calibration.positions_base:
            entry['position_base_m'] = _floats(calibration.positions_base[key])
        if key in calibration.positions_link:
            entry['position_link_m'] = _floats(calibration.positions_link[key])
        if key in calibration.orientation_residuals:
            entry['orientation_residual_rad_s'] = \
                float(calibration.orientation_residuals[key])
            entry['orientation_excitation_rad2_s2'] = \
                float(calibration.orientation_excitation[key])
        if key in calibration.position_residuals:
            entry['position_residual_m_s2'] = \
                float(calibration.position_residuals[key])
        imus[_key_name(key)] = entry
    document = {
        'format': CALIBRATION_FORMAT,
        'position_condition': None if calibration.position_condition is None
        else float(calibration.position_condition),
        'imus': imus,
    }
    with open(path, 'w') as stream:
        yaml.safe_dump(document, stream, sort_keys=False)


def read_calibration(path):
    with open(path) as stream:
        document = yaml.safe_load(stream)
    if not isinstance(document, dict) \
            or document.get('format') != CALIBRATION_FORMAT:
        raise ValueError(f'{path} is not a {CALIBRATION_FORMAT} file')
    fields = {
        'rotations': {}, 'positions_base': {}, 'positions_link': {},
        'orientation_residuals': {}, 'orientation_excitation': {},
        'position_residuals': {},
    }
    for name, entry in document['imus'].items():
        _, link, slot = name.split('_')
        key = (int(link), int(slot))
        fields['rotations'][key] = np.array(entry['rotation']).reshape(3, 3)
        if 'position_base_m' in entry:
            fields['positions_base'][key] = np.array(entry['position_base_m'])
        if 'position_link_m' in entry:
            fields['positions_link'][key] = np.array(entry['position_link_m'])
        if 'orientation_residual_rad_s' in entry:
            fields['orientation_residuals'][key] = \
                entry['orientation_residual_rad_s']
            fields['orientation_excitation'][key] = \
                entry['orientation_excitation_rad2_s2']
        if 'position_residual_m_s2' in entry:
            fields['position_residuals'][key] = entry['position_residual_m_s2']
    return MountCalibration(
        position_condition=document.get('position_condition'), **fields
    )
