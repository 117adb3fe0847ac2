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
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal
from tqdm import tqdm

from .chain_model import stacked_jacobian
from .errors import CovarianceDivergence, FilterStepError, InvalidCutoff
from .so3_math import (
    as_finite, orthonormalize, pseudo_inverse, rotation_exp, rotation_log,
)

logger = logging.getLogger(__name__)

ACCEL_MODES = ('desired', 'accelerometer', 'zero')


class Biquad(object):
    """
    Second-order IIR section

        H(z) = (b0 + b1 z⁻¹ + b2 z⁻²) / (1 + a1 z⁻¹ + a2 z⁻²)

    `step` runs it sample by sample (transposed direct form II, one pair
    of delay values per channel); `filter` runs a whole signal from rest.
    """

    def __init__(self, b0, b1, b2, a1, a2, sample_rate_hz=None):
        self.b = np.array([b0, b1, b2], dtype=float)
        self.a = np.array([1.0, a1, a2], dtype=float)
        self.sample_rate_hz = sample_rate_hz
        self._coefs = (float(b0), float(b1), float(b2),
                       float(a1), float(a2))
        self.reset()

    def reset(self):
        self.z1 = 0.0
        self.z2 = 0.0

    def step(self, x):
        """One sample; x may be a float or an array of channels."""
        b0, b1, b2, a1, a2 = self._coefs
        y = b0 * x + self.z1
        self.z1 = b1 * x - a1 * y + self.z2
        self.z2 = b2 * x - a2 * y
        return y

    def filter(self, x, axis=0):
        return signal.lfilter(self.b, self.a, x, axis=axis)

    def magnitude(self, frequency_hz):
        """|H| at the given frequencies (Hz)."""
        if self.sample_rate_hz is None:
            raise ValueError('sample_rate_hz is needed to evaluate |H(f)|')
        _, h = signal.freqz(
            self.b, self.a, worN=np.atleast_1d(frequency_hz),
            fs=self.sample_rate_hz,
        )
        return np.abs(h)

    @property
    def poles(self):
        return np.roots(self.a)

    def is_stable(self):
        return bool(np.all(np.abs(self.poles) < 1.0))

    @property
    def warmup_length(self):
        return 3 * max(len(self.a), len(self.b))


def butterworth2_design(cutoff_hz, sample_rate_hz):
    """
    Second-order Butterworth low-pass by bilinear transform with the
    cutoff pre-warped, K = tan(π f_c / f_s).
    """
    if not 0.0 < cutoff_hz < sample_rate_hz / 2.0:
        raise InvalidCutoff(
            f'cutoff {cutoff_hz} Hz outside (0, {sample_rate_hz / 2.0}) Hz'
        )
    k = np.tan(np.pi * cutoff_hz / sample_rate_hz)
    root2 = np.sqrt(2.0)
    norm = 1.0 / (1.0 + root2 * k + k * k)
    b0 = k * k * norm
    return Biquad(
        b0, 2.0 * b0, b0,
        2.0 * (k * k - 1.0) * norm,
        (1.0 - root2 * k + k * k) * norm,
        sample_rate_hz=sample_rate_hz,
    )


def _check_covariance(covariance, ceiling):
    variances = np.diag(covariance)
    if not np.all(np.isfinite(covariance)):
        raise CovarianceDivergence('covariance became non-finite')
    if np.any(variances > ceiling):
        raise CovarianceDivergence(
            f'variance {variances.max():.3e} exceeds ceiling {ceiling:.1e}'
        )


def _joseph_update(covariance, gain, h, noise):
    """Joseph-form covariance update, symmetrized."""
    i_kh = np.eye(covariance.shape[0]) - gain @ h
    updated = i_kh @ covariance @ i_kh.T + gain @ noise @ gain.T
    return 0.5 * (updated + updated.T)


def normalized_innovation(innovation, innovation_cov):
    """νᵀ S⁺ ν divided by the measurement dimension."""
    if innovation is None or innovation.size == 0:
        return float('nan')
    value = innovation @ pseudo_inverse(innovation_cov) @ innovation
    return float(value / innovation.size)


@dataclass(frozen=True)
class EkfTuning:
    joint_noise_rad: float = 1e-3
    gyro_noise_rad_s: float = 5e-3
    bias_walk_rad_s_sqrt_s: float = 1e-4
    initial_variance: float = 1e-2
    variance_ceiling: float = 1e6
    jacobian_step: float = 1e-6


@dataclass(frozen=True, eq=False)
class BiasEkfState:
    """
    State [θ; b] of the position and gyro-bias filter.

    For a floating base, theta[:3] is a local rotation vector δ about
    `base_reference`; it is folded back into the reference after every
    update, so the base attitude is base_reference·exp(δ).
    """
    theta: np.ndarray
    bias: np.ndarray
    covariance: np.ndarray
    base_reference: np.ndarray
    timestamp: float
    tuning: EkfTuning = field(default_factory=EkfTuning)
    innovation: np.ndarray = None
    innovation_cov: np.ndarray = None

    @property
    def mean(self):
        return np.concatenate([self.theta, self.bias])

    def global_theta(self, model):
        """θ with the base part as an absolute rotation vector."""
        theta = self.theta.copy()
        if model.floating_base:
            theta[:3] = rotation_log(
                self.base_reference @ rotation_exp(self.theta[:3])
            )
        return theta

    def link_biases(self):
        return self.bias.reshape(-1, 3)


def bias_ekf_init(model, theta, timestamp=0.0, bias=None,
                  tuning=EkfTuning()):
    """Filter state centred on θ with a diagonal initial covariance."""
    theta = np.array(as_finite(theta, 'theta'), dtype=float).reshape(-1)
    if theta.size != model.dof_count:
        raise ValueError(
            f'theta has {theta.size} entries, chain has {model.dof_count}'
        )
    reference = np.eye(3)
    if model.floating_base:
        reference = rotation_exp(theta[:3])
        theta[:3] = 0.0
    bias = np.zeros(3 * model.n_links) if bias is None \
        else np.asarray(bias, dtype=float).reshape(-1)
    size = theta.size + bias.size
    return BiasEkfState(
        theta=theta,
        bias=bias,
        covariance=tuning.initial_variance * np.eye(size),
        base_reference=reference,
        timestamp=float(timestamp),
        tuning=tuning,
    )


def bias_ekf_propagate(model, theta, bias, gyros, dt):
    """Euler step θ + dt·T_J(θ)⁺(ω̄ − b); returns (θ', T_J⁺)."""
    t_pinv = pseudo_inverse(stacked_jacobian(model, theta))
    rates = t_pinv @ (np.asarray(gyros).reshape(-1) - bias)
    return theta + dt * rates, t_pinv


def process_jacobian(model, theta, bias, gyros, dt, step=1e-6):
    """
    ∂(θ', b')/∂(θ, b) of the Euler process. The θ columns come from
    central differences; base-attitude columns are zero because T_J
    does not depend on the base orientation.
    """
    n = theta.size
    size = n + bias.size
    jac = np.eye(size)
    _, t_pinv = bias_ekf_propagate(model, theta, bias, gyros, dt)
    jac[:n, n:] = -dt * t_pinv
    for c in range(model.base_dof, n):
        offset = np.zeros(n)
        offset[c] = step
        plus, _ = bias_ekf_propagate(model, theta + offset, bias, gyros, dt)
        minus, _ = bias_ekf_propagate(model, theta - offset, bias, gyros, dt)
        jac[:n, c] = (plus - minus) / (2.0 * step)
    return jac


def bias_ekf_step(state, gyros, theta_meas, model, dt):
    """
    Predict over dt with the gyro rates at the state's time, then update
    with the joint (and base attitude) readings at the new time.

    Args:
        state(BiasEkfState):
            prior state
        gyros:
            N×3 link-frame gyro readings
        theta_meas:
            joint readings, base attitude as a rotation vector first
        model(ChainModel):
            chain description
        dt(float):
            step length in s

    Returns:
        BiasEkfState
    """
    if not dt > 0:
        raise ValueError(f'dt must be > 0, got {dt}')
    tuning = state.tuning
    gyros = as_finite(gyros, 'gyros').reshape(-1)
    theta_meas = as_finite(theta_meas, 'theta_meas').reshape(-1)
    n = state.theta.size
    m = state.bias.size

    # predict
    theta, t_pinv = bias_ekf_propagate(
        model, state.theta, state.bias, gyros, dt
    )
    jac = process_jacobian(
        model, state.theta, state.bias, gyros, dt, tuning.jacobian_step
    )
    noise = np.zeros((n + m, n + m))
    noise[:n, :n] = (dt * tuning.gyro_noise_rad_s) ** 2 * (t_pinv @ t_pinv.T)
    noise[n:, n:] = tuning.bias_walk_rad_s_sqrt_s ** 2 * dt * np.eye(m)
    covariance = jac @ state.covariance @ jac.T + noise

    # update, y = [I 0] x + v
    h = np.hstack([np.eye(n), np.zeros((n, m))])
    innovation = theta_meas - theta
    if model.floating_base:
        innovation[:3] = rotation_log(
            state.base_reference.T @ rotation_exp(theta_meas[:3])
        ) - theta[:3]
    meas_noise = tuning.joint_noise_rad ** 2 * np.eye(n)
    innovation_cov = covariance[:n, :n] + meas_noise
    gain = covariance[:, :n] @ pseudo_inverse(innovation_cov)
    x = np.concatenate([theta, state.bias]) + gain @ innovation
    covariance = _joseph_update(covariance, gain, h, meas_noise)
    _check_covariance(covariance, tuning.variance_ceiling)

    theta, bias = x[:n], x[n:]
    reference = state.base_reference
    if model.floating_base:
        reference = orthonormalize(reference @ rotation_exp(theta[:3]))
        theta = theta.copy()
        theta[:3] = 0.0
    return BiasEkfState(
        theta=theta,
        bias=bias,
        covariance=covariance,
        base_reference=reference,
        timestamp=state.timestamp + dt,
        tuning=tuning,
        innovation=innovation,
        innovation_cov=innovation_cov,
    )


@dataclass(frozen=True)
class KfTuning:
    """`velocity_noise_rad_s` None: propagate gyro noise through T_J."""
    joint_noise_rad: float = 1e-3
    gyro_noise_rad_s: float = 5e-3
    velocity_noise_rad_s: float = None
    accel_noise_rad_s2: float = 2.0
    initial_variance: float = 1e-2
    variance_ceiling: float = 1e6
    mode: str = 'desired'

    def __post_init__(self):
        if self.mode not in ACCEL_MODES:
            raise ValueError(
                f'mode must be one of {ACCEL_MODES}, got {self.mode!r}'
            )


@dataclass(frozen=True, eq=False)
class VelocityKfState:
    theta: np.ndarray
    theta_dot: np.ndarray
    covariance: np.ndarray
    timestamp: float
    tuning: KfTuning = field(default_factory=KfTuning)
    innovation: np.ndarray = None
    innovation_cov: np.ndarray = None

    @property
    def mode(self):
        return self.tuning.mode

    @property
    def mean(self):
        return np.concatenate([self.theta, self.theta_dot])


def velocity_kf_init(theta, theta_dot=None, timestamp=0.0,
                     tuning=KfTuning()):
    theta = np.array(as_finite(theta, 'theta'), dtype=float).reshape(-1)
    theta_dot = np.zeros_like(theta) if theta_dot is None \
        else np.array(theta_dot, dtype=float).reshape(-1)
    return VelocityKfState(
        theta=theta,
        theta_dot=theta_dot,
        covariance=tuning.initial_variance * np.eye(2 * theta.size),
        timestamp=float(timestamp),
        tuning=tuning,
    )


def velocity_measurement_covariance(model, theta, gyro_noise_rad_s):
    """
    Covariance of the joint-DoF velocities of the constrained gyro solve
    for white gyro noise: σ² (T_JᵀT_J)⁺, joint block.
    """
    jac = stacked_jacobian(model, theta)
    full = gyro_noise_rad_s ** 2 * pseudo_inverse(jac.T @ jac)
    return full[model.base_dof:, model.base_dof:]


def velocity_kf_step(state, theta_meas, theta_dot_meas, theta_ddot_input,
                     dt, velocity_cov=None):
    """
    Constant-acceleration prediction over dt followed by a full-state
    update with y = [θ; θ̇].

    Args:
        state(VelocityKfState):
            prior state
        theta_meas:
            joint position readings
        theta_dot_meas:
            gyro-derived joint velocities
        theta_ddot_input:
            acceleration driving the prediction; ignored in 'zero' mode
        dt(float):
            step length in s
        velocity_cov:
            covariance of theta_dot_meas; defaults to the tuning

    Returns:
        VelocityKfState
    """
    if not dt > 0:
        raise ValueError(f'dt must be > 0, got {dt}')
    tuning = state.tuning
    n = state.theta.size
    if tuning.mode == 'zero':
        accel = np.zeros(n)
    elif theta_ddot_input is None:
        raise ValueError(
            f"mode {tuning.mode!r} needs an acceleration input"
        )
    else:
        accel = as_finite(theta_ddot_input, 'theta_ddot_input').reshape(n)

    eye = np.eye(n)
    transition = np.block([[eye, dt * eye], [np.zeros((n, n)), eye]])
    g = np.array([0.5 * dt * dt, dt])
    x = transition @ state.mean + np.concatenate([g[0] * accel, g[1] * accel])
    noise = tuning.accel_noise_rad_s2 ** 2 * np.kron(np.outer(g, g), eye)
    covariance = transition @ state.covariance @ transition.T + noise

    if velocity_cov is None:
        sigma = tuning.velocity_noise_rad_s
        if sigma is None:
            sigma = tuning.gyro_noise_rad_s
        velocity_cov = sigma ** 2 * eye
    meas_noise = np.zeros((2 * n, 2 * n))
    meas_noise[:n, :n] = tuning.joint_noise_rad ** 2 * eye
    meas_noise[n:, n:] = velocity_cov
    y = np.concatenate([
        as_finite(theta_meas, 'theta_meas').reshape(n),
        as_finite(theta_dot_meas, 'theta_dot_meas').reshape(n),
    ])
    innovation = y - x
    innovation_cov = covariance + meas_noise
    gain = covariance @ pseudo_inverse(innovation_cov)
    x = x + gain @ innovation
    covariance = _joseph_update(covariance, gain, np.eye(2 * n), meas_noise)
    _check_covariance(covariance, tuning.variance_ceiling)
    return VelocityKfState(
        theta=x[:n],
        theta_dot=x[n:],
        covariance=covariance,
        timestamp=state.timestamp + dt,
        tuning=tuning,
        innovation=innovation,
        innovation_cov=innovation_cov,
    )


@dataclass(frozen=True, eq=False)
class FilterInput:
    """
    One timestep of filter input.

    gyros:            N×3 link-frame gyro readings (bias EKF)
    theta_meas:       joint readings (base attitude first for the EKF)
    theta_dot_meas:   gyro-derived joint velocities (velocity KF)
    theta_ddot_input: acceleration input (velocity KF)
    velocity_cov:     optional covariance of theta_dot_meas
    """
    timestamp: float
    theta_meas: np.ndarray
    gyros: np.ndarray = None
    theta_dot_meas: np.ndarray = None
    theta_ddot_input: np.ndarray = None
    velocity_cov: np.ndarray = None


def filter_stream(records, mode, config, model=None, initial=None,
                  show_tqdm=False):
    """
    Run a filter across a time-ordered list of FilterInput.

    Args:
        records:
            FilterInput sequence, timestamps increasing
        mode(str):
            'bias_ekf' or 'velocity_kf'
        config:
            EkfTuning or KfTuning
        model(ChainModel):
            required by the bias EKF
        initial:
            starting state; built from the first record when None
        show_tqdm(bool):
            progress bar

    Returns:
        list with one filter state per record. Step errors are re-raised
        as FilterStepError carrying the record index.
    """
    records = list(records)
    if not records:
        return []
    if mode not in ('bias_ekf', 'velocity_kf'):
        raise ValueError(f"mode must be 'bias_ekf' or 'velocity_kf', "
                         f"got {mode!r}")
    if mode == 'bias_ekf' and model is None:
        raise ValueError('the bias EKF needs a chain model')

    state = initial
    if state is None:
        first = records[0]
        if mode == 'bias_ekf':
            state = bias_ekf_init(
                model, first.theta_meas, first.timestamp, tuning=config
            )
        else:
            state = velocity_kf_init(
                first.theta_meas, first.theta_dot_meas, first.timestamp,
                tuning=config,
            )

    estimates = []
    previous = None
    for index, record in enumerate(tqdm(records, disable=not show_tqdm)):
        dt = record.timestamp - state.timestamp
        try:
            if dt == 0 and previous is None:
                pass
            elif mode == 'bias_ekf':
                gyros = record.gyros if previous is None else previous.gyros
                state = bias_ekf_step(
                    state, gyros, record.theta_meas, model, dt
                )
            else:
                state = velocity_kf_step(
                    state, record.theta_meas, record.theta_dot_meas,
                    record.theta_ddot_input, dt, record.velocity_cov,
                )
        except (ArithmeticError, ValueError) as error:
            raise FilterStepError(index, error) from error
        estimates.append(state)
        previous = record
    logger.debug('filtered %d records with %s', len(estimates), mode)
    return estimates


def estimate_lag(reference, estimate, max_lag):
    """
    Integer delay (samples) of `estimate` behind `reference`.

    The interior of the mean-removed reference, reference[max_lag:-max_lag],
    is correlated with every shift of the estimate within ±max_lag, so each
    candidate lag is scored over the same number of samples.
    """
    reference = as_finite(reference, 'reference').reshape(-1)
    estimate = as_finite(estimate, 'estimate').reshape(-1)
    max_lag = int(max_lag)
    if reference.size != estimate.size:
        raise ValueError(
            f'signals differ in length: {reference.size} != {estimate.size}'
        )
    if not 0 <= max_lag < reference.size // 2:
        raise ValueError(
            f'max_lag {max_lag} leaves no window in {reference.size} samples'
        )
    window = reference[max_lag:reference.size - max_lag]
    window = window - window.mean()
    scores = sliding_window_view(estimate, window.size) @ window
    return int(np.argmax(scores)) - max_lag
