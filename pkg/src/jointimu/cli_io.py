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
Command-line entry point, experiment configuration and the log format
shared by the pipeline stages.

Log files are comma-separated text:

    # jointimu-log v1
    t_us,kind,index,slot,v0,v1,v2,v3,v4,v5,v6,v7,v8
    1000,imu,2,0,<gyro xyz>,<accel xyz>[,<true bias xyz>]
    1000,joint_pos,4,0,<reading>
    1000,truth,4,0,<θ>,<θ̇>,<θ̈>
    1000,estimate,4,0,<θ>,<θ̇>[,<θ̈>]
    1000,estimate,2,1,<gyro bias xyz of link 2>

Unused value cells are empty; numbers carry 17 significant digits.
"""

import argparse
import copy
import dataclasses
import logging
import re
import sys
import zlib
from dataclasses import dataclass

import numpy as np
import pandas as pd
import yaml

from . import calib, control_harness, estimator, fusion, imu_sim
from .chain_model import (
    ChainModel, ImuMount, JointSpec, example_leg, stacked_jacobian,
)
from .errors import (
    ConfigError, FormatVersionMismatch, JointImuError, MalformedLine,
    NonMonotoneTimestamp, SignalTooShort,
)
from .so3_math import as_finite, pseudo_inverse, rotation_exp

logger = logging.getLogger(__name__)

LOG_HEADER = '# jointimu-log v1'
VALUE_COLUMNS = [f'v{i}' for i in range(9)]
COLUMNS = ['t_us', 'kind', 'index', 'slot'] + VALUE_COLUMNS
FIELD_COUNTS = {
    'imu': (6, 9),
    'joint_pos': (1,),
    'truth': (3,),
    'estimate': (2, 3),
}
_FIELD_COUNT_TABLE = np.zeros((len(FIELD_COUNTS), 10), dtype=bool)
for _row, _counts in enumerate(FIELD_COUNTS.values()):
    _FIELD_COUNT_TABLE[_row, list(_counts)] = True
_KIND_ROW = {kind: row for row, kind in enumerate(FIELD_COUNTS)}


@dataclass(frozen=True)
class LogRecord:
    timestamp_us: int
    kind: str
    index: int
    slot: int
    values: tuple

    @property
    def timestamp(self):
        return self.timestamp_us * 1e-6


def to_microseconds(t):
    return int(round(t * 1e6))


class LogWriter(object):
    """
    Streaming writer; rows are buffered and appended in chunks.

    Usage:
        with LogWriter(path) as log:
            log.write(record)
    """

    def __init__(self, path, chunk_size=4096):
        self.path = path
        self.chunk_size = chunk_size
        self._rows = []
        self._last = None
        self._count = 0
        self._stream = open(path, 'w', newline='')
        self._stream.write(LOG_HEADER + '\n' + ','.join(COLUMNS) + '\n')

    def write(self, record):
        counts = FIELD_COUNTS.get(record.kind)
        if counts is None or len(record.values) not in counts:
            raise ValueError(
                f'{record.kind!r} record with {len(record.values)} values'
            )
        if self._last is not None and record.timestamp_us < self._last:
            raise NonMonotoneTimestamp(self._count + 3)
        values = [float(v) for v in record.values]
        as_finite(values, record.kind)
        self._last = record.timestamp_us
        self._count += 1
        self._rows.append(
            [int(record.timestamp_us), record.kind, int(record.index),
             int(record.slot)] + values + [None] * (9 - len(values))
        )
        if len(self._rows) >= self.chunk_size:
            self.flush()

    def flush(self):
        if not self._rows:
            return
        frame = pd.DataFrame(self._rows, columns=COLUMNS)
        frame[VALUE_COLUMNS] = frame[VALUE_COLUMNS].astype('float64')
        frame.to_csv(self._stream, header=False, index=False,
                     float_format='%.17g', na_rep='')
        self._rows = []

    def close(self):
        if not self._stream.closed:
            self.flush()
            self._stream.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_log(path, records):
    with LogWriter(path) as log:
        for record in records:
            log.write(record)


def _locate_bad_line(path):
    """Slow scan used only to attach a line number to a parse failure."""
    with open(path) as stream:
        for line_no, line in enumerate(stream, start=1):
            if line_no <= 2:
                continue
            cells = line.rstrip('\n').split(',')
            if len(cells) != len(COLUMNS):
                return line_no, f'expected {len(COLUMNS)} fields'
            for cell in cells[4:]:
                if cell:
                    try:
                        float(cell)
                    except ValueError:
                        return line_no, f'bad number {cell!r}'
    return 0, 'unreadable log'


def _first_bad(mask):
    hits = np.flatnonzero(mask)
    return int(hits[0]) if hits.size else None


def _check_chunk(chunk, first_line, last_timestamp):
    """Validate one parsed chunk; returns (t_us, kind, index, slot, values)."""
    integer = re.compile(r'[+-]?\d+')
    bad = np.zeros(len(chunk), dtype=bool)
    reasons = np.full(len(chunk), '', dtype=object)
    for name in ('t_us', 'index', 'slot'):
        wrong = ~chunk[name].str.fullmatch(integer).fillna(False).to_numpy()
        reasons[wrong & ~bad] = f'{name} is not an integer'
        bad |= wrong
    kinds = chunk['kind'].to_numpy()
    unknown = ~np.isin(kinds, list(FIELD_COUNTS))
    reasons[unknown & ~bad] = 'unknown record kind'
    bad |= unknown

    values = chunk[VALUE_COLUMNS].to_numpy(dtype=float)
    present = ~np.isnan(values)
    counts = present.sum(axis=1)
    gaps = np.any(present[:, 1:] & ~present[:, :-1], axis=1)
    rows = np.array([_KIND_ROW.get(k, 0) for k in kinds])
    wrong = gaps | ~_FIELD_COUNT_TABLE[rows, counts]
    reasons[wrong & ~bad] = 'wrong field count for record kind'
    bad |= wrong
    nonfinite = np.any(np.isinf(values), axis=1)
    reasons[nonfinite & ~bad] = 'non-finite value'
    bad |= nonfinite

    row = _first_bad(bad)
    if row is not None:
        raise MalformedLine(first_line + row, reasons[row])

    t_us = chunk['t_us'].astype('int64').to_numpy()
    previous = np.concatenate([
        [t_us[0] if last_timestamp is None else last_timestamp], t_us[:-1]
    ])
    row = _first_bad(t_us < previous)
    if row is not None:
        raise NonMonotoneTimestamp(first_line + row)
    return (
        t_us, kinds,
        chunk['index'].astype('int64').to_numpy(),
        chunk['slot'].astype('int64').to_numpy(),
        values, counts,
    )


def parse_log(path, chunk_size=4096):
    """
    Stream LogRecord values from a log file in constant memory.

    Raises FormatVersionMismatch for a missing or unknown header,
    MalformedLine and NonMonotoneTimestamp with 1-based file line
    numbers.
    """
    with open(path, newline='') as stream:
        header = stream.readline().rstrip('\r\n')
        if header != LOG_HEADER:
            raise FormatVersionMismatch(
                f'{path}: expected header {LOG_HEADER!r}, found {header!r}'
            )
        try:
            reader = pd.read_csv(
                stream,
                dtype={**{c: str for c in COLUMNS[:4]},
                       **{c: 'float64' for c in VALUE_COLUMNS}},
                keep_default_na=False,
                na_values={c: [''] for c in VALUE_COLUMNS},
                float_precision='round_trip',
                chunksize=chunk_size,
            )
        except pd.errors.EmptyDataError:
            return
        line = 3
        last = None
        with reader:
            while True:
                try:
                    chunk = next(reader)
                except StopIteration:
                    break
                except pd.errors.ParserError as error:
                    found = re.search(r'line (\d+)', str(error))
                    if found:
                        raise MalformedLine(
                            int(found.group(1)) + 1, 'wrong number of fields'
                        ) from None
                    raise MalformedLine(*_locate_bad_line(path)) from None
                except ValueError:
                    raise MalformedLine(*_locate_bad_line(path)) from None
                if list(chunk.columns) != COLUMNS:
                    raise MalformedLine(2, 'unexpected column names')
                if chunk.empty:
                    continue
                t_us, kinds, index, slot, values, counts = \
                    _check_chunk(chunk, line, last)
                for i in range(len(chunk)):
                    yield LogRecord(
                        int(t_us[i]), kinds[i], int(index[i]),
                        int(slot[i]), tuple(values[i, :counts[i]].tolist()),
                    )
                last = int(t_us[-1])
                line += len(chunk)


def group_steps(records):
    """Consecutive records sharing a timestamp, as (t_us, list)."""
    group, stamp = [], None
    for record in records:
        if stamp is not None and record.timestamp_us != stamp:
            yield stamp, group
            group = []
        stamp = record.timestamp_us
        group.append(record)
    if group:
        yield stamp, group


@dataclass(frozen=True, eq=False)
class StepData:
    """One timestep of a log in array form."""
    timestamp: float
    gyro: dict
    accel: dict
    theta: np.ndarray
    truth: np.ndarray

    def gyros(self, model, slot=0):
        return np.array([self.gyro[(link, slot)]
                         for link in range(model.n_links)])

    @property
    def has_truth(self):
        return not np.isnan(self.truth).any()


def read_steps(path, model):
    """Stream StepData from a log written by `simulate`."""
    for stamp, group in group_steps(parse_log(path)):
        gyro, accel = {}, {}
        theta = np.full(model.dof_count, np.nan)
        truth = np.full((model.dof_count, 3), np.nan)
        for record in group:
            if record.kind == 'imu':
                key = (record.index, record.slot)
                gyro[key] = np.array(record.values[:3])
                accel[key] = np.array(record.values[3:6])
            elif record.kind == 'joint_pos':
                theta[record.index] = record.values[0]
            elif record.kind == 'truth':
                truth[record.index] = record.values
        yield StepData(stamp * 1e-6, gyro, accel, theta, truth)


def simulation_records(model, result, with_bias):
    for t, state, samples, reading in zip(
            result.times, result.states, result.samples,
            result.joint_readings):
        stamp = to_microseconds(t)
        for s in samples:
            values = tuple(s.gyro) + tuple(s.accel)
            if with_bias:
                values += tuple(s.bias)
            yield LogRecord(stamp, 'imu', s.link, s.slot, values)
        for i in range(model.dof_count):
            yield LogRecord(stamp, 'joint_pos', i, 0, (reading[i],))
        for i in range(model.dof_count):
            yield LogRecord(stamp, 'truth', i, 0, (
                state.theta[i], state.theta_dot[i], state.theta_ddot[i]
            ))


# configuration ---------------------------------------------------------------

def _field_names(cls, drop=()):
    return {f.name for f in dataclasses.fields(cls)} - set(drop)


_SCHEMA = {
    '': {'seed', 'chain', 'noise', 'trajectory', 'calibration', 'filter',
         'control'},
    'chain': {'preset', 'floating_base', 'second_imus', 'joints',
              'imus'},
    'chain.joints': {'name', 'axes', 'origin_m', 'mount_rotvec_rad'},
    'chain.imus': {'link', 'slot', 'position_m', 'orientation_rotvec_rad'},
    'noise': _field_names(imu_sim.NoiseConfig, drop=('seed',)),
    'trajectory': {'duration_s', 'amplitude_rad', 'frequency_hz',
                   'phase_rad', 'offset_rad', 'base'},
    'trajectory.base': {'kind', 'amplitude_rad', 'frequency_hz',
                        'phase_rad', 'offset_rad'},
    'calibration': {'duration_s', 'cutoff_hz', 'trim_s', 'min_samples'},
    'filter': {'ekf', 'kf'},
    'filter.ekf': _field_names(fusion.EkfTuning),
    'filter.kf': _field_names(fusion.KfTuning),
    'control': {'duration_s', 'plant', 'scenarios', 'sweeps'},
    'control.plant': _field_names(control_harness.PlantConfig),
    'control.scenarios': _field_names(control_harness.Scenario),
    'control.sweeps': {'axis', 'fixed_gain', 'lower', 'upper'},
}

DEFAULT_CONFIG = {
    'seed': 0,
    'chain': {'preset': 'leg7', 'floating_base': True},
    'noise': {'sample_rate_hz': 1000.0},
    'trajectory': {
        'duration_s': 10.0,
        'amplitude_rad': 0.25,
        'frequency_hz': 0.5,
        'phase_rad': 0.0,
        'offset_rad': 0.0,
        'base': {
            'kind': 'sine',
            'amplitude_rad': [0.3, 0.2, 0.2],
            'frequency_hz': [0.3, 0.4, 0.5],
        },
    },
    'calibration': {
        'duration_s': 20.0,
        'cutoff_hz': 25.0,
        'trim_s': 0.25,
        'min_samples': 200,
    },
    'filter': {'ekf': {}, 'kf': {}},
    'control': {
        'duration_s': 6.0,
        'plant': {},
        'scenarios': None,
        'sweeps': [
            {'axis': 'P', 'fixed_gain': 12.0, 'lower': 50.0,
             'upper': 5000.0},
            {'axis': 'D', 'fixed_gain': 250.0, 'lower': 5.0,
             'upper': 600.0},
        ],
    },
}


@dataclass(frozen=True)
class CalibrationSettings:
    duration_s: float = 20.0
    cutoff_hz: float = 25.0
    trim_s: float = 0.25
    min_samples: int = 200


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    model: ChainModel
    noise: imu_sim.NoiseConfig
    trajectory: imu_sim.TrajectoryConfig
    calibration: CalibrationSettings
    ekf: fusion.EkfTuning
    kf: fusion.KfTuning
    plant: control_harness.PlantConfig
    scenarios: list
    sweeps: list
    control_duration_s: float
    seed: int


def deep_merge(base, override):
    merged = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _check_keys(section, path):
    if section is None:
        return
    if isinstance(section, list):
        for item in section:
            _check_keys(item, path)
        return
    if not isinstance(section, dict):
        raise ConfigError(f'{path or "config"} must be a mapping')
    allowed = _SCHEMA[path]
    for key, value in section.items():
        if key not in allowed:
            raise ConfigError(
                f'unknown key {(path + "." if path else "") + key!r}; '
                f'expected one of {sorted(allowed)} (units go in key names, '
                f'e.g. cutoff_hz)'
            )
        child = f'{path}.{key}' if path else key
        if child in _SCHEMA:
            _check_keys(value, child)


def _build_chain(section):
    floating = bool(section.get('floating_base', True))
    if 'joints' not in section:
        preset = section.get('preset', 'leg7')
        if preset != 'leg7':
            raise ConfigError(f'unknown chain preset {preset!r}')
        return example_leg(
            floating_base=floating,
            second_imus=bool(section.get('second_imus', False)),
        )
    joints = [
        JointSpec(
            axes=j['axes'],
            mount_rotation=rotation_exp(j.get('mount_rotvec_rad', [0, 0, 0])),
            origin_m=j.get('origin_m', [0, 0, 0]),
            name=j.get('name', f'joint{i + 1}'),
        )
        for i, j in enumerate(section['joints'])
    ]
    mounts = [
        ImuMount(
            link=int(m['link']),
            position_m=m.get('position_m', [0, 0, 0]),
            orientation=rotation_exp(
                m.get('orientation_rotvec_rad', [0, 0, 0])),
            slot=int(m.get('slot', 0)),
        )
        for m in section.get('imus', [])
    ]
    return ChainModel(tuple(joints), tuple(mounts), floating)


def _per_dof(value, n, name):
    array = np.atleast_1d(np.asarray(value, dtype=float))
    if array.size not in (1, n):
        raise ConfigError(
            f'trajectory.{name} has {array.size} entries for {n} joint DoF'
        )
    return np.broadcast_to(array, (n,)).copy()


def build_config(raw):
    """ExperimentConfig from a merged configuration mapping."""
    _check_keys(raw, '')
    try:
        model = _build_chain(raw['chain'])
        for link in range(model.n_links):
            if not model.has_mount(link, 0):
                raise ConfigError(f'link {link} has no IMU in slot 0')
        seed = int(raw['seed'])
        noise = imu_sim.NoiseConfig(seed=seed, **raw['noise'])
        traj = dict(raw['trajectory'])
        n = model.joint_dof_count
        base = traj.pop('base', None)
        if model.floating_base:
            base = imu_sim.BaseMotion(**(base or {}))
        elif base and base.get('kind', 'fixed') != 'fixed':
            raise ConfigError('a fixed-base chain cannot follow a base motion')
        else:
            base = None
        trajectory = imu_sim.TrajectoryConfig(
            amplitude_rad=_per_dof(traj['amplitude_rad'], n, 'amplitude_rad'),
            frequency_hz=_per_dof(traj['frequency_hz'], n, 'frequency_hz'),
            phase_rad=_per_dof(traj.get('phase_rad', 0.0), n, 'phase_rad'),
            offset_rad=_per_dof(traj.get('offset_rad', 0.0), n, 'offset_rad'),
            base=base,
            duration_s=float(traj['duration_s']),
        )
        control = raw['control']
        scenarios = control_harness.scenario_grid() \
            if control.get('scenarios') is None else [
                control_harness.Scenario(**s) for s in control['scenarios']
            ]
        sweeps = [(s['axis'], float(s['fixed_gain']), float(s['lower']),
                   float(s['upper'])) for s in control.get('sweeps') or []]
        return ExperimentConfig(
            model=model,
            noise=noise,
            trajectory=trajectory,
            calibration=CalibrationSettings(**raw['calibration']),
            ekf=fusion.EkfTuning(**raw['filter']['ekf']),
            kf=fusion.KfTuning(**raw['filter']['kf']),
            plant=control_harness.PlantConfig(**control['plant']),
            scenarios=scenarios,
            sweeps=sweeps,
            control_duration_s=float(control['duration_s']),
            seed=seed,
        )
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as error:
        raise ConfigError(f'invalid configuration: {error}') from error


def load_config(path=None, overrides=None):
    """
    Args:
        path:
            YAML file merged over DEFAULT_CONFIG; defaults only when None
        overrides(dict):
            merged last, e.g. a seed from the command line

    Returns:
        ExperimentConfig
    """
    raw = {}
    if path is not None:
        with open(path) as stream:
            raw = yaml.safe_load(stream) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f'{path}: top level must be a mapping')
    return build_config(deep_merge(deep_merge(DEFAULT_CONFIG, raw),
                                   overrides))


def rng_for(seed, *names):
    """
    Independent generator for a named stream; names are hashed with
    CRC-32 into the SeedSequence spawn key.
    """
    key = tuple(zlib.crc32(name.encode('utf-8')) for name in names)
    return np.random.default_rng(
        np.random.SeedSequence(int(seed), spawn_key=key)
    )


# subcommands ----------------------------------------------------------------

def _emit(name, value):
    print(f'{name}\t{value:.6e}')


def _config(args):
    overrides = None if args.seed is None else {'seed': args.seed}
    return load_config(args.config, overrides)


def _estimation_model(cfg, args):
    """Model and corrections used by the estimators."""
    if getattr(args, 'calibration', None):
        calibration = calib.read_calibration(args.calibration)
        model = calibration.apply_to(cfg.model.nominal())
        return model, calibration
    return cfg.model, None


def cmd_simulate(args):
    cfg = _config(args)
    mode = args.mode or 'trajectory'
    noise = cfg.noise
    if mode == 'trajectory':
        motion = cfg.trajectory
    elif mode == 'calibration':
        if not cfg.model.floating_base:
            raise ValueError('a calibration tumble needs a floating base')
        motion = imu_sim.calibration_trajectory(
            cfg.model, cfg.calibration.duration_s,
            rng_for(cfg.seed, 'calibration', 'motion'),
        )
        # startup gyro biases are removed before calibration
        noise = dataclasses.replace(noise, initial_bias_rad_s=0.0)
    else:
        raise ValueError(f"--mode must be 'trajectory' or 'calibration', "
                         f"got {mode!r}")
    result = imu_sim.simulate_stream(
        cfg.model, motion, noise, rng_for(cfg.seed, 'simulate', mode),
        show_tqdm=args.verbose,
    )
    with_bias = noise.initial_bias_rad_s > 0 \
        or noise.gyro_bias_walk_rad_s_sqrt_s > 0
    write_log(args.output, simulation_records(cfg.model, result, with_bias))
    logger.info('wrote %d steps to %s', len(result.times), args.output)
    return 0


def _calibration_log(path, model):
    times, theta, gyro, accel = [], [], {}, {}
    for step in read_steps(path, model):
        times.append(step.timestamp)
        theta.append(step.theta)
        for key, value in step.gyro.items():
            gyro.setdefault(key, []).append(value)
        for key, value in step.accel.items():
            accel.setdefault(key, []).append(value)
    return calib.CalibrationLog(
        np.asarray(times),
        {k: np.asarray(v) for k, v in gyro.items()},
        {k: np.asarray(v) for k, v in accel.items()},
        np.asarray(theta),
    )


def cmd_calibrate_orientation(args):
    cfg = _config(args)
    log = _calibration_log(args.input, cfg.model)
    reference = cfg.model.mount(*calib.REFERENCE)
    rotations = {calib.REFERENCE: reference.orientation}
    residuals, excitation = {}, {}
    for mount in cfg.model.mounts:
        key = (mount.link, mount.slot)
        if key == calib.REFERENCE:
            continue
        fit = calib.calibrate_orientation(
            log, cfg.model, *key, min_samples=cfg.calibration.min_samples
        )
        rotations[key] = fit.rotation
        residuals[key] = fit.residual
        excitation[key] = fit.excitation
        _emit(f'orientation_residual_imu_{key[0]}_{key[1]}', fit.residual)
    calib.write_calibration(calib.MountCalibration(
        rotations=rotations,
        orientation_residuals=residuals,
        orientation_excitation=excitation,
    ), args.output)
    return 0


def cmd_calibrate_position(args):
    cfg = _config(args)
    if not args.calibration:
        raise ValueError('calibrate-position needs --calibration with the '
                         'orientation result')
    orientation = calib.read_calibration(args.calibration)
    log = _calibration_log(args.input, cfg.model)
    fit = calib.calibrate_position(
        log, cfg.model, orientation.rotations,
        cutoff_hz=cfg.calibration.cutoff_hz,
        trim_s=cfg.calibration.trim_s,
        min_samples=cfg.calibration.min_samples,
    )
    positions_link = dict(fit.positions_link)
    positions_link[calib.REFERENCE] = \
        cfg.model.mount(*calib.REFERENCE).position_m
    calib.write_calibration(dataclasses.replace(
        orientation,
        positions_base=fit.positions_base,
        positions_link=positions_link,
        position_residuals=fit.residuals,
        position_condition=fit.condition,
    ), args.output)
    _emit('position_condition', fit.condition)
    return 0


def _velocity(model, step, corrections, method):
    solve = estimator.joint_velocities_constrained if method == 'constrained' \
        else estimator.joint_velocities_unconstrained
    return solve(model, step.theta, step.gyros(model), corrections)


def cmd_estimate_velocity(args):
    cfg = _config(args)
    method = args.mode or 'constrained'
    if method not in ('constrained', 'unconstrained'):
        raise ValueError(f"--mode must be 'constrained' or 'unconstrained', "
                         f"got {method!r}")
    model, corrections = _estimation_model(cfg, args)
    worst = 0.0
    with LogWriter(args.output) as out:
        for step in read_steps(args.input, model):
            report = _velocity(model, step, corrections, method)
            stamp = to_microseconds(step.timestamp)
            for i in range(model.dof_count):
                out.write(LogRecord(stamp, 'estimate', i, 0, (
                    step.theta[i], report.theta_dot[i]
                )))
            if step.has_truth:
                worst = max(worst, float(np.max(
                    np.abs(report.theta_dot - step.truth[:, 1])
                )))
    _emit('max_velocity_error_rad_s', worst)
    return 0


def _base_alphas(path, model, corrections, cfg):
    """
    Numerically differentiated base angular acceleration per step.

    Rows within cfg.calibration.trim_s of either end of the log carry
    filter start-up transients and are NaN, as is every row of a log too
    short to filter. None for a fixed base.
    """
    if not model.floating_base:
        return None
    omega = np.array([
        estimator.link_frame_readings(model, step.gyros(model),
                                      corrections)[0]
        for step in read_steps(path, model)
    ]).reshape(-1, 3)
    rate = cfg.noise.sample_rate_hz
    count = omega.shape[0]
    trim = int(round(cfg.calibration.trim_s * rate))
    alphas = np.full((count, 3), np.nan)
    smooth = None
    if count > max(2 * trim, 2):
        try:
            smooth = calib.numeric_angular_accel(omega, rate,
                                                 cfg.calibration.cutoff_hz)
        except SignalTooShort:
            pass
    if smooth is None:
        if count:
            logger.warning(
                'log of %d steps is too short for base angular '
                'acceleration; joint accelerations are not reported', count
            )
        return alphas
    alphas[trim:count - trim] = smooth[trim:count - trim]
    return alphas


def _accelerations(model, step, corrections, velocity, base_alpha):
    """
    Joint-DoF accelerations from the accelerometers, NaN where unknown.
    A NaN base_alpha leaves every DoF unknown.
    """
    q_ddot = np.full(model.dof_count, np.nan)
    if base_alpha is not None and not np.all(np.isfinite(base_alpha)):
        return q_ddot
    accels = {}
    for key, value in step.accel.items():
        rotation = corrections.rotation(*key) if corrections is not None \
            else model.mount(*key).orientation
        accels[key] = rotation @ value
    reports = estimator.joint_accelerations(
        model, step.theta, velocity, accels, base_alpha
    )
    if base_alpha is not None:
        q_ddot[:3] = base_alpha
    for link, report in reports.items():
        sl = model.dof_slice(link)
        q_ddot[sl] = estimator.dof_accelerations(
            model.joint(link), step.theta[sl], velocity.theta_dot[sl],
            report.theta_ddot,
        )
    return q_ddot


def cmd_estimate_acceleration(args):
    cfg = _config(args)
    model, corrections = _estimation_model(cfg, args)
    alphas = _base_alphas(args.input, model, corrections, cfg)
    worst, reported = 0.0, 0
    with LogWriter(args.output) as out:
        for k, step in enumerate(read_steps(args.input, model)):
            velocity = _velocity(model, step, corrections, 'constrained')
            q_ddot = _accelerations(
                model, step, corrections, velocity,
                None if alphas is None else alphas[k],
            )
            stamp = to_microseconds(step.timestamp)
            for i in np.flatnonzero(~np.isnan(q_ddot)):
                out.write(LogRecord(stamp, 'estimate', int(i), 0, (
                    step.theta[i], velocity.theta_dot[i], q_ddot[i]
                )))
            joints = slice(model.base_dof, None)
            reported += int(np.any(~np.isnan(q_ddot)))
            known = ~np.isnan(q_ddot[joints])
            if step.has_truth and known.any():
                error = q_ddot[joints][known] - step.truth[joints, 2][known]
                worst = max(worst, float(np.max(np.abs(error))))
    _emit('max_acceleration_error_rad_s2', worst)
    _emit('acceleration_steps', reported)
    return 0


def _filter_inputs(args, cfg, model, corrections, mode):
    accel_mode = cfg.kf.mode
    alphas = None
    if mode == 'velocity_kf' and accel_mode == 'accelerometer':
        alphas = _base_alphas(args.input, model, corrections, cfg)
    joints = slice(model.base_dof, None)
    for k, step in enumerate(read_steps(args.input, model)):
        gyros = estimator.link_frame_readings(
            model, step.gyros(model), corrections)
        if mode == 'bias_ekf':
            yield step, fusion.FilterInput(step.timestamp, step.theta, gyros)
            continue
        velocity = _velocity(model, step, corrections, 'constrained')
        if accel_mode == 'desired':
            if not step.has_truth:
                raise ValueError('desired-acceleration mode needs the '
                                 'reference (truth) records in the log')
            accel = step.truth[joints, 2]
        elif accel_mode == 'accelerometer':
            accel = np.nan_to_num(_accelerations(
                model, step, corrections, velocity,
                None if alphas is None else alphas[k],
            )[joints])
        else:
            accel = None
        cov = None
        if cfg.kf.velocity_noise_rad_s is None:
            cov = fusion.velocity_measurement_covariance(
                model, step.theta, cfg.kf.gyro_noise_rad_s)
        yield step, fusion.FilterInput(
            step.timestamp, step.theta[joints], gyros,
            velocity.theta_dot[joints], accel, cov,
        )


def cmd_filter(args):
    cfg = _config(args)
    mode = args.mode or 'bias_ekf'
    if mode not in ('bias_ekf', 'velocity_kf'):
        raise ValueError(f"--mode must be 'bias_ekf' or 'velocity_kf', "
                         f"got {mode!r}")
    model, corrections = _estimation_model(cfg, args)
    pairs = list(_filter_inputs(args, cfg, model, corrections, mode))
    steps = [p[0] for p in pairs]
    inputs = [p[1] for p in pairs]
    states = fusion.filter_stream(
        inputs, mode, cfg.ekf if mode == 'bias_ekf' else cfg.kf, model,
        show_tqdm=args.verbose,
    )
    worst = 0.0
    with LogWriter(args.output) as out:
        for step, record, state in zip(steps, inputs, states):
            stamp = to_microseconds(step.timestamp)
            if mode == 'bias_ekf':
                theta = state.global_theta(model)
                rates = pseudo_inverse(
                    stacked_jacobian(model, theta)
                ) @ (record.gyros.reshape(-1) - state.bias)
                for i in range(model.dof_count):
                    out.write(LogRecord(stamp, 'estimate', i, 0,
                                        (theta[i], rates[i])))
                for link, bias in enumerate(state.link_biases()):
                    out.write(LogRecord(stamp, 'estimate', link, 1,
                                        tuple(bias)))
                reference = step.truth[:, 1]
            else:
                rates = state.theta_dot
                for j in range(rates.size):
                    out.write(LogRecord(
                        stamp, 'estimate', model.base_dof + j, 0,
                        (state.theta[j], rates[j]),
                    ))
                reference = step.truth[model.base_dof:, 1]
            if step.has_truth:
                worst = max(worst, float(np.max(np.abs(rates - reference))))
    _emit('max_velocity_error_rad_s', worst)
    return 0


def cmd_control_experiment(args):
    cfg = _config(args)
    mode = args.mode or 'scenarios'
    plant = cfg.plant
    reference = control_harness.single_joint_trajectory(
        0.25, 0.5, cfg.control_duration_s
    )
    if mode == 'scenarios':
        table = control_harness.run_scenarios(
            plant, cfg.scenarios, duration_s=cfg.control_duration_s,
            seed=cfg.seed, show_tqdm=args.verbose,
        )
        lags = control_harness.feedback_lags(plant, reference, seed=cfg.seed)
        for source, lag in lags.items():
            _emit(f'feedback_lag_samples:{source}', lag)
    elif mode == 'gain-limits':
        table = control_harness.gain_limit_table(
            plant, reference, cfg.sweeps, seed=cfg.seed,
            show_tqdm=args.verbose,
        )
    else:
        raise ValueError(f"--mode must be 'scenarios' or 'gain-limits', "
                         f"got {mode!r}")
    table.to_csv(args.output, sep='\t', index=False, float_format='%.17g')
    if args.plot:
        scenario = cfg.scenarios[0]
        switch = scenario.switch()
        traj = control_harness.single_joint_trajectory(
            scenario.amplitude_rad, scenario.frequency_hz,
            cfg.control_duration_s,
        )
        result = control_harness.run_tracking(
            plant, traj, (scenario.p_gain, scenario.d_gain),
            'gyro_direct' if switch is None else 'butterworth_numeric',
            seed=cfg.seed, record=True, switch=switch,
        )
        control_harness.plot_tracking(
            result.series, title=scenario.name
        ).write_html(args.plot)
    return 0


def cmd_report(args):
    results = pd.read_csv(args.input, sep='\t')
    missing = {'scenario', 'source', 'rms_position_rad',
               'rms_velocity_rad_s', 'stable'} - set(results.columns)
    if missing:
        raise ValueError(f'{args.input} lacks columns {sorted(missing)}')
    table = control_harness.comparison_table(results)
    table.to_csv(args.output, sep='\t', index=False, float_format='%.17g')
    return 0


COMMANDS = {
    'simulate': (cmd_simulate,
                 'simulate a trajectory or calibration tumble into a log',
                 'trajectory | calibration'),
    'calibrate-orientation': (cmd_calibrate_orientation,
                              'fit IMU mounting orientations', None),
    'calibrate-position': (cmd_calibrate_position,
                           'fit IMU mounting positions', None),
    'estimate-velocity': (cmd_estimate_velocity,
                          'joint velocities from gyroscopes',
                          'constrained | unconstrained'),
    'estimate-acceleration': (cmd_estimate_acceleration,
                              'joint accelerations from paired '
                              'accelerometers', None),
    'filter': (cmd_filter, 'run the bias EKF or the velocity KF over a log',
               'bias_ekf | velocity_kf'),
    'control-experiment': (cmd_control_experiment,
                           'PD tracking scenarios or gain-limit searches',
                           'scenarios | gain-limits'),
    'report': (cmd_report, 'compare velocity sources from a results table',
               None),
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog='jointimu',
        description='Joint state estimation from link-mounted IMUs.',
    )
    sub = parser.add_subparsers(dest='command', metavar='command')
    sub.required = True
    for name, (_, text, modes) in COMMANDS.items():
        cmd = sub.add_parser(name, help=text, description=text)
        if name != 'report':
            cmd.add_argument('--config', help='experiment YAML file')
            cmd.add_argument('--seed', type=int,
                             help='override the configured seed')
        if name != 'simulate' and name != 'control-experiment':
            cmd.add_argument('--input', required=True, help='input file')
        cmd.add_argument('--output', required=True, help='output file')
        if modes:
            cmd.add_argument('--mode', help=modes)
        if name in ('calibrate-position', 'estimate-velocity',
                    'estimate-acceleration', 'filter'):
            cmd.add_argument('--calibration',
                             help='calibration YAML from calibrate-*')
        if name == 'control-experiment':
            cmd.add_argument('--plot',
                             help='write an HTML tracking plot here')
        cmd.add_argument('--verbose', action='store_true',
                         help='debug logging and progress bars')
    return parser


def run_command(argv):
    """
    Returns:
        0 on success, 1 for data errors (one tab-separated line on
        stderr), 2 for usage errors.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:
        return exit_.code if isinstance(exit_.code, int) else 2
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format='[%(levelname)s] %(name)s: %(message)s',
    )
    handler = COMMANDS[args.command][0]
    try:
        return handler(args)
    except (JointImuError, ValueError, KeyError, OSError,
            yaml.YAMLError) as error:
        message = str(error).replace('\n', ' ')
        print(f'error\t{type(error).__name__}\t{message}', file=sys.stderr)
        return 1


def main():
    sys.exit(run_command(sys.argv[1:]))
