import math
from dataclasses import replace

import numpy as np
import pandas as pd
import plotly.graph_objects as go
import pytest

from jointimu.control_harness import (
    SOURCES, GyroSource, JointSensors, PlantConfig, Scenario,
    comparison_table, feedback_lags, feedback_velocity, find_gain_limit,
    gain_limit_table, make_source, pd_step, plot_tracking, run_scenarios,
    run_tracking, scenario_grid, single_joint_trajectory,
)
from jointimu.errors import NoStableGain

PLANT = PlantConfig()
SINE = single_joint_trajectory(0.25, 0.5, 4.0)


def test_pd_step():
    assert pd_step(1.0, 0.5, 0.8, 0.1, 10.0, 2.0) == pytest.approx(2.8)
    assert pd_step(1.0, 0.5, 0.8, 0.1, 10.0, 2.0, torque_limit=1.0) == 1.0
    assert pd_step(-1.0, 0.0, 0.0, 0.0, 10.0, 2.0, torque_limit=1.0) == -1.0
    assert pd_step(0.3, 0.2, 0.3, 0.2, 500.0, 20.0) == 0.0


def test_scenario_grid():
    grid = scenario_grid()
    assert len(grid) == 6
    assert len({s.name for s in grid}) == len(grid)
    assert {s.frequency_hz for s in grid} == {0.5, 3.0}
    switching = [s for s in grid if s.switch() is not None]
    assert len(switching) == 1
    assert switching[0].switch() == (3.0, 'gyro_direct', (1500.0, 12.0))


def test_plant_validation():
    with pytest.raises(ValueError):
        PlantConfig(inertia_kgm2=0.0)
    with pytest.raises(ValueError):
        PlantConfig(delay_samples=-1)
    with pytest.raises(ValueError):
        make_source('accelerometer', PLANT)


def test_gyro_source_uses_the_constrained_solve():
    sensors = JointSensors(PlantConfig(gyro_noise_rad_s=0.0), seed=1)
    position, gyros = sensors.read(0.4, -1.3)
    assert gyros.shape == (2, 3)
    assert np.allclose(gyros[0], 0.0, rtol=0, atol=1e-15)
    source = GyroSource(PLANT)
    assert source.update(position, gyros, 0.0) == pytest.approx(-1.3,
                                                                abs=1e-12)

    # a fixed base carries no rate, so its gyro does not enter the solve
    gyros[0] += [0.3, -0.2, 0.5]
    assert source.update(position, gyros, 0.0) == pytest.approx(-1.3,
                                                                abs=1e-12)


def test_gyro_source_noise_is_one_gyro_worth():
    plant = PlantConfig(gyro_noise_rad_s=0.01)
    t = np.arange(4000) / plant.sample_rate_hz
    estimate = feedback_velocity(plant, np.zeros_like(t), np.zeros_like(t),
                                 np.zeros_like(t), 'gyro_direct', seed=4)
    assert np.std(estimate) == pytest.approx(0.01, rel=0.1)


def test_ideal_plant_tracks_closely():
    ideal = PlantConfig(actuator_lag_s=0.0, delay_samples=0,
                        position_noise_rad=0.0, gyro_noise_rad_s=0.0)
    result = run_tracking(ideal, SINE, (1000.0, 12.0), 'gyro_direct')
    assert result.stable
    assert result.rms_position_rad < 5e-3
    assert result.source == 'gyro_direct'
    assert result.switch_source is None


def test_gyro_feedback_tracks_velocity_better():
    gyro = run_tracking(PLANT, SINE, (1000.0, 12.0), 'gyro_direct')
    numeric = run_tracking(PLANT, SINE, (1000.0, 12.0),
                           'butterworth_numeric')
    assert gyro.stable
    # a diverged run ends early and its error window may be empty
    assert not numeric.stable \
        or gyro.rms_velocity_rad_s <= numeric.rms_velocity_rad_s


def test_result_ignores_the_source_label():
    class RelabelledGyro(GyroSource):
        tag = 'relabelled'

    plain = run_tracking(PLANT, SINE, (1000.0, 12.0), 'gyro_direct', seed=5)
    relabelled = run_tracking(PLANT, SINE, (1000.0, 12.0),
                              RelabelledGyro(PLANT), seed=5)
    assert relabelled.source == 'relabelled'
    assert relabelled.stable == plain.stable
    assert relabelled.rms_position_rad == plain.rms_position_rad
    assert relabelled.rms_velocity_rad_s == plain.rms_velocity_rad_s


def test_gyro_feedback_tolerates_higher_gains():
    limits = {}
    for source in ('gyro_direct', 'butterworth_numeric'):
        limits[source] = (
            find_gain_limit(PLANT, SINE, 'P', 12.0, source, 50.0, 5000.0),
            find_gain_limit(PLANT, SINE, 'D', 250.0, source, 10.0, 600.0),
        )
    assert limits['gyro_direct'][0] >= limits['butterworth_numeric'][0]
    assert limits['gyro_direct'][1] >= limits['butterworth_numeric'][1]


def test_gain_limit_falls_with_loop_delay():
    short = single_joint_trajectory(0.25, 0.5, 2.0)
    limits = [
        find_gain_limit(replace(PLANT, delay_samples=delay), short, 'P',
                        12.0, 'gyro_direct', 50.0, 5000.0)
        for delay in range(5)
    ]
    assert all(later <= earlier
               for earlier, later in zip(limits, limits[1:]))
    assert limits[-1] < limits[0]


def test_numeric_differentiation_lags_the_gyro():
    traj = single_joint_trajectory(0.25, 1.0, 2.1)
    lags = feedback_lags(PLANT, traj, max_lag=50, seed=2)
    assert set(lags) == set(SOURCES)
    assert lags['butterworth_numeric'] > 0
    assert abs(lags['gyro_direct']) <= 1
    assert lags['butterworth_numeric'] > lags['gyro_direct']


def test_unstable_lower_bound():
    with pytest.raises(NoStableGain):
        find_gain_limit(PLANT, SINE, 'D', 250.0, 'gyro_direct',
                        5000.0, 10000.0, grid_points=4)
    with pytest.raises(ValueError):
        find_gain_limit(PLANT, SINE, 'X', 250.0, 'gyro_direct', 1.0, 2.0)
    table = gain_limit_table(PLANT, SINE, [('D', 250.0, 5000.0, 10000.0)],
                             sources=('gyro_direct',))
    assert len(table) == 1
    assert math.isnan(table['gain_limit'][0])


def test_switching_source_mid_run_stays_bounded():
    traj = single_joint_trajectory(0.1, 1.0, 4.0)
    result = run_tracking(PLANT, traj, (400.0, 12.0), 'butterworth_numeric',
                          record=True,
                          switch=(2.0, 'gyro_direct', (800.0, 12.0)))
    assert result.stable
    assert result.source == 'butterworth_numeric'
    assert result.switch_source == 'gyro_direct'
    series = result.series
    assert len(series) == 4001
    error = (series['theta_ref_rad'] - series['theta_rad']).abs()
    before = (series['t_s'] >= 1.0) & (series['t_s'] < 2.0)
    after = series['t_s'] >= 2.0
    assert error[before].max() < 0.02
    assert error[after].max() < 0.02


def test_switch_to_the_same_source_and_gains_changes_nothing():
    plain = run_tracking(PLANT, SINE, (1000.0, 12.0), 'gyro_direct', seed=6)
    switched = run_tracking(PLANT, SINE, (1000.0, 12.0), 'gyro_direct',
                            seed=6, switch=(2.0, 'gyro_direct',
                                            (1000.0, 12.0)))
    assert switched.rms_position_rad == plain.rms_position_rad
    assert switched.rms_velocity_rad_s == plain.rms_velocity_rad_s


def test_run_scenarios_and_comparison_table():
    scenarios = [
        Scenario('slow', 1000.0, 12.0, 0.5),
        Scenario('handover', 800.0, 12.0, 0.5, switch_time_s=1.5,
                 switch_p_gain=1000.0),
    ]
    results = run_scenarios(PLANT, scenarios,
                            sources=('gyro_direct', 'butterworth_numeric'),
                            duration_s=3.0)
    assert list(results['source']) \
        == ['gyro_direct', 'butterworth_numeric'] * 2
    assert list(results['scenario']) == ['slow'] * 2 + ['handover'] * 2
    assert list(results['switch_source']) == ['', ''] + ['gyro_direct'] * 2
    table = comparison_table(results)
    assert list(table['scenario']) == ['slow', 'handover']
    assert 'rms_velocity_rad_s:gyro_direct' in table.columns
    assert 'rms_position_rad:butterworth_numeric' in table.columns
    assert 'all_stable' in table.columns


def test_comparison_table_flags_unstable_scenarios():
    results = pd.DataFrame([
        {'scenario': 'a', 'source': s, 'rms_position_rad': 0.01,
         'rms_velocity_rad_s': 0.1, 'stable': s != SOURCES[0]}
        for s in SOURCES
    ] + [
        {'scenario': 'b', 'source': s, 'rms_position_rad': 0.02,
         'rms_velocity_rad_s': 0.2, 'stable': True}
        for s in SOURCES
    ])
    table = comparison_table(results).set_index('scenario')
    assert not table.loc['a', 'all_stable']
    assert table.loc['b', 'all_stable']
    assert table.loc['b', f'rms_velocity_rad_s:{SOURCES[2]}'] == 0.2


def test_recorded_run_and_plot():
    result = run_tracking(PLANT, single_joint_trajectory(0.25, 0.5, 2.0),
                          (1000.0, 12.0), 'gyro_direct', record=True)
    assert len(result.series) == 2001
    fig = plot_tracking(result.series)
    assert isinstance(fig, go.Figure)
    assert len(fig.data) == 3


def test_feedback_velocity_without_noise_is_exact():
    quiet = PlantConfig(position_noise_rad=0.0, gyro_noise_rad_s=0.0)
    t = np.arange(500) / quiet.sample_rate_hz
    theta_dot = np.cos(t)
    estimate = feedback_velocity(quiet, np.sin(t), theta_dot, -np.sin(t),
                                 'gyro_direct')
    assert np.allclose(estimate, theta_dot, rtol=0, atol=1e-12)
    filtered = feedback_velocity(quiet, np.sin(t), theta_dot, -np.sin(t),
                                 'kf_filtered')
    assert np.allclose(filtered, theta_dot, rtol=0, atol=1e-3)


if __name__ == '__main__':
    pytest.main([__file__])
