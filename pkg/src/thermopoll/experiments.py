from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Type, TypeVar, Union

import numpy as np
from pydantic import BaseModel

from thermopoll.channel import ScenarioKind
from thermopoll.clock import SimTime, duration, to_seconds
from thermopoll.config import (
    SEED_LIMIT,
    AgilitySpec,
    ChannelOverrides,
    ConnectivitySpec,
    LinearitySpec,
    Placement,
    ResponseSpec,
    ScalingSpec,
    ScenarioConfig,
    StabilitySpec,
    ThermometerConfig,
    WiredSpec,
    config_hash,
    replace,
)
from thermopoll.deployment import Deployment
from thermopoll.engine import Engine, Event
from thermopoll.errors import EmptyRun
from thermopoll.monitor import Alert, ReadingRecord, connectivity, mse
from thermopoll.protocol import max_thermometers, measurement_delay
from thermopoll.rng import RngStream
from thermopoll.sensor import (
    BodyConstant,
    HeaterProfile,
    ProbeState,
    RoomAmbient,
    SensorSpec,
    Thermometer,
    probe_advance,
)

logger = logging.getLogger(__name__)

MetricValue = Union[float, int, bool, str, None]

SERIES_HEADER = ('time_s', 'thermometer_id', 'raw_c', 'smoothed_c', 'truth_c')

# Upper bound on the linearity error reported for the original hardware.
LINEARITY_MSE_LIMIT_C2 = 0.357
STABILITY_PEAK_TO_PEAK_LIMIT_C = 0.25
RESPONSE_LAG_TOLERANCE = 0.02
SCALING_RESIDUAL_LIMIT = 0.01
CONNECTIVITY_TARGET = 0.95
RELIABLE_DISTANCE_M = 30.0
# Only the furnished scenarios must keep losing readings beyond the reliable range.
DEGRADING_SCENARIOS = (ScenarioKind.S1_FurnishedRoom, ScenarioKind.S3_MovingAway)

STABILITY_METRICS = (
    'samples_per_thermometer',
    'expected_samples',
    'raw_peak_deviation_c',
    'raw_deviation_limit_c',
    'raw_std_c',
    'smoothed_peak_deviation_c',
    'smoothed_peak_to_peak_c',
    'smoothed_peak_to_peak_limit_c',
    'smoothed_std_c',
    'thermometer_mean_spread_c',
    'misses',
)
WIRED_METRICS = ('samples', 'max_deviation_c', 'max_deviation_limit_c', 'mean_c', 'std_c')
LINEARITY_METRICS = (
    'setpoints',
    'seeds',
    'mse_c2',
    'rmse_c',
    'mse_worst_seed_c2',
    'mse_limit_c2',
    'max_deviation_c',
    'slope',
    'intercept_c',
)
RESPONSE_METRICS = (
    'slow_ramp_lag_c',
    'slow_ramp_expected_lag_c',
    'slow_ramp_lag_error',
    'fast_ramp_lag_c',
    'fast_ramp_expected_lag_c',
    'fast_ramp_lag_error',
    'lag_error_limit',
    'plateau_c',
    'settling_time_s',
    'settling_limit_s',
    'reading_max_error_c',
    'fast_exceeds_slow_all_seeds',
    'seeds',
)
AGILITY_METRICS = (
    'grid_points',
    'qualification_band_c',
    'smallest_qualifying_td_s',
    'qualification_monotone',
    'mercury_dwell_s',
    'speedup',
)
CONNECTIVITY_SUMMARY_METRICS = ('points', 'seeds', 'min_reliable_nlos', 'min_line_of_sight')
SCALING_METRICS = (
    'min_slot_s',
    'slope_s_per_thermometer',
    'intercept_s',
    'max_relative_residual',
    'residual_limit',
    'doubling_ratio_min',
    'doubling_ratio_max',
    'detection_rate_c_per_s',
    'max_thermometers',
    'simulated_all_rounds_complete',
)


class SeriesRow(NamedTuple):
    time_s: float
    thermometer: int
    raw_c: float
    smoothed_c: Optional[float]
    truth_c: float


@dataclass
class ReportBundle:
    experiment: str
    seed: int
    config_hash: str
    metrics: Dict[str, MetricValue]
    series: List[SeriesRow] = field(default_factory=list)
    table_header: Tuple[str, ...] = ()
    table: List[Tuple[MetricValue, ...]] = field(default_factory=list)
    alerts: List[Alert] = field(default_factory=list)

    @property
    def metadata(self) -> Dict[str, MetricValue]:
        return {'experiment': self.experiment, 'seed': self.seed, 'config_hash': self.config_hash}


SpecT = TypeVar('SpecT', bound=BaseModel)


def _bind(config: ScenarioConfig, spec_type: Type[SpecT]) -> Tuple[ScenarioConfig, SpecT]:
    if not isinstance(config.experiment, spec_type):
        config = config.model_copy(update={'experiment': spec_type()})
    spec = config.experiment
    assert isinstance(spec, spec_type)
    return config, spec


def _bundle(
    config: ScenarioConfig,
    metrics: Dict[str, MetricValue],
    series: Optional[List[SeriesRow]] = None,
    table_header: Tuple[str, ...] = (),
    table: Optional[List[Tuple[MetricValue, ...]]] = None,
    alerts: Optional[List[Alert]] = None,
) -> ReportBundle:
    bundle = ReportBundle(
        experiment=config.experiment.kind,
        seed=config.seed,
        config_hash=config_hash(config),
        metrics=metrics,
        series=series or [],
        table_header=table_header,
        table=table or [],
        alerts=alerts or [],
    )
    logger.info(
        '%s (seed %d): %s',
        bundle.experiment,
        bundle.seed,
        ', '.join(f'{key}={_format(value)}' for key, value in metrics.items()),
    )
    return bundle


def _seeded(config: ScenarioConfig, offset: int) -> int:
    return (config.seed + offset) % SEED_LIMIT


def _records(deployment: Deployment, thermometer: int) -> List[ReadingRecord]:
    records = deployment.records(thermometer)
    if not records:
        raise EmptyRun(f'thermometer {thermometer:#x} delivered no readings')
    return records


def _series(deployment: Deployment, offset_s: float = 0.0) -> List[SeriesRow]:
    rows = []
    for thermometer_id, thermometer in deployment.thermometers.items():
        for record in deployment.records(thermometer_id):
            rows.append(
                SeriesRow(
                    time_s=offset_s + record.at.seconds,
                    thermometer=thermometer_id,
                    raw_c=record.raw,
                    smoothed_c=record.smoothed,
                    truth_c=thermometer.truth(record.at),
                )
            )
    return sorted(rows, key=lambda row: (row.time_s, row.thermometer))


def _expected_samples(duration_s: float, round_period: float, position: int, n: int) -> int:
    span = duration(seconds=duration_s)
    round_ticks = duration(seconds=round_period)
    offset = position * round_ticks // n
    return max(0, -(-(span - offset) // round_ticks))


def _reading_bound(sensor: SensorSpec) -> float:
    """
    The largest `|reading - probe|` any unit built from `sensor` can show.
    """
    bias = max(abs(sensor.bias), sensor.accuracy * sensor.bias_fraction)
    return bias + sensor.noise_amp + sensor.resolution / 2


def _peak_deviation(values: np.ndarray, centre: float) -> Optional[float]:
    return float(np.max(np.abs(values - centre))) if len(values) else None


def run_stability(config: ScenarioConfig) -> ReportBundle:
    config, spec = _bind(config, StabilitySpec)
    subjects = {unit.id: BodyConstant(value=spec.body_c) for unit in config.thermometers}
    deployment = Deployment(config, subjects=subjects)
    deployment.run(spec.duration_s)

    window = config.pipeline.window
    n = len(config.thermometers)
    table: List[Tuple[MetricValue, ...]] = []
    raw_all: List[float] = []
    smoothed_all: List[float] = []
    means = []
    peak_to_peak: Optional[float] = None
    samples = []
    expected = []
    for position, unit in enumerate(config.thermometers):
        # A thermometer out of range delivers nothing, which shows up as missing samples.
        records = deployment.records(unit.id)
        raws = np.array([record.raw for record in records], dtype=float)
        # Only full windows, the first few averages cover fewer samples.
        full = np.array([record.smoothed for record in records[window - 1 :]], dtype=float)
        unit_peak_to_peak = float(np.ptp(full)) if len(full) else None
        unit_mean = float(raws.mean()) if len(raws) else None

        raw_all.extend(raws)
        smoothed_all.extend(full)
        if unit_mean is not None:
            means.append(unit_mean)
        if unit_peak_to_peak is not None:
            peak_to_peak = max(peak_to_peak or 0.0, unit_peak_to_peak)
        samples.append(len(records))
        expected.append(
            _expected_samples(spec.duration_s, config.protocol.round_period, position, n)
        )
        table.append(
            (
                f'{unit.id:016x}',
                unit.patient_id,
                len(records),
                unit_mean,
                _peak_deviation(raws, spec.body_c),
                unit_peak_to_peak,
                deployment.master.state.retries.get(unit.id, 0),
            )
        )

    raw = np.array(raw_all, dtype=float)
    smoothed = np.array(smoothed_all, dtype=float)
    metrics: Dict[str, MetricValue] = {
        'samples_per_thermometer': min(samples),
        'expected_samples': min(expected),
        'raw_peak_deviation_c': _peak_deviation(raw, spec.body_c),
        'raw_deviation_limit_c': _reading_bound(config.sensor),
        'raw_std_c': float(raw.std(ddof=1)) if len(raw) > 1 else None,
        'smoothed_peak_deviation_c': _peak_deviation(smoothed, spec.body_c),
        'smoothed_peak_to_peak_c': peak_to_peak,
        'smoothed_peak_to_peak_limit_c': STABILITY_PEAK_TO_PEAK_LIMIT_C,
        'smoothed_std_c': float(smoothed.std(ddof=1)) if len(smoothed) > 1 else None,
        'thermometer_mean_spread_c': max(means) - min(means) if means else None,
        'misses': deployment.master.stats.misses,
    }
    return _bundle(
        config,
        metrics,
        series=_series(deployment),
        table_header=(
            'thermometer_id',
            'patient',
            'samples',
            'mean_c',
            'raw_peak_deviation_c',
            'smoothed_peak_to_peak_c',
            'repolls',
        ),
        table=table,
        alerts=list(deployment.pipeline.alerts),
    )


@dataclass(frozen=True)
class WiredSample:
    pass


def run_wired_baseline(config: ScenarioConfig) -> ReportBundle:
    """
    The same probe read over a direct lossless link, without smoothing.
    """
    config, spec = _bind(config, WiredSpec)
    unit = config.thermometers[0]
    sensor = config.sensor.model_copy(
        update={'noise_amp': spec.noise_amp, 'bias': 0.0, 'bias_fraction': 0.0}
    )
    thermometer = Thermometer(
        node_id=unit.id,
        spec=sensor,
        subject=BodyConstant(value=spec.body_c),
        stream=RngStream(config.seed, unit.id),
    )

    engine = Engine()
    readings: List[Tuple[SimTime, float]] = []

    def on_sample(event: Event) -> None:
        readings.append((engine.now, thermometer.read(engine.now)))

    engine.register('wired', on_sample)
    end = duration(seconds=spec.duration_s)
    for at in range(0, end, duration(seconds=spec.sample_period_s)):
        engine.schedule(at, 'wired', WiredSample())
    engine.run_until(end)

    values = np.array([reading for _, reading in readings])
    metrics: Dict[str, MetricValue] = {
        'samples': len(readings),
        'max_deviation_c': float(np.max(np.abs(values - spec.body_c))),
        'max_deviation_limit_c': spec.noise_amp + sensor.resolution / 2,
        'mean_c': float(values.mean()),
        'std_c': float(values.std(ddof=1)) if len(values) > 1 else 0.0,
    }
    series = [
        SeriesRow(
            time_s=at.seconds,
            thermometer=unit.id,
            raw_c=value,
            smoothed_c=None,
            truth_c=spec.body_c,
        )
        for at, value in readings
    ]
    return _bundle(config, metrics, series=series)


def run_linearity(config: ScenarioConfig) -> ReportBundle:
    """
    Sweep a heater over the setpoints and compare steady readings with an ideal reference. Each
    seed is one physical unit, so its bias is shared by every setpoint.
    """
    config, spec = _bind(config, LinearitySpec)
    unit = config.thermometers[0]
    sensor = config.sensor.model_copy(update={'bias_fraction': spec.bias_fraction})
    setpoints = list(spec.setpoints)

    steady: Dict[float, List[float]] = {setpoint: [] for setpoint in setpoints}
    worst_seed_mse = 0.0
    readings: List[float] = []
    references: List[float] = []
    series: List[SeriesRow] = []
    alerts: List[Alert] = []
    for k in range(spec.seeds):
        seeded = config.model_copy(update={'seed': _seeded(config, k), 'thermometers': (unit,)})
        seed_readings = []
        for index, setpoint in enumerate(setpoints):
            deployment = Deployment(
                seeded, subjects={unit.id: HeaterProfile.constant(setpoint)}, sensor=sensor
            )
            deployment.run(spec.duration_s)
            reading = float(np.mean([record.raw for record in _records(deployment, unit.id)]))
            steady[setpoint].append(reading)
            seed_readings.append(reading)
            if k == 0:
                series.extend(_series(deployment, offset_s=index * spec.duration_s))
                alerts.extend(deployment.pipeline.alerts)

        worst_seed_mse = max(worst_seed_mse, mse(seed_readings, setpoints).mse)
        readings.extend(seed_readings)
        references.extend(setpoints)

    overall = mse(readings, references)
    means = [float(np.mean(steady[setpoint])) for setpoint in setpoints]
    slope, intercept = np.polyfit(np.array(setpoints), np.array(means), 1)
    table: List[Tuple[MetricValue, ...]] = [
        (setpoint, mean, mean - setpoint) for setpoint, mean in zip(setpoints, means)
    ]
    metrics: Dict[str, MetricValue] = {
        'setpoints': len(setpoints),
        'seeds': spec.seeds,
        'mse_c2': overall.mse,
        'rmse_c': overall.rmse,
        'mse_worst_seed_c2': worst_seed_mse,
        'mse_limit_c2': LINEARITY_MSE_LIMIT_C2,
        'max_deviation_c': float(np.max(np.abs(np.array(readings) - np.array(references)))),
        'slope': float(slope),
        'intercept_c': float(intercept),
    }
    return _bundle(
        config,
        metrics,
        series=series,
        table_header=('setpoint_c', 'reading_c', 'deviation_c'),
        table=table,
        alerts=alerts,
    )


def probe_trace(
    source: HeaterProfile, tau: float, end: int, step: int
) -> Tuple[List[int], List[float]]:
    """
    The noise-free probe temperature every `step` ticks from 0 to `end`, for a probe that starts
    equilibrated with `source`.
    """
    state = ProbeState(
        probe_temp=source.at(0.0), in_contact=True, last_update=SimTime(0), environment=source
    )
    ticks = [0]
    temps = [state.probe_temp]
    for tick in range(step, end + 1, step):
        state = probe_advance(state, SimTime(tick), tau)
        ticks.append(tick)
        temps.append(state.probe_temp)
    return ticks, temps


def _segment_lags(
    heater: HeaterProfile, times: Sequence[float], values: Sequence[float]
) -> List[Optional[float]]:
    lags: List[Optional[float]] = []
    for index, (begin, end) in enumerate(heater.segment_bounds()):
        # Segments share their boundary; the first one also owns t = 0.
        inside = [
            heater.at(t) - value
            for t, value in zip(times, values)
            if (begin < t or (index == 0 and t == begin)) and t <= end + 1e-9
        ]
        lags.append(max(inside) if inside else None)
    return lags


def run_response_time(config: ScenarioConfig) -> ReportBundle:
    config, spec = _bind(config, ResponseSpec)
    heater = spec.heater
    tau = config.sensor.tau
    step = duration(seconds=spec.probe_step_s)
    ticks, probe = probe_trace(heater, tau, duration(seconds=spec.duration_s), step)
    times = [to_seconds(tick) for tick in ticks]

    lags = _segment_lags(heater, times, probe)
    slow, fast = heater.segments[0], heater.segments[-1]
    slow_lag, fast_lag = lags[0], lags[-1]
    slow_expected, fast_expected = slow.rate * tau, fast.rate * tau

    ramp_end = duration(seconds=heater.ramp_end)
    settling = next(
        (
            to_seconds(tick - ramp_end)
            for tick, value in zip(ticks, probe)
            if tick >= ramp_end and abs(value - heater.plateau) <= config.sensor.accuracy
        ),
        None,
    )

    unit = config.thermometers[0]
    table: List[Tuple[MetricValue, ...]] = []
    series: List[SeriesRow] = []
    alerts: List[Alert] = []
    reading_error: Optional[float] = None
    fast_exceeds_slow = True
    for k in range(spec.seeds):
        seeded = config.model_copy(update={'seed': _seeded(config, k), 'thermometers': (unit,)})
        deployment = Deployment(seeded, subjects={unit.id: heater})
        deployment.run(spec.duration_s)
        records = deployment.records(unit.id)
        reading_lags = _segment_lags(
            heater, [record.at.seconds for record in records], [record.raw for record in records]
        )
        reading_slow, reading_fast = reading_lags[0], reading_lags[-1]
        if reading_slow is None or reading_fast is None or not reading_fast > reading_slow:
            fast_exceeds_slow = False
        for record in records:
            error = abs(record.raw - heater.at(record.at.seconds))
            reading_error = max(reading_error or 0.0, error)
        table.append((_seeded(config, k), reading_slow, reading_fast))
        if k == 0:
            series = _series(deployment)
            alerts = list(deployment.pipeline.alerts)

    def relative(lag: Optional[float], expected: float) -> Optional[float]:
        if lag is None or expected == 0:
            return None
        return abs(lag - expected) / expected

    metrics: Dict[str, MetricValue] = {
        'slow_ramp_lag_c': slow_lag,
        'slow_ramp_expected_lag_c': slow_expected,
        'slow_ramp_lag_error': relative(slow_lag, slow_expected),
        'fast_ramp_lag_c': fast_lag,
        'fast_ramp_expected_lag_c': fast_expected,
        'fast_ramp_lag_error': relative(fast_lag, fast_expected),
        'lag_error_limit': RESPONSE_LAG_TOLERANCE,
        'plateau_c': heater.plateau,
        'settling_time_s': settling,
        'settling_limit_s': 5 * tau,
        'reading_max_error_c': reading_error,
        'fast_exceeds_slow_all_seeds': fast_exceeds_slow,
        'seeds': spec.seeds,
    }
    return _bundle(
        config,
        metrics,
        series=series,
        table_header=('seed', 'slow_ramp_reading_lag_c', 'fast_ramp_reading_lag_c'),
        table=table,
        alerts=alerts,
    )


@dataclass(frozen=True)
class Contact:
    pass


@dataclass(frozen=True)
class Buffer:
    pass


@dataclass(frozen=True)
class Release:
    pass


class AgilityTrial:
    """
    One contact from rest: the probe sits at room temperature, touches the body for `t_d` seconds,
    buffers its reading and is released.
    """

    TARGET = 'agility'

    def __init__(self, thermometer: Thermometer, rest_s: float, t_d: float) -> None:
        self.thermometer = thermometer
        self.engine = Engine()
        self.reading: Optional[float] = None
        self.probe: Optional[float] = None

        self.engine.register(self.TARGET, self._on_event)
        contact = duration(seconds=rest_s)
        release = contact + duration(seconds=t_d)
        self.engine.schedule(contact, self.TARGET, Contact())
        self.engine.schedule(release, self.TARGET, Buffer())
        self.engine.schedule(release, self.TARGET, Release())
        self._end = release + duration(seconds=rest_s)

    def run(self) -> float:
        self.engine.run_until(self._end)
        assert self.reading is not None
        return self.reading

    def _on_event(self, event: Event) -> None:
        now = self.engine.now
        if isinstance(event.payload, Contact):
            self.thermometer.set_contact(True, now)
        elif isinstance(event.payload, Buffer):
            self.reading = self.thermometer.read(now)
            self.probe = self.thermometer.state.probe_temp
        elif isinstance(event.payload, Release):
            self.thermometer.set_contact(False, now)


def run_agility(config: ScenarioConfig) -> ReportBundle:
    config, spec = _bind(config, AgilitySpec)
    unit = config.thermometers[0]
    sensor = config.sensor
    band = sensor.accuracy + sensor.noise_amp + sensor.resolution / 2

    table: List[Tuple[MetricValue, ...]] = []
    series = []
    qualified = []
    for t_d in sorted(spec.contact_grid):
        thermometer = Thermometer(
            node_id=unit.id,
            spec=sensor,
            subject=BodyConstant(value=spec.body_c),
            stream=RngStream(config.seed, unit.id),
            ambient=RoomAmbient(),
            in_contact=False,
        )
        trial = AgilityTrial(thermometer, spec.rest_s, t_d)
        reading = trial.run()
        error = abs(reading - spec.body_c)
        ok = error <= band + 1e-9
        qualified.append(ok)
        table.append((t_d, reading, trial.probe, error, ok))
        series.append(
            SeriesRow(
                time_s=t_d,
                thermometer=unit.id,
                raw_c=reading,
                smoothed_c=None,
                truth_c=spec.body_c,
            )
        )

    grid = sorted(spec.contact_grid)
    smallest = next((t_d for t_d, ok in zip(grid, qualified) if ok), None)
    monotone = all(qualified[qualified.index(True) :]) if any(qualified) else True
    metrics: Dict[str, MetricValue] = {
        'grid_points': len(grid),
        'qualification_band_c': band,
        'smallest_qualifying_td_s': smallest,
        'qualification_monotone': monotone,
        'mercury_dwell_s': spec.mercury_dwell_s,
        'speedup': spec.mercury_dwell_s / smallest if smallest else None,
    }
    return _bundle(
        config,
        metrics,
        series=series,
        table_header=('contact_s', 'reading_c', 'probe_c', 'error_c', 'qualified'),
        table=table,
    )


def connectivity_key(kind: ScenarioKind, distance_m: float) -> str:
    return f'connectivity_{kind.value}_{distance_m:g}m'


def _meets_target(kind: ScenarioKind, distance_m: float) -> bool:
    return kind.line_of_sight or (not kind.moving and distance_m <= RELIABLE_DISTANCE_M)


def _must_degrade(kind: ScenarioKind, distance_m: float) -> bool:
    return kind in DEGRADING_SCENARIOS and distance_m >= RELIABLE_DISTANCE_M


def run_connectivity(config: ScenarioConfig) -> ReportBundle:
    """
    One thermometer at each (scenario, distance) point, repeated over consecutive seeds.
    """
    config, spec = _bind(config, ConnectivitySpec)
    unit = config.thermometers[0].model_copy(update={'distance_m': None})
    # The scenario kind decides the propagation, other channel settings carry over.
    channel = config.channel.model_copy(update={'exponent': None, 'shadow_sigma_db': None})

    table: List[Tuple[MetricValue, ...]] = []
    point_metrics: Dict[str, MetricValue] = {}
    reliable_nlos: List[float] = []
    line_of_sight: List[float] = []
    for kind in spec.scenarios:
        speed = spec.moving_speed_mps if kind.moving else 0.0
        for distance_m in spec.distances_m:
            values = []
            for k in range(spec.seeds):
                seeded = config.model_copy(
                    update={
                        'seed': _seeded(config, k),
                        'scenario': Placement(kind=kind, distance_m=distance_m, speed_mps=speed),
                        'channel': channel,
                        'thermometers': (unit,),
                    }
                )
                deployment = Deployment(seeded)
                deployment.run(spec.duration_s)
                values.append(
                    connectivity(
                        deployment.slots(unit.id),
                        deployment.thermometers[unit.id].truth,
                        config.sensor.accuracy,
                    )
                )

            mean = float(np.mean(values))
            point_metrics[connectivity_key(kind, distance_m)] = mean
            table.append(
                (
                    kind.value,
                    distance_m,
                    mean,
                    min(values),
                    max(values),
                    _meets_target(kind, distance_m),
                    _must_degrade(kind, distance_m),
                )
            )
            if kind.line_of_sight:
                line_of_sight.append(mean)
            elif _meets_target(kind, distance_m):
                reliable_nlos.append(mean)

    metrics: Dict[str, MetricValue] = {
        'points': len(table),
        'seeds': spec.seeds,
        'min_reliable_nlos': min(reliable_nlos) if reliable_nlos else None,
        'min_line_of_sight': min(line_of_sight) if line_of_sight else None,
    }
    metrics.update(point_metrics)
    return _bundle(
        config,
        metrics,
        table_header=(
            'scenario',
            'distance_m',
            'mean',
            'min',
            'max',
            'target_checked',
            'degradation_checked',
        ),
        table=table,
    )


def run_scaling(config: ScenarioConfig) -> ReportBundle:
    """
    The shortest feasible round for each roster size, and optionally a lossless run at exactly
    that round to show every thermometer still gets one reading per round.
    """
    config, spec = _bind(config, ScalingSpec)
    timing = config.protocol
    sizes = sorted(set(spec.n_grid))
    delays = [measurement_delay(n, timing) for n in sizes]

    n = np.array(sizes, dtype=float)
    rounds = np.array([delay.min_round_period for delay in delays])
    slope = float(n @ rounds / (n @ n))
    residual = float(np.max(np.abs(rounds - slope * n) / rounds))
    if len(sizes) > 1:
        _, intercept = np.polyfit(n, rounds, 1)
    else:
        intercept = 0.0
    by_size = dict(zip(sizes, rounds))
    ratios = [by_size[size * 2] / by_size[size] for size in sizes if size * 2 in by_size]

    table: List[Tuple[MetricValue, ...]] = []
    complete: Optional[bool] = True if spec.simulate else None
    for delay in delays:
        records_min: Optional[int] = None
        measured: Optional[float] = None
        if spec.simulate:
            records_min, measured = _simulate_minimum_round(
                config, delay.n, delay.min_round_period, spec.rounds
            )
            complete = bool(complete) and records_min == spec.rounds
        table.append(
            (
                delay.n,
                delay.slot,
                delay.per_node_interval,
                delay.min_round_period,
                records_min,
                measured,
            )
        )

    metrics: Dict[str, MetricValue] = {
        'min_slot_s': timing.min_slot,
        'slope_s_per_thermometer': slope,
        'intercept_s': float(intercept),
        'max_relative_residual': residual,
        'residual_limit': SCALING_RESIDUAL_LIMIT,
        'doubling_ratio_min': min(ratios) if ratios else None,
        'doubling_ratio_max': max(ratios) if ratios else None,
        'detection_rate_c_per_s': spec.detection_rate_c_per_s,
        'max_thermometers': max_thermometers(
            spec.detection_rate_c_per_s, config.sensor.accuracy, timing.min_slot
        ),
        'simulated_all_rounds_complete': complete,
    }
    return _bundle(
        config,
        metrics,
        table_header=(
            'n',
            'slot_s',
            'per_node_interval_s',
            'min_round_period_s',
            'records_per_node_min',
            'measured_interval_s',
        ),
        table=table,
    )


def _simulate_minimum_round(
    config: ScenarioConfig, n: int, round_period: float, rounds: int
) -> Tuple[int, Optional[float]]:
    timing = replace(config.protocol, round_period=round_period)
    seeded = config.model_copy(
        update={
            'scenario': Placement(),
            'channel': ChannelOverrides(),
            'protocol': timing,
            'thermometers': tuple(ThermometerConfig(id=i + 1) for i in range(n)),
        }
    )
    deployment = Deployment(seeded)
    deployment.run(rounds * round_period)

    counts = []
    intervals = []
    for unit in seeded.thermometers:
        records = deployment.records(unit.id)
        counts.append(len(records))
        times = [record.at.seconds for record in records]
        intervals.extend(np.diff(times))
    return min(counts), float(np.mean(intervals)) if intervals else None


Runner = Callable[[ScenarioConfig], ReportBundle]

RUNNERS: Dict[str, Runner] = {
    'stability': run_stability,
    'wired': run_wired_baseline,
    'linearity': run_linearity,
    'response': run_response_time,
    'agility': run_agility,
    'connectivity': run_connectivity,
    'scaling': run_scaling,
}


def run_experiment(config: ScenarioConfig) -> ReportBundle:
    return RUNNERS[config.experiment.kind](config)


def _number(bundle: ReportBundle, key: str) -> float:
    value = bundle.metrics[key]
    assert isinstance(value, (int, float)), f'{key} is {value!r}'
    return float(value)


def _check_stability(bundle: ReportBundle) -> List[str]:
    failures = []
    if _number(bundle, 'samples_per_thermometer') < _number(bundle, 'expected_samples'):
        failures.append('stability: a thermometer missed scheduled samples')
    if bundle.metrics['raw_peak_deviation_c'] is not None and _number(
        bundle, 'raw_peak_deviation_c'
    ) > _number(bundle, 'raw_deviation_limit_c') + 1e-9:
        failures.append('stability: a raw reading left the noise band')
    if bundle.metrics['smoothed_peak_to_peak_c'] is not None and _number(
        bundle, 'smoothed_peak_to_peak_c'
    ) >= _number(bundle, 'smoothed_peak_to_peak_limit_c'):
        failures.append('stability: smoothed peak-to-peak is not below its limit')
    return failures


def _check_wired(bundle: ReportBundle) -> List[str]:
    if _number(bundle, 'max_deviation_c') > _number(bundle, 'max_deviation_limit_c') + 1e-9:
        return ['wired: maximum deviation exceeds the noise amplitude plus half a step']
    return []


def _check_linearity(bundle: ReportBundle) -> List[str]:
    if _number(bundle, 'mse_worst_seed_c2') > _number(bundle, 'mse_limit_c2'):
        return ['linearity: mean squared error above the reported hardware figure']
    return []


def _check_response(bundle: ReportBundle) -> List[str]:
    failures = []
    limit = _number(bundle, 'lag_error_limit')
    for ramp in ('slow_ramp', 'fast_ramp'):
        error = bundle.metrics[f'{ramp}_lag_error']
        if error is None or float(error) > limit:
            failures.append(f'response: {ramp} lag is not within {limit:.0%} of rate x tau')
    if not bundle.metrics['fast_exceeds_slow_all_seeds']:
        failures.append('response: the fast ramp lag was not above the slow one on every seed')
    settling = bundle.metrics['settling_time_s']
    if settling is None or float(settling) > _number(bundle, 'settling_limit_s'):
        failures.append('response: the probe did not settle within 5 tau of the plateau')
    return failures


def _check_agility(bundle: ReportBundle) -> List[str]:
    failures = []
    if bundle.metrics['smallest_qualifying_td_s'] is None:
        failures.append('agility: no contact duration on the grid qualifies')
    if not bundle.metrics['qualification_monotone']:
        failures.append('agility: a longer contact failed after a shorter one qualified')
    return failures


def _check_connectivity(bundle: ReportBundle) -> List[str]:
    failures = []
    degrading: Dict[str, List[Tuple[float, float]]] = {}
    for scenario, distance_m, mean, *_ in bundle.table:
        assert isinstance(scenario, str) and isinstance(distance_m, float)
        assert isinstance(mean, float)
        kind = ScenarioKind(scenario)
        if _meets_target(kind, distance_m) and mean < CONNECTIVITY_TARGET:
            failures.append(
                f'connectivity: {scenario} at {distance_m:g} m is {mean:.3f}, '
                f'below {CONNECTIVITY_TARGET}'
            )
        if _must_degrade(kind, distance_m):
            degrading.setdefault(scenario, []).append((distance_m, mean))

    for scenario, points in degrading.items():
        far = sorted(points)
        for (near_d, near), (far_d, value) in zip(far, far[1:]):
            if not value < near:
                failures.append(
                    f'connectivity: {scenario} did not degrade from {near_d:g} m to {far_d:g} m'
                )
    return failures


def _check_scaling(bundle: ReportBundle) -> List[str]:
    failures = []
    if _number(bundle, 'max_relative_residual') >= _number(bundle, 'residual_limit'):
        failures.append('scaling: the minimum round is not linear in the roster size')
    if bundle.metrics['simulated_all_rounds_complete'] is False:
        failures.append('scaling: a simulated roster lost readings at its minimum round')
    return failures


CHECKS: Dict[str, Callable[[ReportBundle], List[str]]] = {
    'stability': _check_stability,
    'wired': _check_wired,
    'linearity': _check_linearity,
    'response': _check_response,
    'agility': _check_agility,
    'connectivity': _check_connectivity,
    'scaling': _check_scaling,
}


def check_report(bundle: ReportBundle) -> List[str]:
    """
    The acceptance bounds `bundle` fails, as human-readable lines. Empty means it passes.
    """
    return CHECKS[bundle.experiment](bundle)


def _format(value: MetricValue) -> str:
    if value is None:
        return ''
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(round(value, 9))
    return str(value)


def _json_value(value: MetricValue) -> MetricValue:
    return round(value, 9) if isinstance(value, float) else value


def _csv(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def render_report(bundle: ReportBundle) -> Dict[str, str]:
    """
    The files of a bundle by name. Output depends only on the bundle, so identical runs give
    identical bytes.
    """
    metrics = {
        'metadata': bundle.metadata,
        'metrics': {key: _json_value(value) for key, value in bundle.metrics.items()},
    }
    series_rows = [
        (
            f'{row.time_s:.6f}',
            f'{row.thermometer:016x}',
            f'{row.raw_c:.2f}',
            '' if row.smoothed_c is None else f'{row.smoothed_c:.4f}',
            f'{row.truth_c:.4f}',
        )
        for row in bundle.series
    ]
    files = {
        'metrics.json': json.dumps(metrics, indent=2, sort_keys=True) + '\n',
        'series.csv': _csv(SERIES_HEADER, series_rows),
        'alerts.ndjson': ''.join(alert.to_log_line() + '\n' for alert in bundle.alerts),
    }
    if bundle.table_header:
        files['table.csv'] = _csv(
            bundle.table_header, [[_format(value) for value in row] for row in bundle.table]
        )
    return files


def write_report(bundle: ReportBundle, out_dir: Union[str, Path]) -> List[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, content in render_report(bundle).items():
        path = out / name
        path.write_text(content, encoding='utf-8')
        written.append(path)
    logger.info('wrote %s to %s', ', '.join(path.name for path in written), out)
    return written
