import math
from typing import Callable

import pytest
from parameterized import parameterized  # type: ignore[import-untyped]
from pydantic import ValidationError

from thermopoll.clock import SimTime
from thermopoll.errors import NonPositiveDt
from thermopoll.rng import RngStream
from thermopoll.sensor import (
    BodyConstant,
    HeaterProfile,
    ProbeState,
    RampSegment,
    RoomAmbient,
    SensorSpec,
    TemperatureSource,
    Thermometer,
    probe_advance,
    probe_step,
    quantize,
    sample,
    set_contact,
    true_temperature,
)

TAU = 3.528


def probe(temp: float, env: TemperatureSource, at: float = 0.0) -> ProbeState:
    return ProbeState(
        probe_temp=temp, in_contact=True, last_update=SimTime.from_seconds(at), environment=env
    )


def rk4(env: Callable[[float], float], temp: float, t0: float, t1: float, h: float) -> float:
    """
    Fine fourth-order integration of dT/dt = (env - T) / tau, used as an oracle.
    """
    steps = int(round((t1 - t0) / h))
    t = t0
    for _ in range(steps):
        k1 = (env(t) - temp) / TAU
        k2 = (env(t + h / 2) - (temp + h / 2 * k1)) / TAU
        k3 = (env(t + h / 2) - (temp + h / 2 * k2)) / TAU
        k4 = (env(t + h) - (temp + h * k3)) / TAU
        temp += h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
    return temp


@parameterized.expand(
    [
        (0.0, 30.0),
        (15.0, 44.55),
        (28.0, 100.45),
        (40.0, 100.45),
        (600.0, 100.45),
    ]
)
def test_heater_profile(t: float, expected: float) -> None:
    heater = HeaterProfile()
    assert true_temperature(heater, SimTime.from_seconds(t)) == pytest.approx(expected)


def test_heater_profile_is_continuous() -> None:
    heater = HeaterProfile()
    for point in heater.breakpoints():
        assert heater.at(point - 1e-6) == pytest.approx(heater.at(point + 1e-6), abs=1e-4)
    assert heater.ramp_end == 28.0
    assert heater.plateau == pytest.approx(100.45)


def test_heater_rates() -> None:
    heater = HeaterProfile()
    assert heater.rate_at(0.0) == 0.97
    assert heater.rate_at(20.0) == 4.3
    assert heater.rate_at(30.0) == 0.0
    assert heater.segment_bounds() == ((0.0, 15.0), (15.0, 28.0))


def test_constant_heater() -> None:
    heater = HeaterProfile.constant(33.0)
    assert heater.at(0.0) == heater.at(100.0) == 33.0
    assert heater.breakpoints() == ()


def test_ramp_segment_needs_positive_duration() -> None:
    with pytest.raises(ValidationError):
        RampSegment(rate=1.0, duration=0.0)


@parameterized.expand(
    [
        (BodyConstant(), 37.0),
        (BodyConstant(value=38.5), 38.5),
        (RoomAmbient(), 25.0),
    ]
)
def test_constant_sources(source: TemperatureSource, expected: float) -> None:
    for t in (0.0, 12.5, 3600.0):
        assert true_temperature(source, SimTime.from_seconds(t)) == expected


def test_probe_step_towards_body() -> None:
    state = probe_step(probe(25.0, BodyConstant()), 37.0, 12.0, TAU)
    assert state.probe_temp == pytest.approx(36.600, abs=1e-3)
    assert state.last_update == SimTime.from_seconds(12)


def test_probe_step_fixed_point() -> None:
    for dt in (0.001, 1.0, 100.0):
        assert probe_step(probe(37.0, BodyConstant()), 37.0, dt, TAU).probe_temp == 37.0


def test_probe_step_semigroup() -> None:
    start = probe(25.0, BodyConstant())
    twice = probe_step(probe_step(start, 37.0, 6.0, TAU), 37.0, 6.0, TAU)
    once = probe_step(start, 37.0, 12.0, TAU)
    assert twice.probe_temp == pytest.approx(once.probe_temp, abs=1e-12)


def test_probe_step_never_overshoots() -> None:
    state = probe(25.0, BodyConstant())
    previous = state.probe_temp
    for _ in range(200):
        state = probe_step(state, 37.0, 0.5, TAU)
        assert previous <= state.probe_temp <= 37.0
        previous = state.probe_temp


@parameterized.expand(
    [
        (0.0,),
        (-1.0,),
    ]
)
def test_probe_step_rejects(dt: float) -> None:
    with pytest.raises(NonPositiveDt):
        probe_step(probe(25.0, BodyConstant()), 37.0, dt, TAU)


def test_probe_step_matches_integration() -> None:
    exact = probe_step(probe(25.0, BodyConstant()), 37.0, 1.0, TAU).probe_temp
    assert exact == pytest.approx(rk4(lambda t: 37.0, 25.0, 0.0, 1.0, 1e-3), abs=1e-9)


def test_probe_advance_through_heater_ramps() -> None:
    heater = HeaterProfile()
    state = probe_advance(probe(30.0, heater), SimTime.from_seconds(40), TAU)
    assert state.probe_temp == pytest.approx(rk4(heater.at, 30.0, 0.0, 40.0, 1e-3), abs=1e-6)


def test_probe_advance_in_pieces() -> None:
    heater = HeaterProfile()
    state = probe(30.0, heater)
    for second in range(1, 41):
        state = probe_advance(state, SimTime.from_seconds(second), TAU)
    whole = probe_advance(probe(30.0, heater), SimTime.from_seconds(40), TAU)
    assert state.probe_temp == pytest.approx(whole.probe_temp, abs=1e-9)


def test_probe_advance_is_time_monotone() -> None:
    state = probe(30.0, HeaterProfile(), at=5.0)
    assert probe_advance(state, SimTime.from_seconds(5), TAU) is state
    with pytest.raises(NonPositiveDt):
        probe_advance(state, SimTime.from_seconds(4), TAU)


@parameterized.expand(
    [
        (37.0, 37.0),
        (36.987, 36.99),
        (36.984, 36.98),
        (-0.016, -0.02),
        (0.004, 0.0),
    ]
)
def test_quantize(value: float, expected: float) -> None:
    assert quantize(value, 0.01) == pytest.approx(expected, abs=1e-12)


def test_quantize_is_idempotent() -> None:
    stream = RngStream(3, 3)
    for _ in range(1000):
        once = quantize(stream.uniform(20.0, 45.0), 0.01)
        assert quantize(once, 0.01) == once


def test_sample_identity() -> None:
    assert sample(probe(37.0, BodyConstant()), SensorSpec(), 0.0) == 37.0


def test_sample_rounds_the_probe() -> None:
    assert sample(probe(36.987, BodyConstant()), SensorSpec(), 0.0) == pytest.approx(36.99)


def test_wireless_readings_stay_in_the_band() -> None:
    unit = Thermometer(1, SensorSpec(), BodyConstant(), RngStream(1, 1))
    readings = [unit.read(SimTime.from_seconds(t)) for t in range(60)]
    assert all(abs(r - 37.0) <= 0.125 + 0.005 + 1e-9 for r in readings)
    assert len(set(readings)) > 1


def test_wired_readings_stay_in_the_band() -> None:
    unit = Thermometer(1, SensorSpec.wired(), BodyConstant(), RngStream(1, 1))
    readings = [unit.read(SimTime.from_seconds(t)) for t in range(600)]
    assert max(abs(r - 37.0) for r in readings) <= 0.054 + 0.005 + 1e-9


def test_error_bound_holds_with_bias() -> None:
    spec = SensorSpec(bias=0.3)
    unit = Thermometer(1, spec, HeaterProfile(), RngStream(9, 1))
    for t in range(60):
        at = SimTime.from_seconds(t)
        value = unit.read(at)
        assert abs(value - unit.state.probe_temp) <= spec.error_bound + 1e-9


def test_bias_beyond_accuracy() -> None:
    with pytest.raises(ValidationError, match='sensor.bias'):
        SensorSpec(bias=0.5)


def test_unit_bias_is_drawn_within_accuracy() -> None:
    spec = SensorSpec(bias_fraction=1.0)
    biases = [spec.for_unit(RngStream(seed, 1)).bias for seed in range(200)]
    assert all(abs(b) <= spec.accuracy for b in biases)
    assert len(set(biases)) == 200
    assert spec.for_unit(RngStream(5, 1)).bias == spec.for_unit(RngStream(5, 1)).bias


def test_units_without_bias_fraction_keep_their_spec() -> None:
    spec = SensorSpec()
    assert spec.for_unit(RngStream(5, 1)) is spec


def test_contact_then_release() -> None:
    unit = Thermometer(1, SensorSpec(), BodyConstant(), RngStream(1, 1), in_contact=False)
    assert unit.state.probe_temp == 25.0

    unit.set_contact(True, SimTime(0))
    assert unit.advance(SimTime.from_seconds(12)).probe_temp == pytest.approx(36.600, abs=1e-3)

    unit.set_contact(False, SimTime.from_seconds(12))
    assert unit.advance(SimTime.from_seconds(132)).probe_temp == pytest.approx(25.0, abs=0.005)


def test_contact_and_release_follow_integration() -> None:
    unit = Thermometer(1, SensorSpec(), BodyConstant(), RngStream(1, 1), in_contact=False)
    expected = 25.0

    # Rests 5 s, touches the body for 12 s, then cools in the room for 20 s.
    phases = ((True, lambda t: 37.0, 5, 17), (False, lambda t: 25.0, 17, 37))
    for contact, env, begin, end in phases:
        unit.set_contact(contact, SimTime.from_seconds(begin))
        assert unit.state.probe_temp == pytest.approx(expected, abs=1e-6)
        for second in range(begin + 1, end + 1):
            expected = rk4(env, expected, second - 1, second, 1e-3)
            actual = unit.advance(SimTime.from_seconds(second)).probe_temp
            assert actual == pytest.approx(expected, abs=1e-6)


def test_short_contact_misses_the_accuracy_band() -> None:
    state = set_contact(probe(25.0, RoomAmbient()), True, BodyConstant())
    state = probe_advance(state, SimTime.from_seconds(2), TAU)
    assert state.probe_temp == pytest.approx(37.0 - 12.0 * math.exp(-2.0 / TAU))
    assert state.probe_temp == pytest.approx(30.19, abs=0.01)
    assert abs(state.probe_temp - 37.0) > 0.4


def test_truth_follows_the_subject() -> None:
    unit = Thermometer(1, SensorSpec(), HeaterProfile(), RngStream(1, 1))
    assert unit.truth(SimTime.from_seconds(15)) == pytest.approx(44.55)
