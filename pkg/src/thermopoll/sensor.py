from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Annotated, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

from thermopoll.clock import SimTime
from thermopoll.errors import NonPositiveDt
from thermopoll.rng import RngStream

BODY_TEMPERATURE_C = 37.0
ROOM_TEMPERATURE_C = 25.0

# The controlled heater's operating floor, used as the start of the response-time profile.
HEATER_START_C = 30.0


class BodyConstant(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    kind: Literal['body'] = 'body'
    value: float = BODY_TEMPERATURE_C

    def at(self, t: float) -> float:
        return self.value

    def rate_at(self, t: float) -> float:
        return 0.0

    def breakpoints(self) -> Tuple[float, ...]:
        return ()


class RoomAmbient(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    kind: Literal['room'] = 'room'
    value: float = ROOM_TEMPERATURE_C

    def at(self, t: float) -> float:
        return self.value

    def rate_at(self, t: float) -> float:
        return 0.0

    def breakpoints(self) -> Tuple[float, ...]:
        return ()


class RampSegment(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    rate: float
    duration: float = Field(gt=0)


def _response_time_segments() -> Tuple[RampSegment, ...]:
    return (RampSegment(rate=0.97, duration=15.0), RampSegment(rate=4.3, duration=13.0))


class HeaterProfile(BaseModel):
    """
    A piecewise-linear, continuous heater temperature: `start`, then each segment's rate for its
    duration, then held at whatever the last segment reached.
    """

    model_config = ConfigDict(frozen=True, extra='forbid')

    kind: Literal['heater'] = 'heater'
    start: float = HEATER_START_C
    segments: Tuple[RampSegment, ...] = Field(default_factory=_response_time_segments)

    @classmethod
    def constant(cls, value: float) -> HeaterProfile:
        return cls(start=value, segments=())

    @property
    def ramp_end(self) -> float:
        return sum(segment.duration for segment in self.segments)

    @property
    def plateau(self) -> float:
        return self.start + sum(segment.rate * segment.duration for segment in self.segments)

    def at(self, t: float) -> float:
        value = self.start
        elapsed = t
        for segment in self.segments:
            if elapsed <= segment.duration:
                return value + segment.rate * elapsed
            value += segment.rate * segment.duration
            elapsed -= segment.duration
        return value

    def rate_at(self, t: float) -> float:
        begin = 0.0
        for segment in self.segments:
            if begin <= t < begin + segment.duration:
                return segment.rate
            begin += segment.duration
        return 0.0

    def breakpoints(self) -> Tuple[float, ...]:
        points = []
        total = 0.0
        for segment in self.segments:
            total += segment.duration
            points.append(total)
        return tuple(points)

    def segment_bounds(self) -> Tuple[Tuple[float, float], ...]:
        bounds = []
        begin = 0.0
        for segment in self.segments:
            bounds.append((begin, begin + segment.duration))
            begin += segment.duration
        return tuple(bounds)


TemperatureSource = Annotated[
    Union[BodyConstant, HeaterProfile, RoomAmbient], Field(discriminator='kind')
]


def true_temperature(source: TemperatureSource, t: SimTime) -> float:
    return source.at(t.seconds)


class SensorSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    accuracy: float = Field(default=0.4, gt=0)
    resolution: float = Field(default=0.01, gt=0)
    noise_amp: float = Field(default=0.125, ge=0)
    bias: float = 0.0
    bias_fraction: float = Field(default=0.0, ge=0, le=1)
    tau: float = Field(default=3.528, gt=0)

    @model_validator(mode='after')
    def _check_bias(self) -> SensorSpec:
        if abs(self.bias) > self.accuracy:
            raise ValueError(
                f'sensor.bias: |{self.bias}| exceeds the stated accuracy {self.accuracy}'
            )
        return self

    @classmethod
    def wired(cls) -> SensorSpec:
        return cls(noise_amp=0.054)

    @property
    def error_bound(self) -> float:
        """
        The largest possible `|reading - probe temperature|`.
        """
        return abs(self.bias) + self.noise_amp + self.resolution / 2

    def for_unit(self, stream: RngStream) -> SensorSpec:
        """
        The spec of one physical unit, with its bias drawn once from the unit's own stream.
        """
        limit = self.accuracy * self.bias_fraction
        drawn = stream.uniform(-limit, limit)
        if self.bias_fraction == 0:
            return self
        return self.model_copy(update={'bias': drawn})


@dataclass(frozen=True)
class ProbeState:
    probe_temp: float
    in_contact: bool
    last_update: SimTime
    environment: TemperatureSource

    def __post_init__(self) -> None:
        assert math.isfinite(self.probe_temp)


def quantize(value: float, resolution: float) -> float:
    """
    Round to the nearest multiple of `resolution`, halves away from zero.
    """
    steps = math.floor(abs(value) / resolution + 0.5)
    return math.copysign(round(steps * resolution, 10), value) if steps else 0.0


def probe_ramp_step(temp: float, env_start: float, rate: float, dt: float, tau: float) -> float:
    """
    Exact first-order response over `dt` seconds to an environment that starts at `env_start`
    and changes linearly at `rate` degrees per second.
    """
    env_end = env_start + rate * dt
    lag = rate * tau
    return env_end - lag + (temp - env_start + lag) * math.exp(-dt / tau)


def probe_step(state: ProbeState, env_temp: float, dt: float, tau: float) -> ProbeState:
    if dt <= 0:
        raise NonPositiveDt(f'probe step must be positive, got {dt}')
    temp = env_temp + (state.probe_temp - env_temp) * math.exp(-dt / tau)
    return replace(state, probe_temp=temp, last_update=state.last_update.after(seconds=dt))


def probe_advance(state: ProbeState, until: SimTime, tau: float) -> ProbeState:
    """
    Follow the probe's current environment from `state.last_update` up to `until`, solving each
    linear piece of the environment exactly.
    """
    if until < state.last_update:
        raise NonPositiveDt(
            f'probe updates are time-monotone: {int(until)} is before {int(state.last_update)}'
        )
    if until == state.last_update:
        return state

    env = state.environment
    t = state.last_update.seconds
    end = until.seconds
    temp = state.probe_temp
    for point in env.breakpoints():
        if t < point < end:
            temp = probe_ramp_step(temp, env.at(t), env.rate_at(t), point - t, tau)
            t = point
    temp = probe_ramp_step(temp, env.at(t), env.rate_at(t), end - t, tau)
    return replace(state, probe_temp=temp, last_update=until)


def sample(state: ProbeState, spec: SensorSpec, noise_draw: float) -> float:
    assert abs(noise_draw) <= spec.noise_amp + 1e-12, f'noise {noise_draw} outside the band'
    return quantize(state.probe_temp + spec.bias + noise_draw, spec.resolution)


def set_contact(state: ProbeState, in_contact: bool, env: TemperatureSource) -> ProbeState:
    return replace(state, in_contact=in_contact, environment=env)


class Thermometer:
    """
    One thermometer unit: a probe following either its subject (in contact) or the room, read
    through the unit's bias, the link's bounded noise and the sensor's resolution.
    """

    def __init__(
        self,
        node_id: int,
        spec: SensorSpec,
        subject: TemperatureSource,
        stream: RngStream,
        ambient: Optional[TemperatureSource] = None,
        in_contact: bool = True,
        start: SimTime = SimTime(0),
    ) -> None:
        self.node_id = node_id
        self.stream = stream
        self.spec = spec.for_unit(stream)
        self.subject: TemperatureSource = subject
        self.ambient: TemperatureSource = ambient if ambient is not None else RoomAmbient()

        env = self.subject if in_contact else self.ambient
        # Units start equilibrated with whatever they touch.
        self.state = ProbeState(
            probe_temp=env.at(start.seconds),
            in_contact=in_contact,
            last_update=start,
            environment=env,
        )

    def advance(self, at: SimTime) -> ProbeState:
        self.state = probe_advance(self.state, at, self.spec.tau)
        return self.state

    def set_contact(self, in_contact: bool, at: SimTime) -> None:
        self.advance(at)
        env = self.subject if in_contact else self.ambient
        self.state = set_contact(self.state, in_contact, env)

    def read(self, at: SimTime) -> float:
        self.advance(at)
        noise = self.stream.uniform(-self.spec.noise_amp, self.spec.noise_amp)
        return sample(self.state, self.spec, noise)

    def truth(self, at: SimTime) -> float:
        return true_temperature(self.subject, at)
