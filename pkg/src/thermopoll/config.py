from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Annotated, Any, Dict, Literal, Optional, Tuple, Type, TypeVar, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_core import ErrorDetails

from thermopoll.channel import ChannelParams, ScenarioKind
from thermopoll.errors import ScenarioParseError, ScenarioValidationError
from thermopoll.monitor import PipelineConfig
from thermopoll.protocol import ProtocolTiming
from thermopoll.rng import MAX_NODE_STREAM_ID
from thermopoll.sensor import BODY_TEMPERATURE_C, HeaterProfile, SensorSpec

logger = logging.getLogger(__name__)

SEED_LIMIT = 2**64


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')


class Placement(_Frozen):
    kind: ScenarioKind = ScenarioKind.S4_LineOfSight
    distance_m: float = Field(default=10.0, ge=1.0)
    speed_mps: float = Field(default=0.0, ge=0.0)

    @model_validator(mode='after')
    def _check_motion(self) -> Placement:
        if self.speed_mps > 0 and not self.kind.moving:
            raise ValueError(
                f'scenario.speed_mps: only {ScenarioKind.S3_MovingAway.value} moves, '
                f'{self.kind.value} sits at a fixed distance'
            )
        return self


class ChannelOverrides(_Frozen):
    """
    Channel parameters set in a scenario file. Whatever is left unset takes the default of the
    scenario kind.
    """

    tx_power_dbm: Optional[float] = None
    ref_loss_db: Optional[float] = None
    exponent: Optional[float] = None
    shadow_sigma_db: Optional[float] = None
    sensitivity_dbm: Optional[float] = None
    cs_threshold_dbm: Optional[float] = None
    bitrate_bps: Optional[int] = None
    packet_error_rate: Optional[float] = None

    def resolve(self, kind: ScenarioKind) -> ChannelParams:
        return ChannelParams.for_scenario(kind, **self.model_dump(exclude_none=True))


class ThermometerConfig(_Frozen):
    id: int = Field(ge=1, le=MAX_NODE_STREAM_ID)
    patient: Optional[str] = None
    distance_m: Optional[float] = Field(default=None, ge=1.0)

    @property
    def patient_id(self) -> str:
        return self.patient if self.patient is not None else f'{self.id:016x}'


def _default_thermometers() -> Tuple[ThermometerConfig, ...]:
    return (
        ThermometerConfig(id=1, patient='patient-1'),
        ThermometerConfig(id=2, patient='patient-2'),
    )


class StabilitySpec(_Frozen):
    kind: Literal['stability'] = 'stability'
    duration_s: float = Field(default=60.0, gt=0)
    body_c: float = BODY_TEMPERATURE_C


class WiredSpec(_Frozen):
    kind: Literal['wired'] = 'wired'
    duration_s: float = Field(default=60.0, gt=0)
    sample_period_s: float = Field(default=1.0, gt=0)
    noise_amp: float = Field(default=0.054, ge=0)
    body_c: float = BODY_TEMPERATURE_C


def _setpoints() -> Tuple[float, ...]:
    return tuple(float(value) for value in range(30, 41))


class LinearitySpec(_Frozen):
    kind: Literal['linearity'] = 'linearity'
    setpoints: Tuple[float, ...] = Field(default_factory=_setpoints, min_length=1)
    duration_s: float = Field(default=10.0, gt=0)
    bias_fraction: float = Field(default=1.0, ge=0, le=1)
    seeds: int = Field(default=5, ge=1)

    @model_validator(mode='after')
    def _check_setpoints(self) -> LinearitySpec:
        if len(set(self.setpoints)) < 2:
            raise ValueError(
                'experiment.setpoints: a linear fit needs at least two distinct setpoints'
            )
        return self


class ResponseSpec(_Frozen):
    kind: Literal['response'] = 'response'
    heater: HeaterProfile = Field(default_factory=HeaterProfile)
    duration_s: float = Field(default=60.0, gt=0)
    probe_step_s: float = Field(default=0.01, gt=0)
    seeds: int = Field(default=5, ge=1)

    @model_validator(mode='after')
    def _check_profile(self) -> ResponseSpec:
        if not self.heater.segments:
            raise ValueError(
                'experiment.heater.segments: the response test needs at least one ramp'
            )
        if self.duration_s <= self.heater.ramp_end:
            raise ValueError(
                f'experiment.duration_s: {self.duration_s} s ends before the heater plateau at '
                f'{self.heater.ramp_end} s'
            )
        return self


def _contact_grid() -> Tuple[float, ...]:
    return tuple(float(value) for value in range(2, 19, 2))


class AgilitySpec(_Frozen):
    kind: Literal['agility'] = 'agility'
    contact_grid: Tuple[float, ...] = Field(default_factory=_contact_grid, min_length=1)
    rest_s: float = Field(default=30.0, gt=0)
    mercury_dwell_s: float = Field(default=120.0, gt=0)
    body_c: float = BODY_TEMPERATURE_C

    @model_validator(mode='after')
    def _check_grid(self) -> AgilitySpec:
        if any(value <= 0 for value in self.contact_grid):
            raise ValueError('experiment.contact_grid: contact durations must be positive')
        return self


def _connectivity_scenarios() -> Tuple[ScenarioKind, ...]:
    return tuple(ScenarioKind)


def _distances() -> Tuple[float, ...]:
    return (10.0, 20.0, 30.0, 40.0, 50.0)


class ConnectivitySpec(_Frozen):
    kind: Literal['connectivity'] = 'connectivity'
    scenarios: Tuple[ScenarioKind, ...] = Field(
        default_factory=_connectivity_scenarios, min_length=1
    )
    distances_m: Tuple[float, ...] = Field(default_factory=_distances, min_length=1)
    duration_s: float = Field(default=60.0, gt=0)
    seeds: int = Field(default=5, ge=1)
    moving_speed_mps: float = Field(default=0.1, ge=0)

    @model_validator(mode='after')
    def _check_distances(self) -> ConnectivitySpec:
        if any(value < 1.0 for value in self.distances_m):
            raise ValueError('experiment.distances_m: distances start at the 1 m reference')
        return self


def _n_grid() -> Tuple[int, ...]:
    return (1, 2, 4, 8, 16, 32)


class ScalingSpec(_Frozen):
    kind: Literal['scaling'] = 'scaling'
    n_grid: Tuple[int, ...] = Field(default_factory=_n_grid, min_length=1)
    rounds: int = Field(default=3, ge=1)
    detection_rate_c_per_s: float = Field(default=0.01, gt=0)
    simulate: bool = True

    @model_validator(mode='after')
    def _check_grid(self) -> ScalingSpec:
        if any(n < 1 for n in self.n_grid):
            raise ValueError('experiment.n_grid: every roster size must be at least 1')
        return self


ExperimentSpec = Annotated[
    Union[
        StabilitySpec,
        WiredSpec,
        LinearitySpec,
        ResponseSpec,
        AgilitySpec,
        ConnectivitySpec,
        ScalingSpec,
    ],
    Field(discriminator='kind'),
]

EXPERIMENT_SPECS: Dict[str, Type[BaseModel]] = {
    'stability': StabilitySpec,
    'wired': WiredSpec,
    'linearity': LinearitySpec,
    'response': ResponseSpec,
    'agility': AgilitySpec,
    'connectivity': ConnectivitySpec,
    'scaling': ScalingSpec,
}


class ScenarioConfig(_Frozen):
    seed: int = Field(default=0, ge=0, lt=SEED_LIMIT)
    scenario: Placement = Field(default_factory=Placement)
    channel: ChannelOverrides = Field(default_factory=ChannelOverrides)
    sensor: SensorSpec = Field(default_factory=SensorSpec)
    protocol: ProtocolTiming = Field(default_factory=ProtocolTiming)
    pipeline: PipelineConfig = Field(default_factory=PipelineConfig)
    thermometers: Tuple[ThermometerConfig, ...] = Field(
        default_factory=_default_thermometers, min_length=1
    )
    experiment: ExperimentSpec = Field(default_factory=StabilitySpec)

    @model_validator(mode='after')
    def _check_channel(self) -> ScenarioConfig:
        kind = self.scenario.kind
        exponent = self.channel.exponent
        if exponent is not None:
            if kind.line_of_sight and exponent != 2.0:
                raise ValueError(
                    f'channel.exponent: line-of-sight {kind.value} uses exponent 2, got {exponent}'
                )
            if not kind.line_of_sight and exponent < 2.0:
                raise ValueError(
                    f'channel.exponent: non-line-of-sight {kind.value} needs exponent >= 2, '
                    f'got {exponent}'
                )
        try:
            self.channel.resolve(kind)
        except ValidationError as e:
            raise ValueError(_describe(e, within='channel')) from e
        return self

    @model_validator(mode='after')
    def _check_unique_ids(self) -> ScenarioConfig:
        seen = set()
        for thermometer in self.thermometers:
            if thermometer.id in seen:
                raise ValueError(
                    f'thermometers: identification code {thermometer.id:#x} is used twice'
                )
            seen.add(thermometer.id)
        return self

    @model_validator(mode='after')
    def _check_roster_fits_round(self) -> ScenarioConfig:
        timing = self.protocol
        slot = timing.round_period / len(self.thermometers)
        # Same tolerance as the central node applies when it builds its slot plan.
        if slot + 1e-12 < timing.min_slot:
            raise ValueError(
                f'thermometers: {len(self.thermometers)} thermometers split the '
                f'{timing.round_period} s protocol.round_period into {slot:.6f} s slots, '
                f'below protocol.min_slot {timing.min_slot} s'
            )
        return self

    @property
    def channel_params(self) -> ChannelParams:
        return self.channel.resolve(self.scenario.kind)

    @property
    def patients(self) -> Dict[int, str]:
        return {thermometer.id: thermometer.patient_id for thermometer in self.thermometers}


ModelT = TypeVar('ModelT', bound=BaseModel)


def with_experiment(config: ScenarioConfig, kind: str) -> ScenarioConfig:
    """
    `config` running experiment `kind`: its own spec when it already names that kind, otherwise the
    kind's defaults.
    """
    if config.experiment.kind == kind:
        return config
    spec = EXPERIMENT_SPECS[kind]()
    return config.model_copy(update={'experiment': spec})


def replace(config: ModelT, **changes: Any) -> ModelT:
    """
    A validated copy of `config` with `changes` applied.
    """
    values = config.model_dump()
    values.update(changes)
    return type(config).model_validate(values)


def config_hash(config: ScenarioConfig) -> str:
    canonical = json.dumps(config.model_dump(mode='json'), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _location(error: ErrorDetails) -> str:
    # Union members and validator wrappers show up in `loc`, only field names make a key.
    parts = [str(part) for part in error['loc'] if not str(part).startswith('function-')]
    return '.'.join(parts)


def _describe(error: ValidationError, within: str = '') -> str:
    lines = []
    for item in error.errors():
        location = '.'.join(part for part in (within, _location(item)) if part)
        message = item['msg'].removeprefix('Value error, ')
        # Model validators already lead with the field they complain about.
        if location and not message.startswith(location):
            message = f'{location}: {message}'
        lines.append(message)
    return '; '.join(lines)


def parse_scenario(text: str, source: str = '<string>') -> ScenarioConfig:
    if not text.strip():
        return ScenarioConfig()

    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioParseError(f'{source}: line {e.lineno} column {e.colno}: {e.msg}') from e
    if not isinstance(data, dict):
        raise ScenarioParseError(f'{source}: expected a JSON object at the top level')

    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as e:
        raise ScenarioValidationError(f'{source}: {_describe(e)}') from e


def load_scenario(path: Union[str, Path]) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as e:
        raise ScenarioParseError(f'{path}: {e.strerror or e}') from e

    config = parse_scenario(text, source=str(path))
    logger.debug('loaded %s: %s, seed %d', path, config.experiment.kind, config.seed)
    return config
