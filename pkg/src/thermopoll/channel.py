from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Protocol, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

from thermopoll.clock import SimTime
from thermopoll.engine import Engine, Event
from thermopoll.errors import DistanceTooSmall, NonPositiveDt, SelfDelivery, UnknownNode
from thermopoll.rng import RngStream

logger = logging.getLogger(__name__)

CENTRAL_NODE_ID = 0
CHANNEL_TARGET = 'channel'

REFERENCE_DISTANCE_M = 1.0

# 20 * log10(4 * pi * 1 m * 2.4 GHz / c)
FREE_SPACE_LOSS_1M_DB = 40.05


class ScenarioKind(str, enum.Enum):
    S1_FurnishedRoom = 'S1'
    S2_EmptyRoom = 'S2'
    S3_MovingAway = 'S3'
    S4_LineOfSight = 'S4'

    @property
    def line_of_sight(self) -> bool:
        return self is ScenarioKind.S4_LineOfSight

    @property
    def moving(self) -> bool:
        return self is ScenarioKind.S3_MovingAway

    @property
    def default_exponent(self) -> float:
        return _SCENARIO_DEFAULTS[self][0]

    @property
    def default_shadow_sigma_db(self) -> float:
        return _SCENARIO_DEFAULTS[self][1]


_SCENARIO_DEFAULTS: Dict[ScenarioKind, Tuple[float, float]] = {
    ScenarioKind.S1_FurnishedRoom: (3.0, 4.0),
    ScenarioKind.S2_EmptyRoom: (2.5, 2.0),
    ScenarioKind.S3_MovingAway: (3.0, 4.0),
    ScenarioKind.S4_LineOfSight: (2.0, 0.0),
}


class ChannelParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    tx_power_dbm: float = 0.0
    ref_loss_db: float = FREE_SPACE_LOSS_1M_DB
    exponent: float = Field(default=2.0, ge=2.0)
    shadow_sigma_db: float = Field(default=0.0, ge=0.0)
    sensitivity_dbm: float = -90.0
    cs_threshold_dbm: float = -75.0
    bitrate_bps: int = Field(default=250_000, gt=0)
    packet_error_rate: float = Field(default=0.0, ge=0.0, le=1.0)

    @model_validator(mode='after')
    def _check_thresholds(self) -> ChannelParams:
        if not self.sensitivity_dbm <= self.cs_threshold_dbm <= self.tx_power_dbm:
            raise ValueError(
                'channel: expected sensitivity_dbm <= cs_threshold_dbm <= tx_power_dbm, got '
                f'{self.sensitivity_dbm} / {self.cs_threshold_dbm} / {self.tx_power_dbm}'
            )
        return self

    @classmethod
    def for_scenario(cls, kind: ScenarioKind, **overrides: object) -> ChannelParams:
        values: Dict[str, object] = {
            'exponent': kind.default_exponent,
            'shadow_sigma_db': kind.default_shadow_sigma_db,
        }
        values.update(overrides)
        return cls.model_validate(values)

    def airtime_us(self, payload_bytes: int) -> int:
        """
        Airtime of a packet, rounded up to whole microseconds.
        """
        assert payload_bytes > 0
        return -(-8 * payload_bytes * 1_000_000 // self.bitrate_bps)


def received_power(params: ChannelParams, distance: float, shadow_draw: float) -> float:
    if distance < REFERENCE_DISTANCE_M:
        raise DistanceTooSmall(
            f'distance {distance} m is below the {REFERENCE_DISTANCE_M} m reference distance'
        )
    path_loss = params.ref_loss_db + 10.0 * params.exponent * math.log10(distance)
    return params.tx_power_dbm - path_loss + shadow_draw


class Frame(Protocol):
    @property
    def wire_size(self) -> int: ...


@dataclass
class NodeKinematics:
    node_id: int
    position: float
    velocity: float = 0.0

    def __post_init__(self) -> None:
        assert self.position > 0, f'node {self.node_id:#x} must sit away from the central node'


@dataclass(frozen=True)
class Transmission:
    sender: int
    start: SimTime
    airtime: int
    power_dbm: float
    packet: Frame

    def __post_init__(self) -> None:
        assert self.airtime > 0

    @property
    def end(self) -> int:
        return int(self.start) + self.airtime

    def overlaps(self, other: Transmission) -> bool:
        # Occupancy is half-open, abutting transmissions do not overlap.
        return self.start < other.end and other.start < self.end


class CarrierState(enum.Enum):
    Idle = 'idle'
    Busy = 'busy'


@dataclass(frozen=True)
class Delivered:
    rssi_dbm: float


@dataclass(frozen=True)
class LostWeakSignal:
    rssi_dbm: float


@dataclass(frozen=True)
class Collided:
    interferer: int


DeliveryOutcome = Union[Delivered, LostWeakSignal, Collided]


@dataclass(frozen=True)
class TransmissionEnd:
    transmission: Transmission


Receiver = Callable[[Transmission, float], None]
Impairment = Callable[[Transmission, int], bool]


@dataclass
class ChannelStats:
    transmissions: int = 0
    delivered: int = 0
    lost_weak_signal: int = 0
    collided: int = 0


class Channel:
    """
    The shared medium around one central node. Every transmission reaches every attached node,
    each of which decides for itself whether the packet is addressed to it.
    """

    def __init__(
        self,
        engine: Engine,
        params: ChannelParams,
        stream: RngStream,
        keep_log: bool = False,
    ) -> None:
        self.engine = engine
        self.params = params
        self.stream = stream
        self.stats = ChannelStats()
        self.log: Optional[List[Transmission]] = [] if keep_log else None
        self.impairment: Optional[Impairment] = None

        self._nodes: Dict[int, NodeKinematics] = {}
        self._receivers: Dict[int, Receiver] = {}
        self._in_flight: List[Transmission] = []
        self._longest_airtime = 0

        engine.register(CHANNEL_TARGET, self._on_event)

    def register(self, node_id: int, position: float, velocity: float = 0.0) -> NodeKinematics:
        assert node_id != CENTRAL_NODE_ID, 'the central node sits at the origin'
        assert node_id not in self._nodes, f'node {node_id:#x} registered twice'
        node = NodeKinematics(node_id=node_id, position=position, velocity=velocity)
        self._nodes[node_id] = node
        return node

    def attach(self, node_id: int, receiver: Receiver) -> None:
        self._check_known(node_id)
        self._receivers[node_id] = receiver

    def kinematics(self, node_id: int) -> NodeKinematics:
        self._check_known(node_id)
        return self._nodes[node_id]

    def distance(self, a: int, b: int) -> float:
        self._check_known(a)
        self._check_known(b)
        position_a = 0.0 if a == CENTRAL_NODE_ID else self._nodes[a].position
        position_b = 0.0 if b == CENTRAL_NODE_ID else self._nodes[b].position
        # Nodes closer than the reference distance are treated as being at it.
        return max(abs(position_a - position_b), REFERENCE_DISTANCE_M)

    def mean_power_at(self, tx: Transmission, node_id: int) -> float:
        return received_power(self.params, self.distance(tx.sender, node_id), 0.0)

    def carrier_sense(self, node_id: int, at: int) -> CarrierState:
        self._check_known(node_id)
        for tx in self._in_flight:
            if tx.sender == node_id or not tx.start <= at < tx.end:
                continue
            if self.mean_power_at(tx, node_id) > self.params.cs_threshold_dbm:
                return CarrierState.Busy
        return CarrierState.Idle

    def deliver(self, tx: Transmission, receiver: int, shadow_draw: float) -> DeliveryOutcome:
        if receiver == tx.sender:
            raise SelfDelivery(f'node {receiver:#x} cannot receive its own transmission')
        self._check_known(receiver)

        for other in self._in_flight:
            if other is tx or other.sender in (tx.sender, receiver) or not other.overlaps(tx):
                continue
            if self.mean_power_at(other, receiver) >= self.params.sensitivity_dbm:
                return Collided(interferer=other.sender)

        rssi = received_power(self.params, self.distance(tx.sender, receiver), shadow_draw)
        if rssi < self.params.sensitivity_dbm:
            return LostWeakSignal(rssi_dbm=rssi)
        return Delivered(rssi_dbm=rssi)

    def advance_kinematics(self, dt: float) -> None:
        if dt <= 0:
            raise NonPositiveDt(f'kinematics step must be positive, got {dt}')
        for node in self._nodes.values():
            node.position += node.velocity * dt

    def transmit(
        self, sender: int, packet: Frame, airtime_us: Optional[int] = None
    ) -> Transmission:
        """
        Put `packet` on the air now. Receivers are notified when the airtime has elapsed.
        """
        self._check_known(sender)
        now = self.engine.now
        tx = Transmission(
            sender=sender,
            start=now,
            airtime=airtime_us or self.params.airtime_us(packet.wire_size),
            power_dbm=self.params.tx_power_dbm,
            packet=packet,
        )
        self._prune(now)
        self._in_flight.append(tx)
        self._longest_airtime = max(self._longest_airtime, tx.airtime)
        self.stats.transmissions += 1
        if self.log is not None:
            self.log.append(tx)

        self.engine.schedule(tx.end, CHANNEL_TARGET, TransmissionEnd(tx))
        return tx

    def _on_event(self, event: Event) -> None:
        payload = event.payload
        assert isinstance(payload, TransmissionEnd)
        tx = payload.transmission

        for receiver in sorted(self._receivers):
            if receiver == tx.sender:
                continue

            shadow = 0.0
            if self.params.shadow_sigma_db > 0:
                shadow = self.stream.gaussian(0.0, self.params.shadow_sigma_db)
            outcome = self.deliver(tx, receiver, shadow)

            if isinstance(outcome, Delivered):
                dropped = self.params.packet_error_rate > 0 and self.stream.bernoulli(
                    self.params.packet_error_rate
                )
                if dropped or (self.impairment is not None and self.impairment(tx, receiver)):
                    outcome = LostWeakSignal(rssi_dbm=outcome.rssi_dbm)

            if isinstance(outcome, Delivered):
                self.stats.delivered += 1
                self._receivers[receiver](tx, outcome.rssi_dbm)
            elif isinstance(outcome, Collided):
                self.stats.collided += 1
                logger.debug(
                    '%s from %#x collided at %#x with traffic from %#x',
                    type(tx.packet).__name__,
                    tx.sender,
                    receiver,
                    outcome.interferer,
                )
            else:
                self.stats.lost_weak_signal += 1

    def _prune(self, now: int) -> None:
        horizon = now - self._longest_airtime
        self._in_flight = [tx for tx in self._in_flight if tx.end > horizon]

    def _check_known(self, node_id: int) -> None:
        if node_id != CENTRAL_NODE_ID and node_id not in self._nodes:
            raise UnknownNode(f'node {node_id:#x} is not registered with the channel')
