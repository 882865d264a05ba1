from __future__ import annotations

import enum
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

from thermopoll.channel import CENTRAL_NODE_ID, CarrierState, Channel, Transmission
from thermopoll.clock import SimTime, duration
from thermopoll.engine import Engine, Event, EventHandle
from thermopoll.errors import EmptyRoster, MalformedFrame, SlotOverrun, StaleData
from thermopoll.monitor import Pipeline, ReadingRecord, SlotOutcome
from thermopoll.rng import RngStream
from thermopoll.sensor import Thermometer

logger = logging.getLogger(__name__)

MASTER_TARGET = 'master'

POLL_SIZE = 12
DATA_SIZE = 16
ACK_SIZE = 12

SEQ_MODULUS = 2**16

# Covers the poll and data airtimes of one exchange at the default bitrate.
AIRTIME_ALLOWANCE_S = 0.001

_HEADER = struct.Struct('>BQH')
_READING = struct.Struct('>h')


class FrameTag(enum.IntEnum):
    Poll = 1
    Data = 2
    Ack = 3


def _pad(body: bytes, size: int) -> bytes:
    assert len(body) <= size
    return body + bytes(size - len(body))


@dataclass(frozen=True)
class Poll:
    target: int
    seq: int

    @property
    def wire_size(self) -> int:
        return POLL_SIZE

    def encode(self) -> bytes:
        return _pad(_HEADER.pack(FrameTag.Poll, self.target, self.seq), POLL_SIZE)


@dataclass(frozen=True)
class Data:
    sender: int
    seq: int
    reading: float
    sample_time: SimTime

    @property
    def wire_size(self) -> int:
        return DATA_SIZE

    def encode(self) -> bytes:
        centi = int(round(self.reading * 100))
        body = _HEADER.pack(FrameTag.Data, self.sender, self.seq) + _READING.pack(centi)
        return _pad(body, DATA_SIZE)


@dataclass(frozen=True)
class Ack:
    target: int
    seq: int

    @property
    def wire_size(self) -> int:
        return ACK_SIZE

    def encode(self) -> bytes:
        return _pad(_HEADER.pack(FrameTag.Ack, self.target, self.seq), ACK_SIZE)


Packet = Union[Poll, Data, Ack]


class WireFrame(NamedTuple):
    tag: FrameTag
    node: int
    seq: int
    reading: Optional[float] = None


def decode(buffer: bytes) -> WireFrame:
    """
    Parse the on-air layout. The sample time of a Data frame never travels, so only the reading
    comes back.
    """
    if len(buffer) < _HEADER.size:
        raise MalformedFrame(f'a frame needs at least {_HEADER.size} bytes, got {len(buffer)}')
    raw_tag, node, seq = _HEADER.unpack_from(buffer)
    try:
        tag = FrameTag(raw_tag)
    except ValueError as e:
        raise MalformedFrame(f'unknown frame tag {raw_tag}') from e

    expected = {FrameTag.Poll: POLL_SIZE, FrameTag.Data: DATA_SIZE, FrameTag.Ack: ACK_SIZE}[tag]
    if len(buffer) != expected:
        raise MalformedFrame(f'{tag.name} frames are {expected} bytes, got {len(buffer)}')
    if tag is FrameTag.Data:
        (centi,) = _READING.unpack_from(buffer, _HEADER.size)
        return WireFrame(tag, node, seq, centi / 100)
    return WireFrame(tag, node, seq)


class Policy(str, enum.Enum):
    Sequential = 'sequential'
    Random = 'random'


class ProtocolTiming(BaseModel):
    """
    Timing of the polling schedule and of one poll/data/ack exchange, all in seconds.
    """

    model_config = ConfigDict(frozen=True, extra='forbid')

    policy: Policy = Policy.Sequential
    round_period: float = Field(default=1.0, gt=0)
    min_slot: float = Field(default=0.1, gt=0)
    cs_delay: float = Field(default=0.001, gt=0)
    cs_retries: int = Field(default=3, ge=0)
    cs_backoff: float = Field(default=0.002, gt=0)
    poll_timeout: float = Field(default=0.02, gt=0)
    data_retries: int = Field(default=2, ge=0)
    ack_timeout: float = Field(default=0.005, gt=0)
    ack_retries: int = Field(default=1, ge=0)

    @model_validator(mode='after')
    def _check_slot_fits_exchange(self) -> ProtocolTiming:
        if self.min_slot < self.exchange_budget:
            raise ValueError(
                f'protocol.min_slot: {self.min_slot} s cannot hold a full exchange, which can take '
                f'up to {self.exchange_budget:.6f} s'
            )
        return self

    @property
    def exchange_budget(self) -> float:
        """
        The longest a slot can stay busy: every poll attempt timing out, or the last poll's
        thermometer exhausting its carrier-sense and acknowledgement retries.
        """
        polls = (self.data_retries + 1) * self.poll_timeout + AIRTIME_ALLOWANCE_S
        attempt = self.cs_delay + self.cs_retries * self.cs_backoff + AIRTIME_ALLOWANCE_S
        slave = self.data_retries * self.poll_timeout + (self.ack_retries + 1) * (
            attempt + self.ack_timeout
        )
        return max(polls, slave)

    def ticks(self, name: str) -> int:
        return duration(seconds=getattr(self, name))


@dataclass
class PendingPoll:
    target: int
    seq: int
    deadline: SimTime
    attempt: int
    slot_index: int
    slot_start: SimTime
    timeout: EventHandle


@dataclass
class MasterState:
    roster: Tuple[int, ...]
    policy: Policy = Policy.Sequential
    cursor: int = 0
    seq: int = 0
    misses: Dict[int, int] = field(default_factory=dict)
    retries: Dict[int, int] = field(default_factory=dict)
    pending: Optional[PendingPoll] = None

    def next_seq(self) -> int:
        self.seq = (self.seq + 1) % SEQ_MODULUS
        return self.seq


def master_next_target(state: MasterState, stream: RngStream) -> int:
    if not state.roster:
        raise EmptyRoster('cannot choose a target from an empty roster')
    if state.policy is Policy.Sequential:
        target = state.roster[state.cursor % len(state.roster)]
        state.cursor += 1
        return target
    return state.roster[stream.index(len(state.roster))]


class TimeoutAction(enum.Enum):
    Retry = 'retry'
    Miss = 'miss'


@dataclass(frozen=True)
class StartSlot:
    index: int


@dataclass(frozen=True)
class PollTimeout:
    seq: int


@dataclass
class ProtocolStats:
    slots: int = 0
    polls: int = 0
    repolls: int = 0
    acks: int = 0
    misses: int = 0
    stale: int = 0


class Master:
    """
    The central node. It owns the slot schedule: slot `k` starts at a fixed offset in its round,
    whatever happened in earlier slots, and at most one poll is pending at any time.
    """

    def __init__(
        self,
        engine: Engine,
        channel: Channel,
        roster: Sequence[int],
        timing: ProtocolTiming,
        stream: RngStream,
        pipeline: Optional[Pipeline] = None,
    ) -> None:
        if not roster:
            raise EmptyRoster('the central node needs at least one thermometer to poll')
        slot = timing.round_period / len(roster)
        if slot + 1e-12 < timing.min_slot:
            raise SlotOverrun(
                f'a {timing.round_period} s round split over {len(roster)} thermometers gives '
                f'{slot:.6f} s slots, below the {timing.min_slot} s minimum'
            )

        self.engine = engine
        self.channel = channel
        self.timing = timing
        self.stream = stream
        self.pipeline = pipeline
        self.state = MasterState(roster=tuple(roster), policy=timing.policy)
        self.stats = ProtocolStats()
        self.records: List[ReadingRecord] = []
        self.slots: List[SlotOutcome] = []

        self._round_ticks = timing.ticks('round_period')
        self._until: Optional[SimTime] = None
        self._next_slot = 0

        engine.register(MASTER_TARGET, self._on_event)
        channel.attach(CENTRAL_NODE_ID, self._on_receive)

    @property
    def n(self) -> int:
        return len(self.state.roster)

    def slot_start(self, index: int) -> SimTime:
        rounds, position = divmod(index, self.n)
        return SimTime(rounds * self._round_ticks + position * self._round_ticks // self.n)

    def start(self, until: SimTime) -> None:
        """
        Run the schedule up to `until`, carrying on from the last slot of an earlier run. Only
        slots starting before `until` are run.
        """
        self._until = until
        begin = self.slot_start(self._next_slot)
        if begin < until:
            self.engine.schedule(
                max(begin, self.engine.now), MASTER_TARGET, StartSlot(self._next_slot)
            )

    def start_slot(self, index: int) -> Poll:
        if self.state.pending is not None:
            raise SlotOverrun(
                f'slot {index} started while the poll to {self.state.pending.target:#x} '
                'is still pending'
            )
        target = master_next_target(self.state, self.stream)
        self.stats.slots += 1
        return self._poll(target, attempt=0, slot_index=index, slot_start=self.engine.now)

    def on_data(self, data: Data) -> Ack:
        pending = self.state.pending
        if pending is None or data.sender != pending.target or data.seq != pending.seq:
            raise StaleData(f'data {data.seq} from {data.sender:#x} does not answer a pending poll')

        Engine.cancel(pending.timeout)
        self.state.pending = None
        ack = Ack(target=data.sender, seq=data.seq)
        self.channel.transmit(CENTRAL_NODE_ID, ack)
        self.stats.acks += 1

        patient = f'{data.sender:016x}'
        if self.pipeline is not None:
            patient = self.pipeline.patient_of(data.sender)
        record = ReadingRecord(
            thermometer=data.sender,
            patient=patient,
            at=data.sample_time,
            raw=data.reading,
            received_at=self.engine.now,
        )
        self.state.misses[data.sender] = 0
        self.records.append(record)
        self.slots.append(
            SlotOutcome(
                slot_index=pending.slot_index,
                thermometer=data.sender,
                start=pending.slot_start,
                polls=pending.attempt + 1,
                record=record,
            )
        )
        if self.pipeline is not None:
            self.pipeline.ingest(record)
        return ack

    def on_timeout(self) -> TimeoutAction:
        pending = self.state.pending
        assert pending is not None, 'a poll timeout fired without a pending poll'
        self.state.pending = None

        if pending.attempt < self.timing.data_retries:
            self.stats.repolls += 1
            self.state.retries[pending.target] = self.state.retries.get(pending.target, 0) + 1
            self._poll(pending.target, pending.attempt + 1, pending.slot_index, pending.slot_start)
            return TimeoutAction.Retry

        self.stats.misses += 1
        self.state.misses[pending.target] = self.state.misses.get(pending.target, 0) + 1
        self.slots.append(
            SlotOutcome(
                slot_index=pending.slot_index,
                thermometer=pending.target,
                start=pending.slot_start,
                polls=pending.attempt + 1,
            )
        )
        logger.debug('slot %d: no data from %016x', pending.slot_index, pending.target)
        if self.pipeline is not None:
            self.pipeline.record_miss(pending.target, self.engine.now)
        return TimeoutAction.Miss

    def _poll(self, target: int, attempt: int, slot_index: int, slot_start: SimTime) -> Poll:
        seq = self.state.next_seq()
        poll = Poll(target=target, seq=seq)
        tx = self.channel.transmit(CENTRAL_NODE_ID, poll)
        deadline = SimTime(int(self.engine.now) + self.timing.ticks('poll_timeout'))
        handle = self.engine.schedule(deadline, MASTER_TARGET, PollTimeout(seq))
        self.state.pending = PendingPoll(
            target=target,
            seq=seq,
            deadline=deadline,
            attempt=attempt,
            slot_index=slot_index,
            slot_start=slot_start,
            timeout=handle,
        )
        self.stats.polls += 1
        assert tx.end <= deadline
        return poll

    def _on_event(self, event: Event) -> None:
        payload = event.payload
        if isinstance(payload, StartSlot):
            self.start_slot(payload.index)
            self._next_slot = payload.index + 1
            following = self.slot_start(payload.index + 1)
            assert self._until is not None
            if following < self._until:
                self.engine.schedule(following, MASTER_TARGET, StartSlot(payload.index + 1))
        elif isinstance(payload, PollTimeout):
            pending = self.state.pending
            assert pending is not None and pending.seq == payload.seq
            self.on_timeout()
        else:
            raise AssertionError(f'unexpected master event {payload!r}')

    def _on_receive(self, tx: Transmission, rssi_dbm: float) -> None:
        packet = tx.packet
        if not isinstance(packet, Data):
            return
        try:
            self.on_data(packet)
        except StaleData as e:
            self.stats.stale += 1
            logger.debug('dropped at %d: %s', int(self.engine.now), e)


class SlavePhase(enum.Enum):
    Idle = 'idle'
    Sensing = 'sensing'
    Transmitting = 'transmitting'
    AwaitAck = 'await_ack'


class SlaveAction(enum.Enum):
    Ignore = 'ignore'
    Sense = 'sense'


@dataclass
class SlaveState:
    node_id: int
    phase: SlavePhase = SlavePhase.Idle
    data: Optional[Data] = None
    cs_attempts_left: int = 0
    ack_retries_left: int = 0


@dataclass(frozen=True)
class SenseCarrier:
    pass


@dataclass(frozen=True)
class TransmitDone:
    pass


@dataclass(frozen=True)
class AckTimeout:
    pass


@dataclass
class SlaveStats:
    polls_heard: int = 0
    polls_matched: int = 0
    data_sent: int = 0
    retransmissions: int = 0
    busy: int = 0
    abandoned: int = 0
    acks: int = 0


class Slave:
    """
    A thermometer's radio. It answers only polls carrying its own identification code, and only
    transmits after hearing an idle carrier.
    """

    def __init__(
        self, engine: Engine, channel: Channel, thermometer: Thermometer, timing: ProtocolTiming
    ) -> None:
        self.engine = engine
        self.channel = channel
        self.thermometer = thermometer
        self.timing = timing
        self.state = SlaveState(node_id=thermometer.node_id)
        self.stats = SlaveStats()
        self.target = f'slave:{thermometer.node_id:016x}'
        self._handle: Optional[EventHandle] = None

        engine.register(self.target, self._on_event)
        channel.attach(thermometer.node_id, self._on_receive)

    def on_poll(self, poll: Poll) -> SlaveAction:
        self.stats.polls_heard += 1
        if poll.target != self.state.node_id:
            return SlaveAction.Ignore

        # A new poll supersedes whatever exchange was still open.
        self._cancel()
        self.stats.polls_matched += 1
        now = self.engine.now
        reading = self.thermometer.read(now)
        self.state.data = Data(
            sender=self.state.node_id, seq=poll.seq, reading=reading, sample_time=now
        )
        self.state.ack_retries_left = self.timing.ack_retries
        self._begin_sensing()
        return SlaveAction.Sense

    def on_ack(self, ack: Ack) -> None:
        data = self.state.data
        if self.state.phase is not SlavePhase.AwaitAck or data is None:
            return
        if ack.target != self.state.node_id or ack.seq != data.seq:
            return
        self._cancel()
        self.stats.acks += 1
        self._idle()

    def _begin_sensing(self) -> None:
        self.state.phase = SlavePhase.Sensing
        self.state.cs_attempts_left = self.timing.cs_retries
        self._after(self.timing.ticks('cs_delay'), SenseCarrier())

    def _sense(self) -> None:
        assert self.state.phase is SlavePhase.Sensing and self.state.data is not None
        if self.channel.carrier_sense(self.state.node_id, self.engine.now) is CarrierState.Idle:
            tx = self.channel.transmit(self.state.node_id, self.state.data)
            self.state.phase = SlavePhase.Transmitting
            self.stats.data_sent += 1
            self._handle = self.engine.schedule(tx.end, self.target, TransmitDone())
            return

        self.stats.busy += 1
        if self.state.cs_attempts_left > 0:
            self.state.cs_attempts_left -= 1
            self._after(self.timing.ticks('cs_backoff'), SenseCarrier())
            return
        self.stats.abandoned += 1
        logger.debug('%016x abandoned its slot: carrier busy', self.state.node_id)
        self._idle()

    def _on_ack_timeout(self) -> None:
        if self.state.ack_retries_left > 0:
            self.state.ack_retries_left -= 1
            self.stats.retransmissions += 1
            self._begin_sensing()
            return
        self._idle()

    def _after(self, delay: int, payload: object) -> None:
        self._handle = self.engine.schedule_in(delay, self.target, payload)

    def _cancel(self) -> None:
        if self._handle is not None:
            Engine.cancel(self._handle)
            self._handle = None

    def _idle(self) -> None:
        self.state.phase = SlavePhase.Idle
        self._handle = None

    def _on_event(self, event: Event) -> None:
        payload = event.payload
        self._handle = None
        if isinstance(payload, SenseCarrier):
            self._sense()
        elif isinstance(payload, TransmitDone):
            self.state.phase = SlavePhase.AwaitAck
            self._after(self.timing.ticks('ack_timeout'), AckTimeout())
        elif isinstance(payload, AckTimeout):
            self._on_ack_timeout()
        else:
            raise AssertionError(f'unexpected slave event {payload!r}')

    def _on_receive(self, tx: Transmission, rssi_dbm: float) -> None:
        packet = tx.packet
        if isinstance(packet, Poll):
            self.on_poll(packet)
        elif isinstance(packet, Ack):
            self.on_ack(packet)


@dataclass(frozen=True)
class DelayStats:
    n: int
    round_period: float
    slot: float
    per_node_interval: float
    worst_case_wait: float
    min_round_period: float
    offsets: Tuple[float, ...]


def measurement_delay(n: int, timing: ProtocolTiming) -> DelayStats:
    """
    Slot arithmetic for `n` thermometers: every node is sampled once per round, and the shortest
    feasible round grows linearly with `n`.
    """
    if n < 1:
        raise EmptyRoster(f'need at least one thermometer, got {n}')
    slot = timing.round_period / n
    return DelayStats(
        n=n,
        round_period=timing.round_period,
        slot=slot,
        per_node_interval=timing.round_period,
        worst_case_wait=timing.round_period,
        min_round_period=n * timing.min_slot,
        offsets=tuple(k * slot for k in range(n)),
    )


def max_thermometers(rate_c_per_s: float, accuracy_c: float, min_slot: float) -> int:
    """
    The largest roster whose per-node sampling interval keeps a temperature rising at
    `rate_c_per_s` from moving more than `accuracy_c` between two readings.
    """
    assert rate_c_per_s > 0 and accuracy_c > 0 and min_slot > 0
    return math.floor(accuracy_c / (rate_c_per_s * min_slot) + 1e-9)
