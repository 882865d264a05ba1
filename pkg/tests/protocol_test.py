from collections import Counter
from typing import List

import pytest
from parameterized import parameterized  # type: ignore[import-untyped]
from pydantic import ValidationError

from thermopoll.channel import Channel, ChannelParams
from thermopoll.clock import SimTime, duration
from thermopoll.deployment import Deployment
from thermopoll.engine import Engine
from thermopoll.errors import EmptyRoster, MalformedFrame, SlotOverrun
from thermopoll.protocol import (
    Ack,
    Data,
    FrameTag,
    Master,
    MasterState,
    Policy,
    Poll,
    ProtocolTiming,
    SlaveAction,
    SlavePhase,
    WireFrame,
    decode,
    master_next_target,
    max_thermometers,
    measurement_delay,
)
from thermopoll.rng import CHANNEL_STREAM_ID, MASTER_STREAM_ID, RngStream

from tests.shared import (
    deployment,
    drop_all,
    drop_first,
    overlapping_pairs,
    scenario,
    transmissions,
)

A, B, C = 0xA1, 0xB2, 0xC3

SINGLE = [{'id': 1, 'patient': 'bed-1'}]


def poll_starts(deployed: Deployment) -> List[int]:
    return [int(tx.start) for tx in transmissions(deployed, Poll)]


def bare_channel() -> Channel:
    engine = Engine()
    return Channel(engine, ChannelParams(), RngStream(0, CHANNEL_STREAM_ID))


def test_sequential_targets_cycle() -> None:
    state = MasterState(roster=(A, B, C))
    stream = RngStream(0, MASTER_STREAM_ID)
    assert [master_next_target(state, stream) for _ in range(4)] == [A, B, C, A]


def test_random_singleton() -> None:
    state = MasterState(roster=(A,), policy=Policy.Random)
    stream = RngStream(0, MASTER_STREAM_ID)
    assert {master_next_target(state, stream) for _ in range(100)} == {A}


def test_random_targets_are_uniform() -> None:
    state = MasterState(roster=(A, B), policy=Policy.Random)
    stream = RngStream(2024, MASTER_STREAM_ID)
    counts = Counter(master_next_target(state, stream) for _ in range(10_000))
    assert abs(counts[A] / 10_000 - 0.5) <= 0.03
    assert abs(counts[B] / 10_000 - 0.5) <= 0.03


def test_next_target_on_empty_roster() -> None:
    with pytest.raises(EmptyRoster):
        master_next_target(MasterState(roster=()), RngStream(0, MASTER_STREAM_ID))


def test_two_thermometers_share_each_second() -> None:
    deployed = deployment()
    deployed.run(3.0)

    assert poll_starts(deployed) == [duration(milliseconds=500 * k) for k in range(6)]
    assert [slot.thermometer for slot in deployed.master.slots] == [1, 2] * 3


def test_single_thermometer_is_polled_every_second() -> None:
    deployed = deployment(scenario(thermometers=SINGLE))
    deployed.run(5.0)

    assert poll_starts(deployed) == [duration(seconds=k) for k in range(5)]
    assert len(deployed.records(1)) == 5
    assert all(record.patient == 'bed-1' for record in deployed.records(1))


def test_master_needs_a_roster() -> None:
    channel = bare_channel()
    with pytest.raises(EmptyRoster):
        Master(channel.engine, channel, [], ProtocolTiming(), RngStream(0, MASTER_STREAM_ID))


def test_roster_too_large_for_the_round() -> None:
    channel = bare_channel()
    with pytest.raises(SlotOverrun):
        Master(
            channel.engine,
            channel,
            list(range(1, 12)),
            ProtocolTiming(),
            RngStream(0, MASTER_STREAM_ID),
        )


def test_slot_cannot_start_while_a_poll_is_pending() -> None:
    channel = bare_channel()
    stream = RngStream(0, MASTER_STREAM_ID)
    master = Master(channel.engine, channel, [1, 2], ProtocolTiming(), stream)

    assert master.start_slot(0) == Poll(target=1, seq=1)
    with pytest.raises(SlotOverrun):
        master.start_slot(1)


def test_slave_ignores_polls_for_others() -> None:
    deployed = deployment()
    slave = deployed.slaves[1]

    assert slave.on_poll(Poll(target=2, seq=5)) is SlaveAction.Ignore
    deployed.engine.run_until(duration(milliseconds=50))

    assert slave.state.phase is SlavePhase.Idle
    assert slave.stats.data_sent == 0
    assert transmissions(deployed, Data) == []


def test_slave_answers_its_own_poll_after_carrier_sense() -> None:
    deployed = deployment()
    slave = deployed.slaves[1]

    assert slave.on_poll(Poll(target=1, seq=5)) is SlaveAction.Sense
    assert slave.state.phase is SlavePhase.Sensing
    deployed.engine.run_until(duration(milliseconds=50))

    sent = transmissions(deployed, Data)
    assert int(sent[0].start) == duration(milliseconds=1)
    assert all(tx.packet == slave.state.data for tx in sent)
    assert isinstance(sent[0].packet, Data)
    assert sent[0].packet.seq == 5
    # Nobody polled, so nothing is acknowledged: one retransmission, both copies dropped.
    assert len(sent) == 2
    assert slave.stats.retransmissions == 1
    assert deployed.master.stats.stale == 2
    assert slave.state.phase is SlavePhase.Idle


@parameterized.expand(
    [
        # Medium busy for 50 ms: the first sense and all three retries hit traffic.
        (50_000, 4, 0, 1),
        # Busy for 4 ms: sensing at 1 ms and 3 ms fails, at 5 ms the medium is free. The
        # missing acknowledgement then costs one more transmission.
        (4_000, 2, 2, 0),
    ]
)
def test_slave_backs_off_while_the_carrier_is_busy(
    foreign_airtime_us: int, busy: int, sent: int, abandoned: int
) -> None:
    deployed = deployment()
    slave = deployed.slaves[1]
    foreign = Data(sender=2, seq=99, reading=37.0, sample_time=SimTime(0))
    deployed.channel.transmit(2, foreign, airtime_us=foreign_airtime_us)

    slave.on_poll(Poll(target=1, seq=5))
    deployed.engine.run_until(duration(milliseconds=100))

    assert slave.stats.busy == busy
    assert slave.stats.data_sent == sent
    assert slave.stats.abandoned == abandoned


def test_lossless_run_acks_every_record() -> None:
    deployed = deployment()
    deployed.run(60.0)

    stats = deployed.master.stats
    assert len(deployed.master.records) == 120
    assert len(transmissions(deployed, Ack)) == stats.acks == 120
    assert stats.repolls == stats.misses == stats.stale == 0
    assert all(slave.stats.retransmissions == 0 for slave in deployed.slaves.values())


def test_data_echoes_the_poll_sequence() -> None:
    deployed = deployment()
    deployed.run(5.0)

    polls = set()
    for tx in transmissions(deployed, Poll):
        assert isinstance(tx.packet, Poll)
        polls.add((tx.packet.target, tx.packet.seq))
    for tx in transmissions(deployed, Data):
        assert isinstance(tx.packet, Data)
        assert (tx.packet.sender, tx.packet.seq) in polls


def test_forced_loss_repolls_then_misses() -> None:
    deployed = deployment(impairment=drop_all(Data))
    deployed.run(3.0)

    stats = deployed.master.stats
    assert stats.slots == 6
    assert stats.polls == 18
    assert stats.repolls == 12
    assert stats.misses == 6
    assert deployed.master.records == []
    assert deployed.master.state.retries == {1: 6, 2: 6}
    assert deployed.master.state.misses == {1: 3, 2: 3}
    assert all(slot.polls == 3 and not slot.acknowledged for slot in deployed.master.slots)


def test_misses_never_shift_the_schedule() -> None:
    deployed = deployment(impairment=drop_all(Data))
    deployed.run(3.0)

    timeout = duration(seconds=deployed.master.timing.poll_timeout)
    expected = [
        duration(milliseconds=500 * k) + attempt * timeout for k in range(6) for attempt in range(3)
    ]
    assert poll_starts(deployed) == expected
    assert [slot.start for slot in deployed.master.slots] == [
        deployed.master.slot_start(k) for k in range(6)
    ]


def test_lost_ack_gives_a_single_record() -> None:
    deployed = deployment(scenario(thermometers=SINGLE), impairment=drop_first(Ack))
    deployed.run(1.0)

    assert len(deployed.master.records) == 1
    assert deployed.master.stats.acks == 1
    assert deployed.master.stats.stale == 1
    assert deployed.slaves[1].stats.retransmissions == 1
    assert len(transmissions(deployed, Data)) == 2


def test_late_data_is_stale() -> None:
    config = scenario(thermometers=SINGLE, protocol={'data_retries': 0, 'cs_delay': 0.03})
    deployed = deployment(config)
    deployed.run(1.0)

    stats = deployed.master.stats
    assert stats.misses == 1
    assert stats.stale >= 1
    assert stats.acks == 0
    assert deployed.master.records == []


def test_random_loss_keeps_the_schedule() -> None:
    config = scenario(
        seed=77,
        channel={'packet_error_rate': 0.3},
        thermometers=[{'id': k} for k in range(1, 9)],
    )
    deployed = deployment(config)
    deployed.run(1250.0)

    master = deployed.master
    assert master.stats.slots == 10_000
    assert len(master.slots) == 10_000
    assert master.stats.misses > 0
    assert master.stats.repolls > 0

    assert overlapping_pairs(transmissions(deployed, Data)) == []
    assert len(master.records) == len(transmissions(deployed, Ack)) == master.stats.acks

    slots = sorted(master.slots, key=lambda slot: slot.slot_index)
    assert [slot.slot_index for slot in slots] == list(range(10_000))
    assert all(slot.start == master.slot_start(slot.slot_index) for slot in slots)
    for first in range(0, 10_000 - 8):
        window = {slot.thermometer for slot in slots[first : first + 8]}
        assert window == set(range(1, 9))


def test_runs_repeat_under_loss() -> None:
    def trace() -> object:
        deployed = deployment(scenario(seed=5, channel={'packet_error_rate': 0.2}))
        deployed.run(20.0)
        return deployed.engine.trace

    assert trace() == trace()


def test_random_policy_polls_everyone() -> None:
    deployed = deployment(scenario(protocol={'policy': 'random'}))
    deployed.run(100.0)

    counts = Counter(slot.thermometer for slot in deployed.master.slots)
    assert set(counts) == {1, 2}
    assert sum(counts.values()) == 200


def test_default_exchange_budget() -> None:
    assert ProtocolTiming().exchange_budget == pytest.approx(0.066)


def test_minimum_slot_must_hold_an_exchange() -> None:
    with pytest.raises(ValidationError, match='protocol.min_slot'):
        ProtocolTiming(min_slot=0.05)


FAST = ProtocolTiming(
    min_slot=0.02,
    poll_timeout=0.005,
    data_retries=0,
    cs_retries=0,
    ack_timeout=0.002,
    ack_retries=0,
)


@parameterized.expand(
    [
        (1, 0.02),
        (10, 0.2),
        (32, 0.64),
    ]
)
def test_minimum_round_grows_linearly(n: int, expected: float) -> None:
    assert measurement_delay(n, FAST).min_round_period == pytest.approx(expected)


def test_two_nodes_are_sampled_once_per_second() -> None:
    stats = measurement_delay(2, ProtocolTiming())
    assert stats.per_node_interval == 1.0
    assert stats.worst_case_wait == 1.0
    assert stats.slot == 0.5
    assert stats.offsets == (0.0, 0.5)


def test_measurement_delay_without_nodes() -> None:
    with pytest.raises(EmptyRoster):
        measurement_delay(0, ProtocolTiming())


@parameterized.expand(
    [
        (0.01, 0.4, 0.1, 400),
        (1.0, 0.4, 0.1, 4),
        (4.3, 0.4, 0.1, 0),
    ]
)
def test_max_thermometers(rate: float, accuracy: float, min_slot: float, expected: int) -> None:
    assert max_thermometers(rate, accuracy, min_slot) == expected


def test_wire_sizes() -> None:
    assert len(Poll(target=A, seq=1).encode()) == 12
    assert len(Ack(target=A, seq=1).encode()) == 12
    assert len(Data(sender=A, seq=1, reading=37.0, sample_time=SimTime(0)).encode()) == 16


def test_decode_data() -> None:
    frame = Data(sender=2**64 - 3, seq=65535, reading=-5.25, sample_time=SimTime(9)).encode()
    assert decode(frame) == WireFrame(FrameTag.Data, 2**64 - 3, 65535, -5.25)


def test_decode_poll() -> None:
    assert decode(Poll(target=B, seq=7).encode()) == WireFrame(FrameTag.Poll, B, 7)


@parameterized.expand(
    [
        (b'\x01\x00',),
        (bytes([9]) + bytes(11),),
        (Poll(target=A, seq=1).encode() + bytes(4),),
    ]
)
def test_decode_rejects(buffer: bytes) -> None:
    with pytest.raises(MalformedFrame):
        decode(buffer)
