from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional

from thermopoll.channel import Channel
from thermopoll.clock import SimTime, duration
from thermopoll.config import ScenarioConfig
from thermopoll.engine import Engine, Event, RunStats
from thermopoll.monitor import Pipeline, ReadingRecord, SlotOutcome
from thermopoll.protocol import Master, ProtocolTiming, Slave
from thermopoll.rng import CHANNEL_STREAM_ID, MASTER_STREAM_ID, RngStream
from thermopoll.sensor import BodyConstant, SensorSpec, TemperatureSource, Thermometer

logger = logging.getLogger(__name__)

KINEMATICS_TARGET = 'kinematics'
KINEMATICS_STEP_S = 0.1


@dataclass(frozen=True)
class KinematicsTick:
    pass


class Deployment:
    """
    One ward: a central node polling every configured thermometer over the shared channel, with
    each acknowledged reading fed into the monitoring pipeline.
    """

    def __init__(
        self,
        config: ScenarioConfig,
        subjects: Optional[Mapping[int, TemperatureSource]] = None,
        sensor: Optional[SensorSpec] = None,
        timing: Optional[ProtocolTiming] = None,
        record_trace: bool = False,
        keep_log: bool = False,
    ) -> None:
        self.config = config
        self.engine = Engine(record_trace=record_trace)
        self.channel = Channel(
            self.engine,
            config.channel_params,
            RngStream(config.seed, CHANNEL_STREAM_ID),
            keep_log=keep_log,
        )
        self.pipeline = Pipeline(config.pipeline, patients=config.patients)

        timing = timing or config.protocol
        sensor = sensor or config.sensor
        subjects = subjects or {}
        placement = config.scenario

        self.thermometers: Dict[int, Thermometer] = {}
        self.slaves: Dict[int, Slave] = {}
        for unit in config.thermometers:
            distance = unit.distance_m if unit.distance_m is not None else placement.distance_m
            velocity = placement.speed_mps if placement.kind.moving else 0.0
            self.channel.register(unit.id, distance, velocity)

            thermometer = Thermometer(
                node_id=unit.id,
                spec=sensor,
                subject=subjects.get(unit.id, BodyConstant()),
                stream=RngStream(config.seed, unit.id),
            )
            self.thermometers[unit.id] = thermometer
            self.slaves[unit.id] = Slave(self.engine, self.channel, thermometer, timing)

        self.master = Master(
            self.engine,
            self.channel,
            [unit.id for unit in config.thermometers],
            timing,
            RngStream(config.seed, MASTER_STREAM_ID),
            pipeline=self.pipeline,
        )

        self._moving = placement.kind.moving and any(
            self.channel.kinematics(unit.id).velocity > 0 for unit in config.thermometers
        )
        self._until: Optional[SimTime] = None
        if self._moving:
            self.engine.register(KINEMATICS_TARGET, self._on_tick)

    def run(self, duration_s: float) -> RunStats:
        until = SimTime(int(self.engine.now) + duration(seconds=duration_s))
        self._until = until
        self.master.start(until)
        if self._moving:
            step = duration(seconds=KINEMATICS_STEP_S)
            self.engine.schedule_in(step, KINEMATICS_TARGET, KinematicsTick())

        stats = self.engine.run_until(until)
        logger.info(
            'ran %.1f s: %d events, %d records, %d misses, %d alerts',
            duration_s,
            stats.events_processed,
            len(self.master.records),
            self.master.stats.misses,
            len(self.pipeline.alerts),
        )
        return stats

    def records(self, thermometer: int) -> List[ReadingRecord]:
        return self.pipeline.records.get(thermometer, [])

    def slots(self, thermometer: int) -> List[SlotOutcome]:
        return [slot for slot in self.master.slots if slot.thermometer == thermometer]

    def _on_tick(self, event: Event) -> None:
        self.channel.advance_kinematics(KINEMATICS_STEP_S)
        assert self._until is not None
        following = int(self.engine.now) + duration(seconds=KINEMATICS_STEP_S)
        if following <= self._until:
            self.engine.schedule(following, KINEMATICS_TARGET, KinematicsTick())
