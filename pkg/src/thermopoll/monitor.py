from __future__ import annotations

import enum
import json
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, Dict, List, Mapping, Optional, Sequence, Set

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from thermopoll.clock import SimTime
from thermopoll.errors import EmptyInput, EmptyRun, InsufficientData, OutOfOrderRecord

logger = logging.getLogger(__name__)


class ReadingRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    thermometer: int
    patient: str
    at: SimTime
    raw: float
    smoothed: Optional[float] = None
    received_at: Optional[SimTime] = None


class AlertKind(str, enum.Enum):
    HighTemperature = 'high_temperature'
    RapidIncrease = 'rapid_increase'
    ConnectivityLoss = 'connectivity_loss'


class Alert(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: AlertKind
    thermometer: int
    patient: str
    at: SimTime
    value: float

    def to_log_line(self) -> str:
        return json.dumps(
            {
                'time_s': self.at.seconds,
                'thermometer_id': f'{self.thermometer:016x}',
                'patient': self.patient,
                'kind': self.kind.value,
                'value': round(self.value, 6),
            }
        )


@dataclass(frozen=True)
class SlotOutcome:
    """
    How one scheduled slot of the central node ended: with an acknowledged reading, or a miss.
    """

    slot_index: int
    thermometer: int
    start: SimTime
    polls: int
    record: Optional[ReadingRecord] = None

    @property
    def acknowledged(self) -> bool:
        return self.record is not None


class PipelineConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    window: int = Field(default=5, ge=1)
    fever_threshold: float = Field(default=38.0, gt=0)
    rate_threshold: float = Field(default=1.0, gt=0)
    rate_window: int = Field(default=10, ge=2)
    # An open rapid-increase alert clears once the rate falls to this share of the threshold.
    rate_rearm_fraction: float = Field(default=0.5, gt=0, lt=1)
    miss_threshold: int = Field(default=5, ge=1)
    hysteresis: float = Field(default=0.2, ge=0)


@dataclass(frozen=True)
class MseResult:
    mse: float
    rmse: float


def moving_average(values: Sequence[float], window: int) -> float:
    if not values:
        raise EmptyInput('cannot average an empty series')
    return float(np.mean(list(values)[-window:]))


def rate_estimate(times: Sequence[float], values: Sequence[float], rate_window: int) -> float:
    """
    Least-squares slope of the last `rate_window` points, in degrees per minute. Times are seconds.
    """
    t = np.asarray(list(times)[-rate_window:], dtype=float)
    v = np.asarray(list(values)[-rate_window:], dtype=float)
    if len(t) < 2 or len(t) != len(v):
        raise InsufficientData(f'a rate needs at least 2 paired points, got {len(t)}')
    slope, _ = np.polyfit(t - t.mean(), v, 1)
    return float(slope) * 60.0


def connectivity(
    slots: Sequence[SlotOutcome], truth: Callable[[SimTime], float], accuracy: float
) -> float:
    """
    The fraction of scheduled slots that produced an acknowledged reading within `accuracy` of the
    true temperature at the moment it was sampled.
    """
    if not slots:
        raise EmptyRun('no slots were scheduled')
    good = sum(
        1
        for slot in slots
        if slot.record is not None and abs(slot.record.raw - truth(slot.record.at)) <= accuracy
    )
    return good / len(slots)


def mse(readings: Sequence[float], references: Sequence[float]) -> MseResult:
    if not readings or not references:
        raise EmptyInput('mse needs at least one reading/reference pair')
    assert len(readings) == len(references), 'readings and references must pair up'
    errors = np.asarray(readings, dtype=float) - np.asarray(references, dtype=float)
    value = float(np.mean(errors**2))
    return MseResult(mse=value, rmse=float(np.sqrt(value)))


@dataclass
class _Track:
    window: int
    rate_window: int
    raws: Deque[float] = field(init=False)
    smoothed: Deque[float] = field(init=False)
    smoothed_times: Deque[float] = field(init=False)
    last_at: Optional[SimTime] = None
    consecutive_misses: int = 0
    open: Set[AlertKind] = field(default_factory=set)

    def __post_init__(self) -> None:
        self.raws = deque(maxlen=self.window)
        self.smoothed = deque(maxlen=self.rate_window)
        self.smoothed_times = deque(maxlen=self.rate_window)


class Pipeline:
    """
    Per-thermometer smoothing and alerting. Output depends only on the sequence of records and
    misses fed in, so replaying a run reproduces its alerts.
    """

    def __init__(
        self, config: Optional[PipelineConfig] = None, patients: Optional[Mapping[int, str]] = None
    ) -> None:
        self.config = config or PipelineConfig()
        self.patients: Dict[int, str] = dict(patients or {})
        self.records: Dict[int, List[ReadingRecord]] = {}
        self.alerts: List[Alert] = []
        self._tracks: Dict[int, _Track] = {}

    def patient_of(self, thermometer: int) -> str:
        return self.patients.get(thermometer, f'{thermometer:016x}')

    def ingest(self, record: ReadingRecord) -> List[Alert]:
        track = self._track(record.thermometer)
        if track.last_at is not None and record.at <= track.last_at:
            raise OutOfOrderRecord(
                f'record for {record.thermometer:#x} at {int(record.at)} is not after '
                f'{int(track.last_at)}'
            )
        track.last_at = record.at
        track.consecutive_misses = 0
        track.open.discard(AlertKind.ConnectivityLoss)

        track.raws.append(record.raw)
        smoothed = moving_average(track.raws, self.config.window)
        previous = track.smoothed[-1] if track.smoothed else None
        track.smoothed.append(smoothed)
        track.smoothed_times.append(record.at.seconds)

        stored = record.model_copy(update={'smoothed': smoothed})
        self.records.setdefault(record.thermometer, []).append(stored)

        alerts = []
        alert = self._check_fever(track, stored, previous)
        if alert is not None:
            alerts.append(alert)
        alert = self._check_rate(track, stored)
        if alert is not None:
            alerts.append(alert)
        return self._emit(alerts)

    def record_miss(self, thermometer: int, at: SimTime) -> List[Alert]:
        track = self._track(thermometer)
        track.consecutive_misses += 1
        if (
            track.consecutive_misses >= self.config.miss_threshold
            and AlertKind.ConnectivityLoss not in track.open
        ):
            track.open.add(AlertKind.ConnectivityLoss)
            alert = Alert(
                kind=AlertKind.ConnectivityLoss,
                thermometer=thermometer,
                patient=self.patient_of(thermometer),
                at=at,
                value=float(track.consecutive_misses),
            )
            return self._emit([alert])
        return []

    def _check_fever(
        self, track: _Track, record: ReadingRecord, previous: Optional[float]
    ) -> Optional[Alert]:
        assert record.smoothed is not None
        threshold = self.config.fever_threshold
        if AlertKind.HighTemperature in track.open:
            if record.smoothed < threshold - self.config.hysteresis:
                track.open.discard(AlertKind.HighTemperature)
            return None

        if record.smoothed >= threshold and (previous is None or previous < threshold):
            track.open.add(AlertKind.HighTemperature)
            return self._alert(AlertKind.HighTemperature, record, record.smoothed)
        return None

    def _check_rate(self, track: _Track, record: ReadingRecord) -> Optional[Alert]:
        if len(track.smoothed) < self.config.rate_window:
            return None

        rate = rate_estimate(track.smoothed_times, track.smoothed, self.config.rate_window)
        threshold = self.config.rate_threshold
        if AlertKind.RapidIncrease in track.open:
            if rate <= threshold * self.config.rate_rearm_fraction:
                track.open.discard(AlertKind.RapidIncrease)
            return None

        if rate > threshold:
            track.open.add(AlertKind.RapidIncrease)
            return self._alert(AlertKind.RapidIncrease, record, rate)
        return None

    def _alert(self, kind: AlertKind, record: ReadingRecord, value: float) -> Alert:
        return Alert(
            kind=kind,
            thermometer=record.thermometer,
            patient=record.patient,
            at=record.at,
            value=value,
        )

    def _emit(self, alerts: List[Alert]) -> List[Alert]:
        for alert in alerts:
            logger.info(
                '%s alert for thermometer %016x (%s) at %.3f s: %.3f',
                alert.kind.value,
                alert.thermometer,
                alert.patient,
                alert.at.seconds,
                alert.value,
            )
        self.alerts.extend(alerts)
        return alerts

    def _track(self, thermometer: int) -> _Track:
        if thermometer not in self._tracks:
            self._tracks[thermometer] = _Track(
                window=self.config.window, rate_window=self.config.rate_window
            )
        return self._tracks[thermometer]
