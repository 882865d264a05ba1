from __future__ import annotations

import heapq
import itertools
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

from thermopoll.clock import SimTime
from thermopoll.errors import SchedulingInPast

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Event:
    fire_at: SimTime
    target: str
    payload: object
    seq: int


@dataclass(frozen=True)
class TraceEntry:
    fire_at: int
    seq: int
    target: str
    kind: str


@dataclass(frozen=True)
class RunStats:
    events_processed: int
    clock: SimTime


class EventHandle:
    """
    Returned by `Engine.schedule`; lets the caller cancel the event before it fires.
    """

    __slots__ = ('event', 'cancelled', 'fired')

    def __init__(self, event: Event) -> None:
        self.event = event
        self.cancelled = False
        self.fired = False

    @property
    def pending(self) -> bool:
        return not (self.cancelled or self.fired)


Handler = Callable[[Event], None]


class Engine:
    """
    A single-threaded discrete-event engine. Events fire in `(fire_at, seq)` order, where `seq`
    is the insertion order, so equal times never depend on anything but the order of scheduling.
    """

    def __init__(self, record_trace: bool = False) -> None:
        self._now = SimTime(0)
        self._queue: List[Tuple[int, int, EventHandle]] = []
        self._seq = itertools.count()
        self._handlers: Dict[str, Handler] = {}
        self.events_processed = 0
        self.trace: Optional[List[TraceEntry]] = [] if record_trace else None

    @property
    def now(self) -> SimTime:
        return self._now

    def register(self, target: str, handler: Handler) -> None:
        assert target not in self._handlers, f'handler for {target!r} registered twice'
        self._handlers[target] = handler

    def schedule(self, fire_at: int, target: str, payload: object) -> EventHandle:
        if fire_at < self._now:
            raise SchedulingInPast(
                f'cannot schedule {type(payload).__name__} for {target!r} at {int(fire_at)}, '
                f'the clock reads {int(self._now)}'
            )
        assert target in self._handlers, f'no handler registered for {target!r}'

        event = Event(fire_at=SimTime(fire_at), target=target, payload=payload, seq=next(self._seq))
        handle = EventHandle(event)
        heapq.heappush(self._queue, (int(event.fire_at), event.seq, handle))
        return handle

    def schedule_in(self, delay: int, target: str, payload: object) -> EventHandle:
        return self.schedule(int(self._now) + delay, target, payload)

    @staticmethod
    def cancel(handle: EventHandle) -> None:
        handle.cancelled = True

    def run_until(self, t_end: int) -> RunStats:
        if t_end < self._now:
            raise SchedulingInPast(
                f'cannot run until {int(t_end)}, the clock reads {int(self._now)}'
            )

        end = SimTime(t_end)
        processed = 0
        while self._queue and self._queue[0][0] <= end:
            _, _, handle = heapq.heappop(self._queue)
            if handle.cancelled:
                continue

            event = handle.event
            self._now = event.fire_at
            handle.fired = True
            if self.trace is not None:
                self.trace.append(
                    TraceEntry(
                        fire_at=int(event.fire_at),
                        seq=event.seq,
                        target=event.target,
                        kind=type(event.payload).__name__,
                    )
                )
            self._handlers[event.target](event)
            processed += 1

        self._now = end
        self.events_processed += processed
        logger.debug('ran until %d: %d events processed', int(end), processed)
        return RunStats(events_processed=processed, clock=end)
