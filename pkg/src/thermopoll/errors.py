from __future__ import annotations


class ThermopollError(ValueError):
    """
    Base class of every error raised by `thermopoll`.
    """


class SimTimeError(ThermopollError):
    """
    An error with the input value when trying to create a `SimTime` instance.
    """


class SchedulingInPast(ThermopollError):
    """
    An event was scheduled, or a run was requested, before the current clock reading.
    """


class InvalidDistribution(ThermopollError):
    """
    A distribution descriptor with parameters outside its domain.
    """


class DistanceTooSmall(ThermopollError):
    """
    The log-distance model is only valid beyond its 1 m reference distance.
    """


class UnknownNode(ThermopollError):
    """
    The channel was asked about a node that was never registered with it.
    """


class SelfDelivery(ThermopollError):
    """
    A transmission cannot be delivered to its own sender.
    """


class NonPositiveDt(ThermopollError):
    """
    A time step must be strictly positive.
    """


class EmptyRoster(ThermopollError):
    """
    The central node has no thermometers to poll.
    """


class SlotOverrun(ThermopollError):
    """
    A slot was started while the previous exchange was still open, or the slot is too short.
    """


class StaleData(ThermopollError):
    """
    A Data packet that does not answer the currently pending poll.
    """


class OutOfOrderRecord(ThermopollError):
    """
    A reading that is not strictly later than the previous one of the same thermometer.
    """


class InsufficientData(ThermopollError):
    """
    Not enough points to estimate a rate.
    """


class EmptyRun(ThermopollError):
    """
    A run log without any scheduled slot.
    """


class EmptyInput(ThermopollError):
    """
    A metric was asked for an empty input.
    """


class ConfigError(ThermopollError):
    """
    Base class of configuration problems.
    """


class ScenarioParseError(ConfigError):
    """
    A scenario file that cannot be read or is not valid JSON.
    """


class ScenarioValidationError(ConfigError):
    """
    A scenario file that parses but violates the schema; the message names the offending key.
    """


class MalformedFrame(ThermopollError):
    """
    Bytes that do not decode to a Poll, Data or Ack frame.
    """
