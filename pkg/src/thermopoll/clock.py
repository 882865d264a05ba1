from __future__ import annotations

import operator
from typing import Any, Type, TypeVar, Union

from pydantic import GetCoreSchemaHandler, GetJsonSchemaHandler
from pydantic.json_schema import JsonSchemaValue
from pydantic_core import CoreSchema, core_schema

from thermopoll.errors import SimTimeError

TICKS_PER_SECOND = 1_000_000

# Experiments never exceed 24 simulated hours, which keeps every tick count far from overflow
# in the packed trace formats as well.
HORIZON_TICKS = 24 * 3600 * TICKS_PER_SECOND

SimTimeT = TypeVar('SimTimeT', bound='SimTime')
IntFloat = Union[int, float]


def duration(
    seconds: IntFloat = 0,
    milliseconds: IntFloat = 0,
    microseconds: IntFloat = 0,
) -> int:
    """
    The number of whole ticks (microseconds) in the given span, rounded to the nearest tick.
    """
    return int(round(seconds * TICKS_PER_SECOND + milliseconds * 1000 + microseconds))


def to_seconds(ticks: int) -> float:
    return ticks / TICKS_PER_SECOND


class SimTime(int):
    """
    A `SimTime` is just an `int`, counting microseconds since the simulation started, but which is
    guaranteed to be non-negative and within the simulation horizon.
    """

    def __new__(cls: Type[SimTimeT], ticks: int = 0) -> SimTimeT:
        if isinstance(ticks, bool):
            raise SimTimeError(f'{cls.__name__} needs an integer tick count, got {ticks!r}')
        try:
            value = operator.index(ticks)
        except TypeError as e:
            raise SimTimeError(
                f'{cls.__name__} needs an integer tick count, got {ticks!r}'
            ) from e

        if value < 0:
            raise SimTimeError(f'{cls.__name__} cannot be negative, got {value}')
        if value > HORIZON_TICKS:
            raise SimTimeError(f'{cls.__name__} {value} is beyond the {HORIZON_TICKS} tick horizon')
        return super().__new__(cls, value)

    @classmethod
    def __get_pydantic_core_schema__(cls, _: Any, __: GetCoreSchemaHandler) -> CoreSchema:
        from_ticks_schema = core_schema.chain_schema(
            [
                core_schema.int_schema(ge=0),
                core_schema.no_info_plain_validator_function(cls),
            ]
        )

        return core_schema.json_or_python_schema(
            json_schema=from_ticks_schema,
            python_schema=core_schema.union_schema(
                [
                    core_schema.is_instance_schema(SimTime),
                    from_ticks_schema,
                ]
            ),
            serialization=core_schema.plain_serializer_function_ser_schema(int),
        )

    @classmethod
    def __get_pydantic_json_schema__(
        cls, _core_schema: core_schema.CoreSchema, handler: GetJsonSchemaHandler
    ) -> JsonSchemaValue:
        return handler(core_schema.int_schema(ge=0, le=HORIZON_TICKS))

    @classmethod
    def from_seconds(
        cls: Type[SimTimeT],
        seconds: IntFloat = 0,
        milliseconds: IntFloat = 0,
        microseconds: IntFloat = 0,
    ) -> SimTimeT:
        return cls(duration(seconds=seconds, milliseconds=milliseconds, microseconds=microseconds))

    def after(
        self: SimTimeT,
        seconds: IntFloat = 0,
        milliseconds: IntFloat = 0,
        microseconds: IntFloat = 0,
    ) -> SimTimeT:
        delta = duration(seconds=seconds, milliseconds=milliseconds, microseconds=microseconds)
        return self.__class__(int(self) + delta)

    @property
    def seconds(self) -> float:
        return to_seconds(int(self))

    def __repr__(self) -> str:
        return f'{self.__class__.__name__}({int(self)})'
