from typing import Any, Dict

import pytest
from parameterized import parameterized  # type: ignore[import-untyped]
from pydantic import BaseModel, ValidationError

from thermopoll.clock import HORIZON_TICKS, TICKS_PER_SECOND, SimTime, duration, to_seconds
from thermopoll.errors import SimTimeError


class StampedModel(BaseModel):
    at: SimTime


@parameterized.expand(
    [
        ({'seconds': 1}, 1_000_000),
        ({'seconds': 1.5}, 1_500_000),
        ({'milliseconds': 20}, 20_000),
        ({'milliseconds': 0.4}, 400),
        ({'microseconds': 0.6}, 1),
        ({'microseconds': 0.4}, 0),
        ({'seconds': 2, 'milliseconds': 5, 'microseconds': 3}, 2_005_003),
    ]
)
def test_duration_rounds_to_whole_ticks(kwargs: Dict[str, float], expected: int) -> None:
    assert duration(**kwargs) == expected


def test_to_seconds() -> None:
    assert to_seconds(TICKS_PER_SECOND // 2) == 0.5


@parameterized.expand(
    [
        (0,),
        (1,),
        (HORIZON_TICKS,),
    ]
)
def test_construct_within_horizon(ticks: int) -> None:
    at = SimTime(ticks)
    assert isinstance(at, SimTime)
    assert at == ticks


@parameterized.expand(
    [
        (True, 'needs an integer tick count'),
        (1.5, 'needs an integer tick count'),
        ('10', 'needs an integer tick count'),
        (-1, 'cannot be negative'),
        (HORIZON_TICKS + 1, 'beyond the'),
    ]
)
def test_construct_rejects(ticks: Any, message: str) -> None:
    with pytest.raises(SimTimeError, match=message):
        SimTime(ticks)


def test_errors_are_value_errors() -> None:
    with pytest.raises(ValueError):
        SimTime(-5)


def test_from_seconds() -> None:
    assert SimTime.from_seconds(5) == 5_000_000
    assert SimTime.from_seconds(milliseconds=500) == 500_000
    assert SimTime.from_seconds(5).seconds == 5.0


def test_after_keeps_the_type() -> None:
    later = SimTime.from_seconds(1).after(milliseconds=250)

    assert isinstance(later, SimTime)
    assert later == 1_250_000
    assert later.after(microseconds=1) == 1_250_001


def test_arithmetic_falls_back_to_int() -> None:
    total = SimTime(3) + SimTime(4)
    assert total == 7
    assert not isinstance(total, SimTime)


def test_repr() -> None:
    assert repr(SimTime(42)) == 'SimTime(42)'


@parameterized.expand(
    [
        (5,),
        (SimTime(5),),
    ]
)
def test_pydantic_parsing(value: Any) -> None:
    model = StampedModel.model_validate({'at': value})
    assert isinstance(model.at, SimTime)
    assert model.at == 5


def test_pydantic_parsing_json() -> None:
    model = StampedModel.model_validate_json('{"at": 1000000}')
    assert isinstance(model.at, SimTime)
    assert model.at.seconds == 1.0


@parameterized.expand(
    [
        (-1,),
        (HORIZON_TICKS + 1,),
        (1.5,),
    ]
)
def test_pydantic_parsing_rejects(value: Any) -> None:
    with pytest.raises(ValidationError):
        StampedModel.model_validate({'at': value})


def test_pydantic_serialization() -> None:
    model = StampedModel(at=SimTime(1_500_000))
    assert model.model_dump_json() == '{"at":1500000}'
    assert model.model_dump() == {'at': 1_500_000}


def test_pydantic_json_schema() -> None:
    schema = StampedModel.model_json_schema()
    assert schema['properties']['at']['type'] == 'integer'
    assert schema['properties']['at']['minimum'] == 0
    assert schema['properties']['at']['maximum'] == HORIZON_TICKS
