from typing import Callable

import numpy as np
import pytest
from parameterized import parameterized  # type: ignore[import-untyped]

from thermopoll.errors import InvalidDistribution
from thermopoll.rng import (
    CHANNEL_STREAM_ID,
    MASTER_STREAM_ID,
    Bernoulli,
    Gaussian,
    RngStream,
    Uniform,
    draw,
)


def test_degenerate_uniform() -> None:
    assert RngStream(1, 1).uniform(0.0, 0.0) == 0.0


def test_certain_bernoulli() -> None:
    stream = RngStream(1, 1)
    assert all(stream.bernoulli(1.0) for _ in range(1000))
    assert not any(stream.bernoulli(0.0) for _ in range(1000))


def test_uniform_noise_is_centred() -> None:
    stream = RngStream(7, 3)
    values = [stream.uniform(-0.125, 0.125) for _ in range(100_000)]

    assert abs(float(np.mean(values))) < 0.005
    assert min(values) >= -0.125
    assert max(values) <= 0.125


def test_same_seed_and_stream_repeat() -> None:
    first, second = RngStream(42, 9), RngStream(42, 9)
    assert [first.gaussian(0, 1) for _ in range(50)] == [second.gaussian(0, 1) for _ in range(50)]


def test_streams_are_independent() -> None:
    channel = RngStream(42, CHANNEL_STREAM_ID)
    master = RngStream(42, MASTER_STREAM_ID)
    assert [channel.uniform(0, 1) for _ in range(10)] != [master.uniform(0, 1) for _ in range(10)]


def test_draws_from_one_stream_do_not_shift_another() -> None:
    untouched = RngStream(5, 1)
    expected = [untouched.uniform(0, 1) for _ in range(5)]

    busy, other = RngStream(5, 2), RngStream(5, 1)
    for _ in range(100):
        busy.gaussian(0, 1)

    assert [other.uniform(0, 1) for _ in range(5)] == expected


@parameterized.expand(
    [
        (lambda stream: stream.uniform(1.0, 0.0),),
        (lambda stream: stream.gaussian(0.0, -1.0),),
        (lambda stream: stream.bernoulli(1.5),),
        (lambda stream: stream.bernoulli(-0.1),),
    ]
)
def test_invalid_parameters(call: Callable[[RngStream], object]) -> None:
    with pytest.raises(InvalidDistribution):
        call(RngStream(1, 1))


def test_negative_seed() -> None:
    with pytest.raises(InvalidDistribution):
        RngStream(-1, 0)


@parameterized.expand(
    [
        (Uniform(a=2.0, b=2.0), 2.0),
        (Gaussian(mu=3.0, sigma=0.0), 3.0),
        (Bernoulli(p=1.0), 1.0),
        (Bernoulli(p=0.0), 0.0),
    ]
)
def test_draw_degenerate_descriptors(dist: object, expected: float) -> None:
    assert draw(RngStream(3, 3), dist) == expected  # type: ignore[arg-type]


def test_index_covers_range() -> None:
    stream = RngStream(11, 4)
    assert {stream.index(3) for _ in range(300)} == {0, 1, 2}
