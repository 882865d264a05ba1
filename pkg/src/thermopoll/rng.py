from __future__ import annotations

from typing import Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from thermopoll.errors import InvalidDistribution

# Reserved stream ids. Thermometer streams use the thermometer's identification code, so adding a
# thermometer never shifts the draws of the channel, the central node or the other thermometers.
CHANNEL_STREAM_ID = 2**64 - 1
MASTER_STREAM_ID = 2**64 - 2
MAX_NODE_STREAM_ID = 2**64 - 3


class Uniform(BaseModel):
    model_config = ConfigDict(frozen=True)

    a: float
    b: float


class Gaussian(BaseModel):
    model_config = ConfigDict(frozen=True)

    mu: float
    sigma: float


class Bernoulli(BaseModel):
    model_config = ConfigDict(frozen=True)

    p: float


Distribution = Union[Uniform, Gaussian, Bernoulli]


class RngStream:
    """
    A seeded random stream. Identical `(seed, stream_id)` pairs produce identical sequences.
    """

    def __init__(self, seed: int, stream_id: int) -> None:
        if seed < 0 or stream_id < 0:
            raise InvalidDistribution(
                f'seed and stream id must be non-negative, got {seed} and {stream_id}'
            )
        self.seed = seed
        self.stream_id = stream_id
        sequence = np.random.SeedSequence([seed, stream_id])
        self.generator = np.random.Generator(np.random.PCG64(sequence))

    def uniform(self, a: float, b: float) -> float:
        if a > b:
            raise InvalidDistribution(f'uniform({a}, {b}) needs a <= b')
        return float(self.generator.uniform(a, b))

    def gaussian(self, mu: float, sigma: float) -> float:
        if sigma < 0:
            raise InvalidDistribution(f'gaussian({mu}, {sigma}) needs sigma >= 0')
        return float(self.generator.normal(mu, sigma))

    def bernoulli(self, p: float) -> bool:
        if not 0.0 <= p <= 1.0:
            raise InvalidDistribution(f'bernoulli({p}) needs p in [0, 1]')
        return bool(self.generator.random() < p)

    def index(self, n: int) -> int:
        """
        A uniformly drawn index in `range(n)`.
        """
        return int(self.generator.integers(0, n))


def draw(stream: RngStream, dist: Distribution) -> float:
    """
    One value following `dist`. Bernoulli outcomes are returned as 1.0 or 0.0.
    """
    if isinstance(dist, Uniform):
        return stream.uniform(dist.a, dist.b)
    if isinstance(dist, Gaussian):
        return stream.gaussian(dist.mu, dist.sigma)
    if isinstance(dist, Bernoulli):
        return 1.0 if stream.bernoulli(dist.p) else 0.0
    raise InvalidDistribution(f'unsupported distribution {dist!r}')
