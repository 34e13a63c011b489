"""
ブラウン運動の増分
各パスの増分は (master_seed, channel, stream) から鍵を作った Philox（カウンタ型）で生成する。
パスごとに独立した生成器なので、バッチ分割やワーカー数に結果が依存しない。
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Protocol

import numpy as np

from app.models.errors import DimensionMismatchError, LabError

logger = logging.getLogger(__name__)

# 摂動系側と極限 SDE 側で独立な乱数列を使うためのチャネル番号
CHANNEL_SYSTEM = 0
CHANNEL_LIMIT = 1
# 検証用の乱数関数など、パスと無関係な乱数
CHANNEL_CHECK = 2


@dataclass(frozen=True)
class SeedDescriptor:
    master_seed: int
    stream: int
    channel: int = CHANNEL_SYSTEM

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=self.master_seed, spawn_key=(self.channel, self.stream))
        return np.random.Generator(np.random.Philox(seq))


class BlockSource(Protocol):
    """(P, k, n_streams) の増分ブロックを順に返すもの"""

    n_paths: int
    n_streams: int
    dt: float

    def draw(self, n_steps: int) -> np.ndarray: ...


@dataclass(frozen=True)
class NoisePath:
    """1 本のパスの増分行列。increments[j, k] ~ N(0, dt)。"""

    n_streams: int
    dt: float
    increments: np.ndarray
    seed: SeedDescriptor | None = None

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.ndim != 2 or inc.shape[1] != self.n_streams:
            raise DimensionMismatchError(
                f"increments must be (steps, {self.n_streams}), got {inc.shape}"
            )
        if not self.dt > 0:
            raise LabError(f"dt must be positive, got {self.dt}")
        inc.setflags(write=False)
        object.__setattr__(self, "increments", inc)

    @classmethod
    def generate(cls, seed: SeedDescriptor, n_steps: int, n_streams: int, dt: float) -> "NoisePath":
        z = seed.generator().standard_normal((n_steps, n_streams))
        return cls(n_streams=n_streams, dt=dt, increments=z * np.sqrt(dt), seed=seed)

    @classmethod
    def zeros(cls, n_steps: int, n_streams: int, dt: float) -> "NoisePath":
        return cls(n_streams=n_streams, dt=dt, increments=np.zeros((n_steps, n_streams)))

    @property
    def n_steps(self) -> int:
        return self.increments.shape[0]

    def brownian(self, step: int) -> np.ndarray:
        """B(step·dt)（各ストリーム）"""
        if not 0 <= step <= self.n_steps:
            raise LabError(f"step {step} outside noise path of {self.n_steps} steps")
        return self.increments[:step].sum(axis=0)

    def coarsen(self, factor: int) -> "NoisePath":
        """連続する factor 個の増分を足して、同じブラウン経路を dt·factor で表す。"""
        if factor < 1 or self.n_steps % factor != 0:
            raise LabError(f"cannot coarsen {self.n_steps} steps by {factor}")
        inc = self.increments.reshape(self.n_steps // factor, factor, self.n_streams).sum(axis=1)
        return NoisePath(n_streams=self.n_streams, dt=self.dt * factor, increments=inc, seed=self.seed)

    def block_source(self) -> "_PathBlocks":
        return _PathBlocks(self)


class _PathBlocks:
    def __init__(self, path: NoisePath):
        self.path = path
        self.n_paths = 1
        self.n_streams = path.n_streams
        self.dt = path.dt
        self._cursor = 0

    def draw(self, n_steps: int) -> np.ndarray:
        end = self._cursor + n_steps
        if end > self.path.n_steps:
            raise LabError(f"noise path exhausted: need {end} steps, have {self.path.n_steps}")
        block = self.path.increments[self._cursor : end]
        self._cursor = end
        return block[None, :, :]


class NoiseBank:
    """
    複数パス分の増分を逐次生成する。
    パス i の列は NoisePath.generate(seeds[i], ...) と同じ値になる。
    """

    def __init__(self, seeds: Iterable[SeedDescriptor], n_streams: int, dt: float):
        self.seeds = list(seeds)
        self.n_paths = len(self.seeds)
        self.n_streams = n_streams
        self.dt = dt
        self._sqrt_dt = np.sqrt(dt)
        self._generators = [s.generator() for s in self.seeds]

    @classmethod
    def for_paths(
        cls, master_seed: int, paths: Iterable[int], n_streams: int, dt: float, channel: int = CHANNEL_SYSTEM
    ) -> "NoiseBank":
        return cls([SeedDescriptor(master_seed, int(i), channel) for i in paths], n_streams, dt)

    def draw(self, n_steps: int) -> np.ndarray:
        block = np.empty((self.n_paths, n_steps, self.n_streams))
        for i, gen in enumerate(self._generators):
            block[i] = gen.standard_normal((n_steps, self.n_streams))
        return block * self._sqrt_dt
