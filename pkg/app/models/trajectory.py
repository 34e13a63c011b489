"""
軌道記録
EnsembleRecord はバッチ積分の結果（停止過程 y_{t∧T} を矩形配列で保持）、
TrajectoryRecord はそこから 1 本を切り出したもの（脱出後のサンプルは含まない）。
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TrajectoryRecord:
    times: np.ndarray  # (S,)
    states: np.ndarray  # (S, 2n)
    energies: np.ndarray  # (S, n)
    exit_time: float  # 脱出しなければ +inf
    epsilon: float

    @property
    def exited(self) -> bool:
        return bool(np.isfinite(self.exit_time))

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]


@dataclass(frozen=True)
class EnsembleRecord:
    times: np.ndarray  # (S,)
    energies: np.ndarray  # (P, S, n)、脱出後は脱出時の値で止まる
    exit_times: np.ndarray  # (P,)
    exit_states: np.ndarray  # (P, 2n)、脱出しなかったパスは終端状態
    exit_energies: np.ndarray  # (P, n)
    final_states: np.ndarray  # (P, 2n)
    epsilon: float
    dt: float
    paths: np.ndarray  # (P,) ストリーム番号
    states: np.ndarray | None = None  # (P, S, 2n)（keep_states=True のときのみ）

    @property
    def n_paths(self) -> int:
        return self.exit_times.size

    @property
    def exited(self) -> np.ndarray:
        return np.isfinite(self.exit_times)

    def trajectory(self, i: int) -> TrajectoryRecord:
        """i 番目のパスを脱出時刻で打ち切って返す（脱出時の状態を最後の点にする）。"""
        if self.states is None:
            raise ValueError("states were not kept for this ensemble")
        T = float(self.exit_times[i])
        if np.isfinite(T):
            keep = self.times < T
            times = np.append(self.times[keep], T)
            states = np.vstack([self.states[i, keep], self.exit_states[i]])
            energies = np.vstack([self.energies[i, keep], self.exit_energies[i]])
        else:
            times, states, energies = self.times, self.states[i], self.energies[i]
        return TrajectoryRecord(
            times=times, states=states, energies=energies, exit_time=T, epsilon=self.epsilon
        )

    @classmethod
    def concatenate(cls, parts: list["EnsembleRecord"]) -> "EnsembleRecord":
        """パス番号順に並んだ部分結果をつなぐ。"""
        first = parts[0]
        states = None
        if all(p.states is not None for p in parts):
            states = np.concatenate([p.states for p in parts], axis=0)
        return cls(
            times=first.times,
            energies=np.concatenate([p.energies for p in parts], axis=0),
            exit_times=np.concatenate([p.exit_times for p in parts]),
            exit_states=np.concatenate([p.exit_states for p in parts], axis=0),
            exit_energies=np.concatenate([p.exit_energies for p in parts], axis=0),
            final_states=np.concatenate([p.final_states for p in parts], axis=0),
            epsilon=first.epsilon,
            dt=first.dt,
            paths=np.concatenate([p.paths for p in parts]),
            states=states,
        )


@dataclass(frozen=True)
class LimitRecord:
    """レベル空間の極限 SDE のパス（境界で停止）"""

    times: np.ndarray  # (S,)
    values: np.ndarray  # (P, S, n)
    exit_times: np.ndarray  # (P,)
    final_values: np.ndarray  # (P, n) 停止値
    dt: float
    reading: str
    paths: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.exit_times.size

    @property
    def exited(self) -> np.ndarray:
        return np.isfinite(self.exit_times)
