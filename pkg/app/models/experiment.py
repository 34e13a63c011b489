"""
実験設定と結果
ExperimentConfig は JSON 設定ファイル 1 枚をそのまま表す（未知キーは拒否）。
未指定の項目は Settings（環境変数 / .env）から既定値を取る。
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.config import settings

ARTIFACT_VERSION = "0.1.0"

ExperimentName = Literal[
    "simulate", "average", "rate", "exitprob", "limit2", "weak2", "poisson-check", "deviation"
]
EXPERIMENTS: tuple[str, ...] = (
    "simulate", "average", "rate", "exitprob", "limit2", "weak2", "poisson-check", "deviation"
)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    experiment: ExperimentName

    # 系
    model: str = "r4"
    params: list[float] = Field(default_factory=list)
    drift: list[float] | None = None
    perturbation: str = "K1"

    # 初期値：y0 か (actions, angles) のどちらか
    y0: list[float] | None = None
    actions: list[float] | None = None
    angles: list[float] | None = None
    radius: float | None = Field(default=None, gt=0)

    # スケール・時間
    epsilon: float = Field(default=0.0, ge=0)  # simulate 用
    epsilons: list[float] = Field(default_factory=lambda: [0.1, 0.05, 0.025, 0.0125])
    horizon: float = Field(default=0.5, gt=0)
    times: list[float] | None = None
    dt: float = Field(default_factory=lambda: settings.DEFAULT_DT, gt=0)
    dt_scale: float = Field(default_factory=lambda: settings.DT_SCALE, gt=0)
    ode_dt: float = Field(default=1e-2, gt=0)
    limit_dt: float | None = Field(default=None, gt=0)
    scheme: Literal["heun", "midpoint"] = "midpoint"
    record_points: int = Field(default_factory=lambda: settings.RECORD_POINTS, ge=1)

    # 統計
    beta: float = Field(default=2.0, gt=1)
    n_paths: int = Field(default=200, ge=1)
    delta: float | None = Field(default=None, gt=0)

    # 数値格子
    torus_m: int = Field(default_factory=lambda: settings.TORUS_GRID_SIZE, ge=2)
    level_nodes: int = Field(default=9, ge=2)
    zero_mode: float = 0.0
    reading: Literal["stratonovich", "ito", "generator"] = "generator"

    # 実行
    master_seed: int = Field(default_factory=lambda: settings.MASTER_SEED, ge=0)
    workers: int = Field(default_factory=lambda: settings.WORKERS, ge=1)
    output_dir: str = Field(default_factory=lambda: settings.OUTPUT_DIR)

    @field_validator("epsilons")
    @classmethod
    def _epsilons_decreasing(cls, v: list[float]) -> list[float]:
        if not v:
            raise ValueError("epsilon grid must not be empty")
        if any(e <= 0 for e in v):
            raise ValueError("epsilons must be positive")
        if any(b >= a for a, b in zip(v, v[1:])):
            raise ValueError("epsilon grid must be strictly decreasing")
        return v

    @field_validator("torus_m")
    @classmethod
    def _power_of_two(cls, v: int) -> int:
        if v & (v - 1):
            raise ValueError("torus_m must be a power of two")
        return v

    @field_validator("times")
    @classmethod
    def _times_positive(cls, v: list[float] | None) -> list[float] | None:
        if v is not None and (not v or any(t <= 0 for t in v)):
            raise ValueError("times must be a non-empty list of positive numbers")
        return v

    @field_validator("actions")
    @classmethod
    def _actions_positive(cls, v: list[float] | None) -> list[float] | None:
        if v is not None and any(i <= 0 for i in v):
            raise ValueError("actions must be positive (inside the regular region)")
        return v

    @model_validator(mode="after")
    def _initial_state(self) -> "ExperimentConfig":
        if self.y0 is not None and (self.actions is not None or self.angles is not None):
            raise ValueError("give either y0 or actions/angles, not both")
        if self.angles is not None and self.actions is None:
            raise ValueError("angles need actions")
        if self.actions is not None and self.angles is not None and len(self.angles) != len(self.actions):
            raise ValueError("actions and angles must have the same length")
        if self.experiment == "rate" and self.n_paths < 100:
            raise ValueError("rate experiment needs n_paths >= 100")
        return self


@dataclass
class Table:
    """CSV 1 ファイル分。name はファイル名（拡張子なし）。"""

    name: str
    columns: list[str]
    rows: list[list[Any]]


@dataclass
class ResultBundle:
    experiment: str
    config: ExperimentConfig
    tables: list[Table] = field(default_factory=list)
    documents: dict[str, str] = field(default_factory=dict)  # ファイル名 -> JSON 文字列
    summary: dict[str, Any] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)
    n_paths_total: int = 0
    wall_clock: float = 0.0
    version: str = ARTIFACT_VERSION

    @property
    def seed(self) -> int:
        return self.config.master_seed

    def table(self, name: str) -> Table:
        for t in self.tables:
            if t.name == name:
                return t
        raise KeyError(name)
