"""
設定管理（環境変数から読み込み）
"""
from pathlib import Path

from pydantic_settings import BaseSettings, SettingsConfigDict

# 起動ディレクトリに依存せずリポジトリ直下の .env を読む
_ENV_FILE = Path(__file__).resolve().parent.parent / ".env"


class Settings(BaseSettings):
    """アプリケーション設定"""

    # 乱数（マスターシード）
    MASTER_SEED: int = 20240611

    # 並列実行（1 ならプロセスプールを使わない）
    WORKERS: int = 1
    # 1 作業単位あたりのパス数
    BATCH_SIZE: int = 512
    # 乱数生成器 1 回の呼び出しで引く増分のステップ数
    NOISE_BLOCK_STEPS: int = 256

    # 出力先
    OUTPUT_DIR: str = "results"

    # 数値パラメータの既定値
    TORUS_GRID_SIZE: int = 64
    DEFAULT_DT: float = 1e-3
    DT_SCALE: float = 0.1  # dt = min(DEFAULT_DT, DT_SCALE·ε²)
    RECORD_POINTS: int = 200  # 1 パスあたりの記録点数の目安

    LOG_LEVEL: str = "INFO"

    model_config = SettingsConfigDict(
        env_file=str(_ENV_FILE),
        case_sensitive=True,
        extra="ignore",
    )


settings = Settings()
