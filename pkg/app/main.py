"""
確率平均化ラボ - 実験ハーネスの入口
python -m app.main <experiment> --config cfg.json [--seed N] [--workers N] [--out DIR]
"""
import logging
import sys

from app.config import settings
from app.routes import jobs


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=settings.LOG_LEVEL,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    return jobs.dispatch(argv)


if __name__ == "__main__":
    sys.exit(main())
