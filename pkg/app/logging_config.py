import logging

from app.config import LOG_LEVEL


def configure_logging(level: str = LOG_LEVEL) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s - %(threadName)s - %(levelname)s - %(message)s",
    )
    logging.getLogger("paho").setLevel(logging.WARNING)
