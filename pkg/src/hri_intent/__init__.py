import logging

logging.getLogger(__name__).addHandler(logging.NullHandler())


def set_logging_level(level: str | int) -> None:
    """Set the package log level, attaching a stderr handler on first use"""
    logger = logging.getLogger(__name__)
    logger.setLevel(level.upper() if isinstance(level, str) else level)
    if not any(type(h) is logging.StreamHandler for h in logger.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        logger.addHandler(handler)
