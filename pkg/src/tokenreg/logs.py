"""Logging setup for the tokenreg package."""

import logging
import sys

LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"


def configure_logging(verbosity: int = 0) -> logging.Logger:
    """0 -> WARNING, 1 -> INFO, 2+ -> DEBUG. Idempotent."""
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG

    root = logging.getLogger('tokenreg')
    root.setLevel(level)
    if not any(getattr(h, '_tokenreg', False) for h in root.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt="%H:%M:%S"))
        handler._tokenreg = True
        root.addHandler(handler)
    return root
