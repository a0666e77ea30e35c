#!/usr/bin/env python3
#
# This module contains utility functions for logging.

import logging
import os
import sys
import time


def get_logger(name: str) -> logging.Logger:
    """
    Get a module-scoped logger which logs to stderr. stdout is left alone so
    that CLI results can be piped. This function must always be invoked as
    follows:

    get_logger(__name__)

    The level is INFO unless OPERA_LOG_LEVEL names another level.
    """
    logger = logging.getLogger(name)
    logger.setLevel(os.getenv("OPERA_LOG_LEVEL", "INFO").upper())
    if logger.handlers:
        return logger
    handler = logging.StreamHandler(sys.stderr)
    logging.Formatter.converter = time.gmtime
    formatter = logging.Formatter(
        "%(asctime)s.%(msecs)03d %(levelname)s %(filename)s:%(lineno)d %(message)s",
        datefmt="%Y-%m-%dT%H:%M:%S",
    )
    handler.setFormatter(formatter)
    logger.addHandler(handler)
    logger.propagate = False
    return logger
