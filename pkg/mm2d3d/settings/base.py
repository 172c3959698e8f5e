"""
Runtime defaults of the mm2d3d command line.
"""

import logging
import os
import sys

import coloredlogs


LOG_LEVEL = os.environ.get('MM2D3D_LOG_LEVEL', 'INFO').upper()
LOG_FORMAT = '%(asctime)s %(name)s %(levelname)s %(message)s'
LOGGERS = ('pymm2d3d', 'mm2d3d.cli')

# 1 keeps every run bit-reproducible
THREADS = int(os.environ.get('MM2D3D_THREADS', '1'))

# file names inside --out directories
CHECKPOINT_NAME = 'model.mmck'
METRICS_NAME = 'metrics.jsonl'
REPORT_NAME = 'report.json'
CONFIG_NAME = 'config.yaml'
SPEC_NAME = 'spec.yaml'
COMPLEMENTARITY_NAME = 'complementarity.json'

ERROR_PREFIX = 'mm2d3d:'


def setup_logging(level: str = LOG_LEVEL) -> None:
    """
    Colored log lines on stderr for the library and the command line.
    """
    level = level.upper()
    if not isinstance(logging.getLevelName(level), int):
        raise ValueError(f'Unknown log level <{level}>')
    for name in LOGGERS:
        coloredlogs.install(level=level, logger=logging.getLogger(name), stream=sys.stderr, fmt=LOG_FORMAT)


def show_progress() -> bool:
    return sys.stderr.isatty() and logging.getLogger('pymm2d3d').getEffectiveLevel() <= logging.INFO
