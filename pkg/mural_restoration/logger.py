"""Log setup for restoration runs: one line per record, UTC timestamps.

Every record goes to `stderr` (machine outputs only ever go to files), and
optionally to a rotating log file. Each line carries the stage that emitted
it, set by `log_stage` around pipeline stages and CLI commands (`-`
outside any stage).

Fields, in order:

* ISO UTC timestamp e.g. `2021-01-01T00:00:00.000Z`
* level, CSV encloses in square brackets e.g. `[INFO]`
* thread name, CSV encloses in round brackets
* stage e.g. `train`
* `module.function:line`
* message

*CSV Example:*

`2021-10-30T14:19:51.012Z,[INFO],(MainThread),train,trainer.step:6,loss=0.98`

*JSON Example:*

`{"datetime":"2021-10-30T14:19:51.012Z","level":"INFO","thread":"MainThread",
"stage":"train","module":"trainer","function":"step","line":6,
"message":"loss=0.98"}`

Per-iteration tracing is opt-in: `LOG_VERBOSE` holds comma-separated tags
(`kmeans`, `sampler`, `trainer`, `fusion`, `fdp`) or `all`.

"""
import logging
import os
import sys
from contextlib import contextmanager
from contextvars import ContextVar
from logging.handlers import RotatingFileHandler
from time import gmtime

from mural_restoration.path import clean_path

__all__ = ['FORMAT_CSV', 'FORMAT_JSON', 'StageFilter',
           'LogFormatterOneLineException', 'log_stage', 'get_formatter',
           'get_handler_file', 'get_handler_stderr', 'get_mural_logger',
           'verbose_logging']

FORMAT_CSV = ('%(asctime)s.%(msecs)03dZ,[%(levelname)s],(%(threadName)s),'
              '%(stage)s,%(module)s.%(funcName)s:%(lineno)d,%(message)s')
FORMAT_JSON = ('{"datetime":"%(asctime)s.%(msecs)03dZ"'
               ',"level":"%(levelname)s","thread":"%(threadName)s"'
               ',"stage":"%(stage)s","module":"%(module)s"'
               ',"function":"%(funcName)s","line":%(lineno)d'
               ',"message":"%(message)s"}')
DATEFMT = '%Y-%m-%dT%H:%M:%S'
NO_STAGE = '-'

_stage: 'ContextVar[str]' = ContextVar('mural_stage', default=NO_STAGE)


@contextmanager
def log_stage(stage: str):
    """Tags every record emitted inside the block with `stage`."""
    token = _stage.set(stage)
    try:
        yield
    finally:
        _stage.reset(token)


class StageFilter(logging.Filter):
    """Stamps the current stage onto each record passing a handler."""
    def filter(self, record: logging.LogRecord) -> bool:
        if not hasattr(record, 'stage'):
            record.stage = _stage.get()
        return True


class LogFormatterOneLineException(logging.Formatter):
    """Folds a traceback onto the record's line.

    The message of a logged exception object is replaced by its type, so
    `log.exception(exc)` reads `ZeroDivisionError: -> Traceback ...`.

    """
    def formatException(self, exc_info):
        lines = super().formatException(exc_info).splitlines()
        return ' -> '.join(line.strip() for line in lines)

    def format(self, record):
        result = super().format(record)
        if record.exc_text and isinstance(record.msg, BaseException):
            result = result.replace(f'{record.msg}\n',
                                    f'{type(record.msg).__name__}: ')
        return result


def get_formatter(format: str = 'csv') -> logging.Formatter:
    """Returns the `csv` or `json` line formatter with UTC timestamps."""
    if format not in ('csv', 'json'):
        raise ValueError(f'Unsupported log format {format}')
    formatter = LogFormatterOneLineException(
        FORMAT_JSON if format == 'json' else FORMAT_CSV, DATEFMT)
    formatter.converter = gmtime
    return formatter


def _named(handler: logging.Handler, kind: str) -> logging.Handler:
    handler.name = f'mural_restoration_{kind}'
    handler.addFilter(StageFilter())
    return handler


def get_handler_file(filename: str,
                     file_size: int = 5,
                     backup_count: int = 2) -> RotatingFileHandler:
    """Returns a rotating file handler.

    Args:
        filename: The log file path. Its directory must exist.
        file_size: Megabytes before the file rotates.
        backup_count: Rotated files kept.

    Raises:
        `FileNotFoundError` if the directory does not exist.

    """
    if not filename:
        raise ValueError('Missing filename')
    handler = RotatingFileHandler(clean_path(filename),
                                  maxBytes=int(file_size * 1024 * 1024),
                                  backupCount=backup_count)
    return _named(handler, 'file')


def get_handler_stderr() -> logging.StreamHandler:
    return _named(logging.StreamHandler(sys.stderr), 'stderr')


def get_mural_logger(filename: 'str|None' = None,
                     file_size: int = 5,
                     log_level: 'int|str' = logging.INFO,
                     format: str = 'csv') -> logging.Logger:
    """Configures the root logger for a run.

    Calling it again replaces the handlers it added before instead of
    duplicating them.

    Args:
        filename: Also log to this rotating file.
        file_size: Megabytes before the file rotates.
        log_level: A level number or name, case-insensitive.
        format: `csv` or `json`.

    Returns:
        The root `Logger`.

    Raises:
        `FileNotFoundError` if the log file directory does not exist.
        `ValueError` for an unknown format.

    """
    formatter = get_formatter(format)
    handlers = [get_handler_stderr()]
    if filename is not None:
        handlers.append(get_handler_file(filename, file_size))
    logger = logging.getLogger()
    for old in [h for h in logger.handlers
                if h.name and h.name.startswith('mural_restoration_')]:
        logger.removeHandler(old)
        old.close()
    for handler in handlers:
        handler.setFormatter(formatter)
        logger.addHandler(handler)
    if isinstance(log_level, str):
        log_level = log_level.upper()
    logger.setLevel(log_level)
    return logger


def verbose_logging(tag: str = '', case_sensitive: bool = False) -> bool:
    """Indicates if `LOG_VERBOSE` enables tracing, optionally for one tag.

    Args:
        tag: A tag such as `sampler`; empty asks whether any tag is set.
        case_sensitive: Match the tag exactly.

    """
    setting = os.getenv('LOG_VERBOSE', '')
    tags = [t.strip() for t in setting.split(',') if t.strip()]
    if not tags:
        return False
    if not tag:
        return True
    if not case_sensitive:
        tag = tag.lower()
        tags = [t.lower() for t in tags]
    return tag in tags or 'all' in tags
