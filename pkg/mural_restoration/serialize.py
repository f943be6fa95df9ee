"""Conversion of run artifacts to JSON and stable content hashes.
"""
import dataclasses
import hashlib
import json
import logging
import math
from enum import Enum
from pathlib import Path

import numpy as np

__all__ = ['json_compatible', 'to_json', 'stable_hash', 'sha256_file']

_log = logging.getLogger(__name__)


def json_compatible(obj: object) -> object:
    """Returns a structure compatible with `json.dumps`.

    Nested dataclasses become dictionaries, numpy scalars and arrays become
    numbers and lists, paths and enums become strings. Non-finite floats are
    rejected since reports must stay parseable by strict readers.

    Args:
        obj: The source object.

    Returns:
        Nested dictionaries, lists and primitives.

    Raises:
        `ValueError` if a float is NaN or infinite.

    """
    if obj is None or isinstance(obj, (bool, str)):
        return obj
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        if not math.isfinite(float(obj)):
            raise ValueError(f'Non-finite value {obj} is not serializable')
        return float(obj)
    if isinstance(obj, np.ndarray):
        return [json_compatible(v) for v in obj.tolist()]
    if isinstance(obj, Enum):
        return json_compatible(obj.value)
    if isinstance(obj, Path):
        return str(obj)
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: json_compatible(getattr(obj, f.name))
                for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): json_compatible(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_compatible(v) for v in obj]
    if callable(obj):
        return f'<function:{getattr(obj, "__name__", type(obj).__name__)}>'
    _log.warning('No JSON form for %s', type(obj).__name__)
    return '<non-serializable>'


def to_json(obj: object, indent: 'int|None' = 2) -> str:
    """Canonical JSON text (sorted keys) with a trailing newline."""
    return json.dumps(json_compatible(obj), indent=indent,
                      sort_keys=True) + '\n'


def stable_hash(obj: object) -> str:
    """SHA-256 hex digest of the compact canonical JSON of an object."""
    text = json.dumps(json_compatible(obj), sort_keys=True,
                      separators=(',', ':'))
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def sha256_file(filename: 'str|Path') -> str:
    """SHA-256 hex digest of a file's bytes."""
    digest = hashlib.sha256()
    with open(filename, 'rb') as file:
        for chunk in iter(lambda: file.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()
