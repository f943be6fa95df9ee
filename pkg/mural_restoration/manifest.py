"""Run manifests: what a command did and what it needs to be reproduced.

A manifest holds the full configuration and its hash, the seeds drawn, the
SHA-256 of every checkpoint used or written, per-stage wall times and the
output paths. It is written once, atomically, when the run ends.

"""
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from mural_restoration.config import Config, config_hash
from mural_restoration.path import atomic_write_text
from mural_restoration.serialize import sha256_file, to_json

__all__ = ['RunManifest', 'utc_iso', 'read_manifest', 'MANIFEST_NAME']

MANIFEST_NAME = 'manifest.json'

_log = logging.getLogger(__name__)


def utc_iso(timestamp: 'float|None' = None, ms: bool = True) -> str:
    """Converts a unix timestamp (default now) to ISO 8601 UTC.

    Returns:
        `YYYY-MM-DDThh:mm:ss[.sss]Z`

    """
    if timestamp is None:
        timestamp = time.time()
    iso_time = datetime.fromtimestamp(timestamp, tz=timezone.utc).isoformat()
    if not ms:
        return f'{iso_time[:19]}Z'
    return f'{iso_time[:23]}Z'


@dataclass
class RunManifest:
    """Reproduction record of one command.

    Attributes:
        command: The CLI command that ran.
        config: Every configuration field.
        config_hash: SHA-256 of the configuration.
        seeds: Named seeds drawn during the run.
        checkpoints: Checkpoint path to file SHA-256.
        stages: Stage name to wall time in seconds.
        outputs: Paths written.
        status: `running`, `ok` or `failed: <stage>`.

    """
    command: str
    config: dict
    config_hash: str
    seeds: 'dict[str, int]' = field(default_factory=dict)
    checkpoints: 'dict[str, str]' = field(default_factory=dict)
    stages: 'dict[str, float]' = field(default_factory=dict)
    outputs: 'list[str]' = field(default_factory=list)
    started: str = field(default_factory=utc_iso)
    finished: 'str|None' = None
    status: str = 'running'

    @classmethod
    def start(cls, command: str, config: Config) -> 'RunManifest':
        return cls(command, config.to_dict(), config_hash(config),
                   seeds={'root': config.seed})

    @contextmanager
    def stage(self, name: str):
        """Times a stage; the time is recorded even if the stage fails."""
        start = time.perf_counter()
        _log.info('Stage %s started', name)
        try:
            yield
        except BaseException:
            self.status = f'failed: {name}'
            raise
        finally:
            self.stages[name] = round(time.perf_counter() - start, 3)
            _log.info('Stage %s took %.2f s', name, self.stages[name])

    def add_checkpoint(self, path: 'str|Path') -> None:
        self.checkpoints[str(path)] = sha256_file(path)

    def add_output(self, path: 'str|Path') -> None:
        if str(path) not in self.outputs:
            self.outputs.append(str(path))

    def finish(self, path: 'str|Path', status: 'str|None' = None) -> Path:
        """Stamps the end time and writes the manifest atomically.

        Args:
            path: The manifest file.
            status: Final status; `ok` unless a stage already failed.

        """
        if status is not None:
            self.status = status
        elif self.status == 'running':
            self.status = 'ok'
        self.finished = utc_iso()
        atomic_write_text(path, to_json(self) + '\n')
        _log.info('Wrote run manifest %s (%s)', path, self.status)
        return Path(path)


def read_manifest(path: 'str|Path') -> RunManifest:
    with open(path) as file:
        return RunManifest(**json.load(file))
