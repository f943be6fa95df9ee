"""Versioned checkpoint files for denoisers and dynamic diffusers.

A checkpoint is a `torch.save` dictionary:

    format, version, kind, scale, config, config_hash, schedule_hash,
    state_dict

`config` is the architecture the weights belong to. Loading rejects a
different format, version, kind, scale, architecture or noise schedule.

"""
import io
import logging
from pathlib import Path

import torch
from torch import nn

from mural_restoration.diffusion import NoiseSchedule
from mural_restoration.path import atomic_write_bytes
from mural_restoration.serialize import json_compatible, stable_hash

__all__ = ['CheckpointError', 'MissingCheckpointError', 'checkpoint_path',
           'save_checkpoint', 'load_checkpoint', 'FORMAT', 'VERSION',
           'KINDS']

FORMAT = 'mural-restoration-checkpoint'
VERSION = 1
KINDS = ('denoiser', 'diffuser')

_log = logging.getLogger(__name__)


class CheckpointError(Exception):
    """A checkpoint that cannot be used with the requested model."""


class MissingCheckpointError(CheckpointError):
    """No checkpoint file for a scale.

    Attributes:
        scale (int): The scale whose checkpoint is missing.

    """
    def __init__(self, path: 'str|Path', scale: int) -> None:
        super().__init__(f'Missing checkpoint for scale {scale}: {path}')
        self.scale = scale
        self.path = Path(path)


def checkpoint_path(directory: 'str|Path', kind: str, scale: int) -> Path:
    if kind not in KINDS:
        raise ValueError(f'Unknown checkpoint kind {kind}')
    return Path(directory) / f'{kind}_scale{scale}.pt'


def save_checkpoint(path: 'str|Path',
                    module: nn.Module,
                    kind: str,
                    scale: int,
                    architecture: dict,
                    sched: NoiseSchedule) -> str:
    """Atomically writes a checkpoint.

    Returns:
        The SHA-256 of the architecture, stored as `config_hash`.

    """
    architecture = json_compatible(architecture)
    config_hash = stable_hash(architecture)
    payload = {
        'format': FORMAT,
        'version': VERSION,
        'kind': kind,
        'scale': scale,
        'config': architecture,
        'config_hash': config_hash,
        'schedule_hash': sched.fingerprint(),
        'state_dict': {k: v.detach().cpu().clone()
                       for k, v in module.state_dict().items()},
    }
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    atomic_write_bytes(path, buffer.getvalue())
    _log.info('Saved %s checkpoint for scale %d to %s', kind, scale, path)
    return config_hash


def load_checkpoint(path: 'str|Path',
                    module: nn.Module,
                    kind: str,
                    scale: int,
                    architecture: dict,
                    sched: NoiseSchedule) -> nn.Module:
    """Loads weights into `module` after checking the header.

    Raises:
        `MissingCheckpointError` if the file does not exist.
        `CheckpointError` on any header mismatch or unreadable file.

    """
    path = Path(path)
    if not path.is_file():
        raise MissingCheckpointError(path, scale)
    try:
        payload = torch.load(path, map_location='cpu', weights_only=True)
    except Exception as exc:
        raise CheckpointError(f'Unreadable checkpoint {path}: {exc}') from exc
    if not isinstance(payload, dict) or payload.get('format') != FORMAT:
        raise CheckpointError(f'{path} is not a {FORMAT} file')
    if payload.get('version') != VERSION:
        raise CheckpointError(f'{path} has version {payload.get("version")},'
                              f' expected {VERSION}')
    if payload.get('kind') != kind or payload.get('scale') != scale:
        raise CheckpointError(f'{path} holds {payload.get("kind")} scale'
                              f' {payload.get("scale")}, expected {kind}'
                              f' scale {scale}')
    expected = stable_hash(json_compatible(architecture))
    if payload.get('config_hash') != expected:
        raise CheckpointError(f'{path} was trained with a different'
                              f' architecture {payload.get("config")}')
    if payload.get('schedule_hash') != sched.fingerprint():
        raise CheckpointError(f'{path} was trained with a different noise'
                              f' schedule')
    dtype = next(module.parameters()).dtype
    state = {k: v.to(dtype) for k, v in payload['state_dict'].items()}
    try:
        module.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f'{path} does not fit the model: {exc}') from exc
    return module
