"""Restoration of damaged murals with trained collaborators.

`restore_image` runs the whole inference flow on one image:

1. Contour guidance is extracted separately from the known pixels and from
   the damaged pixels (where faint stroke residue survives), and the two
   masks are joined.
2. The collaborative chain fills the damaged pixels.
3. The radial FDP filter, if any, sharpens the generated pixels.

Known pixels of the result always equal the input exactly.

"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from mural_restoration.checkpoint import checkpoint_path, load_checkpoint
from mural_restoration.config import Config
from mural_restoration.contour import ContourMask, extract_contour, read_mask
from mural_restoration.diffusion import NoiseSchedule, make_schedule, respace
from mural_restoration.fdp import (RadialFilter, apply_filter, fit_filter,
                                   load_filter)
from mural_restoration.fusion import (Collaborators, ScaleConditions,
                                      collaborative_sample)
from mural_restoration.image import Image, read_image, write_image
from mural_restoration.manifest import RunManifest
from mural_restoration.metrics import MetricReport, evaluate_pair
from mural_restoration.models import Denoiser
from mural_restoration.path import ensure_dir
from mural_restoration.seeds import stage_seed
from mural_restoration.trainer import (build_denoiser, build_diffuser,
                                       denoiser_architecture,
                                       diffuser_architecture, torch_dtype)

__all__ = ['mean_fill', 'restore_contour', 'schedule_for', 'load_denoisers',
           'load_collaborators', 'resolve_sibling', 'InfluenceDump',
           'RestoreResult', 'restore_image', 'fit_restoration_filter',
           'resolve_filter', 'run_restore', 'metric_options', 'FILTER_NAME']

FILTER_NAME = 'fdp_filter.txt'

_log = logging.getLogger(__name__)


def mean_fill(damaged: Image, damage: ContourMask) -> Image:
    """Fills damaged pixels with the per-channel mean of the known pixels.

    Raises:
        `ValueError` if the mask leaves no known pixel or does not match.

    """
    hole = damage.as_bool()
    if hole.shape != (damaged.height, damaged.width):
        raise ValueError('Damage mask and image sizes differ')
    if hole.all():
        raise ValueError('Mean fill needs at least one known pixel')
    mean = damaged.data[~hole].mean(axis=0)
    filled = damaged.data.copy()
    filled[hole] = mean
    return Image(filled)


def restore_contour(damaged: Image, damage: ContourMask, seed: int = 0
                    ) -> ContourMask:
    """Union of the contours of the known and the damaged regions.

    Each region is clustered on its own since plaster and intact paint have
    very different colors. Degenerate regions contribute nothing.

    """
    hole = damage.as_bool()
    masks = []
    for region in (~hole, hole):
        if region.any():
            masks.append(extract_contour(damaged, seed=seed, region=region,
                                         allow_degenerate=True))
    union = np.zeros(hole.shape, dtype=np.uint8)
    for mask in masks:
        union |= mask.data
    thresholds = [m.threshold for m in masks if m.threshold is not None]
    return ContourMask(union, threshold=thresholds[-1] if thresholds
                       else None)


def schedule_for(config: Config) -> NoiseSchedule:
    return make_schedule(config.T, config.beta_start, config.beta_end,
                         config.sigma_mode)


def load_denoisers(config: Config,
                   checkpoint_dir: 'str|Path',
                   channels: int = 3,
                   sched: 'NoiseSchedule|None' = None,
                   manifest: 'RunManifest|None' = None) -> 'list[Denoiser]':
    """Loads the trained denoiser of every scale, coarsest first.

    Raises:
        `MissingCheckpointError` naming the first scale without a file.
        `CheckpointError` for a checkpoint of another architecture or
            schedule.

    """
    sched = sched or schedule_for(config)
    predictors = []
    for index, scale in enumerate(config.scales):
        path = checkpoint_path(checkpoint_dir, 'denoiser', scale)
        model = build_denoiser(config, scale, channels,
                               stage_seed(config.seed, 'init', index))
        load_checkpoint(path, model, 'denoiser', scale,
                        denoiser_architecture(config, scale, channels), sched)
        model.eval()
        predictors.append(model)
        if manifest is not None:
            manifest.add_checkpoint(path)
    return predictors


def load_collaborators(config: Config,
                       checkpoint_dir: 'str|Path',
                       channels: int = 3,
                       sched: 'NoiseSchedule|None' = None,
                       manifest: 'RunManifest|None' = None) -> Collaborators:
    """Loads the denoiser and dynamic diffuser of every scale.

    Raises:
        `MissingCheckpointError` naming the first scale without a file.
        `CheckpointError` for a checkpoint of another architecture or
            schedule.

    """
    sched = sched or schedule_for(config)
    predictors = load_denoisers(config, checkpoint_dir, channels, sched,
                                manifest)
    diffusers = []
    for index, scale in enumerate(config.scales):
        path = checkpoint_path(checkpoint_dir, 'diffuser', scale)
        diffuser = build_diffuser(config, channels, stage_seed(
            config.seed, 'init', len(config.scales) + index))
        load_checkpoint(path, diffuser, 'diffuser', scale,
                        diffuser_architecture(config, channels), sched)
        diffuser.eval()
        diffusers.append(diffuser)
        if manifest is not None:
            manifest.add_checkpoint(path)
    return Collaborators(predictors, diffusers, config.scales)


def resolve_sibling(image_path: 'str|Path', kind: str) -> Path:
    """`<split>/damaged/<name>` -> `<split>/<kind>/<name>`."""
    image_path = Path(image_path)
    return image_path.parent.parent / kind / image_path.name


def _auto_sibling(input_path: Path, kind: str, flag: str) -> Path:
    path = resolve_sibling(input_path, kind)
    if not path.is_file():
        raise FileNotFoundError(
            f'No {kind} file at {path}: `auto` needs the input at'
            f' <split>/damaged/<name> with a sibling {kind}/ directory,'
            f' or pass {flag} explicitly')
    return path


class InfluenceDump:
    """Writes every normalized influence map as a grayscale PNG.

    Files are named `t{t:04d}_scale{n}.png` with `n` counting from the
    coarsest scale.

    """
    def __init__(self, directory: 'str|Path') -> None:
        self.directory = ensure_dir(directory)
        self.written = 0

    def __call__(self, t: int, weights: torch.Tensor) -> None:
        for n, weight in enumerate(weights):
            plane = weight[0, 0].detach().double().clamp(0, 1).numpy()
            write_image(Image(plane[:, :, np.newaxis]),
                        self.directory / f't{t:04d}_scale{n}.png')
            self.written += 1


@dataclass(frozen=True)
class RestoreResult:
    """Outputs of one restoration.

    Attributes:
        restored: The final image.
        generated: The composite before frequency-domain filtering.
        contour: The guidance mask used.

    """
    restored: Image
    generated: Image
    contour: ContourMask


def restore_image(collab: Collaborators,
                  damaged: Image,
                  damage: ContourMask,
                  config: Config,
                  seed: int,
                  sched: 'NoiseSchedule|None' = None,
                  steps: 'int|None' = None,
                  fdp_filter: 'RadialFilter|None' = None,
                  on_influence: Optional[Callable] = None) -> RestoreResult:
    """Restores one image.

    Args:
        collab: Loaded collaborators.
        damaged: The damaged image.
        damage: Its damage mask.
        config: The run config (guidance switches, dtype, contour seed).
        seed: Seed of the sampling chain.
        sched: The trained schedule; built from `config` when None.
        steps: Sample with this many of the trained timesteps.
        fdp_filter: Optional radial filter applied to generated pixels.
        on_influence: Optional observer of (t, normalized maps).

    """
    sched = sched or schedule_for(config)
    timesteps = None
    if steps is not None and steps != sched.T:
        sched, timesteps = respace(sched, steps)
    dtype = torch_dtype(config.dtype)
    contour = restore_contour(damaged, damage, seed=config.seed)
    conds = ScaleConditions.from_mask(contour, collab.scales,
                                      enabled=config.condition_guidance,
                                      dtype=dtype)
    generated = collaborative_sample(collab, conds, sched, seed, damaged,
                                     damage,
                                     known_guidance=config.known_guidance,
                                     dtype=dtype, timesteps=timesteps,
                                     on_influence=on_influence,
                                     clip_x0=config.clip_x0,
                                     samples=config.restore_samples)
    restored = generated
    if fdp_filter is not None:
        filtered = apply_filter(generated, fdp_filter)
        hole = damage.as_bool()[:, :, np.newaxis]
        restored = Image(np.where(hole, filtered.data, damaged.data))
    return RestoreResult(restored, generated, contour)


def fit_restoration_filter(collab: Collaborators,
                           triples: 'list[tuple[Image, ContourMask, Image]]',
                           config: Config,
                           sched: 'NoiseSchedule|None' = None,
                           trace: 'list[float]|None' = None) -> RadialFilter:
    """Fits the FDP filter on restorations of (damaged, mask, clean) triples.

    Each triple is restored without filtering using its own `fdp` stage
    seed, and the filter maps the restorations towards the clean images.

    """
    pairs = []
    for index, (damaged, damage, clean) in enumerate(triples):
        result = restore_image(collab, damaged, damage, config,
                               stage_seed(config.seed, 'fdp', index), sched)
        pairs.append((result.generated, clean))
    filt = fit_filter(pairs, config.fdp_bands, config.fdp_steps, trace)
    _log.info('Fitted FDP gains %s', [round(g, 4) for g in filt.gains])
    return filt


def metric_options(config: Config) -> dict:
    """Keyword arguments of `evaluate_pair` from a config."""
    return {'window': config.ssim_window, 'sigma': config.ssim_sigma,
            'bins': config.histogram_bins, 'econ_mode': config.econ_mode}


def resolve_filter(config: Config, fdp: 'str|None',
                   checkpoint_dir: 'str|Path') -> 'RadialFilter|None':
    """The filter named by `fdp`, or the config default when None."""
    if fdp is None:
        if not config.fdp:
            return None
        default = Path(checkpoint_dir) / FILTER_NAME
        if default.is_file():
            return load_filter(default)
        _log.warning('FDP is on but %s does not exist; skipping', default)
        return None
    if fdp.lower() == 'off':
        return None
    return load_filter(fdp)


def run_restore(config: Config,
                input_path: 'str|Path',
                output_path: 'str|Path',
                checkpoint_dir: 'str|Path',
                mask: 'str|Path' = 'auto',
                reference: 'str|Path|None' = None,
                fdp: 'str|None' = None,
                steps: 'int|None' = None,
                dump_influence: 'str|Path|None' = None,
                manifest: 'RunManifest|None' = None,
                collab: 'Collaborators|None' = None,
                ) -> 'tuple[Image, MetricReport|None]':
    """Restores one file and writes the result.

    Args:
        config: The run config.
        input_path: The damaged image.
        output_path: Where to write the restored image.
        checkpoint_dir: Directory of the per-scale checkpoints.
        mask: A mask file, or `auto` for the sibling `mask/` directory.
        reference: Optional clean image to evaluate against, or `auto` for
            the sibling `clean/` directory.
        fdp: A filter file, `off`, or None for the config default
            (`fdp_filter.txt` in the checkpoint directory when `fdp` is on).
        steps: Sampling steps; the trained T when None.
        dump_influence: Optional directory for influence maps.
        manifest: Optional manifest to record seeds and files in.
        collab: Already loaded collaborators, to skip loading.

    Returns:
        The restored image and, with a reference, its metrics over the
            damaged region.

    Raises:
        `MissingCheckpointError` naming the scale without a checkpoint.
        `FileNotFoundError` for a missing input, mask or reference.

    """
    input_path = Path(input_path)
    checkpoint_dir = Path(checkpoint_dir)
    mask_path = _auto_sibling(input_path, 'mask', '--mask') \
        if str(mask) == 'auto' else Path(mask)
    if not mask_path.is_file():
        raise FileNotFoundError(f'Mask {mask_path} not found')
    damaged = read_image(input_path)
    damage = read_mask(mask_path)
    sched = schedule_for(config)
    if collab is None:
        collab = load_collaborators(config, checkpoint_dir, damaged.channels,
                                    sched, manifest)
    seed = stage_seed(config.seed, 'restore')
    observer = InfluenceDump(dump_influence) if dump_influence else None
    result = restore_image(collab, damaged, damage, config, seed, sched,
                           steps=steps,
                           fdp_filter=resolve_filter(config, fdp,
                                                     checkpoint_dir),
                           on_influence=observer)
    write_image(result.restored, output_path)
    if manifest is not None:
        manifest.seeds['restore'] = seed
        manifest.add_output(output_path)
    report = None
    if reference is not None:
        ref_path = _auto_sibling(input_path, 'clean', '--reference') \
            if str(reference) == 'auto' else Path(reference)
        report = evaluate_pair(result.restored, read_image(ref_path),
                               damage, **metric_options(config))
    _log.info('Restored %s -> %s', input_path, output_path)
    return result.restored, report
