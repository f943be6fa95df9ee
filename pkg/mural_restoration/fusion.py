"""Collaborative multi-scale noise prediction and sampling.

One chain state lives at the canonical (finest) resolution. At every
timestep each frozen per-scale predictor sees a bilinear resample of the
state at its native size; its prediction is resampled back to canonical
size. A dynamic diffuser per scale scores every pixel, the scores are
softmax-normalized across scales, and the fused noise is the per-pixel
convex combination of the aligned predictions.

Set `LOG_VERBOSE=fusion` to log influence statistics per step.

"""
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
import torch
from torch import nn

from mural_restoration.contour import ContourMask
from mural_restoration.dataset import PatchSet
from mural_restoration.diffusion import (NoiseSchedule, NonFiniteError,
                                         diffusion_loss, forward_diffuse,
                                         sample_loop)
from mural_restoration.image import Image, resample, resample_tensor
from mural_restoration.logger import verbose_logging
from mural_restoration.models import DynamicDiffuser, ParameterStore
from mural_restoration.seeds import torch_generator

__all__ = ['FusionError', 'NoisePredictor', 'ScaleConditions',
           'Collaborators', 'influence', 'normalize_influence', 'fuse_eps',
           'collaborative_chain', 'collaborative_sample', 'fusion_loss',
           'train_diffusers', 'NORMALIZATION_TOLERANCE']

NORMALIZATION_TOLERANCE = 1e-5

_log = logging.getLogger(__name__)


class FusionError(Exception):
    """Inconsistent collaborators, conditions or influence maps."""


class NoisePredictor(Protocol):
    """A per-scale noise predictor at its native size."""
    def __call__(self, x: torch.Tensor, t: torch.Tensor,
                 contour: torch.Tensor,
                 tag: 'torch.Tensor|None' = None) -> torch.Tensor:
        ...


@dataclass(frozen=True, eq=False)
class ScaleConditions:
    """Contour guidance resampled to every scale, coarsest first.

    Attributes:
        contours: One Bx1xSxS tensor per scale.
        tag: Optional (B,) style tags.

    """
    contours: 'tuple[torch.Tensor, ...]'
    tag: 'torch.Tensor|None' = None

    @property
    def canonical(self) -> torch.Tensor:
        return self.contours[-1]

    @classmethod
    def from_canonical(cls,
                       contour: torch.Tensor,
                       scales: 'Sequence[int]',
                       tag: 'torch.Tensor|None' = None) -> 'ScaleConditions':
        """Nearest-resamples a Bx1xHxW canonical contour to each scale."""
        return cls(tuple(resample_tensor(contour, (s, s), 'nearest')
                         for s in scales), tag)

    @classmethod
    def from_mask(cls,
                  mask: 'ContourMask|None',
                  scales: 'Sequence[int]',
                  tag: 'int|None' = None,
                  batch_size: int = 1,
                  enabled: bool = True,
                  dtype: torch.dtype = torch.float32) -> 'ScaleConditions':
        """Builds conditions from a mask at canonical size.

        With `enabled` False (or no mask) every contour is zero.

        """
        canonical = scales[-1]
        if mask is None or not enabled:
            contour = torch.zeros((1, 1, canonical, canonical), dtype=dtype)
        else:
            contour = torch.tensor(mask.data, dtype=dtype)[None, None]
            if contour.shape[-2:] != (canonical, canonical):
                contour = resample_tensor(contour, (canonical, canonical),
                                          'nearest')
        contour = contour.expand(batch_size, -1, -1, -1)
        tags = None if tag is None else torch.full((batch_size,), tag,
                                                   dtype=torch.long)
        return cls.from_canonical(contour, scales, tags)

    def repeat(self, batch_size: int) -> 'ScaleConditions':
        """Conditions of a batch of 1 repeated for `batch_size` chains."""
        if self.canonical.shape[0] != 1:
            raise FusionError('Only a batch of 1 can be repeated')
        tag = None if self.tag is None else self.tag.expand(batch_size)
        return ScaleConditions(tuple(c.expand(batch_size, -1, -1, -1)
                                     for c in self.contours), tag)


class Collaborators:
    """Frozen per-scale predictors and their trainable dynamic diffusers.

    Args:
        predictors: One noise predictor per scale, coarsest first.
        diffusers: One dynamic diffuser per scale.
        scales: Native square sizes, strictly increasing.

    Raises:
        `FusionError` for mismatched counts or non-increasing scales.

    """
    def __init__(self,
                 predictors: 'Sequence[NoisePredictor]',
                 diffusers: 'Sequence[DynamicDiffuser]',
                 scales: 'Sequence[int]') -> None:
        if not predictors or len(predictors) != len(diffusers) or \
                len(predictors) != len(scales):
            raise FusionError(f'Need N >= 1 predictors, diffusers and scales;'
                              f' got {len(predictors)}, {len(diffusers)},'
                              f' {len(scales)}')
        if any(a >= b for a, b in zip(scales, scales[1:])):
            raise FusionError(f'Scales must strictly increase: {scales}')
        self.predictors = list(predictors)
        self.diffusers = list(diffusers)
        self.scales = list(scales)
        self._verbose = verbose_logging('fusion')

    def __len__(self) -> int:
        return len(self.scales)

    @property
    def canonical(self) -> int:
        return self.scales[-1]

    def favor_canonical(self, logit: float) -> None:
        """Adds `logit` to the canonical diffuser's output bias.

        Where the raw logits are otherwise equal the canonical scale then
        gets weight `e^logit / (e^logit + N - 1)` instead of `1 / N`.

        """
        with torch.no_grad():
            self.diffusers[-1].head.bias.add_(logit)

    def diffuser_parameters(self) -> 'list[nn.Parameter]':
        return [p for d in self.diffusers for p in d.parameters()]

    def predictions(self, xt: torch.Tensor, t: torch.Tensor,
                    conds: ScaleConditions) -> 'list[torch.Tensor]':
        """Per-scale noise predictions aligned to canonical resolution."""
        self._check(xt, conds)
        size = (self.canonical, self.canonical)
        aligned = []
        for predictor, scale, contour in zip(self.predictors, self.scales,
                                             conds.contours):
            view = resample_tensor(xt, (scale, scale), 'bilinear')
            eps = predictor(view, t, contour.to(xt.dtype), conds.tag)
            aligned.append(resample_tensor(eps, size, 'bilinear'))
        return aligned

    def raw_influence(self, xt: torch.Tensor, t: torch.Tensor,
                      conds: ScaleConditions) -> 'list[torch.Tensor]':
        return [influence(d, xt, t, conds.canonical) for d in self.diffusers]

    def fused(self, xt: torch.Tensor, t: torch.Tensor,
              conds: ScaleConditions
              ) -> 'tuple[torch.Tensor, torch.Tensor]':
        """Returns the fused noise and the normalized influence maps."""
        weights = normalize_influence(self.raw_influence(xt, t, conds))
        with torch.no_grad():
            predictions = self.predictions(xt, t, conds)
        fused = fuse_eps(weights, predictions)
        if self._verbose:
            _log.debug('t=%d mean influence %s', int(t[0]),
                       [round(float(w.mean()), 4) for w in weights])
        return fused, weights

    def _check(self, xt: torch.Tensor, conds: ScaleConditions) -> None:
        if tuple(xt.shape[-2:]) != (self.canonical, self.canonical):
            raise FusionError(f'State {tuple(xt.shape[-2:])} is not at'
                              f' canonical size {self.canonical}')
        if len(conds.contours) != len(self.scales):
            raise FusionError(f'{len(conds.contours)} contour levels for'
                              f' {len(self.scales)} scales')


def influence(diffuser: DynamicDiffuser,
              xt: torch.Tensor,
              t: torch.Tensor,
              contour: torch.Tensor) -> torch.Tensor:
    """One scale's raw Nx1xHxW influence at canonical resolution.

    Raises:
        `FusionError` if the contour does not match the state.
        `NonFiniteError` if the map is not finite.

    """
    if contour.shape[-2:] != xt.shape[-2:]:
        raise FusionError('Contour and state sizes differ')
    raw = diffuser(xt, t, contour.to(xt.dtype))
    if not torch.isfinite(raw).all():
        raise NonFiniteError('influence')
    return raw


def normalize_influence(raw: 'Sequence[torch.Tensor]') -> torch.Tensor:
    """Per-pixel softmax across scales, subtracting the maximum first.

    Returns:
        A tensor stacking the N normalized maps on a new first dimension.

    Raises:
        `FusionError` for no maps or differing shapes.
        `NonFiniteError` for non-finite values.

    """
    if len(raw) == 0:
        raise FusionError('No influence maps')
    if len({tuple(r.shape) for r in raw}) > 1:
        raise FusionError('Influence maps differ in shape')
    stacked = torch.stack(list(raw))
    if not torch.isfinite(stacked).all():
        raise NonFiniteError('raw influence')
    shifted = stacked - stacked.max(dim=0, keepdim=True).values
    weights = torch.exp(shifted)
    return weights / weights.sum(dim=0, keepdim=True)


def fuse_eps(weights: torch.Tensor,
             predictions: 'Sequence[torch.Tensor]') -> torch.Tensor:
    """Returns sum_n weights[n] * predictions[n].

    Raises:
        `FusionError` if counts or shapes differ, or the weights at any pixel
            deviate from a sum of 1 by more than 1e-5.

    """
    if len(weights) != len(predictions):
        raise FusionError(f'{len(weights)} maps for {len(predictions)}'
                          f' predictions')
    deviation = float((weights.detach().sum(dim=0) - 1).abs().max())
    if deviation > NORMALIZATION_TOLERANCE:
        raise FusionError(f'Influence maps are not normalized (deviation'
                          f' {deviation:.3g})')
    fused = torch.zeros_like(predictions[0])
    for weight, prediction in zip(weights, predictions):
        if prediction.shape[-2:] != weight.shape[-2:]:
            raise FusionError('Prediction not at canonical resolution')
        fused = fused + weight * prediction
    return fused


def collaborative_chain(collab: Collaborators,
                        conds: ScaleConditions,
                        sched: NoiseSchedule,
                        generator: torch.Generator,
                        batch_size: int = 1,
                        channels: int = 3,
                        dtype: torch.dtype = torch.float32,
                        known: 'tuple[torch.Tensor, torch.Tensor]|None' = None,
                        timesteps: 'np.ndarray|None' = None,
                        on_influence: Optional[Callable[[int, torch.Tensor],
                                                        None]] = None,
                        clip_x0: bool = False,
                        ) -> torch.Tensor:
    """Runs the fused reverse chain and returns the unclamped x_0.

    Args:
        collab: The collaborators.
        conds: Conditions for a batch of `batch_size`.
        sched: The noise schedule.
        generator: Source of all noise.
        batch_size: Chains run together.
        channels: Image channels.
        dtype: Tensor dtype.
        known: Optional (x0_known, keep) pair at canonical size; after each
            step pixels with keep == 1 are replaced by x0_known noised to the
            new timestep.
        timesteps: Optional map from `sched` timesteps to the timesteps the
            predictors were trained with (see `respace`).
        on_influence: Optional observer of (t, normalized maps).
        clip_x0: Clamp clean estimates to [-1, 1] at every step.

    Raises:
        `NonFiniteError` naming the timestep of the first NaN.

    """
    size = collab.canonical
    shape = (batch_size, channels, size, size)

    def predict(x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if timesteps is not None:
            t = torch.as_tensor(timesteps, dtype=torch.long)[t]
        fused, weights = collab.fused(x, t, conds)
        if on_influence is not None:
            on_influence(int(t[0]), weights)
        return fused

    guide = None
    if known is not None:
        known_x0, keep = (v.to(dtype) for v in known)

        def guide(x: torch.Tensor, t_prev: int) -> torch.Tensor:
            noise = torch.randn(x.shape, generator=generator, dtype=dtype)
            noised = forward_diffuse(known_x0.expand_as(x), t_prev, noise,
                                     sched)
            return keep * noised + (1 - keep) * x

    with torch.no_grad():
        return sample_loop(predict, sched, shape, generator, dtype,
                           guide=guide, clip_x0=clip_x0)


def collaborative_sample(collab: Collaborators,
                         conds: ScaleConditions,
                         sched: NoiseSchedule,
                         seed: int,
                         damaged: Image,
                         damage: ContourMask,
                         known_guidance: bool = True,
                         dtype: torch.dtype = torch.float32,
                         timesteps: 'np.ndarray|None' = None,
                         on_influence: Optional[Callable] = None,
                         clip_x0: bool = False,
                         samples: int = 1) -> Image:
    """Restores the damaged pixels of one image.

    The chain runs at canonical size; other input sizes are resampled in and
    the result resampled back. Known pixels of the output are copied from
    `damaged` exactly and only damaged pixels come from the chain.

    Args:
        collab: The collaborators.
        conds: Conditions for a batch of 1.
        sched: The noise schedule.
        seed: Seed of the chain.
        damaged: The damaged image.
        damage: Mask of damaged pixels (1 = restore), same size as `damaged`.
        known_guidance: Replace known pixels during sampling.
        dtype: Tensor dtype.
        timesteps: Optional respaced-to-trained timestep map.
        on_influence: Optional observer of (t, normalized maps).
        clip_x0: Clamp clean estimates to [-1, 1] at every step.
        samples: Chains run together from the same seed; the restored
            pixels are their mean in [0, 1].

    Raises:
        `FusionError` for a mask of another size or `samples` < 1.

    """
    if (damage.height, damage.width) != (damaged.height, damaged.width):
        raise FusionError('Damage mask and image sizes differ')
    if samples < 1:
        raise FusionError(f'Need at least one sample, got {samples}')
    size = collab.canonical
    working = resample(damaged, size, size)
    known = None
    if known_guidance:
        keep = 1.0 - torch.tensor(damage.data, dtype=dtype)[None, None]
        keep = resample_tensor(keep, (size, size), 'nearest')
        x0_known = torch.tensor(working.data.transpose(2, 0, 1)[None] * 2 - 1,
                                dtype=dtype)
        known = (x0_known, keep)
    if samples > 1:
        conds = conds.repeat(samples)
    x0 = collaborative_chain(collab, conds, sched, torch_generator(seed),
                             batch_size=samples, channels=damaged.channels,
                             dtype=dtype, known=known,
                             timesteps=timesteps,
                             on_influence=on_influence, clip_x0=clip_x0)
    generated = ((x0.double() + 1) / 2).clamp(0, 1).mean(dim=0).numpy()
    generated = Image(generated.transpose(1, 2, 0))
    if (damaged.height, damaged.width) != (size, size):
        generated = resample(generated, damaged.height, damaged.width)
    hole = damage.as_bool()[:, :, np.newaxis]
    return Image(np.where(hole, generated.data, damaged.data))


def fusion_loss(collab: Collaborators,
                batch: PatchSet,
                sched: NoiseSchedule,
                generator: torch.Generator,
                uniform: bool = False) -> torch.Tensor:
    """Noise-prediction loss of the fused prediction on a canonical batch.

    With `uniform` every scale gets weight 1/N instead of its influence.

    """
    x0 = batch.x0
    t = torch.randint(1, sched.T + 1, (len(batch),), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    xt = forward_diffuse(x0, t, eps, sched)
    conds = ScaleConditions.from_canonical(batch.contour, collab.scales,
                                           batch.tag)
    if uniform:
        with torch.no_grad():
            predictions = collab.predictions(xt, t, conds)
        fused = sum(predictions) / len(predictions)
    else:
        fused, _ = collab.fused(xt, t, conds)
    return diffusion_loss(fused, eps)


def _frozen_fingerprints(collab: Collaborators) -> 'list[str]':
    return [ParameterStore(p).fingerprint() if isinstance(p, nn.Module)
            else '' for p in collab.predictors]


def train_diffusers(collab: Collaborators,
                    patches: PatchSet,
                    sched: NoiseSchedule,
                    steps: int,
                    lr: float = 1e-3,
                    batch_size: int = 8,
                    generator: 'torch.Generator|None' = None
                    ) -> 'list[float]':
    """Fits the dynamic diffusers with the predictors frozen.

    Only diffuser parameters are optimized, by the noise-prediction loss of
    the fused prediction.

    Args:
        collab: The collaborators.
        patches: Training samples at canonical size.
        sched: The noise schedule.
        steps: Adam updates to run.
        lr: Learning rate.
        batch_size: Samples per update.
        generator: Source of batches, timesteps and noise.

    Returns:
        The loss before each update.

    Raises:
        `FusionError` if the patches are not at canonical size or any
            predictor parameter changed.

    """
    if patches.size != collab.canonical:
        raise FusionError(f'Diffusers train at {collab.canonical}px, patches'
                          f' are {patches.size}px')
    generator = generator or torch_generator(0)
    before = _frozen_fingerprints(collab)
    flags = []
    for predictor in collab.predictors:
        if isinstance(predictor, nn.Module):
            flags.append([p.requires_grad for p in predictor.parameters()])
            predictor.eval()
            predictor.requires_grad_(False)
    params = collab.diffuser_parameters()
    dtype = params[0].dtype
    patches = patches.to(dtype)
    optimizer = torch.optim.Adam(params, lr=lr)
    trace = []
    try:
        for step in range(steps):
            batch = patches.sample(batch_size, generator)
            optimizer.zero_grad()
            loss = fusion_loss(collab, batch, sched, generator)
            if not torch.isfinite(loss):
                raise NonFiniteError('diffuser loss', detail=f'step {step}')
            loss.backward()
            for d in collab.diffusers:
                ParameterStore(d).check_finite(gradients=True)
            optimizer.step()
            trace.append(float(loss.detach()))
    finally:
        modules = [p for p in collab.predictors if isinstance(p, nn.Module)]
        for predictor, saved in zip(modules, flags):
            for param, flag in zip(predictor.parameters(), saved):
                param.requires_grad_(flag)
    if _frozen_fingerprints(collab) != before:
        raise FusionError('Frozen predictor parameters changed during'
                          ' diffuser training')
    if trace:
        _log.info('Trained %d diffusers for %d steps: loss %.4f -> %.4f',
                  len(collab), steps, trace[0], trace[-1])
    return trace
