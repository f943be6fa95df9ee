"""Noise schedules, forward noising, the reverse sampler and training losses.

Schedule tables are indexed by timestep `t` in `0..T`; index 0 is the
noise-free endpoint with `alpha_bar[0] == 1`. Operations accept either
`LatentImage` values or torch tensors shaped NxCxHxW; tensor timesteps may be
an int or a per-sample `LongTensor` of shape (N,).

Set `LOG_VERBOSE=sampler` to log each reverse step.

"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

import numpy as np
import torch
import torch.nn.functional as F

from mural_restoration.contour import ContourMask
from mural_restoration.image import LUMA_WEIGHTS, Image, LatentImage
from mural_restoration.logger import verbose_logging
from mural_restoration.serialize import stable_hash

__all__ = ['ScheduleError', 'NonFiniteError', 'NoiseSchedule',
           'ConditionSet', 'RewardModel', 'ContourReward', 'make_schedule',
           'default_betas', 'forward_diffuse', 'reverse_step', 'predict_x0',
           'diffusion_loss', 'reward_bce', 'reward_loss', 'total_loss',
           'sample_loop', 'respace', 'clipped_eps', 'PROBABILITY_CLAMP']

PROBABILITY_CLAMP = 1e-7

_log = logging.getLogger(__name__)


class ScheduleError(Exception):
    """Invalid noise schedule parameters or timesteps."""


class NonFiniteError(Exception):
    """A NaN or infinite value appeared in a named tensor.

    Attributes:
        name (str): The offending tensor.
        timestep (int|None): The sampler timestep, if any.

    """
    def __init__(self, name: str, timestep: 'int|None' = None,
                 detail: str = '') -> None:
        message = f'Non-finite values in {name}'
        if timestep is not None:
            message += f' at timestep {timestep}'
        if detail:
            message += f': {detail}'
        super().__init__(message)
        self.name = name
        self.timestep = timestep


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-timestep variance tables of a DDPM.

    Attributes:
        betas: Length T+1 with `betas[0] == 0`.
        sigma_mode: `beta` (sigma^2 = beta) or `posterior`
            (sigma^2 = beta (1 - alpha_bar[t-1]) / (1 - alpha_bar[t])).

    """
    betas: np.ndarray = field(repr=False)
    sigma_mode: str = 'beta'
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)
    sigmas: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        betas = np.array(self.betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) < 2 or betas[0] != 0:
            raise ScheduleError('betas must be 1-D, length T+1 with'
                                ' betas[0] == 0')
        if not np.all((betas[1:] > 0) & (betas[1:] < 1)):
            raise ScheduleError('Every beta must lie in (0,1)')
        if self.sigma_mode not in ('beta', 'posterior'):
            raise ScheduleError(f'Unknown sigma_mode {self.sigma_mode}')
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        if self.sigma_mode == 'beta':
            variances = betas.copy()
        else:
            variances = np.zeros_like(betas)
            variances[1:] = (betas[1:] * (1 - alpha_bars[:-1]) /
                             (1 - alpha_bars[1:]))
        for name, value in (('betas', betas), ('alphas', alphas),
                            ('alpha_bars', alpha_bars),
                            ('sigmas', np.sqrt(variances))):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @classmethod
    def from_betas(cls, betas, sigma_mode: str = 'beta') -> 'NoiseSchedule':
        """Builds a schedule from the T betas of timesteps 1..T."""
        return cls(np.concatenate([[0.0], np.asarray(betas, dtype=float)]),
                   sigma_mode=sigma_mode)

    @property
    def T(self) -> int:
        return len(self.betas) - 1

    def check_timestep(self, t: int, allow_zero: bool = False) -> None:
        low = 0 if allow_zero else 1
        if not low <= int(t) <= self.T:
            raise ScheduleError(f'Timestep {t} outside [{low}, {self.T}]')

    def fingerprint(self) -> str:
        """Stable hash of the tables, recorded in checkpoints."""
        return stable_hash({'betas': [float(b) for b in self.betas],
                            'sigma_mode': self.sigma_mode})


def default_betas(T: int) -> 'tuple[float, float]':
    """Linear range scaled to T; (1e-4, 0.02) at T=1000, capped below 1."""
    scale = 1000.0 / T
    return min(1e-4 * scale, 0.999), min(0.02 * scale, 0.999)


def make_schedule(T: int,
                  beta_start: 'float|None' = None,
                  beta_end: 'float|None' = None,
                  sigma_mode: str = 'beta') -> NoiseSchedule:
    """Linearly interpolates betas from `beta_start` to `beta_end`.

    Args:
        T: Number of timesteps (>= 1).
        beta_start: First beta; scaled default when None.
        beta_end: Last beta; scaled default when None.
        sigma_mode: `beta` or `posterior`.

    Raises:
        `ScheduleError` unless 0 < beta_start <= beta_end < 1 and T >= 1.

    """
    if T < 1:
        raise ScheduleError(f'T must be >= 1, got {T}')
    default_start, default_end = default_betas(T)
    beta_start = default_start if beta_start is None else beta_start
    beta_end = default_end if beta_end is None else beta_end
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(f'Require 0 < beta_start <= beta_end < 1, got'
                            f' {beta_start}, {beta_end}')
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, T),
                                    sigma_mode=sigma_mode)


def respace(sched: NoiseSchedule, steps: int
            ) -> 'tuple[NoiseSchedule, np.ndarray]':
    """A shorter chain visiting `steps` of the trained timesteps.

    The kept timesteps `tau_1 < ... < tau_steps = T` are evenly spaced and
    the new betas `1 - alpha_bar[tau_i] / alpha_bar[tau_{i-1}]` keep every
    kept `alpha_bar` unchanged, so trained predictors stay valid when called
    with `tau_i`.

    Returns:
        The respaced schedule and the map from its timesteps `0..steps` to
            trained timesteps (index 0 maps to 0).

    Raises:
        `ScheduleError` unless 1 <= steps <= T.

    """
    if not 1 <= steps <= sched.T:
        raise ScheduleError(f'steps must be in [1, {sched.T}], got {steps}')
    if steps == sched.T:
        return sched, np.arange(sched.T + 1)
    kept = np.unique(np.round(np.linspace(sched.T, 1, steps)).astype(int))
    timesteps = np.concatenate([[0], kept])
    kept_bars = sched.alpha_bars[timesteps]
    betas = 1.0 - kept_bars[1:] / kept_bars[:-1]
    return (NoiseSchedule.from_betas(betas, sigma_mode=sched.sigma_mode),
            timesteps)


def _coefficient(table: np.ndarray, t, like):
    if isinstance(like, torch.Tensor):
        values = torch.tensor(table, dtype=like.dtype, device=like.device)
        if isinstance(t, torch.Tensor) and t.ndim > 0:
            return values[t.long()].view(-1, *([1] * (like.ndim - 1)))
        return values[int(t)]
    return float(table[int(t)])


def _values(x):
    return x.data if isinstance(x, LatentImage) else x


def _check_shapes(*named) -> None:
    shapes = {name: tuple(_values(value).shape) for name, value in named}
    if len(set(shapes.values())) > 1:
        raise ValueError(f'Shape mismatch: {shapes}')


def _check_timesteps(t, sched: NoiseSchedule, allow_zero: bool) -> None:
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        low = 0 if allow_zero else 1
        if t.numel() and (int(t.min()) < low or int(t.max()) > sched.T):
            raise ScheduleError(f'Timesteps outside [{low}, {sched.T}]')
    else:
        sched.check_timestep(t, allow_zero)


def _wrap(result, template):
    return LatentImage(result) if isinstance(template, LatentImage) else result


def forward_diffuse(x0, t, eps, sched: NoiseSchedule):
    """Returns sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.

    `t = 0` returns `x0` unchanged.

    Raises:
        `ValueError` for a shape mismatch.
        `ScheduleError` for a timestep outside [0, T].

    """
    _check_shapes(('x0', x0), ('eps', eps))
    _check_timesteps(t, sched, allow_zero=True)
    x0_values, eps_values = _values(x0), _values(eps)
    alpha_bar = _coefficient(sched.alpha_bars, t, x0_values)
    if isinstance(x0_values, torch.Tensor):
        result = (torch.sqrt(alpha_bar) * x0_values +
                  torch.sqrt(1 - alpha_bar) * eps_values)
    else:
        result = (math.sqrt(alpha_bar) * x0_values +
                  math.sqrt(1 - alpha_bar) * eps_values)
    return _wrap(result, x0)


def reverse_step(xt, t: int, eps_pred, sched: NoiseSchedule, noise):
    """One ancestral sampling step from timestep t to t-1.

    Returns `(xt - beta_t / sqrt(1 - alpha_bar_t) * eps_pred) / sqrt(alpha_t)
    + sigma_t * noise`.

    Raises:
        `ValueError` for a shape mismatch or nonzero noise at t=1.
        `ScheduleError` for a timestep outside [1, T].

    """
    _check_shapes(('xt', xt), ('eps_pred', eps_pred), ('noise', noise))
    sched.check_timestep(t)
    xt_values, eps_values, noise_values = (_values(xt), _values(eps_pred),
                                           _values(noise))
    if int(t) == 1 and bool((noise_values != 0).any()):
        raise ValueError('The final step (t=1) must not add noise')
    alpha = float(sched.alphas[t])
    beta = float(sched.betas[t])
    alpha_bar = float(sched.alpha_bars[t])
    sigma = float(sched.sigmas[t])
    mean = (xt_values - beta / math.sqrt(1 - alpha_bar) * eps_values)
    result = mean / math.sqrt(alpha) + sigma * noise_values
    return _wrap(result, xt)


def predict_x0(xt, t, eps_pred, sched: NoiseSchedule):
    """Single-step clean estimate.

    Returns `(xt - sqrt(1 - alpha_bar) eps) / sqrt(alpha_bar)`.

    """
    _check_shapes(('xt', xt), ('eps_pred', eps_pred))
    _check_timesteps(t, sched, allow_zero=True)
    xt_values, eps_values = _values(xt), _values(eps_pred)
    alpha_bar = _coefficient(sched.alpha_bars, t, xt_values)
    if isinstance(xt_values, torch.Tensor):
        result = ((xt_values - torch.sqrt(1 - alpha_bar) * eps_values) /
                  torch.sqrt(alpha_bar))
    else:
        result = ((xt_values - math.sqrt(1 - alpha_bar) * eps_values) /
                  math.sqrt(alpha_bar))
    return _wrap(result, xt)


def clipped_eps(xt: torch.Tensor, t: int, eps_pred: torch.Tensor,
                sched: NoiseSchedule) -> torch.Tensor:
    """The noise consistent with the clean estimate clamped to [-1, 1].

    Stepping with it equals the posterior mean around the clamped estimate;
    where the estimate is already in range it returns `eps_pred` unchanged.

    """
    alpha_bar = float(sched.alpha_bars[t])
    x0 = predict_x0(xt, t, eps_pred, sched).clamp(-1, 1)
    return (xt - math.sqrt(alpha_bar) * x0) / math.sqrt(1 - alpha_bar)


def diffusion_loss(eps_pred, eps_true):
    """Mean squared error over all elements.

    Returns a float for `LatentImage` inputs and a scalar tensor otherwise.

    """
    _check_shapes(('eps_pred', eps_pred), ('eps_true', eps_true))
    if isinstance(eps_pred, torch.Tensor):
        return F.mse_loss(eps_pred, eps_true)
    return float(np.mean((_values(eps_pred) - _values(eps_true)) ** 2))


@dataclass(frozen=True)
class ConditionSet:
    """Guidance for one sample.

    Attributes:
        contour: The contour mask at the working resolution.
        tag: Optional style label in `[0, tag_vocab)`.
        lambda_reward: Weight of the reward consistency loss (>= 0).
        reward_threshold: Luminance separating contour from ground in the
            proxy reward model.

    """
    contour: ContourMask
    tag: 'int|None' = None
    lambda_reward: float = 1.0
    reward_threshold: float = 0.5

    def __post_init__(self):
        if self.lambda_reward < 0 or not math.isfinite(self.lambda_reward):
            raise ValueError('lambda_reward must be finite and >= 0')
        if self.tag is not None and self.tag < 0:
            raise ValueError('tag must be >= 0')

    def contour_tensor(self, dtype: torch.dtype = torch.float32
                       ) -> torch.Tensor:
        """The contour as a 1x1xHxW tensor."""
        return torch.tensor(self.contour.data, dtype=dtype)[None, None]


class RewardModel(Protocol):
    """Maps generated images in [0,1] to per-pixel contour probabilities."""
    def __call__(self, x0: torch.Tensor, threshold: torch.Tensor
                 ) -> torch.Tensor:
        ...


class ContourReward:
    """Differentiable re-extraction of the contour from a generated image.

    Pixels darker than the threshold luminance map toward 1 with
    `sigmoid((threshold - luminance) / temperature)`.

    """
    def __init__(self, temperature: float = 0.05) -> None:
        if temperature <= 0:
            raise ValueError('temperature must be > 0')
        self.temperature = temperature

    def __call__(self, x0: torch.Tensor, threshold) -> torch.Tensor:
        if x0.shape[1] == 3:
            weights = torch.tensor(LUMA_WEIGHTS, dtype=x0.dtype,
                                   device=x0.device).view(1, 3, 1, 1)
            lum = (x0 * weights).sum(dim=1, keepdim=True)
        else:
            lum = x0[:, :1]
        threshold = torch.as_tensor(threshold, dtype=x0.dtype,
                                    device=x0.device)
        if threshold.ndim > 0:
            threshold = threshold.view(-1, 1, 1, 1)
        return torch.sigmoid((threshold - lum) / self.temperature)


def reward_bce(probabilities: torch.Tensor,
               targets: torch.Tensor) -> torch.Tensor:
    """Per-pixel binary cross-entropy averaged over pixels.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the log.

    """
    if probabilities.shape != targets.shape:
        raise ValueError(f'Shape mismatch: {tuple(probabilities.shape)} vs'
                         f' {tuple(targets.shape)}')
    p = probabilities.clamp(PROBABILITY_CLAMP, 1 - PROBABILITY_CLAMP)
    targets = targets.to(p.dtype)
    return -(targets * torch.log(p) + (1 - targets) * torch.log(1 - p)).mean()


def reward_loss(cond: ConditionSet,
                x0_generated: Image,
                model: RewardModel) -> float:
    """Cross-entropy between the contour and the reward model's reading.

    Raises:
        `ValueError` if the model output does not match the contour shape.

    """
    x0 = torch.tensor(np.transpose(x0_generated.data, (2, 0, 1))[None],
                      dtype=torch.float64)
    probabilities = model(x0, torch.tensor([cond.reward_threshold],
                                           dtype=torch.float64))
    targets = cond.contour_tensor(torch.float64)
    if probabilities.shape != targets.shape:
        raise ValueError(f'Reward model output {tuple(probabilities.shape)}'
                         f' does not match contour {tuple(targets.shape)}')
    return float(reward_bce(probabilities, targets))


def total_loss(train, reward, lambda_reward: float):
    """Returns `train + lambda_reward * reward`.

    Raises:
        `ValueError` for a negative or non-finite weight.

    """
    if lambda_reward < 0 or not math.isfinite(lambda_reward):
        raise ValueError('lambda_reward must be finite and >= 0')
    return train + lambda_reward * reward


def sample_loop(predict: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
                sched: NoiseSchedule,
                shape: 'tuple[int, ...]',
                generator: torch.Generator,
                dtype: torch.dtype = torch.float32,
                guide: Optional[Callable[[torch.Tensor, int],
                                         torch.Tensor]] = None,
                on_step: Optional[Callable[[int, torch.Tensor], None]] = None,
                clip_x0: bool = False,
                ) -> torch.Tensor:
    """Runs the ancestral chain t = T..1 from x_T ~ N(0, I).

    Draws x_T first and then one noise tensor per step with t > 1, all from
    `generator`, so runs with the same generator state are identical.

    Args:
        predict: Maps (x_t, t as a LongTensor of shape (N,)) to eps.
        sched: The noise schedule.
        shape: NxCxHxW of the chain state.
        generator: The source of all randomness.
        dtype: Tensor dtype.
        guide: Optional map (x_{t-1}, t-1) -> x_{t-1} applied after each step.
        on_step: Optional observer called with (t, x_{t-1}).
        clip_x0: Clamp each step's clean estimate to [-1, 1] and take the
            step with the noise implied by the clamped estimate.

    Returns:
        The unclamped x_0.

    Raises:
        `NonFiniteError` naming the timestep of the first non-finite state.

    """
    verbose = verbose_logging('sampler')
    x = torch.randn(shape, generator=generator, dtype=dtype)
    for t in range(sched.T, 0, -1):
        timesteps = torch.full((shape[0],), t, dtype=torch.long)
        eps = predict(x, timesteps)
        if not torch.isfinite(eps).all():
            raise NonFiniteError('eps', timestep=t)
        if clip_x0:
            eps = clipped_eps(x, t, eps, sched)
        if t > 1:
            noise = torch.randn(shape, generator=generator, dtype=dtype)
        else:
            noise = torch.zeros(shape, dtype=dtype)
        x = reverse_step(x, t, eps, sched, noise)
        if guide is not None:
            x = guide(x, t - 1)
        if not torch.isfinite(x).all():
            raise NonFiniteError('x_t', timestep=t)
        if on_step is not None:
            on_step(t, x)
        if verbose:
            _log.debug('Step t=%d mean=%.5f std=%.5f', t, float(x.mean()),
                       float(x.std()) if x.numel() > 1 else 0.0)
    return x
