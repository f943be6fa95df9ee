"""Training of per-scale denoisers with the reward consistency loss.

Each step draws timesteps uniformly from 1..T and standard normal noise, and
minimizes the noise-prediction error plus `lambda_reward` times the
cross-entropy between the contour and the reward model's reading of the
single-step clean estimate. The reward term only uses samples with
`t <= reward_t_fraction * T`, where that estimate is meaningful.

Set `LOG_VERBOSE=trainer` to log every step.

"""
import logging
from typing import Callable, Optional

import torch
from torch import nn

from mural_restoration.dataset import PatchSet
from mural_restoration.diffusion import (ContourReward, NoiseSchedule,
                                         NonFiniteError, RewardModel,
                                         diffusion_loss, forward_diffuse,
                                         predict_x0, reward_bce, sample_loop,
                                         total_loss)
from mural_restoration.logger import verbose_logging
from mural_restoration.models import (Denoiser, DenoiserConfig,
                                      DynamicDiffuser, ParameterStore)
from mural_restoration.seeds import torch_generator

__all__ = ['DenoiserTrainer', 'train_denoiser', 'init_module',
           'build_denoiser', 'build_diffuser', 'torch_dtype',
           'denoiser_architecture', 'diffuser_architecture']

_log = logging.getLogger(__name__)


def torch_dtype(name: str) -> torch.dtype:
    return {'float32': torch.float32, 'float64': torch.float64}[name]


def init_module(factory: Callable[[], nn.Module], seed: int,
                dtype: torch.dtype = torch.float32) -> nn.Module:
    """Builds a module with its own seeded initialization.

    The global torch RNG state is restored afterwards.

    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = factory()
    return module.to(dtype)


def build_denoiser(config, size: int, channels: int, seed: int) -> Denoiser:
    """A freshly initialized denoiser for one scale of a run config."""
    arch = DenoiserConfig.from_config(config)
    return init_module(lambda: Denoiser(arch, size, channels), seed,
                       torch_dtype(config.dtype))


def build_diffuser(config, channels: int, seed: int) -> DynamicDiffuser:
    return init_module(lambda: DynamicDiffuser(channels,
                                               config.diffuser_channels,
                                               config.time_embed_dim),
                       seed, torch_dtype(config.dtype))


def denoiser_architecture(config, size: int, channels: int) -> dict:
    """Checkpoint identity of a denoiser."""
    return {**DenoiserConfig.from_config(config).to_dict(), 'size': size,
            'channels': channels}


def diffuser_architecture(config, channels: int) -> dict:
    """Checkpoint identity of a dynamic diffuser."""
    return {'channels': channels, 'hidden': config.diffuser_channels,
            'time_embed_dim': config.time_embed_dim,
            'scales': list(config.scales)}


class DenoiserTrainer:
    """Adam updates of one denoiser.

    Attributes:
        model: The denoiser being trained.
        sched: The noise schedule.
        lambda_reward: Weight of the reward loss.
        reward_model: Maps clean estimates to contour probabilities.
        reward_t_fraction: Largest t/T that contributes to the reward.
        rollout_every: Every this many steps, also score a full sampler
            rollout of the first sample (0 disables).
        generator: Source of timesteps, noise and batches.
        steps (int): Completed updates.

    """
    def __init__(self,
                 model: Denoiser,
                 sched: NoiseSchedule,
                 lr: float = 1e-4,
                 lambda_reward: float = 1.0,
                 reward_model: Optional[RewardModel] = None,
                 reward_t_fraction: float = 0.2,
                 rollout_every: int = 0,
                 generator: Optional[torch.Generator] = None,
                 betas: 'tuple[float, float]' = (0.9, 0.999),
                 ) -> None:
        self.model = model
        self.sched = sched
        self.lambda_reward = lambda_reward
        self.reward_model = reward_model or ContourReward()
        self.reward_t_fraction = reward_t_fraction
        self.rollout_every = rollout_every
        self.generator = generator or torch_generator(0)
        self.optimizer = torch.optim.Adam(model.parameters(), lr=lr,
                                          betas=betas)
        self.store = ParameterStore(model)
        self.steps = 0
        self._verbose = verbose_logging('trainer')

    @property
    def dtype(self) -> torch.dtype:
        return next(self.model.parameters()).dtype

    def _reward(self, batch: PatchSet, xt: torch.Tensor, t: torch.Tensor,
                eps_pred: torch.Tensor) -> torch.Tensor:
        window = t <= self.reward_t_fraction * self.sched.T
        reward = torch.zeros((), dtype=self.dtype)
        if bool(window.any()):
            x0_hat = predict_x0(xt[window], t[window], eps_pred[window],
                                self.sched)
            image = ((x0_hat + 1) / 2).clamp(0, 1)
            probabilities = self.reward_model(image, batch.threshold[window])
            reward = reward_bce(probabilities, batch.contour[window])
        if self.rollout_every and self.steps % self.rollout_every == 0:
            reward = reward + self._rollout_reward(batch)
        return reward

    def _rollout_reward(self, batch: PatchSet) -> torch.Tensor:
        contour, tag = batch.contour[:1], batch.tag[:1]
        x0 = sample_loop(lambda x, t: self.model(x, t, contour, tag),
                         self.sched, tuple(batch.x0[:1].shape),
                         self.generator, self.dtype)
        image = ((x0 + 1) / 2).clamp(0, 1)
        return reward_bce(self.reward_model(image, batch.threshold[:1]),
                          contour)

    def loss(self, batch: PatchSet
             ) -> 'tuple[torch.Tensor, torch.Tensor, torch.Tensor]':
        """Draws t and noise and returns (total, train, reward) losses."""
        x0 = batch.x0.to(self.dtype)
        n = x0.shape[0]
        t = torch.randint(1, self.sched.T + 1, (n,), generator=self.generator)
        eps = torch.randn(x0.shape, generator=self.generator, dtype=x0.dtype)
        xt = forward_diffuse(x0, t, eps, self.sched)
        eps_pred = self.model(xt, t, batch.contour.to(x0.dtype), batch.tag)
        train = diffusion_loss(eps_pred, eps)
        if self.lambda_reward > 0:
            reward = self._reward(batch, xt, t, eps_pred)
        else:
            reward = torch.zeros((), dtype=x0.dtype)
        return total_loss(train, reward, self.lambda_reward), train, reward

    def train_step(self, batch: PatchSet) -> float:
        """One optimizer update; returns the loss before the update.

        Raises:
            `ValueError` for an empty batch or a batch at the wrong scale.
            `NonFiniteError` naming the loss, gradient or parameter that
                became NaN or infinite.

        """
        if len(batch) == 0:
            raise ValueError('Empty batch')
        if batch.size != self.model.size:
            raise ValueError(f'Batch scale {batch.size} does not match model'
                             f' scale {self.model.size}')
        self.model.train()
        self.optimizer.zero_grad()
        total, train, reward = self.loss(batch)
        if not torch.isfinite(total):
            raise NonFiniteError('loss', detail=f'train={float(train)}'
                                 f' reward={float(reward)}')
        total.backward()
        self.store.check_finite(gradients=True)
        self.optimizer.step()
        self.store.check_finite()
        self.steps += 1
        value = float(total.detach())
        if self._verbose:
            _log.debug('Step %d: loss=%.6f train=%.6f reward=%.6f',
                       self.steps, value, float(train), float(reward))
        return value


def train_denoiser(model: Denoiser,
                   patches: PatchSet,
                   sched: NoiseSchedule,
                   config,
                   seed: int,
                   steps: 'int|None' = None) -> 'list[float]':
    """Trains a denoiser on random batches and returns the loss trace.

    Args:
        model: The denoiser, already at its scale.
        patches: Training samples at the model's scale.
        sched: The noise schedule.
        config: The run `Config`.
        seed: Seed of batches, timesteps and noise.
        steps: Updates to run; `config.train_steps` when None.

    """
    trainer = DenoiserTrainer(
        model, sched,
        lr=config.lr,
        lambda_reward=config.lambda_reward,
        reward_model=ContourReward(config.reward_temperature),
        reward_t_fraction=config.reward_t_fraction,
        rollout_every=config.reward_rollout_every,
        generator=torch_generator(seed))
    patches = patches.to(trainer.dtype)
    steps = config.train_steps if steps is None else steps
    trace = []
    for _ in range(steps):
        trace.append(trainer.train_step(
            patches.sample(config.batch_size, trainer.generator)))
    if trace:
        _log.info('Trained %dpx denoiser for %d steps: loss %.4f -> %.4f',
                  model.size, steps, trace[0], trace[-1])
    return trace
