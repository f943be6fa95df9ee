import math

import pytest
import torch
from torch import nn

from mural_restoration.dataset import PatchSet
from mural_restoration.diffusion import NonFiniteError, make_schedule
from mural_restoration.trainer import (DenoiserTrainer, build_denoiser,
                                       build_diffuser, denoiser_architecture,
                                       diffuser_architecture, init_module,
                                       train_denoiser)


def test_init_module_seeded(tiny_config):
    a = build_denoiser(tiny_config, 8, 3, seed=1)
    b = build_denoiser(tiny_config, 8, 3, seed=1)
    c = build_denoiser(tiny_config, 8, 3, seed=2)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(),
                                                b.parameters()))
    assert not torch.equal(a.conv_in.weight, c.conv_in.weight)
    state = torch.random.get_rng_state()
    init_module(lambda: nn.Linear(2, 2), 5)
    assert torch.equal(state, torch.random.get_rng_state())


def test_architectures(tiny_config):
    arch = denoiser_architecture(tiny_config, 8, 3)
    assert arch['size'] == 8 and arch['depth'] == 1
    assert diffuser_architecture(tiny_config, 3)['scales'] == [8, 16]
    assert build_diffuser(tiny_config, 3, 0).channels == 3


def test_zero_predictor_loss_is_noise_energy(tiny_config):
    model = build_denoiser(tiny_config, 8, 3, seed=0).double()
    nn.init.zeros_(model.conv_out.weight)
    nn.init.zeros_(model.conv_out.bias)
    generator = torch.Generator().manual_seed(0)
    x0 = torch.rand(256, 3, 8, 8, generator=generator,
                    dtype=torch.float64) * 2 - 1
    batch = PatchSet(x0, torch.zeros(256, 1, 8, 8), torch.full((256,), -1),
                     torch.full((256,), 0.5))
    trainer = DenoiserTrainer(model, make_schedule(10), lambda_reward=0.0,
                              generator=generator)
    loss = trainer.train_step(batch)
    assert loss == pytest.approx(1.0, abs=0.05)


def test_trace_deterministic(tiny_config, patches8):
    sched = make_schedule(tiny_config.T)
    traces = []
    for _ in range(2):
        model = build_denoiser(tiny_config, 8, 3, seed=4)
        traces.append(train_denoiser(model, patches8, sched, tiny_config,
                                     seed=9, steps=4))
    assert traces[0] == traces[1]
    assert len(traces[0]) == 4
    assert all(math.isfinite(v) for v in traces[0])


def test_reward_term_enters_loss(tiny_config, patches8):
    sched = make_schedule(tiny_config.T)
    model = build_denoiser(tiny_config, 8, 3, seed=4)
    trainer = DenoiserTrainer(model, sched, lambda_reward=1.0,
                              reward_t_fraction=1.0,
                              generator=torch.Generator().manual_seed(1))
    total, train, reward = trainer.loss(patches8)
    assert float(reward) > 0
    assert float(total) == pytest.approx(float(train) + float(reward))


def test_rollout_reward(tiny_config, patches8):
    sched = make_schedule(4)
    model = build_denoiser(tiny_config, 8, 3, seed=4)
    trainer = DenoiserTrainer(model, sched, lambda_reward=1.0,
                              reward_t_fraction=0.01, rollout_every=1,
                              generator=torch.Generator().manual_seed(1))
    _, _, reward = trainer.loss(patches8)
    assert float(reward) > 0


def test_train_step_errors(tiny_config, patches8, patches16):
    sched = make_schedule(tiny_config.T)
    model = build_denoiser(tiny_config, 8, 3, seed=4)
    trainer = DenoiserTrainer(model, sched)
    with pytest.raises(ValueError):
        trainer.train_step(patches16)
    with torch.no_grad():
        model.conv_out.bias.fill_(float('nan'))
    with pytest.raises(NonFiniteError, match='loss'):
        trainer.train_step(patches8)


@pytest.mark.slow
def test_overfit_single_sample(tiny_config, patches8):
    single = patches8.subset(torch.tensor([0]))
    config = tiny_config.replace(lr=3e-3, lambda_reward=0.0, batch_size=8)
    model = build_denoiser(config, 8, 3, seed=0)
    trace = train_denoiser(model, single, make_schedule(config.T), config,
                           seed=1, steps=200)
    first = sum(trace[:20]) / 20
    last = sum(trace[-20:]) / 20
    assert last < 0.5 * first
