import math

import numpy as np
import pytest
import torch
from torch import nn

from mural_restoration.contour import ContourMask
from mural_restoration.diffusion import ConditionSet, NonFiniteError
from mural_restoration.image import LatentImage
from mural_restoration.models import (AttentionConfigError, Denoiser,
                                      DenoiserConfig, DynamicDiffuser,
                                      MuralSpatialAttention, ParameterStore,
                                      TimestepEmbedding, predict_eps,
                                      scaled_dot_product_attention,
                                      sinusoidal_embedding)
from mural_restoration.models.gradcheck import check_gradients

TINY = DenoiserConfig(base_channels=4, depth=1, heads=1, time_embed_dim=4,
                      tag_vocab=2)


@pytest.fixture
def tiny_denoiser() -> Denoiser:
    torch.manual_seed(0)
    return Denoiser(TINY, size=8, channels=3).double()


def test_attention_hand_evaluation():
    q = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    k = torch.tensor([[1.0, 0.0], [0.0, 2.0]], dtype=torch.float64)
    v = torch.tensor([[1.0, 2.0], [3.0, 4.0]], dtype=torch.float64)
    out, weights = scaled_dot_product_attention(q, k, v)
    a, b = 1 / math.sqrt(2), 0.0
    first = math.exp(a) / (math.exp(a) + math.exp(b))
    assert float(weights[0, 0]) == pytest.approx(first)
    assert float(weights[0, 1]) == pytest.approx(1 - first)
    a, b = 0.0, 2 / math.sqrt(2)
    assert float(weights[1, 0]) == pytest.approx(
        math.exp(a) / (math.exp(a) + math.exp(b)))
    assert torch.allclose(out, weights @ v)


def test_attention_uniform_on_identical_positions():
    torch.manual_seed(1)
    block = MuralSpatialAttention(8, heads=2).double()
    x = torch.ones(1, 8, 6, 6, dtype=torch.float64) * torch.arange(
        8, dtype=torch.float64).view(1, 8, 1, 1)
    _, weights = block.attend(x)
    assert torch.allclose(weights, torch.full_like(weights, 1 / 9))
    delta = block(x) - x
    assert torch.allclose(delta, delta[:, :, :1, :1].expand_as(delta))


def test_attention_single_position():
    torch.manual_seed(2)
    block = MuralSpatialAttention(4, heads=1).double()
    x = torch.randn(2, 4, 2, 2, dtype=torch.float64)
    _, weights = block.attend(x)
    assert weights.shape == (2, 1, 1, 1)
    assert torch.all(weights == 1)


def test_attention_config_errors():
    with pytest.raises(AttentionConfigError):
        MuralSpatialAttention(6, heads=4)
    with pytest.raises(AttentionConfigError):
        MuralSpatialAttention(8, heads=0)
    block = MuralSpatialAttention(6, heads=4, head_dim=3)
    assert block.head_dim == 3
    with pytest.raises(AttentionConfigError):
        block(torch.zeros(1, 6, 3, 3))
    with pytest.raises(AttentionConfigError):
        DenoiserConfig(base_channels=3, depth=1, heads=4)


def test_sinusoidal_embedding():
    features = sinusoidal_embedding(torch.tensor([0, 5]), 6)
    assert features.shape == (2, 6)
    assert torch.all(features[0, :3] == 0)
    assert torch.all(features[0, 3:] == 1)
    with pytest.raises(ValueError):
        sinusoidal_embedding(torch.tensor([1]), 5)
    assert TimestepEmbedding(4, 8)(torch.tensor([1, 2])).shape == (2, 8)


def test_denoiser_shapes(tiny_denoiser):
    x = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    contour = torch.zeros(2, 1, 8, 8)
    out = tiny_denoiser(x, torch.tensor([1, 7]), contour,
                        torch.tensor([-1, 1]))
    assert out.shape == x.shape
    with pytest.raises(ValueError):
        tiny_denoiser(torch.zeros(1, 3, 4, 4, dtype=torch.float64),
                      torch.tensor([1]), torch.zeros(1, 1, 4, 4))
    with pytest.raises(ValueError):
        tiny_denoiser(x, torch.tensor([1, 1]), contour, torch.tensor([0, 2]))
    with pytest.raises(ValueError):
        Denoiser(TINY, size=6)


def test_denoiser_zero_head(tiny_denoiser):
    nn.init.zeros_(tiny_denoiser.conv_out.weight)
    nn.init.zeros_(tiny_denoiser.conv_out.bias)
    x = torch.randn(1, 3, 8, 8, dtype=torch.float64)
    out = tiny_denoiser(x, torch.tensor([3]), torch.ones(1, 1, 8, 8))
    assert torch.all(out == 0)


def test_denoiser_deterministic():
    outputs = []
    for _ in range(2):
        torch.manual_seed(5)
        model = Denoiser(TINY, size=8)
        generator = torch.Generator().manual_seed(6)
        x = torch.randn(1, 3, 8, 8, generator=generator)
        outputs.append(model(x, torch.tensor([4]), torch.zeros(1, 1, 8, 8)))
    assert torch.equal(outputs[0], outputs[1])


def test_predict_eps(tiny_denoiser):
    cond = ConditionSet(ContourMask.zeros(8, 8), tag=1)
    xt = LatentImage(np.zeros((8, 8, 3)))
    eps = predict_eps(xt, 2, cond, tiny_denoiser)
    assert isinstance(eps, LatentImage)
    assert eps.shape == (8, 8, 3)
    with pytest.raises(ValueError):
        predict_eps(LatentImage(np.zeros((4, 4, 3))), 2, cond, tiny_denoiser)


def test_denoiser_gradients(tiny_denoiser):
    generator = torch.Generator().manual_seed(3)
    x = torch.randn(2, 3, 8, 8, generator=generator, dtype=torch.float64)
    target = torch.randn(2, 3, 8, 8, generator=generator,
                         dtype=torch.float64)
    contour = (torch.rand(2, 1, 8, 8, generator=generator) > 0.5).double()
    t = torch.tensor([2, 9])

    def loss_fn():
        return ((tiny_denoiser(x, t, contour) - target) ** 2).mean()

    checks = check_gradients(loss_fn, tiny_denoiser, step=1e-5,
                             generator=torch.Generator().manual_seed(0))
    failed = [c for c in checks if not c.passed(1e-4)]
    assert not failed
    assert len(checks) == len(list(tiny_denoiser.parameters()))


def test_diffuser_gradients():
    torch.manual_seed(4)
    diffuser = DynamicDiffuser(channels=1, hidden=4, time_embed_dim=4)
    diffuser.double()
    x = torch.randn(1, 1, 4, 4, dtype=torch.float64)
    contour = torch.ones(1, 1, 4, 4, dtype=torch.float64)

    def loss_fn():
        return diffuser(x, torch.tensor([3]), contour).pow(2).sum()

    assert all(c.passed() for c in check_gradients(loss_fn, diffuser))


def test_diffuser_zero_head():
    diffuser = DynamicDiffuser(channels=3, hidden=4, time_embed_dim=4)
    nn.init.zeros_(diffuser.head.weight)
    nn.init.zeros_(diffuser.head.bias)
    logits = diffuser(torch.randn(2, 3, 4, 4), torch.tensor([1, 2]),
                      torch.zeros(2, 1, 4, 4))
    assert logits.shape == (2, 1, 4, 4)
    assert torch.all(logits == 0)
    with pytest.raises(ValueError):
        diffuser(torch.zeros(1, 3, 3, 3), torch.tensor([1]),
                 torch.zeros(1, 1, 3, 3))


def test_parameter_store(tiny_denoiser):
    store = ParameterStore(tiny_denoiser)
    assert store.count() == sum(p.numel() for p in tiny_denoiser.parameters())
    assert set(store.gradients()) == set(store.named())
    fingerprint = store.fingerprint()
    assert fingerprint == ParameterStore(tiny_denoiser).fingerprint()
    store.check_finite()
    with torch.no_grad():
        tiny_denoiser.conv_out.bias[0] = float('nan')
    assert store.fingerprint() != fingerprint
    with pytest.raises(NonFiniteError, match='conv_out.bias'):
        store.check_finite()
