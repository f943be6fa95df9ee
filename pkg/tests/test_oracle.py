import json
import math
import warnings

import numpy as np
import pytest
import torch

from mural_restoration.diffusion import (ScheduleError, make_schedule,
                                         sample_loop)
from mural_restoration.image import LatentImage
from mural_restoration.oracle import (GaussianSpec, MixtureSpec,
                                      OraclePredictor, gaussian_chain_moments,
                                      load_oracle_spec, mixture_cdf,
                                      oracle_check, oracle_eps_gaussian,
                                      oracle_eps_mixture, responsibilities,
                                      sample_target)
from mural_restoration.seeds import torch_generator


@pytest.fixture
def sched():
    return make_schedule(20)


def test_spec_validation():
    with pytest.raises(ValueError):
        GaussianSpec(0.0, 0.0)
    with pytest.raises(ValueError):
        MixtureSpec(())
    with pytest.raises(ValueError):
        MixtureSpec(((0.5, GaussianSpec()), (0.4, GaussianSpec())))
    with pytest.raises(ValueError):
        MixtureSpec(((1.5, GaussianSpec()), (-0.5, GaussianSpec())))


def test_standard_normal_closed_form(sched):
    x = torch.linspace(-2, 2, 9, dtype=torch.float64).view(1, 1, 3, 3)
    t = 7
    eps = oracle_eps_gaussian(x, torch.tensor([t]), sched, GaussianSpec())
    expected = math.sqrt(1 - sched.alpha_bars[t]) * x
    assert torch.allclose(eps, expected, atol=1e-14)


def test_gaussian_formula(sched):
    spec = GaussianSpec(0.4, 0.09)
    x = torch.tensor([[[[0.3]]], [[[-1.1]]]], dtype=torch.float64)
    t = torch.tensor([3, 15])
    eps = oracle_eps_gaussian(x, t, sched, spec)
    for i, step in enumerate((3, 15)):
        ab = sched.alpha_bars[step]
        value = float(x[i]) - math.sqrt(ab) * 0.4
        expected = math.sqrt(1 - ab) * value / (ab * 0.09 + 1 - ab)
        assert float(eps[i]) == pytest.approx(expected, rel=1e-12)


def test_latent_and_tensor_agree(sched):
    rng = np.random.default_rng(3)
    mean = rng.uniform(-0.5, 0.5, (2, 3, 3))
    spec = GaussianSpec(mean, 0.2)
    data = rng.standard_normal((2, 3, 3))
    latent = oracle_eps_gaussian(LatentImage(data), 5, sched, spec)
    tensor = oracle_eps_gaussian(
        torch.tensor(data.transpose(2, 0, 1)[None]), torch.tensor([5]),
        sched, spec)
    assert isinstance(latent, LatentImage)
    assert np.allclose(latent.data, tensor[0].numpy().transpose(1, 2, 0))


def test_timestep_checked(sched):
    with pytest.raises(ScheduleError):
        oracle_eps_gaussian(torch.zeros(1, 1, 1, 1), torch.tensor([21]),
                            sched, GaussianSpec())


def test_single_component_mixture_is_gaussian(sched):
    spec = GaussianSpec(0.2, 0.3)
    x = torch.randn(4, 1, 2, 2, dtype=torch.float64,
                    generator=torch_generator(0))
    t = torch.tensor([1, 5, 10, 20])
    mixture = oracle_eps_mixture(x, t, sched, MixtureSpec(((1.0, spec),)))
    assert torch.allclose(mixture, oracle_eps_gaussian(x, t, sched, spec))


def test_responsibilities(sched):
    spec = MixtureSpec(((0.5, GaussianSpec(-0.6, 0.1)),
                        (0.5, GaussianSpec(0.6, 0.1))))
    x = torch.tensor([[[[0.0]]], [[[1e4]]], [[[-1e4]]]], dtype=torch.float64)
    weights = responsibilities(x, torch.tensor([10, 10, 10]), sched, spec)
    assert torch.all(torch.isfinite(weights))
    assert torch.allclose(weights.sum(dim=1), torch.ones(3,
                                                         dtype=torch.float64))
    assert weights[0].tolist() == pytest.approx([0.5, 0.5])
    assert float(weights[1, 1]) == pytest.approx(1.0)
    assert float(weights[2, 0]) == pytest.approx(1.0)
    eps = oracle_eps_mixture(x, torch.tensor([10, 10, 10]), sched, spec)
    assert torch.all(torch.isfinite(eps))
    latent = responsibilities(LatentImage(np.zeros((1, 1, 1))), 10, sched,
                              spec)
    assert latent.sum() == pytest.approx(1.0)


def test_predictor_corruption_is_seeded(sched):
    x = torch.zeros(2, 1, 3, 3, dtype=torch.float64)
    t = torch.tensor([4, 4])
    exact = OraclePredictor(GaussianSpec(), sched)
    assert torch.equal(exact(x, t), torch.zeros_like(x))
    a = OraclePredictor(GaussianSpec(), sched, 0.5, torch_generator(1))
    b = OraclePredictor(GaussianSpec(), sched, 0.5, torch_generator(1))
    assert torch.equal(a(x, t), b(x, t))
    assert not torch.equal(a(x, t), torch.zeros_like(x))


def test_chain_moments_match_sampling():
    sched = make_schedule(15)
    spec = GaussianSpec(0.25, 0.36)
    predictor = OraclePredictor(spec, sched)
    n = 20000
    x0 = sample_loop(lambda x, t: predictor(x, t), sched, (n, 1, 1, 1),
                     torch_generator(2), torch.float64).numpy().ravel()
    mean, variance = gaussian_chain_moments(sched, spec)
    assert abs(x0.mean() - float(mean)) < 4 * math.sqrt(variance / n)
    assert abs(x0.var(ddof=1) - variance) < 4 * variance * math.sqrt(2 / n)


def test_chain_moments_approach_target():
    spec = GaussianSpec(0.3, 0.25)
    mean, variance = gaussian_chain_moments(make_schedule(1000), spec)
    assert float(mean) == pytest.approx(0.3, abs=0.01)
    assert variance == pytest.approx(0.25, abs=0.02)


def test_sample_target_and_cdf():
    spec = MixtureSpec(((0.25, GaussianSpec(-1.0, 0.01)),
                        (0.75, GaussianSpec(1.0, 0.01))))
    drawn = sample_target(spec, (4000, 1, 1, 1), np.random.default_rng(0))
    assert drawn.shape == (4000, 1, 1, 1)
    assert (drawn < 0).mean() == pytest.approx(0.25, abs=0.03)
    cdf = mixture_cdf(spec)
    assert cdf(0.0) == pytest.approx(0.25)
    assert cdf(-5.0) == pytest.approx(0.0)
    assert cdf(5.0) == pytest.approx(1.0)


def test_oracle_check_gaussian_report():
    report = oracle_check(GaussianSpec(0.1, 0.5), make_schedule(50), 4000,
                          seed=5)
    assert report['samples'] == 4000
    assert report['T'] == 50
    assert report['shape'] == [1, 1, 1]
    assert report['target_variance'] == pytest.approx(0.5, rel=0.02)
    assert report['chain_variance'] > 0
    assert 0 <= report['ks_statistic'] <= 1


def test_oracle_check_image_shape():
    report = oracle_check(GaussianSpec(0.0, 1.0), make_schedule(10), 200,
                          seed=1, shape=(2, 2, 3))
    assert report['shape'] == [2, 2, 3]
    assert 'ks_statistic' not in report
    assert 'chain_mean' in report


def test_oracle_check_small_image_moments():
    report = oracle_check(GaussianSpec(0.0, 1.0), make_schedule(100), 2000,
                          seed=1, shape=(4, 4, 1))
    assert report['shape'] == [4, 4, 1]
    assert report['max_mean_z'] < 3
    assert report['max_variance_z'] < 3


def test_oracle_reads_frozen_tables(sched):
    oracle = OraclePredictor(GaussianSpec(np.full((2, 2, 1), 0.3)), sched)
    x = torch.zeros(2, 1, 2, 2, dtype=torch.float64)
    with warnings.catch_warnings():
        warnings.simplefilter('error')
        eps = oracle(x, torch.tensor([3, 9]))
    assert torch.isfinite(eps).all()


@pytest.mark.slow
def test_bimodal_mixture_distribution():
    spec = MixtureSpec(((0.5, GaussianSpec(-0.6, 0.1)),
                        (0.5, GaussianSpec(0.6, 0.1))))
    report = oracle_check(spec, make_schedule(500), 10_000, seed=0)
    assert report['ks_statistic'] < 0.03
    assert report['max_mean_z'] < 4.5
    assert report['max_variance_z'] < 4.5


def test_load_oracle_spec(tmp_path):
    path = tmp_path / 'gauss.json'
    path.write_text(json.dumps({'components': [{'mean': 0.2,
                                                'variance': 0.3}]}))
    spec, shape = load_oracle_spec(path)
    assert isinstance(spec, GaussianSpec)
    assert float(spec.mean) == 0.2
    assert shape == (1, 1, 1)
    path.write_text(json.dumps({'shape': [2, 2, 1], 'components': [
        {'weight': 0.5, 'mean': -0.6, 'variance': 0.1},
        {'weight': 0.5, 'mean': 0.6, 'variance': 0.1}]}))
    spec, shape = load_oracle_spec(path)
    assert isinstance(spec, MixtureSpec)
    assert shape == (2, 2, 1)


@pytest.mark.parametrize('text', ['{', '{"shape": [1, 1, 1]}',
                                  '{"shape": [1, 1], "components": [{}]}'])
def test_load_oracle_spec_malformed(tmp_path, text):
    path = tmp_path / 'bad.json'
    path.write_text(text)
    with pytest.raises(ValueError):
        load_oracle_spec(path)
