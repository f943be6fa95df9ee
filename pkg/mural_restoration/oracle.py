"""Closed-form optimal noise predictors for Gaussian toy data.

For x0 ~ N(m, s^2 I) the noise of x_t = sqrt(ab) x0 + sqrt(1 - ab) eps has
conditional mean

    E[eps | x_t] = sqrt(1 - ab) (x_t - sqrt(ab) m) / (ab s^2 + 1 - ab)

Mixtures draw one component per image; the prediction is the
responsibility-weighted sum of component predictions. These predictors need
no training and drive exact checks of the sampler and the fusion machinery.

"""
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import stats

from mural_restoration.diffusion import NoiseSchedule, sample_loop
from mural_restoration.image import LatentImage
from mural_restoration.seeds import numpy_rng, torch_generator

__all__ = ['GaussianSpec', 'MixtureSpec', 'oracle_eps_gaussian',
           'oracle_eps_mixture', 'responsibilities', 'OraclePredictor',
           'gaussian_chain_moments', 'sample_target', 'mixture_cdf',
           'oracle_check', 'load_oracle_spec']

_log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class GaussianSpec:
    """Isotropic Gaussian with a per-pixel (or scalar) mean."""
    mean: 'float|np.ndarray' = 0.0
    variance: float = 1.0

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError(f'variance must be > 0, got {self.variance}')
        object.__setattr__(self, 'mean', np.asarray(self.mean,
                                                    dtype=np.float64))


@dataclass(frozen=True, eq=False)
class MixtureSpec:
    """Weighted Gaussian components; weights positive and summing to 1."""
    components: 'tuple[tuple[float, GaussianSpec], ...]'

    def __post_init__(self):
        components = tuple(self.components)
        if not components:
            raise ValueError('A mixture needs at least one component')
        weights = np.array([w for w, _ in components], dtype=np.float64)
        if np.any(weights <= 0):
            raise ValueError('Mixture weights must be positive')
        if abs(weights.sum() - 1) > 1e-12:
            raise ValueError(f'Mixture weights sum to {weights.sum()}, not 1')
        object.__setattr__(self, 'components', components)

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for w, _ in self.components])


def _alpha_bar(t, sched: NoiseSchedule, like):
    if isinstance(like, torch.Tensor):
        table = torch.tensor(sched.alpha_bars, dtype=like.dtype)
        if isinstance(t, torch.Tensor) and t.ndim > 0:
            return table[t.long()].view(-1, *([1] * (like.ndim - 1)))
        return table[int(t)]
    return float(sched.alpha_bars[int(t)])


def _mean(spec: GaussianSpec, like):
    if isinstance(like, torch.Tensor):
        mean = torch.tensor(spec.mean, dtype=like.dtype)
        if mean.ndim == 3:
            mean = mean.permute(2, 0, 1)
        return mean
    return spec.mean


def oracle_eps_gaussian(xt, t, sched: NoiseSchedule, spec: GaussianSpec):
    """E[eps | x_t] for x0 ~ N(mean, variance I).

    Accepts a `LatentImage` (mean HxWxC or scalar) or an NxCxHxW tensor
    (mean CxHxW as HxWxC array, or scalar) with scalar or per-sample t.

    """
    sched.check_timestep(t if not isinstance(t, torch.Tensor) or t.ndim == 0
                         else int(t.max()), allow_zero=True)
    values = xt.data if isinstance(xt, LatentImage) else xt
    ab = _alpha_bar(t, sched, values)
    mean = _mean(spec, values)
    if isinstance(values, torch.Tensor):
        eps = (torch.sqrt(1 - ab) * (values - torch.sqrt(ab) * mean) /
               (ab * spec.variance + 1 - ab))
        return eps
    eps = (math.sqrt(1 - ab) * (values - math.sqrt(ab) * mean) /
           (ab * spec.variance + 1 - ab))
    return LatentImage(eps) if isinstance(xt, LatentImage) else eps


def responsibilities(xt, t, sched: NoiseSchedule, spec: MixtureSpec):
    """Posterior component probabilities per image.

    Returns:
        For a `LatentImage`, a length-K array; for an NxCxHxW tensor, an NxK
        tensor. Rows sum to 1.

    """
    values = xt.data if isinstance(xt, LatentImage) else xt
    x = torch.as_tensor(values, dtype=torch.float64)
    if isinstance(xt, LatentImage):
        x = x.permute(2, 0, 1)[None]
        t = int(t)
    ab = _alpha_bar(t, sched, x)
    logs = []
    for weight, component in spec.components:
        variance = ab * component.variance + 1 - ab
        residual = x - torch.sqrt(torch.as_tensor(ab)) * _mean(component, x)
        log_density = -0.5 * (residual ** 2 / variance +
                              torch.log(2 * math.pi * variance))
        logs.append(math.log(weight) + log_density.flatten(1).sum(dim=1))
    stacked = torch.stack(logs, dim=1)
    probabilities = torch.softmax(stacked, dim=1)
    if isinstance(xt, LatentImage):
        return probabilities[0].numpy()
    return probabilities.to(values.dtype)


def oracle_eps_mixture(xt, t, sched: NoiseSchedule, spec: MixtureSpec):
    """E[eps | x_t] for an image-level Gaussian mixture.

    Responsibilities come from log-densities through a max-shifted softmax,
    so large |x_t| stays finite.

    """
    weights = responsibilities(xt, t, sched, spec)
    if isinstance(xt, LatentImage):
        eps = sum(float(w) * oracle_eps_gaussian(xt, t, sched, c).data
                  for w, (_, c) in zip(weights, spec.components))
        return LatentImage(eps)
    eps = torch.zeros_like(xt)
    for k, (_, component) in enumerate(spec.components):
        eps = eps + (weights[:, k].view(-1, 1, 1, 1) *
                     oracle_eps_gaussian(xt, t, sched, component))
    return eps


class OraclePredictor:
    """Adapts an analytic predictor to the per-scale predictor interface.

    Args:
        spec: A `GaussianSpec` or `MixtureSpec`.
        sched: The noise schedule.
        corruption: Standard deviation of Gaussian noise added to every
            prediction (0 for the exact oracle).
        generator: Source of the corruption noise.

    """
    def __init__(self, spec: 'GaussianSpec|MixtureSpec',
                 sched: NoiseSchedule,
                 corruption: float = 0.0,
                 generator: 'torch.Generator|None' = None) -> None:
        self.spec = spec
        self.sched = sched
        self.corruption = corruption
        self.generator = generator or torch_generator(0)

    def __call__(self, x: torch.Tensor, t: torch.Tensor,
                 contour: 'torch.Tensor|None' = None,
                 tag: 'torch.Tensor|None' = None) -> torch.Tensor:
        if isinstance(self.spec, MixtureSpec):
            eps = oracle_eps_mixture(x, t, self.sched, self.spec)
        else:
            eps = oracle_eps_gaussian(x, t, self.sched, self.spec)
        if self.corruption:
            eps = eps + self.corruption * torch.randn(
                x.shape, generator=self.generator, dtype=x.dtype)
        return eps


def gaussian_chain_moments(sched: NoiseSchedule, spec: GaussianSpec
                           ) -> 'tuple[np.ndarray, float]':
    """Exact mean and variance of the oracle-driven chain's output.

    With the oracle the step is affine in x_t, so starting from N(0, 1) the
    moments follow

        k = beta_t / (alpha_bar_t s^2 + 1 - alpha_bar_t)
        mu  <- ((1 - k) mu + k sqrt(alpha_bar_t) m) / sqrt(alpha_t)
        var <- (1 - k)^2 var / alpha_t + sigma_t^2   (no noise at t = 1)

    Returns:
        (per-pixel mean, variance).

    """
    mean = np.zeros_like(spec.mean, dtype=np.float64)
    variance = 1.0
    for t in range(sched.T, 0, -1):
        ab = sched.alpha_bars[t]
        k = sched.betas[t] / (ab * spec.variance + 1 - ab)
        mean = ((1 - k) * mean + k * math.sqrt(ab) * spec.mean) / \
            math.sqrt(sched.alphas[t])
        variance = (1 - k) ** 2 * variance / sched.alphas[t]
        if t > 1:
            variance += sched.sigmas[t] ** 2
    return mean, float(variance)


def sample_target(spec: 'GaussianSpec|MixtureSpec',
                  shape: 'tuple[int, ...]',
                  rng: np.random.Generator) -> np.ndarray:
    """Draws NxHxWxC samples directly from the target distribution."""
    n = shape[0]
    if isinstance(spec, GaussianSpec):
        components = [(1.0, spec)]
    else:
        components = list(spec.components)
    weights = np.array([w for w, _ in components])
    choice = rng.choice(len(components), size=n, p=weights / weights.sum())
    out = np.empty(shape)
    for k, (_, component) in enumerate(components):
        rows = choice == k
        out[rows] = (component.mean + math.sqrt(component.variance) *
                     rng.standard_normal((int(rows.sum()),) + shape[1:]))
    return out


def mixture_cdf(spec: 'GaussianSpec|MixtureSpec'):
    """CDF of a scalar (1-pixel) target, for Kolmogorov-Smirnov tests."""
    components = ([(1.0, spec)] if isinstance(spec, GaussianSpec)
                  else list(spec.components))

    def cdf(x):
        return sum(w * stats.norm.cdf(x, loc=float(np.ravel(c.mean)[0]),
                                      scale=math.sqrt(c.variance))
                   for w, c in components)
    return cdf


def oracle_check(spec: 'GaussianSpec|MixtureSpec',
                 sched: NoiseSchedule,
                 samples: int,
                 seed: int,
                 shape: 'tuple[int, int, int]' = (1, 1, 1)) -> dict:
    """Samples the oracle-driven chain and compares it with the target.

    Args:
        spec: The target distribution.
        sched: The noise schedule.
        samples: Chains to run.
        seed: Seed of the chains.
        shape: HxWxC of one sample.

    Returns:
        A report with sample and target moments, standard errors, the
        largest z-score, the exact chain moments for Gaussian targets and a
        Kolmogorov-Smirnov statistic for one-pixel targets.

    """
    height, width, channels = shape
    predictor = OraclePredictor(spec, sched)
    x0 = sample_loop(lambda x, t: predictor(x, t), sched,
                     (samples, channels, height, width),
                     torch_generator(seed), torch.float64)
    drawn = x0.permute(0, 2, 3, 1).numpy()
    target = sample_target(spec, (200_000,) + tuple(shape),
                           numpy_rng(seed))
    mean, var = drawn.mean(axis=0), drawn.var(axis=0, ddof=1)
    target_mean, target_var = target.mean(axis=0), target.var(axis=0)
    mean_se = np.sqrt(target_var / samples)
    centered4 = ((target - target_mean) ** 4).mean(axis=0)
    var_se = np.sqrt(np.maximum(centered4 - target_var ** 2, 1e-300) /
                     samples)
    report = {
        'samples': samples,
        'T': sched.T,
        'shape': list(shape),
        'mean': float(mean.mean()),
        'variance': float(var.mean()),
        'target_mean': float(target_mean.mean()),
        'target_variance': float(target_var.mean()),
        'max_mean_z': float(np.max(np.abs(mean - target_mean) / mean_se)),
        'max_variance_z': float(np.max(np.abs(var - target_var) / var_se)),
    }
    if isinstance(spec, GaussianSpec):
        chain_mean, chain_var = gaussian_chain_moments(sched, spec)
        report['chain_mean'] = float(np.mean(chain_mean))
        report['chain_variance'] = chain_var
    if height * width * channels == 1:
        result = stats.kstest(drawn.ravel(), mixture_cdf(spec))
        report['ks_statistic'] = float(result.statistic)
        report['ks_pvalue'] = float(result.pvalue)
    _log.info('Oracle check over %d samples: max mean z %.2f, max variance'
              ' z %.2f', samples, report['max_mean_z'],
              report['max_variance_z'])
    return report


def load_oracle_spec(path: 'str|Path'
                     ) -> 'tuple[GaussianSpec|MixtureSpec, tuple[int, ...]]':
    """Reads a JSON target description.

    Format: `{"shape": [h, w, c], "components": [{"weight": w, "mean": m,
    "variance": v}, ...]}`; a single component yields a `GaussianSpec`.

    Raises:
        `ValueError` for a malformed file.

    """
    try:
        document = json.loads(Path(path).read_text())
        shape = tuple(int(v) for v in document.get('shape', (1, 1, 1)))
        components = [(float(c.get('weight', 1.0)),
                       GaussianSpec(float(c.get('mean', 0.0)),
                                    float(c.get('variance', 1.0))))
                      for c in document['components']]
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ValueError(f'Malformed oracle spec {path}: {exc}') from exc
    if len(shape) != 3:
        raise ValueError(f'Oracle spec shape must be [h, w, c], got {shape}')
    if len(components) == 1:
        return components[0][1], shape
    return MixtureSpec(tuple(components)), shape
