"""Frequency-domain post-processing with a learned radial gain filter.

Each channel is transformed with a 2-D FFT; every frequency bin is scaled by
a real gain that depends on its normalized radius r = |(f_y, f_x)| in
[0, sqrt(2)/2] (cycles per pixel), and transformed back. Phase is kept.

The gain curve is piecewise linear through K band centers
`(k + 0.5) * R / K` (R = sqrt(2)/2) and constant beyond the first and last
center, so the filtered image is linear in the gains and fitting them is a
least-squares problem.

Set `LOG_VERBOSE=fdp` to log each fitting iteration.

"""
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mural_restoration.image import Image
from mural_restoration.logger import verbose_logging
from mural_restoration.path import atomic_write_text

__all__ = ['FilterError', 'RadialFilter', 'fft2', 'ifft2', 'radius_map',
           'band_centers', 'apply_filter', 'filter_plane', 'fit_filter',
           'save_filter', 'load_filter', 'MAX_RADIUS']

MAX_RADIUS = math.sqrt(2) / 2

_log = logging.getLogger(__name__)


class FilterError(Exception):
    """Invalid filter gains or filter inputs."""


@dataclass(frozen=True)
class RadialFilter:
    """K band gains; all ones is the identity."""
    gains: 'tuple[float, ...]'

    def __post_init__(self):
        gains = tuple(float(g) for g in self.gains)
        if not gains:
            raise FilterError('A filter needs at least one gain')
        if any(not math.isfinite(g) or g < 0 for g in gains):
            raise FilterError(f'Gains must be finite and >= 0: {gains}')
        object.__setattr__(self, 'gains', gains)

    @property
    def bands(self) -> int:
        return len(self.gains)

    @classmethod
    def identity(cls, bands: int = 8) -> 'RadialFilter':
        return cls((1.0,) * bands)

    def gain_map(self, height: int, width: int) -> np.ndarray:
        """Gain of every FFT bin of an HxW plane."""
        return np.interp(radius_map(height, width), band_centers(self.bands),
                         self.gains)


def fft2(plane: np.ndarray) -> np.ndarray:
    """Unnormalized 2-D DFT (DC term = sum of the plane).

    Raises:
        `FilterError` for non-finite input.

    """
    plane = np.asarray(plane)
    if not np.all(np.isfinite(plane)):
        raise FilterError('FFT input contains NaN or infinite values')
    return np.fft.fft2(plane)


def ifft2(spectrum: np.ndarray) -> np.ndarray:
    """Inverse of `fft2`, real part."""
    spectrum = np.asarray(spectrum)
    if not np.all(np.isfinite(spectrum)):
        raise FilterError('Spectrum contains NaN or infinite values')
    return np.fft.ifft2(spectrum).real


def radius_map(height: int, width: int) -> np.ndarray:
    fy = np.fft.fftfreq(height)[:, np.newaxis]
    fx = np.fft.fftfreq(width)[np.newaxis, :]
    return np.hypot(fy, fx)


def band_centers(bands: int) -> np.ndarray:
    return (np.arange(bands) + 0.5) * MAX_RADIUS / bands


def filter_plane(plane: np.ndarray, filt: RadialFilter) -> np.ndarray:
    """Filters one HxW plane without clamping."""
    return ifft2(fft2(plane) * filt.gain_map(*plane.shape))


def apply_filter(img: 'Image|np.ndarray',
                 filt: RadialFilter,
                 clamp: bool = True) -> 'Image|np.ndarray':
    """Applies the filter per channel.

    Args:
        img: An `Image`, or an HxWxC array.
        filt: The filter.
        clamp: Return an `Image` clamped to [0,1]; otherwise the raw array.

    """
    data = img.data if isinstance(img, Image) else np.asarray(img, float)
    if data.ndim == 2:
        data = data[:, :, np.newaxis]
    gains = filt.gain_map(data.shape[0], data.shape[1])
    out = np.empty_like(data, dtype=np.float64)
    for c in range(data.shape[2]):
        out[:, :, c] = ifft2(fft2(data[:, :, c]) * gains)
    if clamp:
        return Image(np.clip(out, 0.0, 1.0))
    return out


def _band_responses(plane: np.ndarray, bands: int) -> np.ndarray:
    radius = radius_map(*plane.shape)
    centers = band_centers(bands)
    spectrum = fft2(plane)
    responses = np.empty((bands, plane.size))
    for k in range(bands):
        hat = np.interp(radius, centers, np.eye(bands)[k])
        responses[k] = ifft2(spectrum * hat).ravel()
    return responses


def _as_array(img) -> np.ndarray:
    data = img.data if isinstance(img, Image) else np.asarray(img, float)
    return data[:, :, np.newaxis] if data.ndim == 2 else data


def fit_filter(pairs: 'list[tuple[Image, Image]]',
               bands: int = 8,
               steps: int = 50,
               trace: 'list[float]|None' = None) -> RadialFilter:
    """Fits gains minimizing the mean squared error to the references.

    Conjugate-gradient descent on the quadratic objective, starting from
    the identity. Each iteration does not increase the objective; at most
    `bands` iterations reach the exact optimum.

    Args:
        pairs: (generated, reference) images or HxWxC arrays.
        bands: Number of gains K.
        steps: Iteration cap.
        trace: Optional list receiving the objective after each iteration,
            starting with the identity's.

    Raises:
        `FilterError` for no pairs or a shape mismatch within a pair.

    """
    if not pairs:
        raise FilterError('No (generated, reference) pairs to fit')
    blocks, targets = [], []
    for generated, reference in pairs:
        gen, ref = _as_array(generated), _as_array(reference)
        if gen.shape != ref.shape:
            raise FilterError(f'Pair shapes differ: {gen.shape} vs'
                              f' {ref.shape}')
        for c in range(gen.shape[2]):
            blocks.append(_band_responses(gen[:, :, c], bands))
            targets.append(ref[:, :, c].ravel())
    design = np.concatenate(blocks, axis=1)
    target = np.concatenate(targets)
    count = target.size
    gram = design @ design.T / count
    rhs = design @ target / count
    offset = float(target @ target) / count

    def objective(g: np.ndarray) -> float:
        return float(g @ gram @ g - 2 * g @ rhs + offset)

    verbose = verbose_logging('fdp')
    gains = np.ones(bands)
    residual = rhs - gram @ gains
    direction = residual.copy()
    history = [objective(gains)]
    scale = max(float(np.abs(rhs).max()), 1e-300)
    for step in range(steps):
        if np.linalg.norm(residual) <= 1e-13 * scale:
            break
        curvature = float(direction @ gram @ direction)
        if curvature <= 0:
            break
        size = float(residual @ residual) / curvature
        gains = gains + size * direction
        updated = residual - size * (gram @ direction)
        direction = updated + (float(updated @ updated) /
                               float(residual @ residual)) * direction
        residual = updated
        history.append(objective(gains))
        if verbose:
            _log.debug('FDP iteration %d: objective %.9g', step + 1,
                       history[-1])
    if np.any(gains < 0):
        _log.warning('Clipping negative fitted gains %s to 0',
                     np.round(gains, 4).tolist())
        gains = np.maximum(gains, 0.0)
    if trace is not None:
        trace.extend(history)
    return RadialFilter(tuple(gains))


def save_filter(filt: RadialFilter, path: 'str|Path') -> None:
    """Writes one gain per line after a comment header."""
    lines = [f'# radial filter, {filt.bands} bands']
    lines += [repr(g) for g in filt.gains]
    atomic_write_text(path, '\n'.join(lines) + '\n')


def load_filter(path: 'str|Path') -> RadialFilter:
    """Reads a filter written by `save_filter`.

    Raises:
        `FilterError` for unparseable lines or invalid gains.

    """
    gains = []
    for number, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        try:
            gains.append(float(line))
        except ValueError as exc:
            raise FilterError(f'{path}:{number}: not a number: {line}'
                              ) from exc
    return RadialFilter(tuple(gains))
