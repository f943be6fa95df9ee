"""Pixel containers, resampling, scale pyramids and image file I/O.

`Image` holds intensities in [0,1]; `LatentImage` holds the unclamped values
the diffusion chain works on. Diffusion runs on the affine shift `2x - 1`
into [-1,1], applied by `to_latent` and removed by `from_latent`.

Supported files:

* PNG, 8 or 16 bit, grayscale or RGB (an alpha channel is dropped)
* PGM (`P5`) and PPM (`P6`) binary, maxval up to 65535

"""
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn.functional as F

from mural_restoration.path import atomic_write_bytes

__all__ = ['ImageError', 'UnsupportedFormatError', 'TruncatedImageError',
           'Image', 'LatentImage', 'ScalePyramid', 'resample',
           'resample_tensor', 'read_image', 'write_image', 'to_grayscale',
           'luminance', 'to_latent', 'from_latent', 'build_pyramid',
           'to_tensor', 'from_tensor', 'LUMA_WEIGHTS']

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
PNG_SIGNATURE = b'\x89PNG\r\n\x1a\n'
RESAMPLE_MODES = {'bilinear': 'bilinear', 'nearest': 'nearest-exact'}

_log = logging.getLogger(__name__)


class ImageError(Exception):
    """Invalid pixel data, shape or file content."""


class UnsupportedFormatError(ImageError):
    """The file is not a supported image format."""


class TruncatedImageError(ImageError):
    """The file payload is shorter than its header declares."""


def _as_grid(data, name: str) -> np.ndarray:
    array = np.array(data, dtype=np.float64, copy=True)
    if array.ndim == 2:
        array = array[:, :, np.newaxis]
    if array.ndim != 3:
        raise ImageError(f'{name} data must be HxW or HxWxC,'
                         f' got shape {array.shape}')
    if array.shape[0] < 1 or array.shape[1] < 1 or array.shape[2] < 1:
        raise ImageError(f'{name} has an empty dimension {array.shape}')
    if not np.all(np.isfinite(array)):
        raise ImageError(f'{name} contains NaN or infinite values')
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class _PixelGrid:
    data: np.ndarray = field(repr=False)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> 'tuple[int, int, int]':
        return self.data.shape

    def __repr__(self) -> str:
        return (f'{type(self).__name__}({self.height}x{self.width}'
                f'x{self.channels})')


@dataclass(frozen=True, eq=False, repr=False)
class Image(_PixelGrid):
    """An HxWxC grid of intensities in [0,1] with 1 or 3 channels.

    Immutable: the data array is a read-only copy.

    Raises:
        `ImageError` for bad shapes, channel counts, non-finite values or
            values outside [0,1].

    """
    def __post_init__(self):
        array = _as_grid(self.data, 'Image')
        if array.shape[2] not in (1, 3):
            raise ImageError(f'Image must have 1 or 3 channels,'
                             f' got {array.shape[2]}')
        if array.min() < 0 or array.max() > 1:
            raise ImageError(f'Image intensities must be in [0,1], got'
                             f' [{array.min()}, {array.max()}]')
        object.__setattr__(self, 'data', array)

    @classmethod
    def clipped(cls, data) -> 'Image':
        """Builds an image clamping finite values into [0,1]."""
        array = _as_grid(data, 'Image')
        return cls(np.clip(array, 0.0, 1.0))


@dataclass(frozen=True, eq=False, repr=False)
class LatentImage(_PixelGrid):
    """An HxWxC grid of unclamped finite values (diffusion states, noise).

    Raises:
        `ImageError` for bad shapes or any NaN/infinite value.

    """
    def __post_init__(self):
        object.__setattr__(self, 'data', _as_grid(self.data, 'LatentImage'))


@dataclass(frozen=True, eq=False)
class ScalePyramid:
    """Per-scale grids ordered coarsest to finest.

    Attributes:
        levels: (scale_id, grid) pairs, coarsest first.

    Raises:
        `ImageError` if sizes do not strictly increase or aspect ratios
            differ between levels.

    """
    levels: 'tuple[tuple[int, _PixelGrid], ...]'

    def __post_init__(self):
        levels = tuple(self.levels)
        if not levels:
            raise ImageError('ScalePyramid needs at least one level')
        for (_, lower), (_, upper) in zip(levels, levels[1:]):
            if not (upper.height > lower.height and upper.width > lower.width):
                raise ImageError('ScalePyramid levels must strictly grow'
                                 ' toward the finest level')
            if upper.height * lower.width != lower.height * upper.width:
                raise ImageError('ScalePyramid levels must share one'
                                 ' aspect ratio')
        object.__setattr__(self, 'levels', levels)

    @property
    def canonical_scale(self) -> 'tuple[int, int]':
        finest = self.levels[-1][1]
        return finest.height, finest.width

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, index: int) -> '_PixelGrid':
        return self.levels[index][1]

    def scale_ids(self) -> 'list[int]':
        return [scale_id for scale_id, _ in self.levels]


def resample_tensor(x: torch.Tensor,
                    size: 'tuple[int, int]',
                    mode: str = 'bilinear') -> torch.Tensor:
    """Resamples an NxCxHxW tensor with half-pixel-center alignment.

    Args:
        x: The batch to resample.
        size: Target (height, width).
        mode: `bilinear` or `nearest`.

    Raises:
        `ValueError` for a target dimension below 1 or an unknown mode.

    """
    height, width = size
    if height < 1 or width < 1:
        raise ValueError(f'Invalid target size {height}x{width}')
    if mode not in RESAMPLE_MODES:
        raise ValueError(f'Unknown resample mode {mode}')
    if tuple(x.shape[-2:]) == (height, width):
        return x
    if mode == 'bilinear':
        return F.interpolate(x, size=(height, width), mode='bilinear',
                             align_corners=False)
    return F.interpolate(x, size=(height, width), mode='nearest-exact')


def to_tensor(grid: '_PixelGrid', dtype: torch.dtype = torch.float64
              ) -> torch.Tensor:
    """Returns a 1xCxHxW tensor of a grid's values."""
    array = np.transpose(grid.data, (2, 0, 1))[np.newaxis]
    return torch.tensor(np.ascontiguousarray(array), dtype=dtype)


def from_tensor(x: torch.Tensor, kind: type = None) -> '_PixelGrid':
    """Builds a grid from a CxHxW or 1xCxHxW tensor."""
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise ImageError(f'Expected a single sample, got batch'
                             f' {x.shape[0]}')
        x = x[0]
    array = x.detach().to(torch.float64).cpu().numpy().transpose(1, 2, 0)
    return (kind or LatentImage)(array)


def resample(img: '_PixelGrid',
             new_height: int,
             new_width: int,
             mode: str = 'bilinear') -> '_PixelGrid':
    """Resamples an `Image` or `LatentImage` to a new size.

    Bilinear uses half-pixel-center alignment, so a constant image stays
    constant and a same-size resample is the identity.

    Args:
        img: The grid to resample.
        new_height: Target height (>= 1).
        new_width: Target width (>= 1).
        mode: `bilinear` or `nearest`.

    Returns:
        A grid of the same kind as the input.

    Raises:
        `ValueError` for a zero or negative target dimension.

    """
    if new_height < 1 or new_width < 1:
        raise ValueError(f'Invalid target size {new_height}x{new_width}')
    result = resample_tensor(to_tensor(img), (new_height, new_width), mode)
    array = result[0].numpy().transpose(1, 2, 0)
    if isinstance(img, Image):
        return Image(np.clip(array, 0.0, 1.0))
    return type(img)(array)


def luminance(data: np.ndarray) -> np.ndarray:
    """Returns the HxW luminance of an HxWx{1,3} array."""
    if data.shape[-1] == 1:
        return data[..., 0]
    if data.shape[-1] != 3:
        raise ImageError(f'Luminance needs 1 or 3 channels,'
                         f' got {data.shape[-1]}')
    r, g, b = LUMA_WEIGHTS
    return r * data[..., 0] + g * data[..., 1] + b * data[..., 2]


def to_grayscale(img: Image) -> Image:
    """Converts to one channel as 0.299R + 0.587G + 0.114B.

    A one-channel image is returned unchanged.

    """
    if img.channels == 1:
        return img
    return Image.clipped(luminance(img.data))


def to_latent(img: Image) -> LatentImage:
    """Maps [0,1] intensities to [-1,1] diffusion values."""
    return LatentImage(img.data * 2.0 - 1.0)


def from_latent(latent: LatentImage) -> Image:
    """Maps [-1,1] diffusion values back to [0,1], clamping."""
    return Image(np.clip((latent.data + 1.0) / 2.0, 0.0, 1.0))


def build_pyramid(img: '_PixelGrid',
                  sizes: 'list[int]|list[tuple[int, int]]',
                  mode: str = 'bilinear') -> ScalePyramid:
    """Resamples a grid to each size, coarsest to finest.

    Args:
        img: The source grid.
        sizes: Square sizes or (height, width) pairs, increasing.
        mode: `bilinear` for intensities, `nearest` for masks.

    """
    levels = []
    for scale_id, size in enumerate(sizes):
        height, width = (size, size) if isinstance(size, int) else size
        levels.append((scale_id, resample(img, height, width, mode)))
    return ScalePyramid(tuple(levels))


# -- file I/O --------------------------------------------------------------

def _read_pnm(raw: bytes, filename: str) -> np.ndarray:
    match = re.match(rb'(P[56])', raw)
    if not match:
        raise UnsupportedFormatError(f'{filename} is not a binary PGM/PPM')
    channels = 1 if match.group(1) == b'P5' else 3
    values, pos = [], 2
    while len(values) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b'#':
            while pos < len(raw) and raw[pos:pos + 1] not in (b'\n', b'\r'):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise TruncatedImageError(f'{filename} has an incomplete header')
        values.append(int(raw[start:pos]))
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise TruncatedImageError(f'{filename} has an incomplete header')
    pos += 1
    width, height, maxval = values
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ImageError(f'{filename} declares invalid size {width}x{height}'
                         f' maxval {maxval}')
    depth = 1 if maxval < 256 else 2
    expected = width * height * channels * depth
    payload = raw[pos:]
    if len(payload) < expected:
        raise TruncatedImageError(f'{filename} payload has {len(payload)}'
                                  f' bytes, header declares {expected}')
    if len(payload) > expected:
        raise ImageError(f'{filename} payload has {len(payload)} bytes,'
                         f' header declares {expected}: dimension mismatch')
    dtype = np.uint8 if depth == 1 else np.dtype('>u2')
    array = np.frombuffer(payload, dtype=dtype).reshape(height, width,
                                                        channels)
    return array.astype(np.float64) / maxval


def _read_png(raw: bytes, filename: str) -> np.ndarray:
    decoded = cv2.imdecode(np.frombuffer(raw, dtype=np.uint8),
                           cv2.IMREAD_UNCHANGED)
    if decoded is None:
        raise TruncatedImageError(f'{filename} is a truncated or corrupt PNG')
    if decoded.dtype == np.uint8:
        scale = 255.0
    elif decoded.dtype == np.uint16:
        scale = 65535.0
    else:
        raise UnsupportedFormatError(f'{filename} has unsupported sample'
                                     f' type {decoded.dtype}')
    if decoded.ndim == 3:
        if decoded.shape[2] == 4:
            _log.warning('Dropping alpha channel of %s', filename)
            decoded = decoded[:, :, :3]
        decoded = decoded[:, :, ::-1]
    return decoded.astype(np.float64) / scale


def read_image(path: 'str|Path') -> Image:
    """Reads a PNG, PGM or PPM file; sample value v maps to v/maxval.

    Args:
        path: The image file.

    Raises:
        `UnsupportedFormatError` for other formats.
        `TruncatedImageError` if the payload is shorter than declared.
        `ImageError` if the payload is longer than declared.

    """
    path = Path(path)
    raw = path.read_bytes()
    if raw.startswith(PNG_SIGNATURE):
        return Image(_read_png(raw, str(path)))
    if raw[:2] in (b'P5', b'P6'):
        return Image(_read_pnm(raw, str(path)))
    raise UnsupportedFormatError(f'{path} is not a supported image format')


def _quantize(img: Image, bit_depth: int) -> np.ndarray:
    if bit_depth not in (8, 16):
        raise ValueError(f'Unsupported bit depth {bit_depth}')
    maxval = 255 if bit_depth == 8 else 65535
    dtype = np.uint8 if bit_depth == 8 else np.uint16
    return np.rint(img.data * maxval).astype(dtype)


def write_image(img: Image, path: 'str|Path', bit_depth: int = 8) -> None:
    """Writes an image as PNG, PGM or PPM chosen by the file suffix.

    Args:
        img: The image to write.
        path: The target; `.png`, `.pgm` (1 channel) or `.ppm` (3 channels).
        bit_depth: 8 or 16 bits per sample.

    Raises:
        `UnsupportedFormatError` for other suffixes or channel mismatches.

    """
    path = Path(path)
    suffix = path.suffix.lower()
    samples = _quantize(img, bit_depth)
    if suffix == '.png':
        if img.channels == 3:
            samples = np.ascontiguousarray(samples[:, :, ::-1])
        else:
            samples = samples[:, :, 0]
        ok, encoded = cv2.imencode('.png', samples)
        if not ok:
            raise ImageError(f'PNG encoding failed for {path}')
        atomic_write_bytes(path, encoded.tobytes())
    elif suffix in ('.pgm', '.ppm'):
        expected = 1 if suffix == '.pgm' else 3
        if img.channels != expected:
            raise UnsupportedFormatError(f'{suffix} needs {expected}'
                                         f' channel(s), got {img.channels}')
        magic = b'P5' if expected == 1 else b'P6'
        maxval = 255 if bit_depth == 8 else 65535
        header = magic + f'\n{img.width} {img.height}\n{maxval}\n'.encode()
        if bit_depth == 16:
            payload = samples.astype('>u2').tobytes()
        else:
            payload = samples.tobytes()
        atomic_write_bytes(path, header + payload)
    else:
        raise UnsupportedFormatError(f'Unsupported image suffix {suffix}')
