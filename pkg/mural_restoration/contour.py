"""Contour guidance masks from two-cluster K-means over pixel colors.

Damaged regions of a mural usually keep faint outline strokes. Treating every
pixel as an individual color vector and splitting them into two clusters
separates those strokes from the plaster ground; the darker cluster becomes
the guidance mask.

Set `LOG_VERBOSE=kmeans` to log every Lloyd iteration.

"""
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mural_restoration.image import (Image, ImageError, luminance,
                                     read_image, write_image)
from mural_restoration.logger import verbose_logging

__all__ = ['KMeansError', 'DegenerateImageError', 'KMeansResult',
           'ContourMask', 'kmeans', 'extract_contour', 'read_mask',
           'write_mask']

_log = logging.getLogger(__name__)


class KMeansError(Exception):
    """Invalid clustering input."""


class DegenerateImageError(Exception):
    """The image has a single distinct color so no contour can be split."""


@dataclass(frozen=True, eq=False)
class KMeansResult:
    """The outcome of Lloyd's algorithm.

    Attributes:
        centroids: KxD cluster centers.
        assignments: The cluster index of each input point.
        objective: The final sum of squared distances to assigned centers.
        iterations: Lloyd iterations run.
        trace: The objective after every centroid update (nonincreasing).

    """
    centroids: np.ndarray = field(repr=False)
    assignments: np.ndarray = field(repr=False)
    objective: float
    iterations: int
    trace: 'tuple[float, ...]' = field(default=(), repr=False)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def one_hot(self) -> np.ndarray:
        """Returns the NxK indicator matrix of the assignments."""
        return np.eye(self.k, dtype=np.uint8)[self.assignments]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.k)


@dataclass(frozen=True, eq=False)
class ContourMask:
    """A binary HxW mask, 1 marking foreground.

    Used both for contour guidance and for damage regions.

    Attributes:
        data: uint8 values in {0, 1}.
        threshold: Midpoint of the two cluster luminances when the mask came
            from `extract_contour`, else None.

    """
    data: np.ndarray = field(repr=False)
    threshold: 'float|None' = None

    def __post_init__(self):
        array = np.asarray(self.data)
        if array.ndim == 3 and array.shape[2] == 1:
            array = array[:, :, 0]
        if array.ndim != 2 or array.size == 0:
            raise ImageError(f'Mask must be a nonempty HxW grid,'
                             f' got shape {array.shape}')
        if not np.all((array == 0) | (array == 1)):
            raise ImageError('Mask values must be 0 or 1')
        array = np.ascontiguousarray(array, dtype=np.uint8)
        array.setflags(write=False)
        object.__setattr__(self, 'data', array)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def fraction(self) -> float:
        return float(self.data.mean())

    def as_bool(self) -> np.ndarray:
        return self.data.astype(bool)

    def to_image(self) -> Image:
        return Image(self.data.astype(np.float64))

    @classmethod
    def zeros(cls, height: int, width: int) -> 'ContourMask':
        return cls(np.zeros((height, width), dtype=np.uint8))


def _lloyd(points: np.ndarray,
           centroids: np.ndarray,
           max_iter: int,
           tol: float,
           verbose: bool) -> KMeansResult:
    k = centroids.shape[0]
    trace = []
    assignments = np.zeros(len(points), dtype=np.int64)
    objective = np.inf
    iterations = 0
    for iterations in range(1, max_iter + 1):
        distances = ((points[:, np.newaxis, :] -
                      centroids[np.newaxis, :, :]) ** 2).sum(axis=2)
        assignments = np.argmin(distances, axis=1)
        own = distances[np.arange(len(points)), assignments]
        for j in range(k):
            if np.any(assignments == j) or own.max() <= 0:
                continue
            farthest = int(np.argmax(own))
            _log.debug('Reseeding empty cluster %d at point %d', j, farthest)
            assignments[farthest] = j
            own[farthest] = 0.0
        updated = centroids.copy()
        for j in range(k):
            members = points[assignments == j]
            if len(members):
                updated[j] = members.mean(axis=0)
        objective = float(((points - updated[assignments]) ** 2).sum())
        trace.append(objective)
        shift = float(np.sqrt(((updated - centroids) ** 2).sum(axis=1)).max())
        centroids = updated
        if verbose:
            _log.debug('Lloyd iteration %d: J=%.9g shift=%.3g',
                       iterations, objective, shift)
        if shift <= tol:
            break
    return KMeansResult(centroids=centroids,
                        assignments=assignments,
                        objective=objective,
                        iterations=iterations,
                        trace=tuple(trace))


def _farthest_point_init(distinct: np.ndarray, k: int, first: int
                         ) -> np.ndarray:
    chosen = [first]
    nearest = ((distinct - distinct[first]) ** 2).sum(axis=1)
    while len(chosen) < k:
        candidate = int(np.argmax(nearest))
        chosen.append(candidate)
        nearest = np.minimum(
            nearest, ((distinct - distinct[candidate]) ** 2).sum(axis=1))
    return distinct[chosen].copy()


def kmeans(pixels,
           k: int,
           seed: int = 0,
           max_iter: int = 100,
           tol: float = 1e-6,
           n_init: int = 1) -> KMeansResult:
    """Clusters points with Lloyd's algorithm and farthest-point seeding.

    The first center is a seeded random choice among the distinct points;
    each further center is the distinct point farthest from those chosen
    (ties go to the lexicographically smallest point). Seeding only looks at
    the set of distinct points, so the result does not depend on input
    order.

    Args:
        pixels: N scalars or an NxD array of color vectors.
        k: Number of clusters, 1 <= k <= distinct points.
        seed: Seed of the first-center choice.
        max_iter: Iteration cap (>= 1).
        tol: Stop once no center moves by more than `tol`.
        n_init: Independent restarts; the lowest objective wins.

    Returns:
        The `KMeansResult` of the best restart.

    Raises:
        `KMeansError` for empty input or too few distinct points.
        `ValueError` for invalid `k`, `max_iter`, `tol` or `n_init`.

    """
    points = np.asarray(pixels, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, np.newaxis]
    if points.ndim != 2:
        raise KMeansError(f'Expected N points of dimension D, got'
                          f' shape {points.shape}')
    if len(points) == 0:
        raise KMeansError('No pixels to cluster')
    if not np.all(np.isfinite(points)):
        raise KMeansError('Pixels contain NaN or infinite values')
    if k < 1 or max_iter < 1 or tol < 0 or n_init < 1:
        raise ValueError('Require k >= 1, max_iter >= 1, tol >= 0,'
                         ' n_init >= 1')
    distinct = np.unique(points, axis=0)
    if k > len(distinct):
        raise KMeansError(f'K={k} exceeds {len(distinct)} distinct pixels')
    order = np.random.default_rng(seed).permutation(len(distinct))
    verbose = verbose_logging('kmeans')
    best = None
    for restart in range(n_init):
        first = int(order[restart % len(order)])
        centroids = _farthest_point_init(distinct, k, first)
        result = _lloyd(points, centroids, max_iter, tol, verbose)
        if best is None or result.objective < best.objective:
            best = result
    return best


def _split_region(data: np.ndarray,
                  region: np.ndarray,
                  seed: int,
                  invert: bool,
                  max_iter: int,
                  tol: float) -> 'tuple[np.ndarray, float]':
    pixels = data[region]
    result = kmeans(pixels, 2, seed=seed, max_iter=max_iter, tol=tol)
    levels = luminance(result.centroids)
    sizes = result.sizes()
    if levels[0] != levels[1]:
        foreground = int(np.argmin(levels))
    else:
        foreground = int(sizes[1] < sizes[0])
    if invert:
        foreground = 1 - foreground
    mask = np.zeros(region.shape, dtype=np.uint8)
    mask[region] = (result.assignments == foreground).astype(np.uint8)
    return mask, float(levels.mean())


def extract_contour(img: Image,
                    seed: int = 0,
                    invert: bool = False,
                    allow_degenerate: bool = False,
                    region: 'np.ndarray|None' = None,
                    max_iter: int = 100,
                    tol: float = 1e-6) -> ContourMask:
    """Splits pixels into two color clusters and marks the darker one.

    The cluster whose centroid has the lower luminance is foreground; equal
    luminances go to the smaller cluster. `invert` selects the other
    cluster.

    Args:
        img: The source image.
        seed: K-means seed.
        invert: Mark the lighter cluster instead.
        allow_degenerate: Return an all-zero mask for a single-color image
            instead of raising.
        region: Optional HxW boolean array; only these pixels are clustered
            and the rest of the mask is 0.
        max_iter: K-means iteration cap.
        tol: K-means centroid movement tolerance.

    Returns:
        A `ContourMask` carrying the midpoint luminance of the two centroids
        as `threshold`.

    Raises:
        `DegenerateImageError` if the pixels have one distinct color and
            `allow_degenerate` is not set.

    """
    if region is None:
        region = np.ones((img.height, img.width), dtype=bool)
    region = np.asarray(region, dtype=bool)
    if region.shape != (img.height, img.width):
        raise ImageError(f'Region shape {region.shape} does not match'
                         f' image {img.height}x{img.width}')
    pixels = img.data[region]
    if len(pixels) == 0 or len(np.unique(pixels, axis=0)) < 2:
        if not allow_degenerate:
            raise DegenerateImageError('Cannot split a region with fewer'
                                       ' than two distinct colors')
        _log.warning('Degenerate region, using an empty contour mask')
        return ContourMask.zeros(img.height, img.width)
    mask, threshold = _split_region(img.data, region, seed, invert,
                                    max_iter, tol)
    return ContourMask(mask, threshold=threshold)


def read_mask(path: 'str|Path') -> ContourMask:
    """Reads a mask image; intensities above 0.5 are foreground."""
    img = read_image(path)
    return ContourMask((luminance(img.data) > 0.5).astype(np.uint8))


def write_mask(mask: ContourMask, path: 'str|Path') -> None:
    """Writes a mask as an 8-bit image of 0 and 255."""
    write_image(mask.to_image(), path)
