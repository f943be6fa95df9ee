"""Training data: synthetic murals, overlapping crops and patch tensors.

A synthetic split directory holds three parallel folders plus an index:

    <split>/clean/<name>.png     undamaged mural
    <split>/mask/<name>.png      damage mask (white = damaged)
    <split>/damaged/<name>.png   mural with plaster over the damage
    <split>/index.tsv            name, seed, tag, damage_fraction

A crop directory holds `scale<size>/<source>_r<row>_c<col>.png` patches and
`manifest.tsv` with one line per planned patch, kept or rejected.

"""
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch

from mural_restoration.contour import ContourMask, extract_contour, write_mask
from mural_restoration.image import (Image, luminance, read_image,
                                     write_image)
from mural_restoration.path import atomic_write_text, ensure_dir, list_files
from mural_restoration.seeds import stage_seed

__all__ = ['DatasetError', 'CropPlan', 'CropRecord', 'SyntheticMuralSpec',
           'SyntheticMural', 'PatchSet', 'plan_crops', 'invalid_fraction',
           'filter_invalid', 'synth_mural', 'synth_dataset', 'read_index',
           'crop_image', 'crop_directory', 'read_crop_manifest',
           'load_patches', 'STROKE_PALETTE', 'TEST_SEED_OFFSET']

STROKE_PALETTE = (
    (0.12, 0.10, 0.09),   # ink
    (0.55, 0.20, 0.12),   # red ochre
    (0.13, 0.40, 0.30),   # malachite
    (0.15, 0.22, 0.50),   # lapis
)
TEST_SEED_OFFSET = 1_000_000
MANIFEST_COLUMNS = ('source', 'row', 'col', 'scale', 'status', 'reason')
INDEX_COLUMNS = ('name', 'seed', 'tag', 'damage_fraction')

_log = logging.getLogger(__name__)


class DatasetError(Exception):
    """Invalid crop geometry or dataset layout."""


@dataclass(frozen=True)
class CropPlan:
    """Top-left origins of overlapping square patches.

    Attributes:
        patch_size: Patch side in pixels.
        overlap_fraction: Shared fraction of neighbouring patches.
        stride: `floor(patch_size * (1 - overlap_fraction))`.
        row_origins: Row offsets, ending with `height - patch_size`.
        col_origins: Column offsets, ending with `width - patch_size`.

    """
    patch_size: int
    overlap_fraction: float
    stride: int
    row_origins: 'tuple[int, ...]'
    col_origins: 'tuple[int, ...]'

    @property
    def origins(self) -> 'list[tuple[int, int]]':
        return [(r, c) for r in self.row_origins for c in self.col_origins]

    def __len__(self) -> int:
        return len(self.row_origins) * len(self.col_origins)


def _axis_origins(length: int, patch_size: int, stride: int
                  ) -> 'tuple[int, ...]':
    origins = list(range(0, length - patch_size + 1, stride))
    if origins[-1] != length - patch_size:
        origins.append(length - patch_size)
    return tuple(origins)


def plan_crops(height: int,
               width: int,
               patch_size: int,
               overlap_fraction: float) -> CropPlan:
    """Plans a grid of patches covering every pixel.

    Raises:
        `DatasetError` if the patch exceeds the image or the stride is 0.
        `ValueError` if the overlap is outside [0,1).

    """
    if not 0 <= overlap_fraction < 1:
        raise ValueError(f'overlap_fraction {overlap_fraction} not in [0,1)')
    if patch_size < 1 or patch_size > min(height, width):
        raise DatasetError(f'Patch {patch_size} does not fit'
                           f' {height}x{width}')
    stride = math.floor(patch_size * (1 - overlap_fraction) + 1e-9)
    if stride < 1:
        raise DatasetError(f'Patch {patch_size} with overlap'
                           f' {overlap_fraction} gives stride 0')
    return CropPlan(patch_size=patch_size,
                    overlap_fraction=overlap_fraction,
                    stride=stride,
                    row_origins=_axis_origins(height, patch_size, stride),
                    col_origins=_axis_origins(width, patch_size, stride))


def invalid_fraction(patch: Image, black_threshold: float = 0.02) -> float:
    """Fraction of pixels with luminance below the threshold."""
    return float((luminance(patch.data) < black_threshold).mean())


def filter_invalid(patch: Image,
                   black_threshold: float = 0.02,
                   black_fraction_max: float = 0.05) -> bool:
    """Returns True to keep a patch, False if too much of it is black.

    A patch is rejected only when the black fraction strictly exceeds
    `black_fraction_max`.

    """
    return invalid_fraction(patch, black_threshold) <= black_fraction_max


# -- synthetic murals -------------------------------------------------------

@dataclass(frozen=True)
class SyntheticMuralSpec:
    """Parameters of the procedural mural generator."""
    size: int = 96
    palette: 'tuple[tuple[float, float, float], ...]' = STROKE_PALETTE
    ground: 'tuple[float, float, float]' = (0.86, 0.80, 0.68)
    plaster: 'tuple[float, float, float]' = (0.90, 0.87, 0.80)
    stroke_count: 'tuple[int, int]' = (5, 10)
    stroke_width: 'tuple[int, int]' = (1, 3)
    curvature: float = 0.35
    texture_amplitude: float = 0.04
    plaster_noise: float = 0.01
    residue_alpha: float = 0.15
    damage_fraction: 'tuple[float, float]' = (0.2, 0.6)
    seed: int = 0

    def __post_init__(self):
        if not self.palette:
            raise ValueError('palette must not be empty')
        if self.size < 8:
            raise ValueError('size must be >= 8')
        low, high = self.damage_fraction
        if not 0 < low <= high < 1:
            raise ValueError('damage_fraction must satisfy 0 < low <= high'
                             ' < 1')


@dataclass(frozen=True, eq=False)
class SyntheticMural:
    """A generated clean/damaged pair with its ground truth rasters."""
    clean: Image
    damage: ContourMask
    damaged: Image
    strokes: np.ndarray = field(repr=False)
    tag: int = 0


def _ground(spec: SyntheticMuralSpec, rng: np.random.Generator
            ) -> np.ndarray:
    size = spec.size
    coarse = rng.normal(0, 1, (max(size // 8, 2), max(size // 8, 2), 1))
    smooth = cv2.resize(coarse.astype(np.float32), (size, size),
                        interpolation=cv2.INTER_CUBIC)[:, :, np.newaxis]
    fine = rng.normal(0, 0.25, (size, size, 1))
    texture = spec.texture_amplitude * (smooth + fine) / 2
    return np.clip(np.asarray(spec.ground)[None, None, :] + texture, 0, 1)


def _strokes(spec: SyntheticMuralSpec, rng: np.random.Generator
             ) -> np.ndarray:
    size = spec.size
    canvas = np.zeros((size, size), dtype=np.uint8)
    count = int(rng.integers(spec.stroke_count[0], spec.stroke_count[1] + 1))
    steps = np.linspace(0, 1, 24)[:, np.newaxis]
    for _ in range(count):
        start, end = rng.uniform(0, size - 1, (2, 2))
        normal = np.array([end[1] - start[1], start[0] - end[0]])
        bend = rng.uniform(-spec.curvature, spec.curvature)
        control = (start + end) / 2 + bend * normal
        curve = ((1 - steps) ** 2 * start + 2 * (1 - steps) * steps * control
                 + steps ** 2 * end)
        width = int(rng.integers(spec.stroke_width[0],
                                 spec.stroke_width[1] + 1))
        points = np.rint(curve).astype(np.int32).reshape(-1, 1, 2)
        cv2.polylines(canvas, [points], isClosed=False, color=1,
                      thickness=width, lineType=cv2.LINE_8)
    return canvas.astype(bool)


def _damage(spec: SyntheticMuralSpec, rng: np.random.Generator
            ) -> np.ndarray:
    size = spec.size
    low, high = spec.damage_fraction
    target = rng.uniform(low, high)
    mask = np.zeros((size, size), dtype=np.uint8)
    scale = 0.25
    for _ in range(500):
        candidate = mask.copy()
        if rng.uniform() < 0.75:
            center = tuple(int(v) for v in rng.integers(0, size, 2))
            axes = tuple(int(v) for v in
                         rng.integers(2, max(3, int(size * scale)), 2))
            angle = float(rng.uniform(0, 180))
            cv2.ellipse(candidate, center, axes, angle, 0, 360, 1, -1)
        else:
            walk = np.cumsum(rng.normal(0, size * scale / 4, (12, 2)), axis=0)
            walk += rng.uniform(0, size, 2)
            points = np.clip(np.rint(walk), 0, size - 1).astype(np.int32)
            cv2.polylines(candidate, [points.reshape(-1, 1, 2)], False, 1,
                          thickness=int(rng.integers(1, 3)))
        fraction = candidate.mean()
        if fraction > high:
            scale = max(scale / 2, 0.03)
            continue
        mask = candidate
        if fraction >= target:
            break
    if not low <= mask.mean() <= high:
        raise DatasetError(f'Damage synthesis reached {mask.mean():.3f},'
                           f' outside [{low}, {high}]')
    return mask


def synth_mural(spec: SyntheticMuralSpec) -> SyntheticMural:
    """Renders a mural, a damage mask and the damaged mural.

    Curved strokes in one palette color are drawn over a textured ground.
    Damage is a union of blobs and cracks covering the configured fraction.
    Damaged pixels become plaster, except that strokes under the damage keep
    a faint residue blended at `residue_alpha`.

    Returns:
        A `SyntheticMural`; the tag is the palette index of the strokes.

    """
    rng = np.random.default_rng(spec.seed)
    tag = int(rng.integers(0, len(spec.palette)))
    color = np.asarray(spec.palette[tag])
    clean = _ground(spec, rng)
    strokes = _strokes(spec, rng)
    clean[strokes] = color
    damage = _damage(spec, rng).astype(bool)
    plaster = np.asarray(spec.plaster)[None, None, :] + rng.normal(
        0, spec.plaster_noise, (spec.size, spec.size, 1))
    plaster = np.clip(plaster, 0, 1)
    damaged = clean.copy()
    damaged[damage] = plaster[damage]
    residue = damage & strokes
    damaged[residue] = ((1 - spec.residue_alpha) * plaster[residue] +
                        spec.residue_alpha * color)
    return SyntheticMural(clean=Image(clean),
                          damage=ContourMask(damage.astype(np.uint8)),
                          damaged=Image(np.clip(damaged, 0, 1)),
                          strokes=strokes,
                          tag=tag)


def _write_tsv(path: Path, columns: 'tuple[str, ...]', rows: 'list[dict]'
               ) -> None:
    lines = ['\t'.join(columns)]
    lines += ['\t'.join(str(row[c]) for c in columns) for row in rows]
    atomic_write_text(path, '\n'.join(lines) + '\n')


def _read_tsv(path: Path) -> 'list[dict]':
    with open(path, newline='') as file:
        return list(csv.DictReader(file, delimiter='\t'))


def synth_dataset(out_dir: 'str|Path',
                  count: int,
                  root_seed: int,
                  split: str = 'train',
                  size: int = 96) -> 'list[dict]':
    """Writes `count` synthetic triples and their index.

    Training murals use synth counters `0..count-1`; test murals start at
    `TEST_SEED_OFFSET` so the splits never share a seed.

    Returns:
        The index rows written.

    """
    if split not in ('train', 'test'):
        raise ValueError(f'Unknown split {split}')
    if count < 1:
        raise ValueError('count must be >= 1')
    base = ensure_dir(Path(out_dir) / split)
    offset = 0 if split == 'train' else TEST_SEED_OFFSET
    rows = []
    for i in range(count):
        seed = stage_seed(root_seed, 'synth', offset + i)
        mural = synth_mural(SyntheticMuralSpec(size=size, seed=seed))
        name = f'{split}_{i:04d}'
        write_image(mural.clean, base / 'clean' / f'{name}.png')
        write_mask(mural.damage, base / 'mask' / f'{name}.png')
        write_image(mural.damaged, base / 'damaged' / f'{name}.png')
        rows.append({'name': name, 'seed': seed, 'tag': mural.tag,
                     'damage_fraction': f'{mural.damage.fraction:.6f}'})
    _write_tsv(base / 'index.tsv', INDEX_COLUMNS, rows)
    _log.info('Synthesized %d %s murals in %s', count, split, base)
    return rows


def read_index(split_dir: 'str|Path') -> 'dict[str, int]':
    """Maps mural names to tags from a split's `index.tsv`."""
    path = Path(split_dir) / 'index.tsv'
    if not path.is_file():
        return {}
    return {row['name']: int(row['tag']) for row in _read_tsv(path)}


# -- cropping ---------------------------------------------------------------

@dataclass(frozen=True)
class CropRecord:
    """One manifest line."""
    source: str
    row: int
    col: int
    scale: int
    status: str
    reason: str = ''

    @property
    def filename(self) -> str:
        return (f'scale{self.scale}/{self.source}'
                f'_r{self.row:04d}_c{self.col:04d}.png')


def crop_image(img: Image,
               patch_size: int,
               overlap: float) -> 'list[tuple[int, int, Image]]':
    """Cuts every planned patch of an image."""
    plan = plan_crops(img.height, img.width, patch_size, overlap)
    return [(r, c, Image(img.data[r:r + patch_size, c:c + patch_size]))
            for r, c in plan.origins]


def crop_directory(input_dir: 'str|Path',
                   out_dir: 'str|Path',
                   scales: 'tuple[int, ...]',
                   overlap: float = 0.7,
                   black_threshold: float = 0.02,
                   black_fraction_max: float = 0.05) -> 'list[CropRecord]':
    """Crops every image of a directory at every scale.

    Each scale is cropped from the full image independently. Rejected
    patches are listed in the manifest but not written.

    Returns:
        The manifest records in (source, scale, row, col) order.

    """
    out = ensure_dir(out_dir)
    records = []
    for path in list_files(input_dir):
        img = read_image(path)
        for scale in scales:
            for row, col, patch in crop_image(img, scale, overlap):
                fraction = invalid_fraction(patch, black_threshold)
                keep = fraction <= black_fraction_max
                record = CropRecord(
                    source=path.stem, row=row, col=col, scale=scale,
                    status='kept' if keep else 'rejected',
                    reason='' if keep else f'black_fraction={fraction:.4f}')
                if keep:
                    write_image(patch, out / record.filename)
                records.append(record)
    rows = [{c: getattr(r, c) for c in MANIFEST_COLUMNS} for r in records]
    _write_tsv(out / 'manifest.tsv', MANIFEST_COLUMNS, rows)
    kept = sum(r.status == 'kept' for r in records)
    _log.info('Cropped %d patches (%d rejected) into %s', kept,
              len(records) - kept, out)
    return records


def read_crop_manifest(crop_dir: 'str|Path') -> 'list[CropRecord]':
    path = Path(crop_dir) / 'manifest.tsv'
    if not path.is_file():
        raise DatasetError(f'No manifest.tsv in {crop_dir}')
    return [CropRecord(source=row['source'], row=int(row['row']),
                       col=int(row['col']), scale=int(row['scale']),
                       status=row['status'], reason=row['reason'] or '')
            for row in _read_tsv(path)]


# -- tensors ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PatchSet:
    """Training samples at one scale as tensors.

    Attributes:
        x0: NxCxSxS clean patches in [-1,1].
        contour: Nx1xSxS guidance masks.
        tag: (N,) style tags, -1 for none.
        threshold: (N,) reward luminance thresholds.

    """
    x0: torch.Tensor
    contour: torch.Tensor
    tag: torch.Tensor
    threshold: torch.Tensor

    def __post_init__(self):
        n = self.x0.shape[0]
        if n == 0:
            raise DatasetError('PatchSet is empty')
        if (self.contour.shape[0], self.tag.shape[0],
                self.threshold.shape[0]) != (n, n, n):
            raise DatasetError('PatchSet fields disagree on sample count')

    def __len__(self) -> int:
        return self.x0.shape[0]

    @property
    def size(self) -> int:
        return self.x0.shape[-1]

    def subset(self, index: torch.Tensor) -> 'PatchSet':
        return PatchSet(self.x0[index], self.contour[index], self.tag[index],
                        self.threshold[index])

    def sample(self, batch_size: int, generator: torch.Generator
               ) -> 'PatchSet':
        """Draws a batch uniformly with replacement."""
        index = torch.randint(0, len(self), (batch_size,),
                              generator=generator)
        return self.subset(index)

    def to(self, dtype: torch.dtype) -> 'PatchSet':
        return PatchSet(self.x0.to(dtype), self.contour.to(dtype), self.tag,
                        self.threshold.to(dtype))

    @classmethod
    def from_images(cls,
                    images: 'list[Image]',
                    contours: 'list[ContourMask]',
                    tags: 'list[int]|None' = None,
                    dtype: torch.dtype = torch.float32) -> 'PatchSet':
        if not images:
            raise DatasetError('No images for PatchSet')
        x0 = np.stack([img.data.transpose(2, 0, 1) for img in images])
        masks = np.stack([m.data[np.newaxis] for m in contours])
        thresholds = [m.threshold if m.threshold is not None else 0.5
                      for m in contours]
        tags = tags if tags is not None else [-1] * len(images)
        return cls(x0=torch.tensor(x0 * 2.0 - 1.0, dtype=dtype),
                   contour=torch.tensor(masks, dtype=dtype),
                   tag=torch.tensor(tags, dtype=torch.long),
                   threshold=torch.tensor(thresholds, dtype=dtype))


def load_patches(crop_dir: 'str|Path',
                 scale: int,
                 seed: int = 0,
                 tags: 'dict[str, int]|None' = None,
                 dtype: torch.dtype = torch.float32) -> PatchSet:
    """Loads the kept patches of one scale with their contour masks.

    Args:
        crop_dir: A directory written by `crop_directory`.
        scale: The patch size to load.
        seed: K-means seed for contour extraction.
        tags: Optional source-name to tag map.
        dtype: Tensor dtype.

    Raises:
        `DatasetError` if no patch of that scale was kept.

    """
    crop_dir = Path(crop_dir)
    records = [r for r in read_crop_manifest(crop_dir)
               if r.scale == scale and r.status == 'kept']
    if not records:
        raise DatasetError(f'No kept patches at scale {scale} in {crop_dir}')
    images, contours, patch_tags = [], [], []
    for record in records:
        img = read_image(crop_dir / record.filename)
        images.append(img)
        contours.append(extract_contour(img, seed=seed,
                                        allow_degenerate=True))
        patch_tags.append((tags or {}).get(record.source, -1))
    _log.info('Loaded %d patches at scale %d', len(images), scale)
    return PatchSet.from_images(images, contours, patch_tags, dtype)
