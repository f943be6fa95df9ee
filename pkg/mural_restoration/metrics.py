"""Quantitative evaluation of restored murals.

* `ssim`: windowed structural similarity on grayscale.
* `ccon`: chi-square distance of per-channel color histograms.
* `tcon`: chi-square distance of local binary pattern histograms.
* `econ`: relative difference of edge-map gradients (lower is better).

CCON and TCON are reported both as chi-square distances of probability
histograms (in [0, 2]) and as similarities `1 / (1 + chi2)` in (0, 1].

Every metric takes an optional HxW mask that restricts the comparison to
the masked (repaired) pixels of both images.

"""
import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

from mural_restoration.contour import ContourMask, read_mask
from mural_restoration.image import Image, luminance, read_image
from mural_restoration.path import atomic_write_text, list_files
from mural_restoration.serialize import to_json

__all__ = ['MetricError', 'Histogram', 'MetricReport', 'ssim', 'ssim_map',
           'chi_square', 'color_histograms', 'ccon', 'lbp_codes',
           'lbp_histogram', 'tcon', 'edge_map', 'econ', 'evaluate_pair',
           'evaluate_files', 'write_report', 'read_report', 'SummaryRow',
           'summarize', 'write_summary', 'REPORT_COLUMNS', 'SUMMARY_COLUMNS',
           'C1', 'C2']

C1 = 0.01 ** 2
C2 = 0.03 ** 2
REPORT_COLUMNS = ('file', 'ssim', 'ccon_chi2', 'ccon_sim', 'tcon_chi2',
                  'tcon_sim', 'econ')
SUMMARY_COLUMNS = ('model', 'condition_guidance', 'SSIM', 'CCON', 'TCON',
                   'ECON')
LBP_BINS = 256
# (row, col) offsets, clockwise from east; bit i is neighbor i
LBP_NEIGHBORS = ((0, 1), (1, 1), (1, 0), (1, -1),
                 (0, -1), (-1, -1), (-1, 0), (-1, 1))

_log = logging.getLogger(__name__)


class MetricError(Exception):
    """A metric that cannot be evaluated on the given inputs."""


@dataclass(frozen=True, eq=False)
class Histogram:
    """Bin counts over `[low, high)` with equal-width bins."""
    counts: np.ndarray = field(repr=False)
    low: float = 0.0
    high: float = 1.0

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.float64)
        if counts.ndim != 1 or counts.size == 0:
            raise MetricError('Histogram counts must be a nonempty vector')
        if not np.all(np.isfinite(counts)) or np.any(counts < 0):
            raise MetricError('Histogram counts must be finite and >= 0')
        object.__setattr__(self, 'counts', counts)

    @property
    def bins(self) -> int:
        return self.counts.size

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    def normalized(self) -> 'Histogram':
        if self.total <= 0:
            raise MetricError('Cannot normalize an empty histogram')
        return Histogram(self.counts / self.total, self.low, self.high)


def _gray(img: 'Image|np.ndarray') -> np.ndarray:
    data = img.data if isinstance(img, Image) else np.asarray(img, float)
    if data.ndim == 3:
        data = luminance(data)
    return data.astype(np.float64)


def _region(mask: 'ContourMask|np.ndarray|None',
            shape: 'tuple[int, int]') -> 'np.ndarray|None':
    if mask is None:
        return None
    region = mask.as_bool() if isinstance(mask, ContourMask) else (
        np.asarray(mask).astype(bool))
    if region.ndim == 3:
        region = region[:, :, 0]
    if region.shape != shape:
        raise MetricError(f'Mask shape {region.shape} does not match image'
                          f' {shape}')
    if not region.any():
        raise MetricError('Empty region mask')
    return region


def _same_shape(x, y) -> None:
    if x.shape != y.shape:
        raise MetricError(f'Shape mismatch: {x.shape} vs {y.shape}')


# -- SSIM -------------------------------------------------------------------

def _gaussian_window(window: int, sigma: float) -> np.ndarray:
    kernel = cv2.getGaussianKernel(window, sigma, cv2.CV_64F)
    return kernel @ kernel.T


def ssim_map(x: 'Image|np.ndarray',
             y: 'Image|np.ndarray',
             window: int = 11,
             sigma: float = 1.5) -> np.ndarray:
    """Local SSIM of every fully inside window, indexed by window center.

    Returns:
        An (H - window + 1) x (W - window + 1) array.

    Raises:
        `MetricError` on a shape mismatch or an image smaller than the
            window.

    """
    a, b = _gray(x), _gray(y)
    _same_shape(a, b)
    if window < 1 or window % 2 == 0:
        raise MetricError(f'Window must be odd and >= 1, got {window}')
    if min(a.shape) < window:
        raise MetricError(f'Image {a.shape} is smaller than the'
                          f' {window}x{window} window')
    kernel = _gaussian_window(window, sigma)
    r = window // 2
    height, width = a.shape

    def local_mean(plane: np.ndarray) -> np.ndarray:
        filtered = cv2.filter2D(plane, cv2.CV_64F, kernel,
                                borderType=cv2.BORDER_REFLECT_101)
        return filtered[r:height - r, r:width - r]

    mu_a, mu_b = local_mean(a), local_mean(b)
    var_a = local_mean(a * a) - mu_a * mu_a
    var_b = local_mean(b * b) - mu_b * mu_b
    cov = local_mean(a * b) - mu_a * mu_b
    numerator = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    denominator = (mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2)
    return numerator / denominator


def ssim(x: 'Image|np.ndarray',
         y: 'Image|np.ndarray',
         window: int = 11,
         sigma: float = 1.5,
         mask: 'ContourMask|np.ndarray|None' = None) -> float:
    """Mean structural similarity of two images in [0,1].

    RGB inputs are converted to grayscale first. With a mask, each window
    counts with the Gaussian-weighted share of masked pixels it covers.

    Args:
        x: First image.
        y: Second image.
        window: Odd Gaussian window size.
        sigma: Gaussian standard deviation.
        mask: Optional HxW region of interest.

    Raises:
        `MetricError` on a shape mismatch, an image smaller than the
            window, or a mask no window touches.

    """
    local = ssim_map(x, y, window, sigma)
    region = _region(mask, _gray(x).shape)
    if region is None:
        return float(local.mean())
    r = window // 2
    height, width = region.shape
    coverage = cv2.filter2D(region.astype(np.float64), cv2.CV_64F,
                            _gaussian_window(window, sigma),
                            borderType=cv2.BORDER_CONSTANT)
    weights = np.clip(coverage[r:height - r, r:width - r], 0.0, None)
    if weights.sum() <= 0:
        raise MetricError('No SSIM window overlaps the mask')
    return float((local * weights).sum() / weights.sum())


# -- histograms -------------------------------------------------------------

def chi_square(h1: Histogram, h2: Histogram) -> float:
    """Sum of (h1 - h2)^2 / (h1 + h2) over bins with a nonzero sum.

    Raises:
        `MetricError` if the binning differs.

    """
    if (h1.bins, h1.low, h1.high) != (h2.bins, h2.low, h2.high):
        raise MetricError(f'Binning mismatch: {h1.bins} bins over'
                          f' [{h1.low}, {h1.high}) vs {h2.bins} bins over'
                          f' [{h2.low}, {h2.high})')
    total = h1.counts + h2.counts
    used = total > 0
    diff = h1.counts[used] - h2.counts[used]
    return float(np.sum(diff * diff / total[used]))


def _similarity(chi2: float) -> float:
    return 1.0 / (1.0 + chi2)


def color_histograms(img: 'Image|np.ndarray',
                     bins: int = 32,
                     mask: 'ContourMask|np.ndarray|None' = None
                     ) -> 'list[Histogram]':
    """One histogram over [0,1] per channel of the (masked) pixels."""
    data = img.data if isinstance(img, Image) else np.asarray(img, float)
    if data.ndim == 2:
        data = data[:, :, np.newaxis]
    region = _region(mask, data.shape[:2])
    pixels = data.reshape(-1, data.shape[2]) if region is None else (
        data[region])
    if len(pixels) == 0:
        raise MetricError('Empty region')
    return [Histogram(np.histogram(pixels[:, c], bins=bins,
                                   range=(0.0, 1.0))[0])
            for c in range(data.shape[2])]


def ccon(repaired: 'Image|np.ndarray',
         reference: 'Image|np.ndarray',
         bins: int = 32,
         mask: 'ContourMask|np.ndarray|None' = None
         ) -> 'tuple[float, float]':
    """Color consistency as (chi2, similarity).

    The chi-square distance of the normalized histograms is averaged over
    channels.

    """
    a = repaired.data if isinstance(repaired, Image) else repaired
    b = reference.data if isinstance(reference, Image) else reference
    _same_shape(np.asarray(a), np.asarray(b))
    chi2 = float(np.mean([
        chi_square(h1.normalized(), h2.normalized())
        for h1, h2 in zip(color_histograms(repaired, bins, mask),
                          color_histograms(reference, bins, mask))]))
    return chi2, _similarity(chi2)


# -- texture ----------------------------------------------------------------

def lbp_codes(img: 'Image|np.ndarray') -> np.ndarray:
    """8-neighbor radius-1 LBP codes of the interior pixels.

    A neighbor greater than or equal to the center sets its bit.

    Returns:
        An (H-2) x (W-2) uint8 array.

    Raises:
        `MetricError` if the image is smaller than 3x3.

    """
    gray = _gray(img)
    height, width = gray.shape
    if height < 3 or width < 3:
        raise MetricError(f'LBP needs at least 3x3 pixels, got'
                          f' {height}x{width}')
    center = gray[1:-1, 1:-1]
    codes = np.zeros(center.shape, dtype=np.uint16)
    for bit, (dr, dc) in enumerate(LBP_NEIGHBORS):
        neighbor = gray[1 + dr:height - 1 + dr, 1 + dc:width - 1 + dc]
        codes |= (neighbor >= center).astype(np.uint16) << bit
    return codes.astype(np.uint8)


def lbp_histogram(img: 'Image|np.ndarray',
                  mask: 'ContourMask|np.ndarray|None' = None) -> Histogram:
    """256-bin histogram of LBP codes, over masked centers if given."""
    codes = lbp_codes(img)
    region = _region(mask, _gray(img).shape)
    if region is not None:
        codes = codes[region[1:-1, 1:-1]]
        if codes.size == 0:
            raise MetricError('Mask covers no interior pixel')
    counts = np.bincount(codes.ravel(), minlength=LBP_BINS)
    return Histogram(counts, 0.0, float(LBP_BINS))


def tcon(repaired: 'Image|np.ndarray',
         reference: 'Image|np.ndarray',
         mask: 'ContourMask|np.ndarray|None' = None
         ) -> 'tuple[float, float]':
    """Texture consistency as (chi2, similarity) of LBP histograms."""
    _same_shape(_gray(repaired), _gray(reference))
    chi2 = chi_square(lbp_histogram(repaired, mask).normalized(),
                      lbp_histogram(reference, mask).normalized())
    return chi2, _similarity(chi2)


# -- edges ------------------------------------------------------------------

def _sobel(plane: np.ndarray) -> 'tuple[np.ndarray, np.ndarray]':
    return ndimage.sobel(plane, axis=0), ndimage.sobel(plane, axis=1)


def edge_map(img: 'Image|np.ndarray') -> np.ndarray:
    """Sobel gradient magnitude of the grayscale image."""
    gy, gx = _sobel(_gray(img))
    return np.hypot(gy, gx)


def econ(repaired: 'Image|np.ndarray',
         original: 'Image|np.ndarray',
         mode: str = 'gradient',
         mask: 'ContourMask|np.ndarray|None' = None) -> float:
    """Edge consistency, 0 for identical edges.

    `gradient` compares Sobel gradients of the two edge maps,
    `edge` compares the edge maps themselves.

    Raises:
        `MetricError` on a shape mismatch, an unknown mode or a flat
            original.

    """
    e_rep, e_orig = edge_map(repaired), edge_map(original)
    _same_shape(e_rep, e_orig)
    if mode == 'gradient':
        ry, rx = _sobel(e_rep)
        oy, ox = _sobel(e_orig)
        difference = np.hypot(ry - oy, rx - ox)
        reference = np.hypot(oy, ox)
    elif mode == 'edge':
        difference = np.abs(e_rep - e_orig)
        reference = np.abs(e_orig)
    else:
        raise MetricError(f'Unknown ECON mode {mode}')
    region = _region(mask, e_orig.shape)
    if region is not None:
        difference, reference = difference[region], reference[region]
    denominator = float(reference.sum())
    if denominator == 0:
        raise MetricError('ECON is undefined for an original without edges')
    return float(difference.sum()) / denominator


# -- reports ----------------------------------------------------------------

@dataclass(frozen=True)
class MetricReport:
    """All metrics of one (repaired, reference) pair."""
    ssim: float
    ccon_chi2: float
    ccon_similarity: float
    tcon_chi2: float
    tcon_similarity: float
    econ: float
    masked: bool = False
    window: int = 11
    sigma: float = 1.5
    bins: int = 32
    econ_mode: str = 'gradient'

    def __post_init__(self):
        for name in ('ssim', 'ccon_chi2', 'ccon_similarity', 'tcon_chi2',
                     'tcon_similarity', 'econ'):
            if not np.isfinite(getattr(self, name)):
                raise MetricError(f'{name} is not finite')

    def row(self, file: str = '') -> dict:
        return {'file': file, 'ssim': self.ssim,
                'ccon_chi2': self.ccon_chi2,
                'ccon_sim': self.ccon_similarity,
                'tcon_chi2': self.tcon_chi2,
                'tcon_sim': self.tcon_similarity,
                'econ': self.econ}


def evaluate_pair(repaired: Image,
                  reference: Image,
                  mask: 'ContourMask|np.ndarray|None' = None,
                  window: int = 11,
                  sigma: float = 1.5,
                  bins: int = 32,
                  econ_mode: str = 'gradient') -> MetricReport:
    """Evaluates every metric on one pair."""
    if repaired.shape != reference.shape:
        raise MetricError(f'Shape mismatch: {repaired.shape} vs'
                          f' {reference.shape}')
    ccon_chi2, ccon_sim = ccon(repaired, reference, bins, mask)
    tcon_chi2, tcon_sim = tcon(repaired, reference, mask)
    return MetricReport(
        ssim=ssim(repaired, reference, window, sigma, mask),
        ccon_chi2=ccon_chi2, ccon_similarity=ccon_sim,
        tcon_chi2=tcon_chi2, tcon_similarity=tcon_sim,
        econ=econ(repaired, reference, econ_mode, mask),
        masked=mask is not None, window=window, sigma=sigma, bins=bins,
        econ_mode=econ_mode)


def _format(value) -> str:
    return f'{value:.10g}' if isinstance(value, float) else str(value)


def _csv_text(columns: 'tuple[str, ...]', rows: 'list[dict]') -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=columns, lineterminator='\n')
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _format(row[k]) for k in columns})
    return buffer.getvalue()


def write_report(results: 'list[tuple[str, MetricReport]]',
                 out: 'str|Path') -> None:
    """Writes per-file metrics as CSV or JSON by the file suffix.

    Raises:
        `MetricError` for a suffix other than `.csv` or `.json`.

    """
    out = Path(out)
    rows = [report.row(name) for name, report in results]
    if out.suffix.lower() == '.csv':
        atomic_write_text(out, _csv_text(REPORT_COLUMNS, rows))
    elif out.suffix.lower() == '.json':
        parameters = None
        if results:
            first = results[0][1]
            parameters = {'masked': first.masked, 'window': first.window,
                          'sigma': first.sigma, 'bins': first.bins,
                          'econ_mode': first.econ_mode}
        payload = {'columns': list(REPORT_COLUMNS), 'rows': rows,
                   'parameters': parameters}
        atomic_write_text(out, to_json(payload) + '\n')
    else:
        raise MetricError(f'Report must be .csv or .json, got {out.name}')


def _pair_files(repaired: Path, reference: Path, mask: 'Path|None'
                ) -> 'list[tuple[Path, Path, Path|None]]':
    if repaired.is_file():
        if not reference.is_file():
            raise MetricError(f'{reference} must be a file when the'
                              f' repaired input is a file')
        if mask is not None and not mask.is_file():
            raise MetricError(f'{mask} must be a file')
        return [(repaired, reference, mask)]
    references = {p.stem: p for p in list_files(reference)}
    masks = {p.stem: p for p in list_files(mask)} if mask else {}
    pairs = []
    for path in list_files(repaired):
        if path.stem not in references:
            raise MetricError(f'No reference for {path.name} in {reference}')
        if mask is not None and path.stem not in masks:
            raise MetricError(f'No mask for {path.name} in {mask}')
        pairs.append((path, references[path.stem], masks.get(path.stem)))
    if not pairs:
        raise MetricError(f'No images in {repaired}')
    return pairs


def evaluate_files(repaired: 'str|Path',
                   reference: 'str|Path',
                   mask: 'str|Path|None' = None,
                   out: 'str|Path|None' = None,
                   **kwargs) -> 'list[tuple[str, MetricReport]]':
    """Evaluates a file pair or every same-named pair of two directories.

    Args:
        repaired: A repaired image or a directory of them.
        reference: The matching reference image or directory.
        mask: Optional mask file or directory with the same names.
        out: Optional `.csv` or `.json` report path.
        **kwargs: `window`, `sigma`, `bins`, `econ_mode` for
            `evaluate_pair`.

    Returns:
        (file name, report) in sorted file order.

    """
    results = []
    for rep_path, ref_path, mask_path in _pair_files(
            Path(repaired), Path(reference), Path(mask) if mask else None):
        report = evaluate_pair(read_image(rep_path), read_image(ref_path),
                               read_mask(mask_path) if mask_path else None,
                               **kwargs)
        results.append((rep_path.name, report))
        _log.debug('%s: ssim=%.4f econ=%.4f', rep_path.name, report.ssim,
                   report.econ)
    if out is not None:
        write_report(results, out)
    return results


@dataclass(frozen=True)
class SummaryRow:
    """Mean metrics of one restoration method over a test set."""
    model: str
    condition_guidance: str
    ssim: float
    ccon: float
    tcon: float
    econ: float

    def row(self) -> dict:
        return {'model': self.model,
                'condition_guidance': self.condition_guidance,
                'SSIM': self.ssim, 'CCON': self.ccon, 'TCON': self.tcon,
                'ECON': self.econ}


def summarize(model: str,
              condition_guidance: 'bool|str',
              reports: 'list[MetricReport]') -> SummaryRow:
    """Averages reports; CCON and TCON are the mean similarities."""
    if not reports:
        raise MetricError(f'No reports to summarize for {model}')
    if isinstance(condition_guidance, bool):
        condition_guidance = 'on' if condition_guidance else 'off'
    return SummaryRow(
        model=model, condition_guidance=condition_guidance,
        ssim=float(np.mean([r.ssim for r in reports])),
        ccon=float(np.mean([r.ccon_similarity for r in reports])),
        tcon=float(np.mean([r.tcon_similarity for r in reports])),
        econ=float(np.mean([r.econ for r in reports])))


def write_summary(rows: 'list[SummaryRow]', csv_path: 'str|Path',
                  json_path: 'str|Path|None' = None) -> None:
    """Writes the aggregate table as CSV, and JSON if a path is given."""
    table = [r.row() for r in rows]
    atomic_write_text(csv_path, _csv_text(SUMMARY_COLUMNS, table))
    if json_path is not None:
        payload = {'columns': list(SUMMARY_COLUMNS), 'rows': table}
        atomic_write_text(json_path, json.dumps(payload, indent=2) + '\n')


def read_report(path: 'str|Path') -> 'list[tuple[str, MetricReport]]':
    """Reads the rows of a JSON report written by `write_report`."""
    with open(path) as file:
        payload = json.load(file)
    parameters = payload.get('parameters') or {}
    return [(row['file'], MetricReport(
        ssim=row['ssim'], ccon_chi2=row['ccon_chi2'],
        ccon_similarity=row['ccon_sim'], tcon_chi2=row['tcon_chi2'],
        tcon_similarity=row['tcon_sim'], econ=row['econ'], **parameters))
        for row in payload['rows']]
