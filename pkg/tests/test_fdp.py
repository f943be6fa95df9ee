import numpy as np
import pytest

from mural_restoration.fdp import (FilterError, RadialFilter, apply_filter,
                                   band_centers, fft2, fit_filter, ifft2,
                                   load_filter, save_filter)
from mural_restoration.image import Image


def direct_dft(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    u = np.arange(h)[:, None]
    v = np.arange(w)[:, None]
    rows = np.exp(-2j * np.pi * u * np.arange(h) / h)
    cols = np.exp(-2j * np.pi * v * np.arange(w) / w)
    return rows @ plane @ cols.T


def test_fft_constant_and_impulse():
    spectrum = fft2(np.full((4, 6), 0.5))
    assert spectrum[0, 0] == pytest.approx(0.5 * 24)
    rest = spectrum.copy()
    rest[0, 0] = 0
    assert np.allclose(rest, 0)
    impulse = np.zeros((5, 5))
    impulse[2, 3] = 1
    assert np.allclose(np.abs(fft2(impulse)), 1)


def test_fft_matches_direct_dft(rng):
    plane = rng.uniform(size=(8, 8))
    assert np.allclose(fft2(plane), direct_dft(plane), atol=1e-10, rtol=0)


def test_fft_round_trip_and_parseval(rng):
    plane = rng.standard_normal((7, 10))
    spectrum = fft2(plane)
    assert np.allclose(ifft2(spectrum), plane, atol=1e-10, rtol=0)
    assert np.sum(np.abs(spectrum) ** 2) / plane.size == pytest.approx(
        np.sum(plane ** 2), abs=1e-8)


def test_fft_rejects_non_finite():
    with pytest.raises(FilterError):
        fft2(np.array([[0.0, np.nan]]))
    with pytest.raises(FilterError):
        ifft2(np.array([[np.inf]]))


def test_filter_validation():
    with pytest.raises(FilterError):
        RadialFilter(())
    with pytest.raises(FilterError):
        RadialFilter((1.0, -0.5))
    with pytest.raises(FilterError):
        RadialFilter((1.0, float('nan')))
    assert RadialFilter.identity(5).gains == (1.0,) * 5


def test_identity_filter(rng):
    img = Image(rng.uniform(size=(9, 12, 3)))
    out = apply_filter(img, RadialFilter.identity())
    assert np.allclose(out.data, img.data, atol=1e-6)


def test_dc_only_passband(rng):
    data = rng.uniform(size=(8, 8, 3))
    gains = [0.0] * 16
    gains[0] = 1.0
    out = apply_filter(Image(data), RadialFilter(tuple(gains)))
    means = data.mean(axis=(0, 1))
    assert np.allclose(out.data, np.broadcast_to(means, data.shape),
                       atol=1e-10)


def test_linearity(rng):
    filt = RadialFilter((1.3, 0.2, 2.0, 0.7))
    x = rng.uniform(size=(8, 10, 1))
    y = rng.uniform(size=(8, 10, 1))
    combined = apply_filter(2 * x - 0.5 * y, filt, clamp=False)
    separate = (2 * apply_filter(x, filt, clamp=False) -
                0.5 * apply_filter(y, filt, clamp=False))
    assert np.allclose(combined, separate, atol=1e-8, rtol=0)


def test_high_band_boost_sharpens_edge():
    step = np.where(np.arange(16) >= 8, 0.75, 0.25)
    row = 0.25 * np.roll(step, 1) + 0.5 * step + 0.25 * np.roll(step, -1)
    data = np.tile(row, (16, 1))[:, :, np.newaxis]
    boost = RadialFilter((1.0, 1.0, 1.5, 2.0, 2.0, 2.0))
    out = apply_filter(data, boost, clamp=False)
    before = np.abs(np.diff(data[8, :, 0]))
    after = np.abs(np.diff(out[8, :, 0]))
    assert after[7] > before[7]


def test_fit_identity_optimum(rng):
    img = rng.uniform(size=(8, 8, 3))
    filt = fit_filter([(img, img)], bands=6)
    assert np.allclose(filt.gains, 1, atol=1e-3)


def test_fit_recovers_known_filter(rng):
    known = RadialFilter((1.0, 1.0, 2.0, 1.0, 1.0, 1.0, 1.0, 1.0))
    pairs = []
    for _ in range(2):
        generated = rng.uniform(size=(16, 16, 3))
        pairs.append((generated, apply_filter(generated, known,
                                              clamp=False)))
    trace = []
    filt = fit_filter(pairs, bands=8, steps=50, trace=trace)
    assert filt.gains[2] == pytest.approx(2.0, rel=0.05)
    assert np.allclose(filt.gains, known.gains, rtol=0.05)
    assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))
    assert trace[-1] < 1e-10


def test_fit_single_band_closed_form(rng):
    generated = rng.uniform(size=(6, 6, 3))
    reference = np.clip(0.8 * generated + rng.normal(0, 0.05, (6, 6, 3)),
                        0, 1)
    filt = fit_filter([(generated, reference)], bands=1)
    expected = np.sum(generated * reference) / np.sum(generated ** 2)
    assert filt.gains[0] == pytest.approx(expected, rel=1e-9)


def test_fit_errors(rng):
    with pytest.raises(FilterError):
        fit_filter([])
    with pytest.raises(FilterError):
        fit_filter([(rng.uniform(size=(4, 4, 1)),
                     rng.uniform(size=(4, 5, 1)))])


def test_band_centers():
    centers = band_centers(4)
    assert centers[0] == pytest.approx(np.sqrt(2) / 2 / 8)
    assert np.allclose(np.diff(centers), np.sqrt(2) / 2 / 4)


def test_filter_file(tmp_path):
    filt = RadialFilter((1.0, 0.25, 1.0 / 3))
    path = tmp_path / 'filter.txt'
    save_filter(filt, path)
    assert path.read_text().startswith('#')
    assert load_filter(path) == filt
    path.write_text('1.0\nabc\n')
    with pytest.raises(FilterError, match=':2:'):
        load_filter(path)
    path.write_text('# nothing\n')
    with pytest.raises(FilterError):
        load_filter(path)
