import itertools

import numpy as np
import pytest

from mural_restoration.contour import (ContourMask, DegenerateImageError,
                                       KMeansError, extract_contour, kmeans,
                                       read_mask, write_mask)
from mural_restoration.image import Image, ImageError


def two_tone(strokes: np.ndarray, ink: float = 0.1,
             ground: float = 0.9) -> Image:
    data = np.where(strokes[:, :, np.newaxis], ink, ground)
    return Image(np.repeat(data, 3, axis=2))


def stroke_pattern() -> np.ndarray:
    strokes = np.zeros((8, 8), dtype=bool)
    strokes[2, 1:7] = True
    strokes[1:6, 4] = True
    return strokes


def test_kmeans_separable():
    result = kmeans([0, 0, 0, 10, 10, 10], 2, seed=1)
    assert sorted(result.centroids[:, 0].tolist()) == [0.0, 10.0]
    assert result.objective == 0.0
    assert result.one_hot().sum(axis=1).tolist() == [1] * 6


def test_kmeans_three_points():
    for seed in range(5):
        result = kmeans([0, 2, 10], 2, seed=seed)
        assert sorted(result.centroids[:, 0].tolist()) == [1.0, 10.0]
        assert result.objective == pytest.approx(2.0)
        assert result.assignments[0] == result.assignments[1]
        assert result.assignments[0] != result.assignments[2]


def test_kmeans_single_cluster():
    rng = np.random.default_rng(3)
    points = rng.standard_normal((50, 3))
    result = kmeans(points, 1)
    assert np.allclose(result.centroids[0], points.mean(axis=0))
    assert result.objective == pytest.approx(points.var(axis=0).sum() * 50)


def test_kmeans_objective_nonincreasing():
    rng = np.random.default_rng(4)
    points = np.concatenate([rng.normal(0, 1, (40, 2)),
                             rng.normal(3, 1, (40, 2)),
                             rng.normal((0, 4), 1, (40, 2))])
    result = kmeans(points, 3, seed=2)
    assert np.all(np.diff(result.trace) <= 1e-9)
    for j in range(3):
        members = points[result.assignments == j]
        assert np.allclose(result.centroids[j], members.mean(axis=0))


def test_kmeans_permutation_invariant():
    rng = np.random.default_rng(5)
    points = np.concatenate([rng.normal(0, 0.3, (20, 3)),
                             rng.normal(2, 0.3, (10, 3))])
    order = rng.permutation(len(points))
    a = kmeans(points, 2, seed=9)
    b = kmeans(points[order], 2, seed=9)
    assert a.objective == pytest.approx(b.objective)
    same = a.assignments[order] == a.assignments[order][0]
    assert np.array_equal(same, b.assignments == b.assignments[0])


def _best_split(values: 'tuple[float, ...]') -> 'tuple[float, list]':
    points = np.asarray(values)
    best, groups = np.inf, []
    for labels in itertools.product((0, 1), repeat=len(points)):
        labels = np.asarray(labels)
        if labels.min() == labels.max():
            continue
        cost = sum(float(((points[labels == j] -
                           points[labels == j].mean()) ** 2).sum())
                   for j in (0, 1))
        if cost < best - 1e-15:
            best, groups = cost, [labels]
        elif abs(cost - best) <= 1e-15:
            groups.append(labels)
    return best, groups


def _well_separated(values, labels) -> bool:
    points = np.asarray(values)
    low, high = sorted((points[labels == 0], points[labels == 1]),
                       key=np.min)
    gap = high.min() - low.max()
    return gap > np.ptp(low) and gap > np.ptp(high)


def test_kmeans_matches_exhaustive_split():
    grid = (0.0, 0.1, 0.25, 0.5, 0.6, 1.0)
    checked = 0
    for n in (3, 4):
        for values in itertools.combinations_with_replacement(grid, n):
            if len(set(values)) < 2:
                continue
            optimum, groups = _best_split(values)
            # two labelings of one partition are the only optimum
            if len(groups) != 2 or not _well_separated(values, groups[0]):
                continue
            for seed in range(3):
                result = kmeans(values, 2, seed=seed)
                assert abs(result.objective - optimum) <= 1e-12
            checked += 1
    assert checked >= 20


def test_kmeans_zero_tolerance_stops_on_convergence():
    result = kmeans([0, 2, 10], 2, seed=0, tol=0.0, max_iter=50)
    assert result.iterations < 50
    assert result.objective == pytest.approx(2.0)
    exact = kmeans([0, 0, 0, 10, 10, 10], 2, tol=0.0, max_iter=50)
    assert exact.iterations == 1


def test_kmeans_errors():
    with pytest.raises(KMeansError):
        kmeans([], 1)
    with pytest.raises(KMeansError):
        kmeans([1, 1, 1], 2)
    with pytest.raises(ValueError):
        kmeans([1, 2], 0)
    with pytest.raises(ValueError):
        kmeans([1, 2], 1, max_iter=0)


def test_contour_two_tone():
    strokes = stroke_pattern()
    mask = extract_contour(two_tone(strokes), seed=0)
    assert np.array_equal(mask.as_bool(), strokes)
    assert mask.threshold == pytest.approx(0.5)


def test_contour_inverted_marks_dark_ground():
    strokes = stroke_pattern()
    mask = extract_contour(two_tone(strokes, ink=0.9, ground=0.1))
    assert np.array_equal(mask.as_bool(), ~strokes)
    flipped = extract_contour(two_tone(strokes, ink=0.9, ground=0.1),
                              invert=True)
    assert np.array_equal(flipped.as_bool(), strokes)


def test_contour_noisy_small_set():
    rng = np.random.default_rng(11)
    strokes = np.zeros((4, 4), dtype=bool)
    strokes[0, 1] = strokes[2, 2] = strokes[3, 0] = True
    data = np.where(strokes, 0.2, 0.8) + rng.uniform(-0.02, 0.02, (4, 4))
    mask = extract_contour(Image(data), seed=3)
    assert np.array_equal(mask.as_bool(), strokes)


def test_contour_deterministic():
    rng = np.random.default_rng(2)
    img = Image(rng.uniform(size=(12, 12, 3)))
    a = extract_contour(img, seed=5)
    b = extract_contour(img, seed=5)
    assert np.array_equal(a.data, b.data)


def test_contour_degenerate():
    img = Image(np.full((4, 4, 3), 0.3))
    with pytest.raises(DegenerateImageError):
        extract_contour(img)
    mask = extract_contour(img, allow_degenerate=True)
    assert mask.data.sum() == 0
    assert mask.threshold is None


def test_contour_region():
    strokes = stroke_pattern()
    region = np.zeros((8, 8), dtype=bool)
    region[:4] = True
    mask = extract_contour(two_tone(strokes), region=region)
    assert np.array_equal(mask.as_bool(), strokes & region)
    with pytest.raises(ImageError):
        extract_contour(two_tone(strokes), region=region[:4])


def test_mask_validation():
    with pytest.raises(ImageError):
        ContourMask(np.array([[0, 2]]))
    with pytest.raises(ImageError):
        ContourMask(np.zeros((0, 0)))
    mask = ContourMask(np.array([[0, 1], [1, 1]]))
    assert mask.fraction == 0.75


def test_mask_file_round_trip(tmp_path):
    mask = ContourMask(stroke_pattern().astype(np.uint8))
    target = tmp_path / 'mask.png'
    write_mask(mask, target)
    assert np.array_equal(read_mask(target).data, mask.data)
