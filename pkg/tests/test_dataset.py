import numpy as np
import pytest
import torch

from mural_restoration.contour import extract_contour
from mural_restoration.dataset import (DatasetError, PatchSet,
                                       SyntheticMuralSpec, crop_directory,
                                       crop_image, filter_invalid,
                                       load_patches, plan_crops,
                                       read_crop_manifest, read_index,
                                       synth_dataset, synth_mural)
from mural_restoration.image import Image, read_image, write_image


def test_plan_crops_large_grid():
    plan = plan_crops(1024, 1024, 256, 0.7)
    assert plan.stride == 76
    assert plan.col_origins[:3] == (0, 76, 152)
    assert plan.col_origins[-2:] == (760, 768)
    assert len(plan.col_origins) == 12
    assert len(plan) == 144


def test_plan_crops_edge_cases():
    plan = plan_crops(64, 96, 32, 0.0)
    assert plan.stride == 32
    assert plan.row_origins == (0, 32)
    assert plan.col_origins == (0, 32, 64)
    assert plan_crops(40, 40, 40, 0.7).origins == [(0, 0)]
    with pytest.raises(DatasetError):
        plan_crops(30, 40, 32, 0.5)
    with pytest.raises(ValueError):
        plan_crops(64, 64, 32, 1.0)
    with pytest.raises(DatasetError):
        plan_crops(64, 64, 2, 0.9)


@pytest.mark.parametrize('height,width,size,overlap', [
    (50, 37, 16, 0.7), (33, 33, 8, 0.25), (20, 90, 20, 0.5)])
def test_plan_crops_covers_every_pixel(height, width, size, overlap):
    covered = np.zeros((height, width), dtype=bool)
    for r, c in plan_crops(height, width, size, overlap).origins:
        covered[r:r + size, c:c + size] = True
    assert covered.all()


def test_filter_invalid():
    assert not filter_invalid(Image(np.zeros((10, 10, 3))))
    assert filter_invalid(Image(np.full((10, 10, 3), 0.5)))
    boundary = np.full((10, 10, 3), 0.5)
    boundary.reshape(-1, 3)[:5] = 0.0
    assert filter_invalid(Image(boundary))
    boundary.reshape(-1, 3)[5] = 0.0
    assert not filter_invalid(Image(boundary))


def test_synth_mural_deterministic():
    a = synth_mural(SyntheticMuralSpec(size=48, seed=5))
    b = synth_mural(SyntheticMuralSpec(size=48, seed=5))
    assert np.array_equal(a.clean.data, b.clean.data)
    assert np.array_equal(a.damage.data, b.damage.data)
    assert np.array_equal(a.damaged.data, b.damaged.data)
    c = synth_mural(SyntheticMuralSpec(size=48, seed=6))
    assert not np.array_equal(a.clean.data, c.clean.data)


@pytest.mark.parametrize('seed', range(5))
def test_synth_mural_damage_fraction(seed):
    mural = synth_mural(SyntheticMuralSpec(size=48, seed=seed))
    assert 0.2 <= mural.damage.fraction <= 0.6
    keep = ~mural.damage.as_bool()
    assert np.array_equal(mural.damaged.data[keep], mural.clean.data[keep])
    assert filter_invalid(mural.clean)


@pytest.mark.parametrize('seed', [0, 1, 2])
def test_residue_recovered_from_damage(seed):
    mural = synth_mural(SyntheticMuralSpec(size=64, seed=seed))
    hole = mural.damage.as_bool()
    residue = hole & mural.strokes
    assert residue.sum() > 0
    found = extract_contour(mural.damaged, region=hole).as_bool()
    iou = (found & residue).sum() / (found | residue).sum()
    assert iou >= 0.7


def test_synth_spec_validation():
    with pytest.raises(ValueError):
        SyntheticMuralSpec(size=4)
    with pytest.raises(ValueError):
        SyntheticMuralSpec(damage_fraction=(0.5, 0.3))
    with pytest.raises(ValueError):
        SyntheticMuralSpec(palette=())


def test_synth_dataset(tmp_path):
    rows = synth_dataset(tmp_path, 2, 9, 'train', 32)
    assert [r['name'] for r in rows] == ['train_0000', 'train_0001']
    for folder in ('clean', 'mask', 'damaged'):
        assert (tmp_path / 'train' / folder / 'train_0001.png').is_file()
    tags = read_index(tmp_path / 'train')
    assert set(tags) == {'train_0000', 'train_0001'}
    test_rows = synth_dataset(tmp_path, 1, 9, 'test', 32)
    assert test_rows[0]['seed'] not in {r['seed'] for r in rows}
    again = tmp_path / 'again'
    synth_dataset(again, 2, 9, 'train', 32)
    assert ((again / 'train' / 'clean' / 'train_0000.png').read_bytes() ==
            (tmp_path / 'train' / 'clean' / 'train_0000.png').read_bytes())
    assert read_index(tmp_path / 'missing') == {}
    with pytest.raises(ValueError):
        synth_dataset(tmp_path, 0, 9)
    with pytest.raises(ValueError):
        synth_dataset(tmp_path, 1, 9, 'val')


def test_crop_image():
    img = Image(np.random.default_rng(0).uniform(size=(12, 12, 3)))
    patches = crop_image(img, 8, 0.5)
    assert [(r, c) for r, c, _ in patches] == [(0, 0), (0, 4), (4, 0),
                                               (4, 4)]
    assert np.array_equal(patches[3][2].data, img.data[4:12, 4:12])


def test_crop_directory(tmp_path):
    source = tmp_path / 'clean'
    good = np.full((16, 16, 3), 0.6)
    good[4:6, :] = 0.2
    write_image(Image(good), source / 'good.png')
    black = np.full((16, 16, 3), 0.6)
    black[:, :8] = 0.0
    write_image(Image(black), source / 'half_black.png')
    records = crop_directory(source, tmp_path / 'crops', (8, 16), 0.5)
    kept = [r for r in records if r.status == 'kept']
    rejected = [r for r in records if r.status == 'rejected']
    assert len(records) == 2 * (9 + 1)
    assert all(r.source == 'half_black' for r in rejected)
    assert all(r.reason.startswith('black_fraction=') for r in rejected)
    for record in kept:
        assert (tmp_path / 'crops' / record.filename).is_file()
    for record in rejected:
        assert not (tmp_path / 'crops' / record.filename).exists()
    assert read_crop_manifest(tmp_path / 'crops') == records
    patch = read_image(tmp_path / 'crops' / 'scale8' /
                       'good_r0004_c0000.png')
    assert np.allclose(patch.data, good[4:12, 0:8], atol=1 / 255)


def test_load_patches(tmp_path):
    source = tmp_path / 'clean'
    for i in range(2):
        data = np.full((16, 16, 3), 0.7)
        data[:, 3 + i:6 + i] = 0.1
        write_image(Image(data), source / f'm{i}.png')
    crop_directory(source, tmp_path / 'crops', (8, 16), 0.5)
    patches = load_patches(tmp_path / 'crops', 16, tags={'m1': 2},
                           dtype=torch.float64)
    assert len(patches) == 2
    assert patches.size == 16
    assert patches.tag.tolist() == [-1, 2]
    assert float(patches.x0.min()) >= -1 and float(patches.x0.max()) <= 1
    assert patches.contour[0, 0, 0, 4] == 1
    assert patches.contour[0, 0, 0, 10] == 0
    with pytest.raises(DatasetError):
        load_patches(tmp_path / 'crops', 32)
    with pytest.raises(DatasetError):
        read_crop_manifest(tmp_path)


def test_patch_set():
    x0 = torch.zeros(3, 1, 4, 4)
    with pytest.raises(DatasetError):
        PatchSet(x0, torch.zeros(2, 1, 4, 4), torch.zeros(3),
                 torch.zeros(3))
    with pytest.raises(DatasetError):
        PatchSet(x0[:0], x0[:0], torch.zeros(0), torch.zeros(0))
    patches = PatchSet(torch.arange(3.0).view(3, 1, 1, 1).expand(3, 1, 4, 4),
                       torch.zeros(3, 1, 4, 4), torch.arange(3),
                       torch.full((3,), 0.5))
    batch = patches.sample(5, torch.Generator().manual_seed(0))
    assert len(batch) == 5
    assert torch.equal(batch.x0[:, 0, 0, 0].long(), batch.tag)
    assert patches.to(torch.float64).x0.dtype == torch.float64
