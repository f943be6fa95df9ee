import numpy as np
import pytest
import torch

from mural_restoration.config import Config
from mural_restoration.contour import extract_contour
from mural_restoration.dataset import PatchSet, SyntheticMuralSpec, synth_mural
from mural_restoration.image import resample


@pytest.fixture(autouse=True)
def no_env_seed(monkeypatch):
    monkeypatch.delenv('MURAL_SEED', raising=False)
    monkeypatch.delenv('LOG_VERBOSE', raising=False)
    monkeypatch.delenv('LOG_LEVEL', raising=False)
    monkeypatch.delenv('LOG_FORMAT', raising=False)


@pytest.fixture
def tiny_config() -> Config:
    """Two scales of a network small enough for per-test training."""
    return Config(name='tiny', seed=3, T=10, scales=(8, 16), canvas_size=16,
                  overlap=0.5, train_count=2, test_count=1, base_channels=4,
                  depth=1, heads=1, time_embed_dim=4, tag_vocab=4,
                  diffuser_channels=4, batch_size=4, train_steps=3,
                  diffuser_steps=2, fdp_bands=4, fdp_steps=3)


def make_patches(size: int, count: int = 4, seed: int = 0,
                 dtype: torch.dtype = torch.float32) -> PatchSet:
    images, contours = [], []
    for i in range(count):
        mural = synth_mural(SyntheticMuralSpec(size=16, seed=seed + i))
        img = resample(mural.clean, size, size)
        images.append(img)
        contours.append(extract_contour(img, allow_degenerate=True))
    return PatchSet.from_images(images, contours, [i % 4 for i in
                                                   range(count)], dtype)


@pytest.fixture
def patches8() -> PatchSet:
    return make_patches(8)


@pytest.fixture
def patches16() -> PatchSet:
    return make_patches(16)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
