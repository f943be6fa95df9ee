"""Derivation of per-stage seeds from a single root seed.

Every random draw of a run flows from the root seed. Stage `s` with counter
`i` gets the first 32-bit word of
`numpy.random.SeedSequence(root, spawn_key=(STAGES.index(s), i))`, so adding
a stage or a sample never shifts the seeds of the others.

"""
import numpy as np
import torch

__all__ = ['STAGES', 'stage_seed', 'numpy_rng', 'torch_generator']

STAGES = (
    'synth',
    'crop',
    'train',
    'train_diffusers',
    'fdp',
    'restore',
    'evaluate',
    'oracle',
    'init',
)


def stage_seed(root_seed: int, stage: str, index: int = 0) -> int:
    """Returns the seed of counter `index` within a stage.

    Args:
        root_seed: The run's root seed (>= 0).
        stage: One of `STAGES`.
        index: A nonnegative counter e.g. the scale or sample number.

    Raises:
        `ValueError` for an unknown stage or negative values.

    """
    if stage not in STAGES:
        raise ValueError(f'Unknown stage {stage}; expected one of {STAGES}')
    if root_seed < 0 or index < 0:
        raise ValueError('Seeds and counters must be >= 0')
    sequence = np.random.SeedSequence(root_seed,
                                      spawn_key=(STAGES.index(stage), index))
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def numpy_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def torch_generator(seed: int) -> torch.Generator:
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator
