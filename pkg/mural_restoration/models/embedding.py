"""Timestep embeddings shared by the denoiser and the dynamic diffusers."""
import math

import torch
from torch import nn

__all__ = ['sinusoidal_embedding', 'TimestepEmbedding']


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Returns the (N, dim) sine/cosine features of timesteps.

    Args:
        t: Timesteps of shape (N,).
        dim: Even embedding width.

    """
    if dim < 2 or dim % 2:
        raise ValueError(f'Embedding dim must be even and >= 2, got {dim}')
    half = dim // 2
    frequencies = torch.exp(-math.log(10000.0) *
                            torch.arange(half, dtype=torch.float64) / half)
    angles = t.to(torch.float64)[:, None] * frequencies[None, :]
    features = torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)
    return features


class TimestepEmbedding(nn.Module):
    """Sinusoidal features followed by a two-layer MLP."""
    def __init__(self, dim: int, out_dim: int) -> None:
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(
            nn.Linear(dim, out_dim),
            nn.SiLU(),
            nn.Linear(out_dim, out_dim),
        )

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        features = sinusoidal_embedding(t, self.dim)
        return self.mlp(features.to(self.mlp[0].weight.dtype))
