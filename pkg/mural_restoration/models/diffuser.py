"""Dynamic diffusers: shallow networks scoring one scale's influence."""
import torch
import torch.nn.functional as F
from torch import nn

from .denoiser import group_count
from .embedding import TimestepEmbedding

__all__ = ['DynamicDiffuser']


class DynamicDiffuser(nn.Module):
    """A one-level encoder/decoder emitting a raw per-pixel influence logit.

    Input is the canonical-resolution state with the contour channel.

    Args:
        channels: Image channels (1 or 3).
        hidden: Feature channels.
        time_embed_dim: Sinusoidal feature width (even).

    """
    def __init__(self, channels: int = 3, hidden: int = 16,
                 time_embed_dim: int = 32) -> None:
        super().__init__()
        self.channels = channels
        self.time_embed = TimestepEmbedding(time_embed_dim, hidden)
        self.conv_in = nn.Conv2d(channels + 1, hidden, 3, padding=1)
        self.norm = nn.GroupNorm(group_count(hidden), hidden)
        self.encode = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.decode = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.head = nn.Conv2d(hidden, 1, 3, padding=1)

    def forward(self,
                x: torch.Tensor,
                t: torch.Tensor,
                contour: torch.Tensor) -> torch.Tensor:
        """Returns Nx1xHxW raw influence logits.

        Raises:
            `ValueError` for odd spatial sizes or mismatched contours.

        """
        if x.shape[-2] % 2 or x.shape[-1] % 2:
            raise ValueError(f'Diffuser input {x.shape[-2]}x{x.shape[-1]}'
                             f' must have even sides')
        if contour.shape[-2:] != x.shape[-2:]:
            raise ValueError('Contour size does not match diffuser input')
        h = self.conv_in(torch.cat([x, contour.to(x.dtype)], dim=1))
        h = F.silu(self.norm(h) + self.time_embed(t)[:, :, None, None])
        low = F.silu(self.encode(F.avg_pool2d(h, 2)))
        h = h + F.interpolate(self.decode(low), scale_factor=2,
                              mode='nearest')
        return self.head(F.silu(h))
