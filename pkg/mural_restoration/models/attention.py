"""Mural spatial attention: multi-head self-attention on pooled features.

Features are average-pooled 2x to widen the receptive field and suppress
noise, attended over all pooled positions, projected back, upsampled 2x and
added to the input.

"""
import math

import torch
import torch.nn.functional as F
from torch import nn

__all__ = ['AttentionConfigError', 'scaled_dot_product_attention',
           'MuralSpatialAttention']


class AttentionConfigError(Exception):
    """Channel and head settings that cannot be split into heads."""


def scaled_dot_product_attention(q: torch.Tensor,
                                 k: torch.Tensor,
                                 v: torch.Tensor,
                                 ) -> 'tuple[torch.Tensor, torch.Tensor]':
    """softmax(q k^T / sqrt(d)) v over the last two dimensions.

    Args:
        q: (..., L, d) queries.
        k: (..., L, d) keys.
        v: (..., L, d_v) values.

    Returns:
        A tuple (output, weights) with weights of shape (..., L, L).

    """
    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    weights = torch.softmax(logits, dim=-1)
    return weights @ v, weights


class MuralSpatialAttention(nn.Module):
    """Multi-head self-attention at half resolution with a residual path.

    Attributes:
        channels (int): Feature channels in and out.
        heads (int): Number of heads.
        head_dim (int): Width of each head.

    Raises:
        `AttentionConfigError` if `heads < 1`, `head_dim < 0`, or `head_dim`
            is 0 and `channels` does not divide by `heads`.

    """
    def __init__(self, channels: int, heads: int, head_dim: int = 0) -> None:
        super().__init__()
        if heads < 1 or head_dim < 0 or channels < 1:
            raise AttentionConfigError(f'Invalid attention config: channels'
                                       f' {channels}, heads {heads},'
                                       f' head_dim {head_dim}')
        if head_dim == 0:
            if channels % heads:
                raise AttentionConfigError(f'{channels} channels do not split'
                                           f' into {heads} heads')
            head_dim = channels // heads
        self.channels = channels
        self.heads = heads
        self.head_dim = head_dim
        inner = heads * head_dim
        self.to_q = nn.Linear(channels, inner)
        self.to_k = nn.Linear(channels, inner)
        self.to_v = nn.Linear(channels, inner)
        self.proj = nn.Linear(inner, channels)

    def _split_heads(self, x: torch.Tensor) -> torch.Tensor:
        n, length, _ = x.shape
        return x.view(n, length, self.heads, self.head_dim).transpose(1, 2)

    def attend(self, x: torch.Tensor) -> 'tuple[torch.Tensor, torch.Tensor]':
        """Returns the pooled-resolution update and the attention weights."""
        n, c, h, w = x.shape
        if c != self.channels:
            raise AttentionConfigError(f'Expected {self.channels} channels,'
                                       f' got {c}')
        if h % 2 or w % 2:
            raise AttentionConfigError(f'Spatial size {h}x{w} must be even')
        pooled = F.avg_pool2d(x, 2)
        tokens = pooled.flatten(2).transpose(1, 2)
        q = self._split_heads(self.to_q(tokens))
        k = self._split_heads(self.to_k(tokens))
        v = self._split_heads(self.to_v(tokens))
        out, weights = scaled_dot_product_attention(q, k, v)
        out = out.transpose(1, 2).reshape(n, -1, self.heads * self.head_dim)
        out = self.proj(out).transpose(1, 2).reshape(n, c, h // 2, w // 2)
        return out, weights

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        update, _ = self.attend(x)
        return x + F.interpolate(update, scale_factor=2, mode='nearest')
