"""The per-scale noise predictor: a small contour-conditioned UNet.

Input is x_t with the contour mask concatenated as an extra channel. The
timestep and optional style tag enter through learned embeddings added
inside every residual block. Mural spatial attention sits at the bottleneck.

"""
import dataclasses
import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from mural_restoration.diffusion import ConditionSet, NonFiniteError
from mural_restoration.image import LatentImage

from .attention import AttentionConfigError, MuralSpatialAttention
from .embedding import TimestepEmbedding

__all__ = ['DenoiserConfig', 'ResBlock', 'Denoiser', 'ParameterStore',
           'predict_eps', 'group_count']


@dataclass(frozen=True)
class DenoiserConfig:
    """Architecture of a `Denoiser`.

    Attributes:
        base_channels: Channels of the first level; level i has
            `base_channels * 2**i`.
        depth: Down/up levels.
        heads: Attention heads at the bottleneck.
        head_dim: Width per head, 0 to split the bottleneck channels evenly.
        time_embed_dim: Sinusoidal feature width (even).
        tag_vocab: Number of style tags; tag embedding row 0 means no tag.

    Raises:
        `AttentionConfigError` if the bottleneck cannot be split into heads.
        `ValueError` for other invalid values.

    """
    base_channels: int = 32
    depth: int = 2
    heads: int = 4
    head_dim: int = 0
    time_embed_dim: int = 32
    tag_vocab: int = 4

    def __post_init__(self):
        if self.base_channels < 1 or self.depth < 1 or self.tag_vocab < 1:
            raise ValueError('base_channels, depth and tag_vocab must be >= 1')
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ValueError('time_embed_dim must be even and >= 2')
        if self.heads < 1 or self.head_dim < 0:
            raise AttentionConfigError('heads must be >= 1 and head_dim >= 0')
        if self.head_dim == 0 and self.bottleneck_channels % self.heads:
            raise AttentionConfigError(
                f'Bottleneck channels {self.bottleneck_channels} do not split'
                f' into {self.heads} heads')

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * 2 ** self.depth

    @property
    def size_unit(self) -> int:
        """Input sizes must be multiples of this."""
        return 2 ** (self.depth + 1)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_config(cls, config) -> 'DenoiserConfig':
        return cls(base_channels=config.base_channels,
                   depth=config.depth,
                   heads=config.heads,
                   head_dim=config.head_dim,
                   time_embed_dim=config.time_embed_dim,
                   tag_vocab=config.tag_vocab)


def group_count(channels: int) -> int:
    return math.gcd(channels, 8)


class ResBlock(nn.Module):
    """GroupNorm-SiLU-conv twice, with the embedding added in between."""
    def __init__(self, in_channels: int, out_channels: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(group_count(in_channels), in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_channels)
        self.norm2 = nn.GroupNorm(group_count(out_channels), out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        if in_channels != out_channels:
            self.skip = nn.Conv2d(in_channels, out_channels, 1)
        else:
            self.skip = nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Denoiser(nn.Module):
    """Noise predictor for one native scale.

    Args:
        config: The architecture.
        size: Native square size in pixels.
        channels: Image channels (1 or 3).

    Raises:
        `ValueError` if `size` is not a multiple of `config.size_unit`.

    """
    def __init__(self, config: DenoiserConfig, size: int, channels: int = 3):
        super().__init__()
        if size < config.size_unit or size % config.size_unit:
            raise ValueError(f'Size {size} must be a multiple of'
                             f' {config.size_unit} for depth {config.depth}')
        self.config = config
        self.size = size
        self.channels = channels
        base = config.base_channels
        emb_dim = base * 4
        self.time_embed = TimestepEmbedding(config.time_embed_dim, emb_dim)
        self.tag_embed = nn.Embedding(config.tag_vocab + 1, emb_dim)
        self.conv_in = nn.Conv2d(channels + 1, base, 3, padding=1)
        widths = [base * 2 ** i for i in range(config.depth + 1)]
        self.down = nn.ModuleList(
            ResBlock(widths[max(i - 1, 0)], widths[i], emb_dim)
            for i in range(config.depth))
        self.mid_in = ResBlock(widths[-2], widths[-1], emb_dim)
        self.attention = MuralSpatialAttention(widths[-1], config.heads,
                                               config.head_dim)
        self.mid_out = ResBlock(widths[-1], widths[-1], emb_dim)
        self.up = nn.ModuleList(
            ResBlock(widths[i + 1] + widths[i], widths[i], emb_dim)
            for i in reversed(range(config.depth)))
        self.norm_out = nn.GroupNorm(group_count(base), base)
        self.conv_out = nn.Conv2d(base, channels, 3, padding=1)

    def embed(self, t: torch.Tensor, tag: 'torch.Tensor|None') -> torch.Tensor:
        emb = self.time_embed(t)
        if tag is None:
            tag = torch.zeros(len(t), dtype=torch.long, device=t.device)
        else:
            if int(tag.max()) >= self.config.tag_vocab or int(tag.min()) < -1:
                raise ValueError(f'Tags must lie in [0, '
                                 f'{self.config.tag_vocab}) or be -1')
            tag = tag.long() + 1
        return emb + self.tag_embed(tag)

    def forward(self,
                x: torch.Tensor,
                t: torch.Tensor,
                contour: torch.Tensor,
                tag: 'torch.Tensor|None' = None) -> torch.Tensor:
        """Predicts the noise in `x`.

        Args:
            x: NxCxHxW states at the native size.
            t: Timesteps of shape (N,).
            contour: Nx1xHxW guidance masks.
            tag: Optional (N,) style tags, -1 meaning none.

        """
        if tuple(x.shape[-2:]) != (self.size, self.size):
            raise ValueError(f'Scale mismatch: model is {self.size}px, input'
                             f' is {x.shape[-2]}x{x.shape[-1]}')
        if (contour.shape[0] != x.shape[0] or
                contour.shape[-2:] != x.shape[-2:]):
            raise ValueError('Contour batch or size does not match input')
        emb = self.embed(t, tag)
        h = self.conv_in(torch.cat([x, contour.to(x.dtype)], dim=1))
        skips = []
        for block in self.down:
            h = block(h, emb)
            skips.append(h)
            h = F.avg_pool2d(h, 2)
        h = self.mid_in(h, emb)
        h = self.attention(h)
        h = self.mid_out(h, emb)
        for block in self.up:
            h = F.interpolate(h, scale_factor=2, mode='nearest')
            h = block(torch.cat([h, skips.pop()], dim=1), emb)
        return self.conv_out(F.silu(self.norm_out(h)))


class ParameterStore:
    """Named view over a module's parameters and their gradients."""
    def __init__(self, module: nn.Module) -> None:
        self.module = module

    def named(self) -> 'dict[str, torch.Tensor]':
        return dict(self.module.named_parameters())

    def gradients(self) -> 'dict[str, torch.Tensor]':
        """Gradient buffers with the shapes of their parameters."""
        return {name: (p.grad if p.grad is not None else torch.zeros_like(p))
                for name, p in self.module.named_parameters()}

    def count(self) -> int:
        return sum(p.numel() for p in self.module.parameters())

    def check_finite(self, gradients: bool = False) -> None:
        """Raises `NonFiniteError` naming the first non-finite tensor."""
        for name, param in self.module.named_parameters():
            if not torch.isfinite(param).all():
                raise NonFiniteError(f'parameter {name}')
            if gradients and param.grad is not None:
                if not torch.isfinite(param.grad).all():
                    raise NonFiniteError(f'gradient of {name}')

    def fingerprint(self) -> str:
        """SHA-256 over every parameter's name and raw bytes."""
        digest = hashlib.sha256()
        for name, param in self.module.named_parameters():
            digest.update(name.encode())
            digest.update(param.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()


def predict_eps(xt: LatentImage,
                t: int,
                cond: ConditionSet,
                model: Denoiser) -> LatentImage:
    """Predicts the noise of one state at the model's native scale.

    Raises:
        `ValueError` if `xt` or the contour is not at the native scale.

    """
    if (xt.height, xt.width) != (model.size, model.size):
        raise ValueError(f'Scale mismatch: model is {model.size}px, input is'
                         f' {xt.height}x{xt.width}')
    dtype = next(model.parameters()).dtype
    x = torch.tensor(np.transpose(xt.data, (2, 0, 1))[None], dtype=dtype)
    tag = None if cond.tag is None else torch.tensor([cond.tag])
    with torch.no_grad():
        eps = model(x, torch.tensor([t]), cond.contour_tensor(dtype), tag)
    return LatentImage(eps[0].double().numpy().transpose(1, 2, 0))
