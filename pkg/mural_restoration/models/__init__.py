"""Trainable networks: the per-scale noise predictor and dynamic diffusers.
"""
from .attention import (AttentionConfigError, MuralSpatialAttention,
                        scaled_dot_product_attention)
from .denoiser import Denoiser, DenoiserConfig, ParameterStore, predict_eps
from .diffuser import DynamicDiffuser
from .embedding import TimestepEmbedding, sinusoidal_embedding

__all__ = ['AttentionConfigError', 'MuralSpatialAttention',
           'scaled_dot_product_attention', 'Denoiser', 'DenoiserConfig',
           'ParameterStore', 'predict_eps', 'DynamicDiffuser',
           'TimestepEmbedding', 'sinusoidal_embedding']
