import os
import unittest

import numpy as np

from avatar_runtime.audio import synth_features
from avatar_runtime.kv_cache import CacheConfig
from avatar_runtime.layers import perturb_parameters
from avatar_runtime.models import ModelConfig, build_model

SLOW = bool(os.environ.get("AVATAR_RUNTIME_SLOW"))
slow = unittest.skipUnless(SLOW, "set AVATAR_RUNTIME_SLOW=1 to run long experiments")


def tiny_config(**overrides) -> ModelConfig:
    values = dict(layers=2, model_dim=16, heads=2, tokens_per_frame=2, latent_dim=4, audio_dim=4,
                  timestep_embedding_dim=8, prompt_tokens=2, window_frames=6, chunk_size=3, audio_context=3)
    values.update(overrides)
    return ModelConfig(**values)


def tiny_model(seed: int = 0, mode: str = "teacher", perturb: float = 0.1, **overrides):
    """A tiny DiT with its zero-initialised branches moved off zero."""
    model = build_model(tiny_config(**overrides), seed=seed, mode=mode)
    if perturb:
        perturb_parameters(model, np.random.default_rng(seed + 1000), perturb)
    return model


def open_cache(chunk_size: int = 3, frames: int = 60) -> CacheConfig:
    """No eviction and no positional cap within ``frames`` frames."""
    return CacheConfig(sink_capacity=1, window_capacity=frames, rapr_cap=frames + 1, chunk_size=chunk_size)


def reference_and_audio(config: ModelConfig, frames: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    reference = rng.standard_normal((config.tokens_per_frame, config.latent_dim))
    return reference, synth_features(seed, frames, config.audio_dim, mask_pattern=4)
