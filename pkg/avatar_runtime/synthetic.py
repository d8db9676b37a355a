"""
Synthetic avatar latents.

Frame f of sample s is

    reference_s + motion(f) + mask_f * talk(audio_f) + (1 - mask_f) * listen(audio_f) + noise

with a periodic body-motion term, a talking term driven linearly by the
audio features, a weaker listening term and small Gaussian noise. The task
basis is fixed by the task seed; samples vary reference, phase and audio.
"""
from dataclasses import dataclass

import numpy as np

from .audio import AudioTrack, synth_features
from .models import ModelConfig


@dataclass(frozen=True)
class SyntheticSample:
    reference: np.ndarray  # [tokens, latent_dim]
    frames: np.ndarray  # [frames, tokens, latent_dim], generated frames 1..F
    audio: AudioTrack


class SyntheticTask:

    def __init__(self, config: ModelConfig, seed: int = 0, motion_period: float = 24.0,
                 talk_scale: float = 0.3, listen_scale: float = 0.1, noise_std: float = 0.02):
        rng = np.random.default_rng(seed)
        shape = (config.tokens_per_frame, config.latent_dim)
        self.config = config
        self.seed = seed
        self.motion_basis = rng.normal(0.0, 0.5, shape)
        self.talk_map = rng.normal(0.0, 1.0 / np.sqrt(config.audio_dim), (config.audio_dim,) + shape)
        self.listen_map = rng.normal(0.0, 1.0 / np.sqrt(config.audio_dim), (config.audio_dim,) + shape)
        self.motion_period = motion_period
        self.talk_scale = talk_scale
        self.listen_scale = listen_scale
        self.noise_std = noise_std

    def sample(self, index: int, frames: int, mask_period: int = 10) -> SyntheticSample:
        cfg = self.config
        rng = np.random.default_rng((self.seed, index))
        reference = rng.normal(0.0, 1.0, (cfg.tokens_per_frame, cfg.latent_dim))
        audio = synth_features(int(rng.integers(2 ** 31)), frames, cfg.audio_dim, mask_period)
        phase = rng.uniform(0.0, 2 * np.pi)
        t = np.arange(1, frames + 1, dtype=np.float64)
        motion = np.sin(2 * np.pi * t / self.motion_period + phase)[:, None, None] * self.motion_basis
        talk = np.einsum("fa,apl->fpl", audio.features, self.talk_map) * self.talk_scale
        listen = np.einsum("fa,apl->fpl", audio.features, self.listen_map) * self.listen_scale
        gate = audio.mask.astype(np.float64)[:, None, None]
        latents = (reference[None] + motion + gate * talk + (1.0 - gate) * listen
                   + rng.normal(0.0, self.noise_std, (frames,) + reference.shape))
        return SyntheticSample(reference, latents, audio)

    def batch(self, start: int, count: int, frames: int):
        return [self.sample(start + i, frames) for i in range(count)]
