"""
Consistency-aware discriminator.

The backbone is a copy of the teacher network. ``num_queries`` query
extractors read evenly spaced intermediate layers; each owns one learnable
query per frame position that attends over that frame's tokens. Extractor
features are averaged into one feature per frame, then

* the local branch projects every generated frame's feature to a logit;
* the global branch lets the reference feature attend over the generated
  features and projects the result to a single logit.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import tensor as T
from .attention import attention, merge_heads, split_heads
from .audio import AudioTrack
from .exceptions import ConfigError, ConfigMismatchError, ShapeError
from .layers import Linear, Module, RMSNorm
from .models import AvatarDiT, ModelConfig
from .tensor import Tensor

logger = logging.getLogger(__name__)


def extractor_layers(layers: int, num_queries: int) -> List[int]:
    """Block indices floor(i * L / (N + 1)) for i = 1..N."""
    if not 1 <= num_queries <= layers:
        raise ConfigError(f"num_queries must be in [1, {layers}], got {num_queries}")
    return [(i * layers) // (num_queries + 1) for i in range(1, num_queries + 1)]


class QueryExtractor(Module):

    def __init__(self, config: ModelConfig, layer: int, rng: np.random.Generator):
        dim = config.model_dim
        self.layer = layer
        self.heads = config.heads
        self.queries = T.parameter(rng.normal(0.0, 1.0, (config.window_frames + 1, dim)))
        self.norm = RMSNorm(dim, affine=False)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.q = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def __call__(self, hidden: Tensor) -> Tensor:
        """[frames, tokens, dim] -> one feature per frame [frames, dim]."""
        frames, tokens, dim = hidden.shape
        if frames > self.queries.shape[0]:
            raise ShapeError(f"extractor holds {self.queries.shape[0]} frame queries, got {frames} frames")
        heads, head_dim = self.heads, dim // self.heads
        h = self.norm(hidden)
        q = T.reshape(self.q(self.queries[:frames]), (frames, 1, heads, head_dim))
        k = T.reshape(self.k(h), (frames, tokens, heads, head_dim))
        v = T.reshape(self.v(h), (frames, tokens, heads, head_dim))

        def batch(x, n):
            return T.reshape(T.transpose(x, (0, 2, 1, 3)), (frames * heads, n, head_dim))

        o = attention(batch(q, 1), batch(k, tokens), batch(v, tokens))
        return self.out(T.reshape(o, (frames, dim)))


@dataclass
class DiscOutput:
    per_frame_logits: Tensor  # [generated frames]
    global_logit: Optional[Tensor]  # scalar, None without the global branch
    features: Tensor  # pooled [frames, dim], reference first
    global_weights: Optional[np.ndarray] = None  # [heads, 1, generated frames]


class Discriminator(Module):

    def __init__(self, backbone: AvatarDiT, num_queries: int = 3, seed: int = 0,
                 global_branch: bool = True):
        cfg = backbone.config
        rng = np.random.default_rng(seed)
        self.backbone = backbone
        self.extractors = [QueryExtractor(cfg, layer, rng) for layer in extractor_layers(cfg.layers, num_queries)]
        self.local_head = Linear(cfg.model_dim, 1, rng)
        self.global_q = Linear(cfg.model_dim, cfg.model_dim, rng)
        self.global_k = Linear(cfg.model_dim, cfg.model_dim, rng)
        self.global_head = Linear(cfg.model_dim, 1, rng)
        self.global_branch = global_branch
        self.heads = cfg.heads

    @property
    def config(self) -> ModelConfig:
        return self.backbone.config

    def head_parameters(self) -> List[Tensor]:
        backbone = {id(p) for p in self.backbone.parameters()}
        return [p for p in self.parameters() if id(p) not in backbone]

    def features(self, latents, audio: Optional[AudioTrack]) -> Tensor:
        latents = T.as_tensor(latents)
        if latents.ndim != 3 or latents.shape[0] < 2:
            raise ShapeError(f"discriminator needs the reference plus generated frames, got {latents.shape}")
        out = self.backbone.forward_window(latents[1:], 0.0, latents[0], audio, causal=False, return_hidden=True)
        pooled = [extractor(out.hidden[extractor.layer]) for extractor in self.extractors]
        total = pooled[0]
        for item in pooled[1:]:
            total = total + item
        return total * (1.0 / len(pooled))

    def heads_forward(self, features: Tensor) -> DiscOutput:
        """Both branches from pooled features [frames, dim] (reference first).

        The heads carry no positional encoding: permuting generated rows
        permutes the local logits and leaves the global logit unchanged. The
        full forward is position-aware through the per-position extractor
        queries and the backbone's rotary embedding.
        """
        generated = features[1:]
        local = T.reshape(self.local_head(generated), (generated.shape[0],))
        if not self.global_branch:
            return DiscOutput(local, None, features)
        q = split_heads(self.global_q(features[0:1]), self.heads)
        k = split_heads(self.global_k(generated), self.heads)
        v = split_heads(generated, self.heads)
        attended, weights = attention(q, k, v, return_weights=True)
        logit = T.reshape(self.global_head(merge_heads(attended)), ())
        return DiscOutput(local, logit, features, weights.data)

    def __call__(self, latents, audio: Optional[AudioTrack] = None) -> DiscOutput:
        return self.heads_forward(self.features(latents, audio))


def disc_forward(discriminator: Discriminator, latents, audio: Optional[AudioTrack] = None) -> DiscOutput:
    return discriminator(latents, audio)


def init_from_teacher(teacher: AvatarDiT, num_queries: int = 3, seed: int = 0, freeze: bool = False,
                      global_branch: bool = True, expected: Optional[ModelConfig] = None) -> Discriminator:
    """Discriminator whose backbone is a copy of ``teacher``; heads are fresh."""
    if expected is not None and expected.architecture() != teacher.config.architecture():
        raise ConfigMismatchError("teacher architecture does not match the discriminator configuration")
    backbone = teacher.clone()
    backbone.config = teacher.config.with_mode("teacher")
    if freeze:
        backbone.requires_grad_(False)
    disc = Discriminator(backbone, num_queries, seed, global_branch)
    logger.info("[Discriminator] %d extractors on layers %s, backbone %s",
                len(disc.extractors), [e.layer for e in disc.extractors], "frozen" if freeze else "trainable")
    return disc
