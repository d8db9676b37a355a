"""
Toy interactive-avatar diffusion transformer.

One network serves both roles. In teacher mode a window of frames
[reference, 1..T] is denoised jointly with bidirectional attention; in
student mode frames are generated chunk by chunk under a block-causal mask
with earlier frames read back from a ``CacheState``. The weights are the
same either way, which is what lets a teacher checkpoint seed a student.

Each block runs, in order and each as a residual:
self-attention, prompt cross-attention, talking audio attention,
listening audio attention, feed-forward.
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .attention import (ChunkLayout, RopeParams, attention, block_causal_mask, full_mask,
                        merge_heads, rope_apply, split_heads)
from .audio import AudioTrack, apply_mask
from .exceptions import AudioExhaustedError, CacheOrderError, ConfigError, LayoutError, ShapeError
from .kv_cache import CacheEntry, CacheState, CacheView, encoded_view, view_mask
from .layers import FeedForward, Linear, Module, RMSNorm
from .tensor import Tensor

logger = logging.getLogger(__name__)

PREDICTIONS = ("velocity", "epsilon")
MODES = ("teacher", "student")


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    model_dim: int = 128
    heads: int = 4
    tokens_per_frame: int = 4
    latent_dim: int = 16
    audio_dim: int = 32
    timestep_embedding_dim: int = 64
    prompt_tokens: int = 4
    window_frames: int = 12
    chunk_size: int = 3
    audio_context: int = 3
    ffn_mult: int = 2
    rope_theta: float = 10000.0
    prediction: str = "velocity"
    mode: str = "teacher"

    def __post_init__(self):
        for name in ("layers", "model_dim", "heads", "tokens_per_frame", "latent_dim", "audio_dim",
                     "timestep_embedding_dim", "prompt_tokens", "audio_context", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.model_dim % self.heads:
            raise ConfigError(f"model_dim {self.model_dim} is not heads {self.heads} x head_dim")
        if self.head_dim % 2:
            raise ConfigError(f"head_dim {self.head_dim} must be even for rotary encoding")
        if self.timestep_embedding_dim % 2:
            raise ConfigError("timestep_embedding_dim must be even")
        if self.prediction not in PREDICTIONS:
            raise ConfigError(f"prediction must be one of {PREDICTIONS}, got {self.prediction!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        try:
            self.layout
        except LayoutError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def layout(self) -> ChunkLayout:
        return ChunkLayout(self.window_frames, self.chunk_size)

    @property
    def rope(self) -> RopeParams:
        return RopeParams(self.head_dim, self.rope_theta, max_index=self.window_frames)

    def architecture(self) -> Dict:
        """Every field that shapes the weights; ``mode`` is left out."""
        fields = asdict(self)
        fields.pop("mode")
        return fields

    def with_mode(self, mode: str) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), "mode": mode})

    @classmethod
    def from_dict(cls, values: Dict) -> "ModelConfig":
        known = {k: v for k, v in values.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class AudioInputs:
    """Audio rows visible to a set of query frames; row r belongs to frame ``row_frames[r]``."""
    talking: np.ndarray
    listening: np.ndarray
    row_frames: Tuple[int, ...]
    allowed: np.ndarray  # bool [query frames, rows]


@dataclass
class ModelOutput:
    x0: Tensor  # [frames, tokens, latent_dim]
    raw: Tensor
    kv: List[Tuple[np.ndarray, np.ndarray]]  # per layer, [frames, tokens, heads, head_dim], no rotary
    hidden: List[Tensor] = field(default_factory=list)  # per layer output [frames, tokens, model_dim]


def audio_inputs(track: AudioTrack, query_frames: Sequence[int], causal: bool,
                 audio_context: int) -> AudioInputs:
    """Select the rows of ``track`` (row k is frame k + 1) the query frames may read.

    Causal: frame f sees frames [f - audio_context + 1, f]. Bidirectional:
    every generated frame among the queries. The reference sees none.
    """
    generated = [f for f in query_frames if f >= 1]
    if not generated:
        empty = np.zeros((0, track.audio_dim))
        return AudioInputs(empty, empty, (), np.zeros((len(query_frames), 0), dtype=bool))
    if causal:
        rows = tuple(range(max(1, min(generated) - audio_context + 1), max(generated) + 1))
    else:
        rows = tuple(generated)
    if rows[-1] > track.frames:
        raise AudioExhaustedError(f"audio covers {track.frames} frames, frame {rows[-1]} requested")
    index = np.array(rows) - 1
    talking, listening = apply_mask(AudioTrack(track.features[index], track.mask[index]))
    frames = np.array(rows)
    allowed = np.zeros((len(query_frames), len(rows)), dtype=bool)
    for i, q in enumerate(query_frames):
        if q < 1:
            continue
        allowed[i] = (frames > q - audio_context) & (frames <= q) if causal else True
    return AudioInputs(talking, listening, rows, allowed)


def sinusoidal_embedding(values: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = np.asarray(values, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


def _token_mask(frame_mask: np.ndarray, query_tokens: int, key_tokens: int) -> np.ndarray:
    return np.repeat(np.repeat(frame_mask, query_tokens, axis=0), key_tokens, axis=1)


def _heads_first(x: Tensor) -> Tensor:
    """[frames, tokens, heads, head_dim] -> [heads, frames*tokens, head_dim]"""
    f, p, h, d = x.shape
    return T.transpose(T.reshape(x, (f * p, h, d)), (1, 0, 2))


class CrossAttention(Module):
    """Token queries reading a small set of conditioning rows."""

    def __init__(self, dim: int, cond_dim: int, heads: int, rng: np.random.Generator,
                 bias: bool = True, null_slot: bool = False):
        self.norm = RMSNorm(dim, affine=False)
        self.q = Linear(dim, dim, rng)
        self.k = Linear(cond_dim, dim, rng, bias=bias)
        self.v = Linear(cond_dim, dim, rng, bias=bias)
        self.out = Linear(dim, dim, rng, bias=bias, zero_init=True)
        self.heads = heads
        self.null_slot = null_slot

    def __call__(self, x: Tensor, cond, frame_mask: Optional[np.ndarray] = None) -> Tensor:
        frames, tokens, dim = x.shape
        q = split_heads(T.reshape(self.q(self.norm(x)), (frames * tokens, dim)), self.heads)
        k = split_heads(self.k(cond), self.heads)
        v = split_heads(self.v(cond), self.heads)
        mask = None if frame_mask is None else np.repeat(frame_mask, tokens, axis=0)
        o = attention(q, k, v, mask=mask, null_slot=self.null_slot)
        return T.reshape(self.out(merge_heads(o)), (frames, tokens, dim))


class DiTBlock(Module):

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        dim = config.model_dim
        self.modulation = Linear(dim, 6 * dim, rng, zero_init=True)
        self.norm1 = RMSNorm(dim, affine=False)
        self.qkv = Linear(dim, 3 * dim, rng)
        self.attn_out = Linear(dim, dim, rng)
        self.text = CrossAttention(dim, dim, config.heads, rng)
        self.talk = CrossAttention(dim, config.audio_dim, config.heads, rng, bias=False, null_slot=True)
        self.listen = CrossAttention(dim, config.audio_dim, config.heads, rng, bias=False, null_slot=True)
        self.norm2 = RMSNorm(dim, affine=False)
        self.ffn = FeedForward(dim, config.ffn_mult * dim, rng)
        self.heads = config.heads
        self.dim = dim

    def __call__(self, x: Tensor, cond: Tensor, positions: Sequence[int], rope: RopeParams,
                 frame_mask: np.ndarray, prompt: Tensor, audio: Optional[AudioInputs],
                 context: Optional[Tuple[np.ndarray, np.ndarray]] = None):
        frames, tokens, dim = x.shape
        heads, head_dim = self.heads, dim // self.heads
        mod = T.reshape(self.modulation(cond), (frames, 1, 6 * dim))
        shift1, scale1, gate1, shift2, scale2, gate2 = (mod[:, :, i * dim:(i + 1) * dim] for i in range(6))

        h = self.norm1(x) * (scale1 + 1.0) + shift1
        qkv = T.reshape(self.qkv(h), (frames, tokens, 3, heads, head_dim))
        q, k, v = qkv[:, :, 0], qkv[:, :, 1], qkv[:, :, 2]
        raw_kv = (k.data.copy(), v.data.copy())
        q_rot = rope_apply(q, positions, rope)
        k_rot = rope_apply(k, positions, rope)
        if context is not None and len(context[0]):
            k_rot = T.concat([context[0], k_rot], axis=0)
            v = T.concat([context[1], v], axis=0)
        mask = _token_mask(frame_mask, tokens, tokens)
        o = attention(_heads_first(q_rot), _heads_first(k_rot), _heads_first(v), mask=mask)
        o = T.reshape(merge_heads(o), (frames, tokens, dim))
        x = x + gate1 * self.attn_out(o)

        x = x + self.text(x, prompt)
        if audio is not None and audio.row_frames:
            x = x + self.talk(x, audio.talking, audio.allowed)
            x = x + self.listen(x, audio.listening, audio.allowed)

        h = self.norm2(x) * (scale2 + 1.0) + shift2
        x = x + gate2 * self.ffn(h)
        return x, raw_kv


class AvatarDiT(Module):

    def __init__(self, config: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        dim = config.model_dim
        self.config = config
        self.patch_embed = Linear(config.latent_dim, dim, rng)
        self.pos_embed = T.parameter(rng.normal(0.0, 0.02, (config.tokens_per_frame, dim)))
        self.time_in = Linear(config.timestep_embedding_dim, dim, rng)
        self.time_out = Linear(dim, dim, rng)
        # fixed prompt ("a person is speaking and listening") as learned tokens
        self.prompt = T.parameter(rng.normal(0.0, 1.0, (config.prompt_tokens, dim)))
        self.blocks = [DiTBlock(config, rng) for _ in range(config.layers)]
        self.out_norm = RMSNorm(dim)
        self.out_proj = Linear(dim, config.latent_dim, rng)

    @property
    def mode(self) -> str:
        return self.config.mode

    def timestep_embed(self, sigmas) -> Tensor:
        """Per-frame conditioning vector [frames, model_dim] for noise levels in [0, 1]."""
        sigmas = np.atleast_1d(np.asarray(sigmas, dtype=np.float64))
        base = sinusoidal_embedding(1000.0 * sigmas, self.config.timestep_embedding_dim)
        return self.time_out(T.silu(self.time_in(base)))

    def modulations(self, sigma: float) -> List[np.ndarray]:
        """Per-block [shift, scale, gate] x 2 vectors for one noise level."""
        with T.no_grad():
            cond = T.silu(self.timestep_embed([sigma]))
            return [block.modulation(cond).data.reshape(6, -1) for block in self.blocks]

    # -- core -------------------------------------------------------------

    def forward(self, latents, sigmas, positions: Sequence[int], frame_mask: np.ndarray,
                audio: Optional[AudioInputs] = None, context: Optional[CacheView] = None,
                return_hidden: bool = False) -> ModelOutput:
        """Run the network on ``latents`` [frames, tokens, latent_dim].

        ``frame_mask`` is boolean [frames, context frames + frames]; context
        keys (already rotary-encoded) come first.
        """
        cfg = self.config
        latents = T.as_tensor(latents)
        if latents.ndim != 3 or latents.shape[1:] != (cfg.tokens_per_frame, cfg.latent_dim):
            raise ShapeError(f"latents must be [frames, {cfg.tokens_per_frame}, {cfg.latent_dim}], "
                             f"got {latents.shape}")
        frames = latents.shape[0]
        sigmas = np.broadcast_to(np.asarray(sigmas, dtype=np.float64), (frames,))
        context_frames = len(context) if context is not None else 0
        if frame_mask.shape != (frames, context_frames + frames):
            raise ShapeError(f"frame mask {frame_mask.shape} does not cover {context_frames}+{frames} frames")

        x = self.patch_embed(latents) + self.pos_embed
        cond = T.silu(self.timestep_embed(sigmas))
        rope = cfg.rope
        kv, hidden = [], []
        for layer, block in enumerate(self.blocks):
            layer_context = (context.keys[layer], context.values[layer]) if context_frames else None
            x, raw_kv = block(x, cond, positions, rope, frame_mask, self.prompt, audio, layer_context)
            kv.append(raw_kv)
            if return_hidden:
                hidden.append(x)
        raw = self.out_proj(self.out_norm(x))
        return ModelOutput(self.to_x0(latents, raw, sigmas), raw, kv, hidden)

    def to_x0(self, latents: Tensor, raw: Tensor, sigmas: np.ndarray) -> Tensor:
        sig = sigmas.reshape(-1, 1, 1)
        if self.config.prediction == "velocity":
            return latents - raw * sig
        # epsilon: x0 = (x - sigma * eps) / (1 - sigma), denominator floored at 1e-2
        return (latents - raw * sig) * (1.0 / np.maximum(1.0 - sig, 1e-2))

    # -- windows ----------------------------------------------------------

    def forward_window(self, noisy, sigmas, reference, audio: Optional[AudioTrack],
                       causal: bool, first_frame: int = 1, return_hidden: bool = False) -> ModelOutput:
        """Frames [reference, first_frame .. first_frame + n - 1] in one pass.

        ``sigmas`` is a scalar or one level per generated frame; the reference
        is always clean. Output covers the reference too (row 0).
        """
        cfg = self.config
        noisy = T.as_tensor(noisy)
        n = noisy.shape[0]
        reference = T.as_tensor(reference).reshape((1, cfg.tokens_per_frame, cfg.latent_dim))
        latents = T.concat([reference, noisy], axis=0)
        gen_sigmas = np.broadcast_to(np.asarray(sigmas, dtype=np.float64), (n,))
        all_sigmas = np.concatenate([[0.0], gen_sigmas])
        frames = [0] + list(range(first_frame, first_frame + n))
        if causal:
            mask = block_causal_mask(frames, frames, cfg.chunk_size).allowed
        else:
            mask = full_mask(frames, frames).allowed
        conditioning = audio_inputs(audio, frames, causal, cfg.audio_context) if audio is not None else None
        return self.forward(latents, all_sigmas, frames, mask, conditioning, return_hidden=return_hidden)

    def teacher_forward(self, noisy, sigma, reference, audio: Optional[AudioTrack],
                        causal: bool = False) -> Tensor:
        """x0 prediction for the generated frames of a full window."""
        out = self.forward_window(noisy, sigma, reference, audio, causal)
        return out.x0[1:]

    def encode_reference(self, reference, source: str = "reference") -> CacheEntry:
        cfg = self.config
        latents = T.as_tensor(reference).reshape((1, cfg.tokens_per_frame, cfg.latent_dim))
        with T.no_grad():
            out = self.forward(latents, [0.0], [0], np.ones((1, 1), dtype=bool))
        return CacheEntry(0, [k[0] for k, _ in out.kv], [v[0] for _, v in out.kv], source)

    def student_forward_chunk(self, chunk, frame_ids: Sequence[int], sigma, cache: CacheState,
                              audio: Optional[AudioTrack]) -> Tuple[Tensor, List[Tuple[np.ndarray, np.ndarray]], Dict[int, int]]:
        """Predict x0 for one chunk from the cached context.

        Returns the prediction, this pass's raw KV per layer and the positional
        indices used (cached frames and chunk frames).
        """
        cfg = self.config
        frame_ids = list(frame_ids)
        if 0 not in cache and cache.config.sink_enabled:
            raise CacheOrderError("cache does not hold the reference frame")
        if frame_ids != list(range(frame_ids[0], frame_ids[0] + len(frame_ids))) or frame_ids[0] < 1:
            raise CacheOrderError(f"chunk frames must be contiguous generation frames, got {frame_ids}")
        if frame_ids[0] <= cache.max_frame:
            raise CacheOrderError(f"chunk starts at {frame_ids[0]} but cache reaches {cache.max_frame}")
        current = frame_ids[-1]
        view = encoded_view(cache, current, cfg.rope, pending=frame_ids)
        positions = [view.indices[f] for f in frame_ids]
        mask = np.concatenate([view_mask(view, frame_ids, cfg.chunk_size),
                               np.ones((len(frame_ids), len(frame_ids)), dtype=bool)], axis=1)
        conditioning = audio_inputs(audio, frame_ids, True, cfg.audio_context) if audio is not None else None
        out = self.forward(chunk, sigma, positions, mask, conditioning, context=view)
        return out.x0, out.kv, view.indices


def kv_entries(kv: List[Tuple[np.ndarray, np.ndarray]], frame_ids: Sequence[int],
               source: str = "student") -> List[CacheEntry]:
    """Split per-layer chunk KV into one cache entry per frame."""
    return [CacheEntry(frame, [k[i] for k, _ in kv], [v[i] for _, v in kv], source)
            for i, frame in enumerate(frame_ids)]


def build_model(config: ModelConfig, seed: int = 0, mode: Optional[str] = None) -> AvatarDiT:
    if mode is not None:
        config = config.with_mode(mode)
    model = AvatarDiT(config, seed)
    logger.debug("[Model] built %s DiT with %d parameters", config.mode, model.num_parameters())
    return model


def as_student(teacher: AvatarDiT) -> AvatarDiT:
    """Student sharing the teacher's weights (copied, not aliased)."""
    student = teacher.clone()
    student.config = teacher.config.with_mode("student")
    return student
