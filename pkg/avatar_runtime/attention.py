"""
Chunk layout, block-causal masks, rotary encoding and masked attention.

Frame 0 is the clean reference frame (chunk 0). Generation frames 1..T are
split into chunks of C frames: chunk i spans frames (i-1)*C+1 .. i*C, so
frame t >= 1 belongs to chunk ceil(t / C). A query frame may attend a key
frame iff chunk_of(key) <= chunk_of(query).
"""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .exceptions import LayoutError, MaskError, RopeError, ShapeError
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChunkLayout:
    window_frames: int  # T, generation frames (the reference is extra)
    chunk_size: int  # C

    def __post_init__(self):
        if self.chunk_size < 1 or self.window_frames < 1:
            raise LayoutError(f"invalid layout T={self.window_frames} C={self.chunk_size}")
        if self.window_frames % self.chunk_size:
            raise LayoutError(f"T={self.window_frames} is not a multiple of C={self.chunk_size}")

    @property
    def num_chunks(self) -> int:
        return self.window_frames // self.chunk_size

    @property
    def total_frames(self) -> int:
        return self.window_frames + 1

    def chunk_of(self, frame: int) -> int:
        return chunk_of(frame, self.chunk_size)

    def chunk_span(self, index: int) -> Tuple[int, int]:
        """First and last frame (inclusive) of generation chunk ``index`` >= 1."""
        if index < 1:
            raise LayoutError(f"generation chunks start at 1, got {index}")
        return (index - 1) * self.chunk_size + 1, index * self.chunk_size


def chunk_of(frame: int, chunk_size: int) -> int:
    if frame < 0:
        raise LayoutError(f"negative frame index {frame}")
    return 0 if frame == 0 else -(-frame // chunk_size)


@dataclass(frozen=True)
class AttentionMask:
    """Frame-level visibility; every token of a frame shares its frame's row/column."""
    query_frames: Tuple[int, ...]
    key_frames: Tuple[int, ...]
    allowed: np.ndarray  # bool [len(query_frames), len(key_frames)]

    def tokens(self, tokens_per_frame: int) -> np.ndarray:
        return np.repeat(np.repeat(self.allowed, tokens_per_frame, axis=0), tokens_per_frame, axis=1)

    def __eq__(self, other) -> bool:
        return (isinstance(other, AttentionMask) and self.query_frames == other.query_frames
                and self.key_frames == other.key_frames and np.array_equal(self.allowed, other.allowed))


def block_causal_mask(query_frames: Sequence[int], key_frames: Sequence[int], chunk_size: int) -> AttentionMask:
    q_chunks = np.array([chunk_of(f, chunk_size) for f in query_frames])
    k_chunks = np.array([chunk_of(f, chunk_size) for f in key_frames])
    allowed = k_chunks[None, :] <= q_chunks[:, None]
    return AttentionMask(tuple(query_frames), tuple(key_frames), allowed)


def full_mask(query_frames: Sequence[int], key_frames: Sequence[int]) -> AttentionMask:
    return AttentionMask(tuple(query_frames), tuple(key_frames),
                         np.ones((len(query_frames), len(key_frames)), dtype=bool))


def build_block_causal_mask(layout: ChunkLayout) -> AttentionMask:
    frames = tuple(range(layout.total_frames))
    return block_causal_mask(frames, frames, layout.chunk_size)


# ---------------------------------------------------------------------------
# Rotary positional encoding
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RopeParams:
    head_dim: int
    theta_base: float = 10000.0
    max_index: int = 12  # positional range seen in training

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise RopeError(f"head_dim must be even and positive, got {self.head_dim}")
        if self.theta_base <= 1:
            raise RopeError(f"theta_base must exceed 1, got {self.theta_base}")

    def inv_freq(self) -> np.ndarray:
        return self.theta_base ** (-2.0 * np.arange(self.head_dim // 2) / self.head_dim)

    def out_of_range(self, index: int) -> bool:
        return index > self.max_index


def _pair_swap(head_dim: int) -> np.ndarray:
    """P such that (x @ P) maps each pair (a, b) to (-b, a)."""
    swap = np.zeros((head_dim, head_dim))
    for j in range(0, head_dim, 2):
        swap[j + 1, j] = -1.0
        swap[j, j + 1] = 1.0
    return swap


def rope_apply(x, indices: Sequence[int], params: RopeParams) -> Tensor:
    """Rotate consecutive dim pairs of ``x`` [frames, ..., head_dim] by index * freq."""
    x = T.as_tensor(x)
    if x.shape[-1] != params.head_dim:
        raise RopeError(f"expected head_dim {params.head_dim}, got {x.shape[-1]}")
    indices = np.asarray(indices, dtype=np.float64)
    if indices.shape != (x.shape[0],):
        raise ShapeError(f"rope_apply: need one index per frame ({x.shape[0]}), got {indices.shape}")
    angles = np.repeat(indices[:, None] * params.inv_freq()[None, :], 2, axis=1)
    angles = angles.reshape((x.shape[0],) + (1,) * (x.ndim - 2) + (params.head_dim,))
    cos = np.cos(angles).astype(x.data.dtype)
    sin = np.sin(angles).astype(x.data.dtype)
    return x * cos + T.matmul(x, _pair_swap(params.head_dim).astype(x.data.dtype)) * sin


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------

def split_heads(x: Tensor, heads: int) -> Tensor:
    """[N, heads*d] -> [heads, N, d]"""
    n, dim = x.shape
    return T.transpose(T.reshape(x, (n, heads, dim // heads)), (1, 0, 2))


def merge_heads(x: Tensor) -> Tensor:
    """[heads, N, d] -> [N, heads*d]"""
    heads, n, d = x.shape
    return T.reshape(T.transpose(x, (1, 0, 2)), (n, heads * d))


def attention(q, k, v, mask: Optional[np.ndarray] = None, scale: Optional[float] = None,
              null_slot: bool = False, return_weights: bool = False):
    """softmax(q k^T * scale + log(mask)) v over [heads, N, d] inputs.

    ``mask`` is a token-level boolean [Nq, Nk] array. With ``null_slot`` an
    extra virtual key with logit 0 and value 0 is present, so rows without an
    allowed key yield zeros instead of an error.
    """
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3 or q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2] \
            or k.shape[:2] != v.shape[:2]:
        raise ShapeError(f"attention: incompatible q{q.shape} k{k.shape} v{v.shape}")
    scale = 1.0 / np.sqrt(q.shape[-1]) if scale is None else scale
    logits = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), scale)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (q.shape[1], k.shape[1]):
            raise ShapeError(f"attention: mask {mask.shape} does not cover ({q.shape[1]}, {k.shape[1]})")
        if not null_slot and not mask.any(axis=1).all():
            raise MaskError("attention: a query row has no allowed key")
        logits = logits + np.where(mask, 0.0, -np.inf).astype(logits.data.dtype)
    if null_slot:
        zeros = np.zeros(logits.shape[:2] + (1,), dtype=logits.data.dtype)
        weights = T.softmax(T.concat([zeros, logits], axis=-1), axis=-1)[:, :, 1:]
    else:
        weights = T.softmax(logits, axis=-1)
    out = T.matmul(weights, v)
    return (out, weights) if return_weights else out
