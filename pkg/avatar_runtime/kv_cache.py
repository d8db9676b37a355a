"""
Rolling KV cache with a permanent reference sink and reference-anchored
positional re-encoding.

Keys are stored raw (no rotary encoding). Every query step asks for an
``encoded_view`` that assigns positions relative to the current frame:

* the current frame ``t`` sits at ``min(t, D)``;
* a rolling-window frame ``t'`` sits at ``min(t, D) - (t - t')``;
* sink frames (the reference and, optionally, the first chunk) keep their
  own frame ids as positions.

The window capacity counts the frames of the chunk being generated, so a
chunk ending at ``t`` sees the window frames with ``frame_id > t - window``.
"""
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .attention import RopeParams, chunk_of, rope_apply
from .exceptions import CacheConfigError, CacheOrderError, PositionCollisionError, ShapeError

logger = logging.getLogger(__name__)

SINK = "sink"
WINDOW = "window"
SOURCES = ("reference", "student", "teacher")


@dataclass(frozen=True)
class CacheConfig:
    sink_capacity: int = 4
    window_capacity: int = 6
    rapr_cap: int = 10
    chunk_size: int = 3
    sink_enabled: bool = True
    rapr_enabled: bool = True

    def __post_init__(self):
        if self.chunk_size < 1:
            raise CacheConfigError(f"chunk_size must be positive, got {self.chunk_size}")
        if self.window_capacity < self.chunk_size:
            raise CacheConfigError(
                f"window_capacity {self.window_capacity} cannot hold a chunk of {self.chunk_size} frames")
        if self.sink_enabled and not 1 <= self.sink_capacity <= self.chunk_size + 1:
            raise CacheConfigError(
                f"sink_capacity must be in [1, {self.chunk_size + 1}], got {self.sink_capacity}")
        if self.rapr_enabled:
            if self.rapr_cap < 1:
                raise CacheConfigError(f"rapr_cap must be positive, got {self.rapr_cap}")
            if self.rapr_cap < self.sink_frames + self.window_capacity:
                raise CacheConfigError(
                    f"rapr_cap {self.rapr_cap} < sink {self.sink_frames} + window {self.window_capacity}: "
                    "positions would collide")

    @property
    def sink_frames(self) -> int:
        return self.sink_capacity if self.sink_enabled else 0

    @property
    def capacity(self) -> int:
        return self.sink_frames + self.window_capacity


@dataclass
class CacheEntry:
    frame_id: int
    keys: List[np.ndarray]  # per layer [tokens, heads, head_dim], no rotary encoding
    values: List[np.ndarray]
    source: str = "student"
    region: Optional[str] = None

    def __post_init__(self):
        if len(self.keys) != len(self.values):
            raise ShapeError(f"frame {self.frame_id}: {len(self.keys)} key layers vs {len(self.values)} value layers")
        if self.source not in SOURCES:
            raise CacheConfigError(f"unknown cache entry source {self.source!r}")


@dataclass
class CacheView:
    """Ephemeral position-encoded copy of the visible cache entries."""
    frame_ids: List[int]
    indices: Dict[int, int]
    keys: List[np.ndarray]  # per layer [frames, tokens, heads, head_dim], rotary applied
    values: List[np.ndarray]
    sources: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frame_ids)


class CacheState:
    """Sink and window regions; single owner per stream."""

    def __init__(self, config: CacheConfig):
        self.config = config
        self.sink: List[CacheEntry] = []
        self.window: List[CacheEntry] = []
        self.evicted = 0

    def entries(self) -> List[CacheEntry]:
        return self.sink + self.window

    def frame_ids(self) -> List[int]:
        return [e.frame_id for e in self.entries()]

    def __len__(self) -> int:
        return len(self.sink) + len(self.window)

    def __contains__(self, frame_id: int) -> bool:
        return any(e.frame_id == frame_id for e in self.entries())

    @property
    def max_frame(self) -> int:
        ids = self.frame_ids()
        return max(ids) if ids else -1

    def visible(self, current_frame: int) -> List[CacheEntry]:
        """Entries a chunk whose last frame is ``current_frame`` attends to."""
        horizon = current_frame - self.config.window_capacity
        return self.sink + [e for e in self.window if e.frame_id > horizon]

    def copy(self) -> "CacheState":
        twin = CacheState(self.config)
        twin.sink = list(self.sink)
        twin.window = list(self.window)
        twin.evicted = self.evicted
        return twin


def append_chunk(state: CacheState, entries: Sequence[CacheEntry]) -> CacheState:
    config = state.config
    last = state.max_frame
    layers = len(state.entries()[0].keys) if len(state) else None
    for entry in entries:
        if entry.frame_id <= last:
            raise CacheOrderError(f"frame {entry.frame_id} does not follow cached frame {last}")
        if layers is not None and len(entry.keys) != layers:
            raise ShapeError(f"frame {entry.frame_id} carries {len(entry.keys)} layers, cache holds {layers}")
        layers = len(entry.keys)
        last = entry.frame_id
        if config.sink_enabled and entry.frame_id < config.sink_capacity:
            entry.region = SINK
            state.sink.append(entry)
        else:
            entry.region = WINDOW
            state.window.append(entry)
    overflow = len(state.window) - config.window_capacity
    if overflow > 0:
        dropped = state.window[:overflow]
        state.window = state.window[overflow:]
        state.evicted += overflow
        logger.debug("[Cache] evicted frames %s", [e.frame_id for e in dropped])
    return state


def rapr_indices(state: CacheState, current_frame: int, pending: Sequence[int] = ()) -> Dict[int, int]:
    """Positional index of every visible cached frame and every ``pending`` frame."""
    config = state.config
    if state.max_frame > current_frame or any(f > current_frame for f in pending):
        raise CacheOrderError(f"current frame {current_frame} precedes cached or pending frames")
    visible = state.visible(current_frame)
    indices: Dict[int, int] = {}
    if not config.rapr_enabled:
        for entry in visible:
            indices[entry.frame_id] = entry.frame_id
        for frame in pending:
            indices[frame] = frame
        return indices
    anchor = min(current_frame, config.rapr_cap)
    for entry in visible:
        if entry.region == SINK:
            indices[entry.frame_id] = entry.frame_id
        else:
            indices[entry.frame_id] = anchor - (current_frame - entry.frame_id)
    for frame in pending:
        indices[frame] = anchor - (current_frame - frame)
    if len(set(indices.values())) != len(indices) or min(indices.values(), default=0) < 0:
        raise PositionCollisionError(f"positions collide at t={current_frame}: {indices}")
    return indices


def encoded_view(state: CacheState, current_frame: int, params: RopeParams,
                 pending: Sequence[int] = ()) -> CacheView:
    indices = rapr_indices(state, current_frame, pending)
    visible = state.visible(current_frame)
    frame_ids = [e.frame_id for e in visible]
    keys, values = [], []
    if visible:
        positions = [indices[f] for f in frame_ids]
        with T.no_grad():
            for layer in range(len(visible[0].keys)):
                raw = np.stack([e.keys[layer] for e in visible])
                keys.append(rope_apply(raw, positions, params).data)
                values.append(np.stack([e.values[layer] for e in visible]))
    return CacheView(frame_ids, indices, keys, values, [e.source for e in visible])


def view_mask(view: CacheView, query_frames: Sequence[int], chunk_size: int) -> np.ndarray:
    """Frame-level visibility of the cached frames for ``query_frames`` (all prior chunks)."""
    allowed = np.array([[chunk_of(k, chunk_size) <= chunk_of(q, chunk_size) for k in view.frame_ids]
                        for q in query_frames], dtype=bool)
    return allowed.reshape(len(query_frames), len(view.frame_ids))


def dump(state: CacheState, current_frame: int) -> str:
    """JSON listing of (frame_id, region, index at ``current_frame``) for visible entries."""
    indices = rapr_indices(state, current_frame)
    rows = [{"frame_id": e.frame_id, "region": e.region, "index": indices[e.frame_id]}
            for e in state.visible(current_frame)]
    return json.dumps(rows, indent=1)
