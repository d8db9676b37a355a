"""
Few-step chunkwise sampling.

Corruption is the linear flow interpolation x_s = (1 - s) * x + s * eps.
A chunk starts as pure noise at the first schedule level and is stepped
down the schedule with the deterministic update

    x_next = (1 - s_next) * x0_hat + s_next * eps_hat,
    eps_hat = (x - (1 - s) * x0_hat) / s

The cache receives the keys/values of the chunk's LAST forward pass (its
input at the lowest noise level), so each chunk costs exactly one forward
per schedule level.
"""
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Set, Tuple

import numpy as np

from . import tensor as T
from .audio import AudioTrack
from .exceptions import AudioExhaustedError, CacheConfigError, ScheduleError
from .kv_cache import CacheConfig, CacheEntry, CacheState, append_chunk
from .models import AvatarDiT, kv_entries
from .tensor import Tensor

logger = logging.getLogger(__name__)

_GRID_TOLERANCE = 1e-9


@dataclass(frozen=True)
class NoiseSchedule:
    sigmas: Tuple[float, ...] = (1.0, 0.66, 0.33)

    def __post_init__(self):
        sigmas = tuple(float(s) for s in self.sigmas)
        if not sigmas:
            raise ScheduleError("noise schedule is empty")
        if any(not 0.0 < s <= 1.0 for s in sigmas):
            raise ScheduleError(f"noise levels must lie in (0, 1], got {sigmas}")
        if any(b >= a for a, b in zip(sigmas, sigmas[1:])):
            raise ScheduleError(f"noise levels must strictly decrease, got {sigmas}")
        object.__setattr__(self, "sigmas", sigmas)

    @property
    def steps(self) -> int:
        return len(self.sigmas)

    def next_level(self, step: int) -> float:
        return self.sigmas[step + 1] if step + 1 < self.steps else 0.0

    def contains(self, sigma: float) -> bool:
        return any(abs(s - sigma) < _GRID_TOLERANCE for s in self.sigmas)

    @classmethod
    def uniform(cls, steps: int) -> "NoiseSchedule":
        if steps < 1:
            raise ScheduleError(f"steps must be positive, got {steps}")
        return cls(tuple(np.linspace(1.0, 0.0, steps + 1)[:-1]))

    def teacher_grid(self, steps: int = 20) -> "NoiseSchedule":
        """A uniform ``steps``-level grid with every level of this schedule merged in."""
        levels = list(NoiseSchedule.uniform(steps).sigmas)
        for sigma in self.sigmas:
            if not any(abs(s - sigma) < _GRID_TOLERANCE for s in levels):
                levels.append(sigma)
        return NoiseSchedule(tuple(sorted(levels, reverse=True)))


@dataclass
class LatentChunk:
    index: int
    frame_ids: Tuple[int, ...]
    latents: np.ndarray  # [C, tokens, latent_dim]
    sigma: float  # 0.0 once clean


@dataclass
class Instrumentation:
    forwards: int = 0
    reference_forwards: int = 0
    max_position: int = 0
    out_of_range: bool = False
    chunk_seconds: List[float] = field(default_factory=list)
    timestamps: List[float] = field(default_factory=list)
    context_sources: Set[str] = field(default_factory=set)

    def record_forward(self, indices: Dict[int, int], max_index: int, sources: Sequence[str]) -> None:
        self.forwards += 1
        if indices:
            top = max(indices.values())
            self.max_position = max(self.max_position, top)
            self.out_of_range = self.out_of_range or top > max_index
        self.context_sources.update(sources)


def add_noise(clean, sigma: float, seed=None, rng: Optional[np.random.Generator] = None):
    """(1 - sigma) * clean + sigma * eps; a Tensor input stays differentiable."""
    if not 0.0 < sigma <= 1.0:
        raise ScheduleError(f"sigma must lie in (0, 1], got {sigma}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    eps = rng.standard_normal(np.shape(clean.data if isinstance(clean, Tensor) else clean))
    if isinstance(clean, Tensor):
        return clean * (1.0 - sigma) + eps * sigma
    return (1.0 - sigma) * np.asarray(clean) + sigma * eps


def flow_step(x, x0, sigma: float, sigma_next: float):
    if sigma_next <= 0.0:
        return x0
    eps_hat = (x - x0 * (1.0 - sigma)) * (1.0 / sigma)
    return x0 * (1.0 - sigma_next) + eps_hat * sigma_next


@dataclass
class DenoiseResult:
    chunk: LatentChunk  # clean
    entries: List[CacheEntry]
    prediction: Tensor  # x0 of the final forward; carries a tape when requested
    final_input: np.ndarray  # chunk input to the final forward


def denoise_chunk(model: AvatarDiT, cache: CacheState, chunk: LatentChunk, audio: Optional[AudioTrack],
                  schedule: NoiseSchedule, instrumentation: Optional[Instrumentation] = None,
                  clean_recache: bool = False, grad_last: bool = False, source: str = "student") -> DenoiseResult:
    if schedule.steps < 1:
        raise ScheduleError("noise schedule is empty")
    stats = instrumentation if instrumentation is not None else Instrumentation()
    frames = chunk.frame_ids
    rope_max = model.config.rope.max_index
    x = np.asarray(chunk.latents)
    prediction, kv = None, None
    for step, sigma in enumerate(schedule.sigmas):
        last = step == schedule.steps - 1
        sources = [e.source for e in cache.visible(frames[-1])]
        if last and grad_last:
            prediction, kv, indices = model.student_forward_chunk(x, frames, sigma, cache, audio)
        else:
            with T.no_grad():
                prediction, kv, indices = model.student_forward_chunk(x, frames, sigma, cache, audio)
        stats.record_forward(indices, rope_max, sources)
        if not last:
            x = flow_step(x, prediction.data, sigma, schedule.next_level(step))
    clean = prediction.data.copy()
    if clean_recache:
        with T.no_grad():
            _, kv, indices = model.student_forward_chunk(clean, frames, 0.0, cache, audio)
        stats.record_forward(indices, rope_max, [])
    entries = kv_entries(kv, frames, source)
    return DenoiseResult(LatentChunk(chunk.index, frames, clean, 0.0), entries, prediction, x)


@dataclass
class RolloutChunk:
    index: int
    frame_ids: Tuple[int, ...]
    clean: np.ndarray
    prediction: Tensor
    final_input: np.ndarray
    seconds: float = 0.0


def chunk_noise(seed: int, index: int, shape: Tuple[int, ...]) -> np.ndarray:
    return np.random.default_rng((seed, index)).standard_normal(shape)


def window_noise(seed: int, num_chunks: int, shape: Tuple[int, ...]) -> np.ndarray:
    """Starting noise of chunks 1..num_chunks stacked along frames, as ``rollout`` draws it."""
    return np.concatenate([chunk_noise(seed, index, shape) for index in range(1, num_chunks + 1)])


def rollout(model: AvatarDiT, reference, audio: Optional[AudioTrack], num_chunks: int,
            cache_config: CacheConfig, schedule: NoiseSchedule, seed: int = 0,
            instrumentation: Optional[Instrumentation] = None, clean_recache: bool = False,
            grad: bool = False, cache: Optional[CacheState] = None) -> Iterator[RolloutChunk]:
    """Lazily generate ``num_chunks`` chunks, each conditioned on the student's own output.

    With ``grad`` the final forward of every chunk keeps its tape; the cache
    itself only ever holds detached arrays.
    """
    cfg = model.config
    if cache_config.chunk_size != cfg.chunk_size:
        raise CacheConfigError(f"cache chunk size {cache_config.chunk_size} != model chunk size {cfg.chunk_size}")
    stats = instrumentation if instrumentation is not None else Instrumentation()
    start = 0 if cache is None else cache.max_frame // cfg.chunk_size
    horizon = (start + num_chunks) * cfg.chunk_size
    if audio is not None and audio.frames < horizon:
        raise AudioExhaustedError(f"audio covers {audio.frames} frames, rollout needs {horizon}")
    if cache is None:
        cache = CacheState(cache_config)
        append_chunk(cache, [model.encode_reference(reference)])
        stats.reference_forwards += 1
    return _generate(model, cache, audio, range(start + 1, start + num_chunks + 1), schedule, seed,
                     stats, clean_recache, grad)


def _generate(model: AvatarDiT, cache: CacheState, audio: Optional[AudioTrack], indices: range,
              schedule: NoiseSchedule, seed: int, stats: Instrumentation, clean_recache: bool,
              grad: bool) -> Iterator[RolloutChunk]:
    cfg = model.config
    shape = (cfg.chunk_size, cfg.tokens_per_frame, cfg.latent_dim)
    for index in indices:
        began = time.perf_counter()
        frames = tuple(range((index - 1) * cfg.chunk_size + 1, index * cfg.chunk_size + 1))
        noisy = LatentChunk(index, frames, chunk_noise(seed, index, shape), schedule.sigmas[0])
        result = denoise_chunk(model, cache, noisy, audio, schedule, stats, clean_recache, grad_last=grad)
        append_chunk(cache, result.entries)
        seconds = time.perf_counter() - began
        stats.chunk_seconds.append(seconds)
        stats.timestamps.append(time.perf_counter())
        logger.debug("[Rollout] chunk %d frames %s in %.3fs", index, frames, seconds)
        yield RolloutChunk(index, frames, result.chunk.latents, result.prediction, result.final_input, seconds)


def collect(chunks: Iterator[RolloutChunk]) -> np.ndarray:
    """Concatenate clean chunk latents into [frames, tokens, latent_dim]."""
    return np.concatenate([c.clean for c in chunks], axis=0)


def teacher_sample(model: AvatarDiT, noise: np.ndarray, reference, audio: Optional[AudioTrack],
                   grid: NoiseSchedule, record: Sequence[float] = ()) -> Tuple[np.ndarray, Dict[float, np.ndarray]]:
    """Deterministic many-step window sampling; returns (clean, {level: input at that level})."""
    for sigma in record:
        if not grid.contains(sigma):
            raise ScheduleError(f"level {sigma} is not on the teacher grid")
    x = np.asarray(noise)
    snapshots: Dict[float, np.ndarray] = {}
    with T.no_grad():
        for step, sigma in enumerate(grid.sigmas):
            for wanted in record:
                if abs(wanted - sigma) < _GRID_TOLERANCE:
                    snapshots[wanted] = x.copy()
            x0 = model.teacher_forward(x, sigma, reference, audio).data
            x = flow_step(x, x0, sigma, grid.next_level(step))
    return x, snapshots
