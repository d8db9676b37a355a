"""
Two-stage streaming pipeline: chunk denoising feeds a stub decoder through a
bounded queue, both stages running concurrently.

Timing is reconstructed from per-chunk stage busy durations (integer
microseconds) with the bounded-queue recurrence

    dit_done[i] = put[i-1] + dit[i]              (put[0] = 0)
    put[i]      = max(dit_done[i], take[i-cap])  (queue slot frees on a take)
    take[i]     = max(put[i], vae_done[i-1])
    vae_done[i] = take[i] + vae[i]

Busy durations are either measured (wall clock) or taken from a delay model
(simulated clock: first chunk costs the stage FFD, later chunks rtf x chunk
length), which makes every reported number reproducible.
"""
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .audio import AudioTrack
from .exceptions import ConfigError, RuntimeFailure
from .kv_cache import CacheConfig
from .models import AvatarDiT
from .scheduler import Instrumentation, NoiseSchedule, rollout
from .util import csv_text, stat_distance

logger = logging.getLogger(__name__)

CLOCKS = ("wall", "simulated")
_US = 1_000_000


@dataclass(frozen=True)
class PipelineConfig:
    cache: CacheConfig = field(default_factory=CacheConfig)
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    checkpoint: str = ""
    chunk_seconds: float = 0.48
    fps: int = 25
    clock: str = "wall"
    dit_ffd_seconds: float = 0.33
    dit_rtf: float = 0.69
    vae_ffd_seconds: float = 0.39
    vae_rtf: float = 0.82
    decode_delay_seconds: float = 0.0
    queue_capacity: int = 2
    pixel_dim: int = 3
    num_chunks: int = 10
    clean_recache: bool = False
    output: str = ""
    seed: int = 0

    def __post_init__(self):
        if self.chunk_seconds <= 0:
            raise ConfigError(f"chunk_seconds must be positive, got {self.chunk_seconds}")
        if self.clock not in CLOCKS:
            raise ConfigError(f"clock must be one of {CLOCKS}, got {self.clock!r}")
        if min(self.dit_ffd_seconds, self.dit_rtf, self.vae_ffd_seconds, self.vae_rtf,
               self.decode_delay_seconds) < 0:
            raise ConfigError("stage delays must be non-negative")
        if self.queue_capacity < 1 or self.pixel_dim < 1 or self.num_chunks < 1:
            raise ConfigError("queue_capacity, pixel_dim and num_chunks must be positive")

    def stage_delay_us(self, stage: str, index: int) -> int:
        """Simulated busy time of ``stage`` ("dit" or "vae") for 1-based chunk ``index``."""
        ffd, rtf = (self.dit_ffd_seconds, self.dit_rtf) if stage == "dit" else (self.vae_ffd_seconds, self.vae_rtf)
        seconds = ffd if index == 1 else rtf * self.chunk_seconds
        return int(round(seconds * _US))


@dataclass
class RunMetrics:
    chunks: int = 0
    chunk_us: int = 480000
    dit_busy_us: List[int] = field(default_factory=list)
    vae_busy_us: List[int] = field(default_factory=list)
    dit_done_us: List[int] = field(default_factory=list)
    vae_done_us: List[int] = field(default_factory=list)
    max_position: int = 0
    out_of_range: bool = False
    forwards: int = 0
    reference_forwards: int = 0
    partial: bool = False

    def _rtf(self, busy: Sequence[int]) -> float:
        return sum(busy) / (self.chunks * self.chunk_us) if self.chunks else 0.0

    @property
    def dit_rtf(self) -> float:
        return self._rtf(self.dit_busy_us)

    @property
    def vae_rtf(self) -> float:
        return self._rtf(self.vae_busy_us)

    @property
    def dit_ffd(self) -> float:
        return self.dit_done_us[0] / _US if self.chunks else 0.0

    @property
    def vae_ffd(self) -> float:
        return self.vae_busy_us[0] / _US if self.chunks else 0.0

    @property
    def ffd(self) -> float:
        return self.vae_done_us[0] / _US if self.chunks else 0.0

    @property
    def latency(self) -> float:
        return (self.vae_done_us[0] + self.chunk_us) / _US if self.chunks else 0.0

    @property
    def chunk_done_seconds(self) -> List[float]:
        return [t / _US for t in self.vae_done_us]

    @property
    def realtime(self) -> bool:
        return self.chunks > 0 and self.dit_rtf < 1.0 and self.vae_rtf < 1.0

    def table(self) -> str:
        rows = [("dit", self.dit_rtf, self.dit_ffd), ("vae", self.vae_rtf, self.vae_ffd),
                ("total", max(self.dit_rtf, self.vae_rtf), self.ffd)]
        text = csv_text(("stage", "rtf", "ffd_seconds"), rows)
        return text + csv_text(("latency_seconds", "realtime", "chunks", "partial"),
                               [(self.latency, self.realtime, self.chunks, self.partial)])


def build_timeline(dit_busy_us: Sequence[int], vae_busy_us: Sequence[int], capacity: int,
                   chunk_us: int = 480000) -> RunMetrics:
    """Completion times of both stages from per-chunk busy durations."""
    if len(dit_busy_us) != len(vae_busy_us):
        raise RuntimeFailure("stage busy lists differ in length")
    metrics = RunMetrics(chunks=len(dit_busy_us), chunk_us=chunk_us,
                         dit_busy_us=list(dit_busy_us), vae_busy_us=list(vae_busy_us))
    put, take = [], []
    previous_put, previous_vae = 0, 0
    for i, (dit, vae) in enumerate(zip(dit_busy_us, vae_busy_us)):
        dit_done = previous_put + dit
        put_i = max(dit_done, take[i - capacity]) if i >= capacity else dit_done
        take_i = max(put_i, previous_vae)
        previous_vae = take_i + vae
        previous_put = put_i
        put.append(put_i)
        take.append(take_i)
        metrics.dit_done_us.append(dit_done)
        metrics.vae_done_us.append(previous_vae)
    return metrics


class StubDecoder:
    """Seeded linear map latent_dim -> pixel_dim standing in for the video decoder."""

    def __init__(self, latent_dim: int, pixel_dim: int = 3, seed: int = 0, delay_seconds: float = 0.0):
        rng = np.random.default_rng(seed)
        self.weight = rng.normal(0.0, 1.0 / np.sqrt(latent_dim), (latent_dim, pixel_dim))
        self.delay_seconds = delay_seconds

    def decode(self, latents: np.ndarray) -> np.ndarray:
        if self.delay_seconds > 0:
            time.sleep(self.delay_seconds)
        return np.asarray(latents) @ self.weight


@dataclass
class StreamResult:
    latents: List[np.ndarray]
    frames: List[np.ndarray]
    metrics: RunMetrics


_DONE = object()


def _available_chunks(config: PipelineConfig, model: AvatarDiT, audio: Optional[AudioTrack]) -> Tuple[int, bool]:
    if audio is None:
        return config.num_chunks, False
    available = audio.frames // model.config.chunk_size
    if available < config.num_chunks:
        logger.warning("[Stream] audio covers %d of %d chunks, stopping early", available, config.num_chunks)
        return available, True
    return config.num_chunks, False


def stream(config: PipelineConfig, reference, audio: Optional[AudioTrack],
           model: Optional[AvatarDiT] = None) -> StreamResult:
    """Run denoise and decode stages concurrently and account their timing."""
    if model is None:
        from .checkpoint import load_checkpoint
        model = load_checkpoint(config.checkpoint, mode="student")
    num_chunks, partial = _available_chunks(config, model, audio)
    decoder = StubDecoder(model.config.latent_dim, config.pixel_dim, config.seed,
                          config.decode_delay_seconds if config.clock == "wall" else 0.0)
    handoff: "queue.Queue" = queue.Queue(maxsize=config.queue_capacity)
    stats = Instrumentation()
    latents: List[np.ndarray] = []
    frames: List[np.ndarray] = []
    dit_busy: List[int] = []
    vae_busy: List[int] = []
    failures: List[BaseException] = []

    def producer():
        try:
            with T.no_grad():
                chunks = rollout(model, reference, audio, num_chunks, config.cache, config.schedule,
                                 seed=config.seed, instrumentation=stats, clean_recache=config.clean_recache)
                for chunk in chunks:
                    handoff.put((chunk.index, chunk.clean, chunk.seconds))
        except BaseException as exc:
            logger.exception("[Stream] denoise stage failed")
            failures.append(exc)
        finally:
            handoff.put(_DONE)

    def consumer():
        while True:
            item = handoff.get()
            if item is _DONE:
                break
            index, clean, seconds = item
            if failures:
                continue  # drain so the producer never blocks on a full queue
            began = time.perf_counter()
            try:
                frames.append(decoder.decode(clean))
            except BaseException as exc:
                logger.exception("[Stream] decode stage failed on chunk %d", index)
                failures.append(exc)
                continue
            latents.append(clean)
            decode_seconds = time.perf_counter() - began
            if config.clock == "simulated":
                dit_busy.append(config.stage_delay_us("dit", index))
                vae_busy.append(config.stage_delay_us("vae", index))
            else:
                dit_busy.append(int(round(seconds * _US)))
                vae_busy.append(int(round(decode_seconds * _US)))
            logger.debug("[Stream] chunk %d decoded", index)

    workers = [threading.Thread(target=producer, name="denoise"), threading.Thread(target=consumer, name="decode")]
    for worker in workers:
        worker.start()
    for worker in workers:
        worker.join()
    if failures:
        raise failures[0]

    metrics = build_timeline(dit_busy, vae_busy, config.queue_capacity, int(round(config.chunk_seconds * _US)))
    metrics.max_position = stats.max_position
    metrics.out_of_range = stats.out_of_range
    metrics.forwards = stats.forwards
    metrics.reference_forwards = stats.reference_forwards
    metrics.partial = partial
    logger.info("[Stream] %d chunks: dit rtf %.3f, vae rtf %.3f, ffd %.3fs, latency %.3fs",
                metrics.chunks, metrics.dit_rtf, metrics.vae_rtf, metrics.ffd, metrics.latency)
    return StreamResult(latents, frames, metrics)


def run_sequential(config: PipelineConfig, reference, audio: Optional[AudioTrack],
                   model: AvatarDiT) -> StreamResult:
    """Denoise everything, then decode everything; reference output for ``stream``."""
    num_chunks, partial = _available_chunks(config, model, audio)
    decoder = StubDecoder(model.config.latent_dim, config.pixel_dim, config.seed)
    stats = Instrumentation()
    with T.no_grad():
        latents = [c.clean for c in rollout(model, reference, audio, num_chunks, config.cache, config.schedule,
                                            seed=config.seed, instrumentation=stats,
                                            clean_recache=config.clean_recache)]
    frames = [decoder.decode(x) for x in latents]
    metrics = RunMetrics(chunks=len(latents), max_position=stats.max_position, out_of_range=stats.out_of_range,
                         forwards=stats.forwards, reference_forwards=stats.reference_forwards, partial=partial)
    return StreamResult(latents, frames, metrics)


def bench(config: PipelineConfig, num_chunks: Optional[int] = None) -> RunMetrics:
    """Timeline of the configured stage delays alone, under the simulated clock."""
    count = num_chunks or config.num_chunks
    dit = [config.stage_delay_us("dit", i) for i in range(1, count + 1)]
    vae = [config.stage_delay_us("vae", i) for i in range(1, count + 1)]
    return build_timeline(dit, vae, config.queue_capacity, int(round(config.chunk_seconds * _US)))


# ---------------------------------------------------------------------------
# Drift
# ---------------------------------------------------------------------------

def drift_report(chunks: Sequence[np.ndarray], reference: np.ndarray) -> List[float]:
    """Per chunk: ||mean_c - mean_ref|| + ||var_c - var_ref|| over latent channels."""
    return [stat_distance(chunk, reference) for chunk in chunks]


def drift_csv(curve: Sequence[float]) -> str:
    return csv_text(("chunk", "drift"), [(i, float(v)) for i, v in enumerate(curve, start=1)])
