"""
Job entry points behind the command line. Each job logs its start and end.
"""
import logging
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from . import tensor as T
from .audio import AudioTrack, load_track
from .checkpoint import load_checkpoint, save_checkpoint
from .config import AvatarRuntimeConfig
from .discriminator import init_from_teacher
from .distill import (OdePair, TrainingLog, adversarial_step, generate_ode_pairs, new_state, ode_init,
                      ode_loss, sid_step, train_teacher)
from .exceptions import ConfigError
from .kv_cache import CacheConfig
from .models import AvatarDiT, as_student, build_model
from .scheduler import Instrumentation, rollout
from .streaming import StreamResult, bench, drift_csv, drift_report, stream
from .synthetic import SyntheticTask

logger = logging.getLogger(__name__)

VARIANTS = {
    "baseline": {"sink_enabled": False, "rapr_enabled": False},
    "sink": {"sink_enabled": True, "rapr_enabled": False},
    "sink+rapr": {"sink_enabled": True, "rapr_enabled": True},
}

_SAMPLE_OFFSET = 1_000_000  # evaluation samples never overlap training samples


def _task(cfg: AvatarRuntimeConfig) -> SyntheticTask:
    return SyntheticTask(cfg.model_config(), seed=cfg.seed)


def _log(out: Path) -> TrainingLog:
    return TrainingLog(out.with_suffix(".log"))


def _teacher(path: str, cfg: AvatarRuntimeConfig) -> AvatarDiT:
    return load_checkpoint(path, expected=cfg.model_config(), mode="teacher")


def train_teacher_job(cfg: AvatarRuntimeConfig, out: Path) -> AvatarDiT:
    logger.info("[Task] Starting toy teacher training (%d steps)", cfg.teacher_train_steps)
    teacher = build_model(cfg.model_config("teacher"), seed=cfg.seed)
    train_teacher(teacher, _task(cfg), cfg.train_config(), seed=cfg.seed, log=_log(out))
    save_checkpoint(teacher, out)
    logger.info("[Task] Teacher training finished, checkpoint at %s", out)
    return teacher


# ---------------------------------------------------------------------------
# ODE pair files (numpy .npz)
# ---------------------------------------------------------------------------

def save_pairs(pairs: List[OdePair], path: Path) -> None:
    samples = sorted({p.sample for p in pairs})
    first = {p.sample: p for p in reversed(pairs)}
    with path.open("wb") as handle:
        np.savez_compressed(
            handle,
            sample=np.array([p.sample for p in pairs]), chunk=np.array([p.chunk for p in pairs]),
            sigma=np.array([p.sigma for p in pairs]),
            noisy=np.stack([p.noisy for p in pairs]), target=np.stack([p.target for p in pairs]),
            sample_ids=np.array(samples),
            reference=np.stack([first[s].reference for s in samples]),
            features=np.stack([first[s].audio.features for s in samples]),
            mask=np.stack([first[s].audio.mask for s in samples]))


def load_pairs(path: Path) -> List[OdePair]:
    with np.load(path) as data:
        lookup = {int(s): i for i, s in enumerate(data["sample_ids"])}
        tracks = [AudioTrack(f, m) for f, m in zip(data["features"], data["mask"])]
        return [OdePair(int(s), int(c), float(sig), n, t, data["reference"][lookup[int(s)]], tracks[lookup[int(s)]])
                for s, c, sig, n, t in zip(data["sample"], data["chunk"], data["sigma"],
                                           data["noisy"], data["target"])]


def gen_ode_pairs_job(cfg: AvatarRuntimeConfig, teacher_path: str, out: Path) -> List[OdePair]:
    logger.info("[Task] Starting ODE pair generation (%d trajectories)", cfg.ode_pair_count)
    teacher = _teacher(teacher_path, cfg)
    samples = _task(cfg).batch(0, cfg.ode_pair_count, cfg.window_frames)
    pairs = generate_ode_pairs(teacher, samples, cfg.noise_schedule(), seed=cfg.seed,
                               teacher_steps=cfg.teacher_steps)
    save_pairs(pairs, out)
    logger.info("[Task] %d ODE pairs written to %s", len(pairs), out)
    return pairs


def ode_init_job(cfg: AvatarRuntimeConfig, teacher_path: str, pairs_path: str, out: Path) -> AvatarDiT:
    logger.info("[Task] Starting ODE regression init (%d steps)", cfg.ode_init_steps)
    student = as_student(_teacher(teacher_path, cfg))
    pairs = load_pairs(Path(pairs_path))
    before = ode_loss(student, pairs)
    state = new_state(student, cfg.train_config(), _log(out))
    ode_init(student, pairs, cfg.train_config(), seed=cfg.seed, state=state)
    logger.info("[Task] ODE init finished: regression loss %.6f -> %.6f", before, ode_loss(student, pairs))
    save_checkpoint(student, out)
    return student


def distill_job(cfg: AvatarRuntimeConfig, teacher_path: str, student_path: str, out: Path) -> AvatarDiT:
    logger.info("[Task] Starting score distillation (%d steps)", cfg.sid_steps)
    train = cfg.train_config()
    teacher = _teacher(teacher_path, cfg)
    student = load_checkpoint(student_path, expected=cfg.model_config(), mode="student")
    state = new_state(student, train, _log(out))
    task = _task(cfg)
    for step in range(cfg.sid_steps):
        batch = task.batch(step * train.batch_size, train.batch_size, cfg.window_frames)
        sid_step(state, teacher, batch, cfg.noise_schedule(), cfg.cache_config(), train, seed=cfg.seed)
    save_checkpoint(student, out)
    logger.info("[Task] Score distillation finished, checkpoint at %s", out)
    return student


def refine_job(cfg: AvatarRuntimeConfig, teacher_path: str, student_path: str, out: Path) -> AvatarDiT:
    logger.info("[Task] Starting adversarial refinement (%d steps)", cfg.adversarial_steps)
    train = cfg.train_config()
    teacher = _teacher(teacher_path, cfg)
    student = load_checkpoint(student_path, expected=cfg.model_config(), mode="student")
    state = new_state(student, train, _log(out))
    state.discriminator = init_from_teacher(teacher, cfg.num_queries, cfg.seed, cfg.freeze_backbone,
                                            cfg.global_branch)
    state.disc_optimizer = train.critic_optimizer([p for p in state.discriminator.parameters() if p.requires_grad])
    task = _task(cfg)
    for step in range(cfg.adversarial_steps):
        batch = task.batch(step * train.batch_size, train.batch_size, cfg.window_frames)
        adversarial_step(state, batch, cfg.noise_schedule(), cfg.cache_config(), train, seed=cfg.seed,
                         teacher=teacher if train.distill_mix > 0 else None)
    save_checkpoint(student, out)
    save_checkpoint(state.discriminator, out.with_suffix(".disc"))
    logger.info("[Task] Adversarial refinement finished, checkpoint at %s", out)
    return student


# ---------------------------------------------------------------------------
# Inference jobs
# ---------------------------------------------------------------------------

def _conditioning(cfg: AvatarRuntimeConfig, track_path: Optional[str], frames: int) -> Tuple[np.ndarray, AudioTrack]:
    sample = _task(cfg).sample(_SAMPLE_OFFSET + cfg.seed, frames)
    audio = load_track(track_path) if track_path else sample.audio
    if audio.audio_dim != cfg.audio_dim:
        raise ConfigError(f"track has {audio.audio_dim} audio dims, model expects {cfg.audio_dim}")
    return sample.reference, audio


def stream_job(cfg: AvatarRuntimeConfig, student_path: str, out: Optional[Path],
               track_path: Optional[str] = None) -> StreamResult:
    logger.info("[Task] Starting stream (%d chunks, %s clock)", cfg.num_chunks, cfg.clock)
    pipeline = replace(cfg.pipeline_config(), checkpoint=student_path)
    reference, audio = _conditioning(cfg, track_path, cfg.num_chunks * cfg.chunk_size)
    model = load_checkpoint(student_path, expected=cfg.model_config(), mode="student")
    result = stream(pipeline, reference, audio, model)
    if out is not None:
        out.write_text(result.metrics.table(), encoding="utf-8")
        np.save(out.with_suffix(".npy"), np.concatenate(result.frames) if result.frames else np.zeros(0))
    logger.info("[Task] Stream finished: %d chunks, latency %.3fs", result.metrics.chunks, result.metrics.latency)
    return result


def bench_job(cfg: AvatarRuntimeConfig, out: Optional[Path]) -> str:
    logger.info("[Task] Starting simulated-clock bench")
    table = bench(replace(cfg.pipeline_config(), clock="simulated")).table()
    if out is not None:
        out.write_text(table, encoding="utf-8")
    logger.info("[Task] Bench finished")
    return table


def variant_cache(cfg: AvatarRuntimeConfig, variant: str) -> CacheConfig:
    """Cache settings of an ablation rung; a leading "+" is accepted (``+sink+rapr``)."""
    variant = variant.lstrip("+")
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}, expected one of {sorted(VARIANTS)}")
    return replace(cfg.cache_config(), **VARIANTS[variant])


def drift_curve(model: AvatarDiT, cache: CacheConfig, cfg: AvatarRuntimeConfig, reference: np.ndarray,
                audio: Optional[AudioTrack], num_chunks: int) -> Tuple[List[float], Instrumentation]:
    stats = Instrumentation()
    with T.no_grad():
        chunks = [c.clean for c in rollout(model, reference, audio, num_chunks, cache, cfg.noise_schedule(),
                                           seed=cfg.seed, instrumentation=stats)]
    return drift_report(chunks, reference), stats


def drift_job(cfg: AvatarRuntimeConfig, student_path: str, variant: str, out: Optional[Path],
              track_path: Optional[str] = None) -> List[float]:
    logger.info("[Task] Starting drift report (%s, %d chunks)", variant, cfg.num_chunks)
    model = load_checkpoint(student_path, expected=cfg.model_config(), mode="student")
    reference, audio = _conditioning(cfg, track_path, cfg.num_chunks * cfg.chunk_size)
    curve, stats = drift_curve(model, variant_cache(cfg, variant), cfg, reference, audio, cfg.num_chunks)
    text = drift_csv(curve)
    if out is not None:
        out.write_text(text, encoding="utf-8")
    logger.info("[Task] Drift report finished: mean %.5f, max position %d%s", float(np.mean(curve)),
                stats.max_position, " (beyond training range)" if stats.out_of_range else "")
    return curve
