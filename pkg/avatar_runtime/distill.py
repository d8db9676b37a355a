"""
Two-stage adaptation of a bidirectional teacher into a causal few-step student.

Stage 1
  * ``generate_ode_pairs`` records the teacher's deterministic many-step
    trajectories at the student's noise levels.
  * ``ode_init`` regresses the block-causal student onto those pairs.
  * ``sid_step`` distils with student-forcing rollouts: the student's own
    samples are re-noised and pushed along w * (aux_x0 - teacher_x0), while an
    auxiliary network (initialised from the teacher) tracks the student's
    distribution by denoising regression.

Stage 2
  * ``adversarial_step`` runs ``critic_updates`` discriminator updates, then one
    generator update, with relativistic losses and perturbation-estimated
    R1/R2 penalties.

``sample_distance`` and ``feature_distance`` measure progress of the two stages.

Only the final forward of each rollout chunk is differentiated; the cache
always holds detached arrays.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from . import tensor as T
from .audio import AudioTrack
from .discriminator import DiscOutput, Discriminator
from .exceptions import ConfigError, NumericError, RuntimeFailure
from .kv_cache import CacheConfig
from .models import AvatarDiT
from .optim import Adam
from .scheduler import Instrumentation, NoiseSchedule, add_noise, rollout, teacher_sample, window_noise
from .synthetic import SyntheticSample, SyntheticTask
from .tensor import Tensor
from .util import stat_distance

logger = logging.getLogger(__name__)

SID_WEIGHTS = ("constant", "normalized")


@dataclass(frozen=True)
class TrainConfig:
    teacher_train_steps: int = 300
    ode_init_steps: int = 300
    sid_steps: int = 100
    adversarial_steps: int = 100
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    max_grad_norm: float = 1.0
    batch_size: int = 1
    ode_pair_count: int = 8
    teacher_steps: int = 20
    sid_weight: str = "constant"
    sid_regression: float = 0.5
    critic_learning_rate: float = 2e-3
    critic_updates: int = 2
    penalty_gamma: float = 0.1
    penalty_sigma: float = 1e-3
    distill_mix: float = 0.0
    log_every: int = 10
    progress: bool = False

    def __post_init__(self):
        if self.sid_weight not in SID_WEIGHTS:
            raise ConfigError(f"sid_weight must be one of {SID_WEIGHTS}, got {self.sid_weight!r}")
        if self.learning_rate <= 0 or self.critic_learning_rate <= 0:
            raise ConfigError("learning_rate and critic_learning_rate must be positive")
        if self.penalty_sigma <= 0 or self.penalty_gamma < 0:
            raise ConfigError("penalty_sigma must be positive, penalty_gamma non-negative")
        if self.batch_size < 1 or self.teacher_steps < 1 or self.critic_updates < 1:
            raise ConfigError("batch_size, teacher_steps and critic_updates must be positive")
        if self.distill_mix < 0 or self.sid_regression < 0:
            raise ConfigError("distill_mix and sid_regression must be non-negative")

    def optimizer(self, params) -> Adam:
        return Adam(params, self.learning_rate, (self.beta1, self.beta2), max_grad_norm=self.max_grad_norm)

    def critic_optimizer(self, params) -> Adam:
        """Optimizer of the networks updated against the student: aux score and discriminator."""
        return Adam(params, self.critic_learning_rate, (self.beta1, self.beta2), max_grad_norm=self.max_grad_norm)


class TrainingLog:
    """Append-only ``step, phase, loss_name, value`` lines, mirrored to a file when given a path."""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path else None
        self.lines: List[str] = []
        self.records: List[Tuple[int, str, str, float]] = []

    def record(self, step: int, phase: str, name: str, value: float) -> None:
        value = float(value)
        if not np.isfinite(value):
            raise NumericError(f"{phase} step {step}: {name} became {value}")
        line = f"{step}, {phase}, {name}, {value:.8g}"
        self.records.append((step, phase, name, value))
        self.lines.append(line)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as handle:
                handle.write(line + "\n")

    def history(self, phase: str, name: str) -> List[float]:
        return [v for _, p, n, v in self.records if p == phase and n == name]


@dataclass
class TrainState:
    student: AvatarDiT
    optimizer: Adam
    log: TrainingLog = field(default_factory=TrainingLog)
    aux: Optional[AvatarDiT] = None
    aux_optimizer: Optional[Adam] = None
    discriminator: Optional[Discriminator] = None
    disc_optimizer: Optional[Adam] = None
    step: int = 0


def new_state(student: AvatarDiT, config: TrainConfig, log: Optional[TrainingLog] = None) -> TrainState:
    return TrainState(student, config.optimizer(student.parameters()), log or TrainingLog())


def _mse(prediction: Tensor, target) -> Tensor:
    diff = prediction - target
    return T.mean(diff * diff)


def _window_audio(sample: SyntheticSample, frames: int) -> AudioTrack:
    return sample.audio.slice(0, frames)


def _stream_seed(seed: int, step: int, index: int) -> int:
    return int(np.random.default_rng((seed, step, index)).integers(2 ** 31))


def _apply(optimizer: Adam, loss: Tensor, what: str) -> float:
    T.assert_finite(loss, what)
    optimizer.zero_grad()
    T.backward(loss)
    optimizer.step()
    return loss.item()


# ---------------------------------------------------------------------------
# Toy teacher
# ---------------------------------------------------------------------------

def train_teacher(teacher: AvatarDiT, task: SyntheticTask, config: TrainConfig, seed: int = 0,
                  log: Optional[TrainingLog] = None, steps: Optional[int] = None) -> TrainState:
    """Flow-matching denoising of whole windows at one shared noise level."""
    state = new_state(teacher, config, log)
    frames = teacher.config.window_frames
    steps = config.teacher_train_steps if steps is None else steps
    rng = np.random.default_rng(seed)
    for _ in tqdm(range(steps), desc="teacher", disable=not config.progress):
        sample = task.sample(int(rng.integers(2 ** 31)), frames)
        sigma = float(rng.uniform(0.02, 1.0))
        noisy = add_noise(sample.frames, sigma, rng=rng)
        prediction = teacher.teacher_forward(noisy, sigma, sample.reference, _window_audio(sample, frames))
        loss = _apply(state.optimizer, _mse(prediction, sample.frames), "teacher loss")
        state.step += 1
        state.log.record(state.step, "teacher", "mse", loss)
        if state.step % config.log_every == 0:
            logger.info("[Distill] teacher step %d mse=%.6f", state.step, loss)
    return state


# ---------------------------------------------------------------------------
# ODE pairs and regression init
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OdePair:
    sample: int
    chunk: int
    sigma: float
    noisy: np.ndarray  # [C, tokens, latent_dim] at ``sigma`` on the teacher trajectory
    target: np.ndarray  # teacher's final clean output for the same frames
    reference: np.ndarray
    audio: AudioTrack


def generate_ode_pairs(teacher: AvatarDiT, samples: Sequence[SyntheticSample], schedule: NoiseSchedule,
                       count: Optional[int] = None, seed: int = 0, teacher_steps: int = 20,
                       grid: Optional[NoiseSchedule] = None) -> List[OdePair]:
    """Run the teacher sampler and keep snapshots at the student's levels only."""
    cfg = teacher.config
    grid = grid or schedule.teacher_grid(teacher_steps)
    count = len(samples) if count is None else count
    shape = (cfg.window_frames, cfg.tokens_per_frame, cfg.latent_dim)
    pairs = []
    for index in range(count):
        sample = samples[index % len(samples)]
        audio = _window_audio(sample, cfg.window_frames)
        noise = np.random.default_rng((seed, index)).standard_normal(shape)
        clean, snapshots = teacher_sample(teacher, noise, sample.reference, audio, grid, schedule.sigmas)
        for chunk in range(1, cfg.layout.num_chunks + 1):
            rows = slice((chunk - 1) * cfg.chunk_size, chunk * cfg.chunk_size)
            for sigma in schedule.sigmas:
                pairs.append(OdePair(index, chunk, sigma, snapshots[sigma][rows].copy(),
                                     clean[rows].copy(), sample.reference, audio))
    logger.info("[Distill] %d ODE pairs from %d teacher trajectories on a %d-level grid",
                len(pairs), count, grid.steps)
    return pairs


def _pair_windows(pairs: Sequence[OdePair]) -> Dict[int, Dict[Tuple[int, float], OdePair]]:
    windows: Dict[int, Dict[Tuple[int, float], OdePair]] = {}
    for pair in pairs:
        windows.setdefault(pair.sample, {})[(pair.chunk, pair.sigma)] = pair
    return windows


def ode_init(student: AvatarDiT, pairs: Sequence[OdePair], config: TrainConfig, steps: Optional[int] = None,
             seed: int = 0, state: Optional[TrainState] = None) -> TrainState:
    """Regress the block-causal student onto teacher trajectories, every chunk at its own level."""
    if not pairs:
        raise ConfigError("ODE pair dataset is empty")
    state = state or new_state(student, config)
    steps = config.ode_init_steps if steps is None else steps
    cfg = student.config
    windows = _pair_windows(pairs)
    samples = sorted(windows)
    levels: Dict[int, List[float]] = {s: sorted({sig for _, sig in windows[s]}, reverse=True) for s in samples}
    rng = np.random.default_rng(seed)
    for _ in tqdm(range(steps), desc="ode-init", disable=not config.progress):
        sample = samples[int(rng.integers(len(samples)))]
        window = windows[sample]
        noisy, targets, sigmas = [], [], []
        for chunk in range(1, cfg.layout.num_chunks + 1):
            sigma = levels[sample][int(rng.integers(len(levels[sample])))]
            pair = window[(chunk, sigma)]
            noisy.append(pair.noisy)
            targets.append(pair.target)
            sigmas.extend([sigma] * cfg.chunk_size)
        first = next(iter(window.values()))
        try:
            out = student.forward_window(np.concatenate(noisy), np.array(sigmas), first.reference,
                                         first.audio, causal=True)
            loss = _apply(state.optimizer, _mse(out.x0[1:], np.concatenate(targets)), "ode_init loss")
        except NumericError:
            logger.exception("[Distill] ode_init diverged at step %d", state.step + 1)
            raise
        state.step += 1
        state.log.record(state.step, "ode_init", "mse", loss)
        if state.step % config.log_every == 0:
            logger.info("[Distill] ode_init step %d mse=%.6f", state.step, loss)
    return state


def ode_loss(student: AvatarDiT, pairs: Sequence[OdePair]) -> float:
    """Mean regression error of ``student`` over every pair window, all chunks at one level."""
    cfg = student.config
    windows = _pair_windows(pairs)
    total, count = 0.0, 0
    with T.no_grad():
        for window in windows.values():
            for sigma in sorted({sig for _, sig in window}):
                chunks = [window[(c, sigma)] for c in range(1, cfg.layout.num_chunks + 1)]
                out = student.forward_window(np.concatenate([p.noisy for p in chunks]), sigma,
                                             chunks[0].reference, chunks[0].audio, causal=True)
                total += _mse(out.x0[1:], np.concatenate([p.target for p in chunks])).item()
                count += 1
    return total / max(count, 1)


# ---------------------------------------------------------------------------
# Score distillation with student forcing
# ---------------------------------------------------------------------------

def student_rollout(student: AvatarDiT, sample: SyntheticSample, schedule: NoiseSchedule,
                    cache_config: CacheConfig, seed, grad: bool = True) -> Tuple[Tensor, Instrumentation]:
    """One window generated chunk by chunk from the student's own context."""
    cfg = student.config
    stats = Instrumentation()
    chunks = list(rollout(student, sample.reference, _window_audio(sample, cfg.window_frames),
                          cfg.layout.num_chunks, cache_config, schedule, seed=seed,
                          instrumentation=stats, grad=grad))
    if not stats.context_sources <= {"reference", "student"}:
        raise RuntimeFailure(f"student-forcing rollout read foreign context {stats.context_sources}")
    return T.concat([c.prediction for c in chunks], axis=0), stats


def sid_gap(sample_x: np.ndarray, sigma: float, teacher: AvatarDiT, aux: AvatarDiT, sample: SyntheticSample,
            rng: np.random.Generator, weighting: str = "constant") -> np.ndarray:
    """g = w * (aux_x0 - teacher_x0) on a re-noised copy of ``sample_x``."""
    audio = _window_audio(sample, teacher.config.window_frames)
    noisy = add_noise(sample_x, sigma, rng=rng)
    with T.no_grad():
        teacher_x0 = teacher.teacher_forward(noisy, sigma, sample.reference, audio).data
        aux_x0 = aux.teacher_forward(noisy, sigma, sample.reference, audio).data
    weight = 1.0
    if weighting == "normalized":
        weight = 1.0 / max(float(np.mean(np.abs(sample_x - teacher_x0))), 1e-6)
    return weight * (aux_x0 - teacher_x0)


def _sid_surrogate(x_hat: Tensor, gap: np.ndarray) -> Tensor:
    # d/dx of 0.5 * mean((x - sg(x - g))^2) is g / numel
    return _mse(x_hat, x_hat.data - gap) * 0.5


def attach_aux(state: TrainState, teacher: AvatarDiT, config: TrainConfig) -> AvatarDiT:
    """Aux score network for ``state``, cloned from ``teacher`` on first use."""
    if state.aux is None:
        state.aux = teacher.clone()
        state.aux.requires_grad_(True)
        state.aux_optimizer = config.critic_optimizer(state.aux.parameters())
    return state.aux


def teacher_target(teacher: AvatarDiT, sample: SyntheticSample, stream_seed: int, grid: NoiseSchedule) -> np.ndarray:
    """Teacher's many-step sample from the noise a student rollout seeded with ``stream_seed`` starts from."""
    cfg = teacher.config
    noise = window_noise(stream_seed, cfg.layout.num_chunks, (cfg.chunk_size, cfg.tokens_per_frame, cfg.latent_dim))
    clean, _ = teacher_sample(teacher, noise, sample.reference, _window_audio(sample, cfg.window_frames), grid)
    return clean


def sid_step(state: TrainState, teacher: AvatarDiT, batch: Sequence[SyntheticSample], schedule: NoiseSchedule,
             cache_config: CacheConfig, config: TrainConfig, seed: int = 0,
             sigma: Optional[float] = None) -> TrainState:
    """One student update, then ``critic_updates`` aux regression updates on the same samples.

    The student loss is the score-distillation surrogate plus, with
    ``sid_regression`` > 0, the squared error to the teacher's many-step
    sample drawn from the same starting noise.
    """
    teacher.requires_grad_(False)
    attach_aux(state, teacher, config)
    rng = np.random.default_rng((seed, state.step))
    grid = schedule.teacher_grid(config.teacher_steps) if config.sid_regression > 0 else None
    total, gaps, regressions, samples = None, [], [], []
    for i, sample in enumerate(batch):
        stream = _stream_seed(seed, state.step, i)
        x_hat, _ = student_rollout(state.student, sample, schedule, cache_config, seed=stream)
        level = sigma if sigma is not None else float(rng.choice(schedule.sigmas))
        gap = sid_gap(x_hat.data, level, teacher, state.aux, sample, rng, config.sid_weight)
        loss = _sid_surrogate(x_hat, gap)
        if grid is not None:
            regression = _mse(x_hat, teacher_target(teacher, sample, stream, grid))
            regressions.append(regression.item())
            loss = loss + regression * config.sid_regression
        loss = loss * (1.0 / len(batch))
        total = loss if total is None else total + loss
        gaps.append(float(np.sqrt(np.mean(gap * gap))))
        samples.append((x_hat.data.copy(), sample))
    try:
        _apply(state.optimizer, total, "sid loss")
    except NumericError:
        logger.exception("[Distill] sid diverged at step %d", state.step + 1)
        raise

    aux_loss = aux_regression_step(state, samples, schedule, rng, sigma, updates=config.critic_updates)
    state.step += 1
    state.log.record(state.step, "sid", "gap_rms", float(np.mean(gaps)))
    state.log.record(state.step, "sid", "aux_mse", aux_loss)
    if regressions:
        state.log.record(state.step, "sid", "regression", float(np.mean(regressions)))
    if state.step % config.log_every == 0:
        logger.info("[Distill] sid step %d gap_rms=%.6f aux_mse=%.6f regression=%s", state.step, np.mean(gaps),
                    aux_loss, f"{np.mean(regressions):.6f}" if regressions else "off")
    return state


def aux_regression_step(state: TrainState, samples: Sequence[Tuple[np.ndarray, SyntheticSample]],
                        schedule: NoiseSchedule, rng: np.random.Generator, sigma: Optional[float] = None,
                        updates: int = 1) -> float:
    """Denoising regression of the aux network on detached student samples; returns the last loss."""
    aux = state.aux
    loss_value = 0.0
    for _ in range(updates):
        total = None
        for x, sample in samples:
            level = sigma if sigma is not None else float(rng.choice(schedule.sigmas))
            noisy = add_noise(x, level, rng=rng)
            prediction = aux.teacher_forward(noisy, level, sample.reference,
                                             _window_audio(sample, aux.config.window_frames))
            loss = _mse(prediction, x) * (1.0 / len(samples))
            total = loss if total is None else total + loss
        loss_value = _apply(state.aux_optimizer, total, "aux loss")
    return loss_value


# ---------------------------------------------------------------------------
# Adversarial refinement
# ---------------------------------------------------------------------------

_LN2 = float(np.log(2.0))


def _branch_terms(first: DiscOutput, second: DiscOutput) -> Tensor:
    """Mean softplus(-(first - second)) over branches, weights 0.5/0.5."""
    local = T.mean(T.softplus(-(first.per_frame_logits - second.per_frame_logits)))
    if first.global_logit is None or second.global_logit is None:
        return local
    global_term = T.softplus(-(first.global_logit - second.global_logit))
    return local * 0.5 + global_term * 0.5


def relativistic_losses(real: DiscOutput, fake: DiscOutput) -> Tuple[Tensor, Tensor]:
    """(discriminator loss, generator loss); both ln 2 when real and fake logits agree."""
    return _branch_terms(real, fake), _branch_terms(fake, real)


def _logit_vector(out: DiscOutput) -> Tensor:
    if out.global_logit is None:
        return out.per_frame_logits
    return T.concat([out.per_frame_logits, T.reshape(out.global_logit, (1,))], axis=0)


def perturbation_penalty(discriminator: Discriminator, latents: np.ndarray, audio: Optional[AudioTrack],
                         gamma: float, delta: float, rng: np.random.Generator,
                         base: Optional[DiscOutput] = None) -> Tensor:
    """gamma/2 * ||D(x + delta*eps) - D(x)||^2 / delta^2, noise on generated frames only."""
    noise = rng.standard_normal(latents.shape)
    noise[0] = 0.0
    base = base if base is not None else discriminator(latents, audio)
    shifted = discriminator(latents + delta * noise, audio)
    diff = _logit_vector(shifted) - _logit_vector(base)
    return T.tensor_sum(diff * diff) * (gamma / (2.0 * delta * delta))


def _with_reference(reference: np.ndarray, frames) -> Tensor:
    return T.concat([np.asarray(reference)[None], frames], axis=0)


def _discriminator_update(state: TrainState, batch: Sequence[SyntheticSample], fakes: Sequence[np.ndarray],
                          config: TrainConfig, rng: np.random.Generator) -> Tuple[float, float]:
    disc = state.discriminator
    frames = state.student.config.window_frames
    d_total, penalty_total = None, 0.0
    for sample, fake_frames in zip(batch, fakes):
        audio = _window_audio(sample, frames)
        real = np.concatenate([sample.reference[None], sample.frames[:frames]], axis=0)
        fake = np.concatenate([sample.reference[None], fake_frames], axis=0)
        out_real, out_fake = disc(real, audio), disc(fake, audio)
        loss_d, _ = relativistic_losses(out_real, out_fake)
        r1 = perturbation_penalty(disc, real, audio, config.penalty_gamma, config.penalty_sigma, rng, out_real)
        r2 = perturbation_penalty(disc, fake, audio, config.penalty_gamma, config.penalty_sigma, rng, out_fake)
        loss = (loss_d + r1 + r2) * (1.0 / len(batch))
        penalty_total += (r1.item() + r2.item()) / len(batch)
        d_total = loss if d_total is None else d_total + loss
    return _apply(state.disc_optimizer, d_total, "discriminator loss"), penalty_total


def adversarial_step(state: TrainState, batch: Sequence[SyntheticSample], schedule: NoiseSchedule,
                     cache_config: CacheConfig, config: TrainConfig, seed: int = 0,
                     teacher: Optional[AvatarDiT] = None) -> TrainState:
    """Discriminator update on (real, detached fake) then generator update on fresh logits."""
    disc = state.discriminator
    if disc is None or state.disc_optimizer is None:
        raise ConfigError("adversarial_step needs a discriminator and its optimizer in the state")
    if config.distill_mix > 0:
        if teacher is None:
            raise ConfigError("distill_mix > 0 needs the teacher")
        teacher.requires_grad_(False)
        attach_aux(state, teacher, config)
    rng = np.random.default_rng((seed, state.step))
    student = state.student
    frames = student.config.window_frames
    fakes = []
    for i, sample in enumerate(batch):
        x_hat, _ = student_rollout(student, sample, schedule, cache_config, seed=_stream_seed(seed, state.step, i))
        fakes.append(x_hat)

    for _ in range(config.critic_updates):
        d_value, penalty_total = _discriminator_update(state, batch, [x.data for x in fakes], config, rng)

    # generator
    g_total, g_value, mix_value = None, 0.0, 0.0
    for sample, x_hat in zip(batch, fakes):
        audio = _window_audio(sample, frames)
        real = np.concatenate([sample.reference[None], sample.frames[:frames]], axis=0)
        with T.no_grad():
            out_real = disc(real, audio)
        out_fake = disc(_with_reference(sample.reference, x_hat), audio)
        _, loss_g = relativistic_losses(out_real, out_fake)
        loss = loss_g
        if config.distill_mix > 0:
            level = float(rng.choice(schedule.sigmas))
            gap = sid_gap(x_hat.data, level, teacher, state.aux, sample, rng, config.sid_weight)
            mix = _sid_surrogate(x_hat, gap)
            mix_value += mix.item() / len(batch)
            loss = loss + mix * config.distill_mix
        loss = loss * (1.0 / len(batch))
        g_total = loss if g_total is None else g_total + loss
        g_value += loss_g.item() / len(batch)
    _apply(state.optimizer, g_total, "generator loss")
    disc.zero_grad()
    if config.distill_mix > 0:
        aux_regression_step(state, [(x.data.copy(), s) for x, s in zip(fakes, batch)], schedule, rng)

    state.step += 1
    state.log.record(state.step, "adversarial", "d_loss", d_value)
    state.log.record(state.step, "adversarial", "g_loss", g_value)
    state.log.record(state.step, "adversarial", "penalty", penalty_total)
    if config.distill_mix > 0:
        state.log.record(state.step, "adversarial", "distill_mix", mix_value)
    if state.step % config.log_every == 0:
        logger.info("[Adversarial] step %d d=%.5f g=%.5f penalty=%.5f", state.step, d_value, g_value, penalty_total)
    return state


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def student_samples(student: AvatarDiT, samples: Sequence[SyntheticSample], schedule: NoiseSchedule,
                    cache_config: CacheConfig, seed: int = 0) -> List[np.ndarray]:
    """Detached student windows; window i is rolled out from stream seed ``(seed, 0, i)``."""
    windows = []
    for i, sample in enumerate(samples):
        x_hat, _ = student_rollout(student, sample, schedule, cache_config, seed=_stream_seed(seed, 0, i), grad=False)
        windows.append(x_hat.data)
    return windows


def sample_distance(student: AvatarDiT, teacher: AvatarDiT, samples: Sequence[SyntheticSample],
                    schedule: NoiseSchedule, cache_config: CacheConfig, seed: int = 0,
                    teacher_steps: int = 20) -> float:
    """Mean RMS between few-step student windows and many-step teacher windows from the same noise."""
    grid = schedule.teacher_grid(teacher_steps)
    windows = student_samples(student, samples, schedule, cache_config, seed)
    errors = []
    for i, (sample, window) in enumerate(zip(samples, windows)):
        target = teacher_target(teacher, sample, _stream_seed(seed, 0, i), grid)
        errors.append(float(np.sqrt(np.mean((window - target) ** 2))))
    return float(np.mean(errors))


def feature_distance(backbone: AvatarDiT, samples: Sequence[SyntheticSample], fakes: Sequence[np.ndarray],
                     layers: Sequence[int]) -> float:
    """Channel-statistic distance of real vs generated hidden states at ``layers``, summed over layers."""
    frames = backbone.config.window_frames
    real_hidden: Dict[int, List[np.ndarray]] = {layer: [] for layer in layers}
    fake_hidden: Dict[int, List[np.ndarray]] = {layer: [] for layer in layers}
    with T.no_grad():
        for sample, fake in zip(samples, fakes):
            audio = _window_audio(sample, frames)
            for window, into in ((sample.frames[:frames], real_hidden), (fake, fake_hidden)):
                out = backbone.forward_window(window, 0.0, sample.reference, audio, causal=False,
                                              return_hidden=True)
                for layer in layers:
                    into[layer].append(out.hidden[layer].data[1:])
    return float(sum(stat_distance(np.concatenate(real_hidden[layer]), np.concatenate(fake_hidden[layer]))
                     for layer in layers))
