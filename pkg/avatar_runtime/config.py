import logging
from pathlib import Path
from typing import Dict, Optional, Union

from .distill import TrainConfig
from .exceptions import ConfigError, ValidationError
from .kv_cache import CacheConfig
from .models import ModelConfig
from .scheduler import NoiseSchedule
from .streaming import PipelineConfig
from .util import parse_key_values

logger = logging.getLogger(__name__)

MODULE_NAME = "avatar_runtime"

DEFAULT_CFG = {
    # Model
    "layers": 4,
    "model_dim": 128,
    "heads": 4,
    "tokens_per_frame": 4,
    "latent_dim": 16,
    "audio_dim": 32,
    "timestep_embedding_dim": 64,
    "prompt_tokens": 4,
    "window_frames": 12,
    "chunk_size": 3,
    "audio_context": 3,
    "ffn_mult": 2,
    "rope_theta": 10000.0,
    "prediction": "velocity",
    "precision": "float64",

    # KV cache
    "sink_capacity": 4,
    "window_capacity": 6,
    "rapr_cap": 10,
    "sink_enabled": True,
    "rapr_enabled": True,
    "clean_recache": False,

    # Sampling
    "schedule": (1.0, 0.66, 0.33),
    "teacher_steps": 20,

    # Training
    "teacher_train_steps": 300,
    "ode_init_steps": 300,
    "sid_steps": 100,
    "adversarial_steps": 100,
    "learning_rate": 1e-3,
    "beta1": 0.9,
    "beta2": 0.999,
    "max_grad_norm": 1.0,
    "batch_size": 1,
    "ode_pair_count": 8,
    "sid_weight": "constant",
    "sid_regression": 0.5,
    "critic_learning_rate": 2e-3,
    "critic_updates": 2,
    "penalty_gamma": 0.1,
    "penalty_sigma": 1e-3,
    "distill_mix": 0.0,
    "num_queries": 3,
    "freeze_backbone": True,
    "global_branch": True,
    "log_every": 10,

    # Runtime
    "chunk_seconds": 0.48,
    "fps": 25,
    "clock": "wall",
    "dit_ffd_seconds": 0.33,
    "dit_rtf": 0.69,
    "vae_ffd_seconds": 0.39,
    "vae_rtf": 0.82,
    "decode_delay_seconds": 0.0,
    "queue_capacity": 2,
    "num_chunks": 10,
    "pixel_dim": 3,
    "checkpoint": "",
    "output": "",
    "seed": 0,
    "log_level": "INFO",
    "progress": False,
}

_TRUE = ("true", "1", "yes", "on")
_FALSE = ("false", "0", "no", "off")


def coerce(key: str, raw):
    """Convert ``raw`` to the type of ``DEFAULT_CFG[key]``."""
    default = DEFAULT_CFG[key]
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(default, tuple) else raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot read {raw!r} as {type(default).__name__}") from exc
    return text


class AvatarRuntimeConfig:
    name = MODULE_NAME

    layers = 4
    model_dim = 128
    heads = 4
    tokens_per_frame = 4
    latent_dim = 16
    audio_dim = 32
    timestep_embedding_dim = 64
    prompt_tokens = 4
    window_frames = 12
    chunk_size = 3
    audio_context = 3
    ffn_mult = 2
    rope_theta = 10000.0
    prediction = "velocity"
    precision = "float64"

    sink_capacity = 4
    window_capacity = 6
    rapr_cap = 10
    sink_enabled = True
    rapr_enabled = True
    clean_recache = False

    schedule = (1.0, 0.66, 0.33)
    teacher_steps = 20

    teacher_train_steps = 300
    ode_init_steps = 300
    sid_steps = 100
    adversarial_steps = 100
    learning_rate = 1e-3
    beta1 = 0.9
    beta2 = 0.999
    max_grad_norm = 1.0
    batch_size = 1
    ode_pair_count = 8
    sid_weight = "constant"
    sid_regression = 0.5
    critic_learning_rate = 2e-3
    critic_updates = 2
    penalty_gamma = 0.1
    penalty_sigma = 1e-3
    distill_mix = 0.0
    num_queries = 3
    freeze_backbone = True
    global_branch = True
    log_every = 10

    chunk_seconds = 0.48
    fps = 25
    clock = "wall"
    dit_ffd_seconds = 0.33
    dit_rtf = 0.69
    vae_ffd_seconds = 0.39
    vae_rtf = 0.82
    decode_delay_seconds = 0.0
    queue_capacity = 2
    num_chunks = 10
    pixel_dim = 3
    checkpoint = ""
    output = ""
    seed = 0
    log_level = "INFO"
    progress = False

    def __init__(self, cfg: Optional[Dict] = None):
        self.__load_config(dict(DEFAULT_CFG))
        if cfg:
            self.__load_config(cfg)

    def __load_config(self, cfg):
        """
        Overwrite the attributes named in ``cfg``; unknown keys are rejected.
        """
        for field in cfg:
            if not hasattr(AvatarRuntimeConfig, field) or field not in DEFAULT_CFG:
                raise ConfigError(f"unknown configuration key {field!r}")
            setattr(self, field, coerce(field, cfg[field]))

    @classmethod
    def from_file(cls, path: Union[str, Path], overrides: Optional[Dict] = None) -> "AvatarRuntimeConfig":
        try:
            values = parse_key_values(Path(path).read_text(encoding="utf-8"))
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
        values.update(overrides or {})
        logger.debug("[Config] %d keys from %s", len(values), path)
        return cls(values)

    def as_dict(self) -> Dict:
        return {key: getattr(self, key) for key in DEFAULT_CFG}

    # -- typed views -------------------------------------------------------

    def model_config(self, mode: str = "teacher") -> ModelConfig:
        return ModelConfig(
            layers=self.layers, model_dim=self.model_dim, heads=self.heads,
            tokens_per_frame=self.tokens_per_frame, latent_dim=self.latent_dim, audio_dim=self.audio_dim,
            timestep_embedding_dim=self.timestep_embedding_dim, prompt_tokens=self.prompt_tokens,
            window_frames=self.window_frames, chunk_size=self.chunk_size, audio_context=self.audio_context,
            ffn_mult=self.ffn_mult, rope_theta=self.rope_theta, prediction=self.prediction, mode=mode)

    def cache_config(self) -> CacheConfig:
        try:
            return CacheConfig(self.sink_capacity, self.window_capacity, self.rapr_cap, self.chunk_size,
                               self.sink_enabled, self.rapr_enabled)
        except ValidationError as exc:
            raise ConfigError(str(exc)) from exc

    def noise_schedule(self) -> NoiseSchedule:
        try:
            return NoiseSchedule(tuple(self.schedule))
        except ValidationError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            teacher_train_steps=self.teacher_train_steps, ode_init_steps=self.ode_init_steps,
            sid_steps=self.sid_steps, adversarial_steps=self.adversarial_steps,
            learning_rate=self.learning_rate, beta1=self.beta1, beta2=self.beta2,
            max_grad_norm=self.max_grad_norm, batch_size=self.batch_size, ode_pair_count=self.ode_pair_count,
            teacher_steps=self.teacher_steps, sid_weight=self.sid_weight, sid_regression=self.sid_regression,
            critic_learning_rate=self.critic_learning_rate, critic_updates=self.critic_updates,
            penalty_gamma=self.penalty_gamma,
            penalty_sigma=self.penalty_sigma, distill_mix=self.distill_mix, log_every=self.log_every,
            progress=self.progress)

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(
            cache=self.cache_config(), schedule=self.noise_schedule(), checkpoint=self.checkpoint,
            chunk_seconds=self.chunk_seconds, fps=self.fps, clock=self.clock,
            dit_ffd_seconds=self.dit_ffd_seconds, dit_rtf=self.dit_rtf,
            vae_ffd_seconds=self.vae_ffd_seconds, vae_rtf=self.vae_rtf,
            decode_delay_seconds=self.decode_delay_seconds, queue_capacity=self.queue_capacity,
            pixel_dim=self.pixel_dim, num_chunks=self.num_chunks, clean_recache=self.clean_recache,
            output=self.output, seed=self.seed)


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Dict] = None) -> AvatarRuntimeConfig:
    if path:
        return AvatarRuntimeConfig.from_file(path, overrides)
    return AvatarRuntimeConfig(overrides)
