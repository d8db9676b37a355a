"""
Talking/listening audio conditioning.

A track holds one pre-extracted speech feature vector per generated video
frame and a binary mask (1 speaking, 0 listening). The mask scales the
features; it never touches a waveform.

Track file (little-endian)::

    b"ATRK1"            magic
    u32                 frame count F
    u32                 audio_dim A
    f32[F * A]          features, row-major
    u8[F]               mask, one byte per frame (0 or 1)
"""
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np

from .exceptions import TrackFormatError, TrackLengthError, TrackMaskError

logger = logging.getLogger(__name__)

TRACK_MAGIC = b"ATRK1"
_HEADER = struct.Struct("<5sII")


@dataclass(frozen=True)
class AudioTrack:
    features: np.ndarray  # [frames, audio_dim]
    mask: np.ndarray  # [frames], values in {0, 1}

    def __post_init__(self):
        features = np.asarray(self.features)
        mask = np.asarray(self.mask)
        if features.ndim != 2:
            raise TrackLengthError(f"features must be [frames, audio_dim], got {features.shape}")
        if mask.ndim != 1 or mask.shape[0] != features.shape[0]:
            raise TrackLengthError(f"mask length {mask.shape} does not match {features.shape[0]} frames")
        if not np.isin(mask, (0, 1)).all():
            raise TrackMaskError("audio mask must be binary")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "mask", mask.astype(np.uint8))

    @property
    def frames(self) -> int:
        return self.features.shape[0]

    @property
    def audio_dim(self) -> int:
        return self.features.shape[1]

    def slice(self, start: int, stop: int) -> "AudioTrack":
        if start < 0 or stop > self.frames or start > stop:
            raise TrackLengthError(f"frames [{start}, {stop}) outside a {self.frames}-frame track")
        return AudioTrack(self.features[start:stop], self.mask[start:stop])


def apply_mask(track: AudioTrack) -> Tuple[np.ndarray, np.ndarray]:
    """Split features into (talking, listening) with talking + listening == features."""
    gate = track.mask.astype(track.features.dtype)[:, None]
    return track.features * gate, track.features * (1 - gate)


def alternating_mask(frames: int, period: int = 10, start_talking: bool = True) -> np.ndarray:
    """[1]*period, [0]*period, ... (or starting with listening)."""
    phase = (np.arange(frames) // period) % 2
    return (phase == 0 if start_talking else phase == 1).astype(np.uint8)


def synth_features(seed: int, frames: int, audio_dim: int,
                   mask_pattern: Union[Sequence[int], np.ndarray, int, None] = 10) -> AudioTrack:
    """Smooth pseudo-random feature curves plus a mask.

    Each channel is a sum of three sinusoids with periods drawn from
    [30, 90] frames and random phases, plus N(0, 0.05^2) jitter. An int
    ``mask_pattern`` means an alternating talk/listen pattern of that period;
    ``None`` means all talking.
    """
    if frames <= 0:
        raise TrackLengthError(f"frames must be positive, got {frames}")
    rng = np.random.default_rng(seed)
    periods = rng.uniform(30.0, 90.0, (3, audio_dim))
    phases = rng.uniform(0.0, 2 * np.pi, (3, audio_dim))
    amplitudes = rng.uniform(0.3, 1.0, (3, audio_dim))
    t = np.arange(frames, dtype=np.float64)[:, None, None]
    curves = (amplitudes * np.sin(2 * np.pi * t / periods + phases)).sum(axis=1)
    features = curves + rng.normal(0.0, 0.05, (frames, audio_dim))
    if mask_pattern is None:
        mask = np.ones(frames, dtype=np.uint8)
    elif isinstance(mask_pattern, (int, np.integer)):
        mask = alternating_mask(frames, int(mask_pattern))
    else:
        mask = np.asarray(mask_pattern, dtype=np.int64)
        if mask.shape != (frames,):
            raise TrackLengthError(f"mask pattern has {mask.shape[0]} entries for {frames} frames")
    return AudioTrack(features, mask)


# ---------------------------------------------------------------------------
# Track files
# ---------------------------------------------------------------------------

def encode_track(track: AudioTrack) -> bytes:
    return (_HEADER.pack(TRACK_MAGIC, track.frames, track.audio_dim)
            + track.features.astype("<f4").tobytes()
            + track.mask.astype(np.uint8).tobytes())


def decode_track(payload: bytes) -> AudioTrack:
    if len(payload) < _HEADER.size:
        raise TrackFormatError("track file shorter than its header")
    magic, frames, audio_dim = _HEADER.unpack_from(payload)
    if magic != TRACK_MAGIC:
        raise TrackFormatError(f"bad track magic {magic!r}")
    feature_bytes = frames * audio_dim * 4
    expected = _HEADER.size + feature_bytes + frames
    if len(payload) != expected:
        raise TrackLengthError(f"track declares {frames} frames x {audio_dim} dims "
                               f"({expected} bytes), file has {len(payload)} bytes")
    features = np.frombuffer(payload, dtype="<f4", count=frames * audio_dim, offset=_HEADER.size)
    mask = np.frombuffer(payload, dtype=np.uint8, count=frames, offset=_HEADER.size + feature_bytes)
    if not np.isin(mask, (0, 1)).all():
        raise TrackMaskError("track mask contains values other than 0 and 1")
    return AudioTrack(features.reshape(frames, audio_dim).astype(np.float64), mask.copy())


def save_track(track: AudioTrack, path: Union[str, Path]) -> None:
    Path(path).write_bytes(encode_track(track))
    logger.info("[Audio] wrote %d-frame track to %s", track.frames, path)


def load_track(path: Union[str, Path]) -> AudioTrack:
    track = decode_track(Path(path).read_bytes())
    logger.info("[Audio] loaded %d-frame track (%d dims, %d talking) from %s",
                track.frames, track.audio_dim, int(track.mask.sum()), path)
    return track
