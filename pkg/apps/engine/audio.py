from __future__ import annotations

import functools
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import librosa
import numpy as np
import soundfile as sf
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.fft import dct


logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
CLIP_SAMPLES = 16000
PCM_SCALE = 32768.0


class FormatError(ValueError):
    """Raised when a file is not 16 kHz mono 16-bit PCM WAVE."""


class AudioIoError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(slots=True, frozen=True)
class PcmClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        if self.samples.shape != (CLIP_SAMPLES,):
            raise ValueError(f"clip must hold exactly {CLIP_SAMPLES} samples, got {self.samples.shape}")
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"clip sample rate must be {SAMPLE_RATE} Hz")
        if np.abs(self.samples).max(initial=0.0) > 1.0:
            raise ValueError("clip samples must lie in [-1, 1]")


class MfccConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    window_ms: float = Field(default=30.0, gt=0)
    stride_ms: float = Field(default=10.0, gt=0)
    n_mels: int = Field(default=40, ge=1)
    n_mfcc: int = Field(default=40, ge=1)
    fft_size: int = Field(default=512, ge=1)
    log_floor: float = Field(default=1e-10, gt=0)
    fmin: float = Field(default=20.0, ge=0)
    fmax: float = Field(default=8000.0, gt=0)

    @model_validator(mode="after")
    def _check_geometry(self) -> MfccConfig:
        if not self.window_ms > self.stride_ms:
            raise ValueError("window_ms must exceed stride_ms")
        if self.n_mfcc > self.n_mels:
            raise ValueError("n_mfcc must not exceed n_mels")
        if self.fft_size < self.window_samples:
            raise ValueError("fft_size must cover the analysis window")
        if not self.fmin < self.fmax <= SAMPLE_RATE / 2:
            raise ValueError("mel band edges must satisfy fmin < fmax <= Nyquist")
        return self

    @property
    def window_samples(self) -> int:
        return int(round(self.window_ms * SAMPLE_RATE / 1000))

    @property
    def hop_samples(self) -> int:
        return int(round(self.stride_ms * SAMPLE_RATE / 1000))


class AugmentConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    timeshift_ms: float = Field(default=100.0, ge=0)
    noise_prob: float = Field(default=0.8, ge=0, le=1)
    noise_scale_max: float = Field(default=0.1, gt=0)


def load_wav(path: str | Path) -> PcmClip:
    """Read a clip, zero-padding or truncating it to exactly one second."""
    samples = _read_pcm16(path)
    if samples.shape[0] < CLIP_SAMPLES:
        samples = np.pad(samples, (0, CLIP_SAMPLES - samples.shape[0]))
    return PcmClip(samples[:CLIP_SAMPLES])


def load_noise(path: str | Path) -> np.ndarray:
    """Read a background recording at full length (at least one second, zero-padded)."""
    samples = _read_pcm16(path)
    if samples.shape[0] < CLIP_SAMPLES:
        samples = np.pad(samples, (0, CLIP_SAMPLES - samples.shape[0]))
    return samples


def audio_frames(path: str | Path) -> int:
    _check_format(path)
    return int(sf.info(str(path)).frames)


def crop_noise(noise: np.ndarray, offset: int, gain: float) -> np.ndarray:
    return (gain * noise[offset : offset + CLIP_SAMPLES]).astype(np.float32)


def augment(
    clip: PcmClip,
    noise_pool: Sequence[np.ndarray],
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> PcmClip:
    """Random time shift, then (with probability ``noise_prob``) additive background noise."""
    if cfg.noise_prob > 0 and not noise_pool:
        raise ConfigError("noise_prob > 0 requires a non-empty noise pool")

    samples = clip.samples
    max_shift = int(round(cfg.timeshift_ms * SAMPLE_RATE / 1000))
    if max_shift > 0:
        shift = int(rng.integers(-max_shift, max_shift + 1))
        shifted = np.zeros_like(samples)
        if shift > 0:
            shifted[shift:] = samples[:-shift]
        elif shift < 0:
            shifted[:shift] = samples[-shift:]
        else:
            shifted[:] = samples
        samples = shifted

    if cfg.noise_prob > 0 and rng.random() < cfg.noise_prob:
        noise = noise_pool[int(rng.integers(len(noise_pool)))]
        offset = int(rng.integers(0, noise.shape[0] - CLIP_SAMPLES + 1))
        gain = float(rng.uniform(0.0, cfg.noise_scale_max))
        samples = samples + crop_noise(noise, offset, gain)

    return PcmClip(np.clip(samples, -1.0, 1.0).astype(np.float32))


def log_mel_energies(clip: PcmClip, cfg: MfccConfig) -> np.ndarray:
    """Natural-log mel band energies, bands x frames."""
    spectrum = librosa.stft(
        clip.samples.astype(np.float64),
        n_fft=cfg.fft_size,
        hop_length=cfg.hop_samples,
        win_length=cfg.window_samples,
        window="hann",
        center=True,
        pad_mode="reflect",
    )
    power = np.abs(spectrum) ** 2
    energies = mel_filterbank(cfg.fft_size, cfg.n_mels, cfg.fmin, cfg.fmax) @ power
    return np.log(np.maximum(energies, cfg.log_floor))


def compute_mfcc(clip: PcmClip, cfg: MfccConfig | None = None) -> np.ndarray:
    """frames x coefficients MFCC matrix (101 x 40 under the default configuration)."""
    cfg = cfg or MfccConfig()
    coeffs = dct(log_mel_energies(clip, cfg), type=2, axis=0, norm="ortho")[: cfg.n_mfcc]
    return np.ascontiguousarray(coeffs.T, dtype=np.float32)


@functools.lru_cache(maxsize=8)
def mel_filterbank(fft_size: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """Slaney-scale triangular filters, area-normalized."""
    return librosa.filters.mel(
        sr=SAMPLE_RATE,
        n_fft=fft_size,
        n_mels=n_mels,
        fmin=fmin,
        fmax=fmax,
        htk=False,
        norm="slaney",
    )


def _read_pcm16(path: str | Path) -> np.ndarray:
    _check_format(path)
    try:
        data, _ = sf.read(str(path), dtype="int16", always_2d=False)
    except (RuntimeError, OSError) as exc:
        raise AudioIoError(f"cannot read {path}: {exc}") from exc
    return data.astype(np.float32) / PCM_SCALE


def _check_format(path: str | Path) -> None:
    source = Path(path)
    if not source.is_file():
        raise AudioIoError(f"audio file not found: {source}")
    try:
        info = sf.info(str(source))
    except (RuntimeError, OSError) as exc:
        raise FormatError(f"{source.name}: not a readable WAVE file ({exc})") from exc

    if info.format != "WAV" or info.subtype != "PCM_16":
        raise FormatError(f"{source.name}: expected 16-bit PCM WAVE, got {info.format}/{info.subtype}")
    if info.channels != 1:
        raise FormatError(f"{source.name}: expected mono, got {info.channels} channels")
    if info.samplerate != SAMPLE_RATE:
        raise FormatError(f"{source.name}: expected {SAMPLE_RATE} Hz, got {info.samplerate} Hz")
