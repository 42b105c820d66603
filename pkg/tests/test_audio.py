from pathlib import Path

import librosa
import numpy as np
import pytest

from apps.engine.audio import (
    CLIP_SAMPLES,
    AudioIoError,
    AugmentConfig,
    ConfigError,
    FormatError,
    MfccConfig,
    PcmClip,
    augment,
    compute_mfcc,
    crop_noise,
    load_noise,
    load_wav,
    log_mel_energies,
    mel_filterbank,
)


def _reference_mfcc(samples: np.ndarray) -> np.ndarray:
    padded = np.pad(samples.astype(np.float64), 256, mode="reflect")
    hann = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(480) / 480)
    window = np.zeros(512)
    window[16:496] = hann
    frames = np.stack([padded[i * 160 : i * 160 + 512] * window for i in range(101)])
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    energies = power @ mel_filterbank(512, 40, 20.0, 8000.0).T
    logs = np.log(np.maximum(energies, 1e-10))
    k = np.arange(40)[:, None]
    m = np.arange(40)[None, :]
    basis = np.sqrt(2 / 40) * np.cos(np.pi * k * (2 * m + 1) / 80)
    basis[0] /= np.sqrt(2)
    return logs @ basis.T


def test_load_wav_pads_short_clips_with_zeros(tmp_path: Path, write_wav) -> None:
    pcm = np.array([1000, -2000, 3000] * 100, dtype=np.int16)
    path = write_wav(tmp_path / "short.wav", pcm)

    clip = load_wav(path)

    assert clip.samples.shape == (CLIP_SAMPLES,)
    np.testing.assert_array_equal(clip.samples[:300], pcm.astype(np.float32) / 32768.0)
    assert not clip.samples[300:].any()


def test_load_wav_truncates_long_clips(tmp_path: Path, write_wav) -> None:
    pcm = np.arange(20000, dtype=np.int16)
    clip = load_wav(write_wav(tmp_path / "long.wav", pcm))

    assert clip.samples.shape == (CLIP_SAMPLES,)
    assert clip.samples[-1] == pytest.approx(15999 / 32768.0)


def test_load_noise_keeps_full_length(tmp_path: Path, write_wav) -> None:
    pcm = np.zeros(40000, dtype=np.int16)
    assert load_noise(write_wav(tmp_path / "noise.wav", pcm)).shape == (40000,)


@pytest.mark.parametrize(
    ("samplerate", "subtype", "channels", "message"),
    [
        (8000, "PCM_16", 1, "expected 16000 Hz"),
        (16000, "PCM_24", 1, "16-bit PCM"),
        (16000, "PCM_16", 2, "expected mono"),
    ],
)
def test_load_wav_rejects_unsupported_formats(
    tmp_path: Path, write_wav, samplerate: int, subtype: str, channels: int, message: str
) -> None:
    path = write_wav(tmp_path / "bad.wav", np.zeros(800), samplerate=samplerate, subtype=subtype, channels=channels)

    with pytest.raises(FormatError, match=message):
        load_wav(path)


def test_load_wav_rejects_non_audio_and_missing_files(tmp_path: Path) -> None:
    junk = tmp_path / "junk.wav"
    junk.write_text("definitely not a RIFF header", encoding="utf-8")

    with pytest.raises(FormatError):
        load_wav(junk)
    with pytest.raises(AudioIoError, match="not found"):
        load_wav(tmp_path / "missing.wav")


def test_mfcc_has_fixed_geometry() -> None:
    rng = np.random.default_rng(0)
    clip = PcmClip((0.1 * rng.standard_normal(CLIP_SAMPLES)).astype(np.float32))

    features = compute_mfcc(clip)

    assert features.shape == (101, 40)
    assert features.dtype == np.float32
    assert np.isfinite(features).all()


def test_mfcc_of_silence_is_the_floor_in_c0_only() -> None:
    features = compute_mfcc(PcmClip(np.zeros(CLIP_SAMPLES, dtype=np.float32)))

    np.testing.assert_allclose(features[:, 0], np.sqrt(40) * np.log(1e-10), rtol=1e-6)
    np.testing.assert_allclose(features[:, 1:], 0.0, atol=1e-4)


def test_mfcc_matches_direct_framing_reference() -> None:
    t = np.arange(CLIP_SAMPLES) / 16000
    rng = np.random.default_rng(3)
    samples = (0.4 * np.sin(2 * np.pi * 523.0 * t) + 0.05 * rng.standard_normal(CLIP_SAMPLES)).astype(np.float32)

    features = compute_mfcc(PcmClip(samples))

    np.testing.assert_allclose(features, _reference_mfcc(samples), rtol=1e-4, atol=1e-3)


def test_mfcc_config_rejects_inconsistent_geometry() -> None:
    with pytest.raises(ValueError, match="window_ms must exceed stride_ms"):
        MfccConfig(window_ms=10.0, stride_ms=10.0)
    with pytest.raises(ValueError, match="n_mfcc"):
        MfccConfig(n_mels=20, n_mfcc=40)


def test_augment_without_noise_pool_is_a_config_error() -> None:
    clip = PcmClip(np.zeros(CLIP_SAMPLES, dtype=np.float32))

    with pytest.raises(ConfigError, match="noise pool"):
        augment(clip, [], AugmentConfig(), np.random.default_rng(0))


def test_augment_is_identity_when_disabled() -> None:
    samples = np.linspace(-0.5, 0.5, CLIP_SAMPLES, dtype=np.float32)
    cfg = AugmentConfig(timeshift_ms=0.0, noise_prob=0.0)

    out = augment(PcmClip(samples), [], cfg, np.random.default_rng(0))

    np.testing.assert_array_equal(out.samples, samples)


def test_augment_is_deterministic_and_bounded() -> None:
    samples = np.full(CLIP_SAMPLES, 0.95, dtype=np.float32)
    noise = [np.ones(CLIP_SAMPLES * 2, dtype=np.float32)]
    cfg = AugmentConfig(noise_prob=1.0, noise_scale_max=0.1)

    first = augment(PcmClip(samples), noise, cfg, np.random.default_rng(7))
    second = augment(PcmClip(samples), noise, cfg, np.random.default_rng(7))

    np.testing.assert_array_equal(first.samples, second.samples)
    assert np.abs(first.samples).max() <= 1.0


def test_crop_noise_scales_the_window() -> None:
    noise = np.arange(CLIP_SAMPLES + 10, dtype=np.float32)

    crop = crop_noise(noise, 10, 0.5)

    assert crop.shape == (CLIP_SAMPLES,)
    assert crop[0] == pytest.approx(5.0)


def test_scaling_a_clip_only_shifts_c0() -> None:
    samples = (0.2 * np.random.default_rng(4).standard_normal(CLIP_SAMPLES)).clip(-1, 1).astype(np.float32)
    alpha = 0.25

    base = compute_mfcc(PcmClip(samples)).astype(np.float64)
    scaled = compute_mfcc(PcmClip(samples * np.float32(alpha))).astype(np.float64)

    shift = scaled[:, 0] - base[:, 0]
    np.testing.assert_allclose(shift, np.sqrt(40) * 2 * np.log(alpha), atol=1e-3)
    np.testing.assert_allclose(scaled[:, 1:], base[:, 1:], atol=1e-3)


def test_pure_tone_peaks_in_the_nearest_mel_band() -> None:
    t = np.arange(CLIP_SAMPLES) / 16000
    clip = PcmClip((0.5 * np.sin(2 * np.pi * 1000.0 * t)).astype(np.float32))
    cfg = MfccConfig()

    energies = log_mel_energies(clip, cfg)
    centers = librosa.mel_frequencies(n_mels=cfg.n_mels + 2, fmin=cfg.fmin, fmax=cfg.fmax, htk=False)[1:-1]

    assert energies.shape == (40, 101)
    assert int(np.argmax(energies.mean(axis=1))) == int(np.argmin(np.abs(centers - 1000.0)))


def test_noise_only_augmentation_returns_a_scaled_crop() -> None:
    noise = np.random.default_rng(5).uniform(-0.5, 0.5, 3 * CLIP_SAMPLES).astype(np.float32)
    cfg = AugmentConfig(timeshift_ms=0.0, noise_prob=1.0, noise_scale_max=0.1)
    silent = PcmClip(np.zeros(CLIP_SAMPLES, dtype=np.float32))

    out = augment(silent, [noise], cfg, np.random.default_rng(11))

    mirror = np.random.default_rng(11)
    assert mirror.random() < cfg.noise_prob
    assert int(mirror.integers(1)) == 0
    offset = int(mirror.integers(0, noise.shape[0] - CLIP_SAMPLES + 1))
    gain = float(mirror.uniform(0.0, cfg.noise_scale_max))
    np.testing.assert_array_equal(out.samples, crop_noise(noise, offset, gain))
    assert 0 < np.abs(out.samples).max() <= 0.05
