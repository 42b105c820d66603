from pathlib import Path
from typing import Callable

import numpy as np
import pytest
import soundfile as sf


SAMPLE_RATE = 16000
WORD_TONES = {"yes": 440.0, "no": 660.0, "up": 880.0, "bed": 300.0, "cat": 1200.0}


def _tone(freq: float, seconds: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    t = np.arange(int(seconds * SAMPLE_RATE)) / SAMPLE_RATE
    return 0.3 * np.sin(2 * np.pi * freq * t) + 0.01 * rng.standard_normal(t.shape)


@pytest.fixture
def write_wav() -> Callable[..., Path]:
    def _write(
        path: Path,
        samples: np.ndarray,
        samplerate: int = SAMPLE_RATE,
        subtype: str = "PCM_16",
        channels: int = 1,
    ) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        data = np.asarray(samples)
        if channels > 1:
            data = np.stack([data] * channels, axis=1)
        sf.write(str(path), data, samplerate, subtype=subtype)
        return path

    return _write


@pytest.fixture
def speech_commands_dir(tmp_path: Path, write_wav: Callable[..., Path]) -> Path:
    """Five words with four utterances each: one validation, one test, two train."""
    root = tmp_path / "speech_commands"
    validation, testing = [], []
    for word_index, (word, freq) in enumerate(WORD_TONES.items()):
        for take in range(4):
            name = f"{word}/speaker{take}_nohash_0.wav"
            write_wav(root / name, _tone(freq, 0.6 + 0.1 * take, seed=10 * word_index + take))
            if take == 0:
                validation.append(name)
            elif take == 1:
                testing.append(name)

    rng = np.random.default_rng(99)
    for index in range(2):
        noise = np.clip(0.2 * rng.standard_normal(24000), -0.9, 0.9)
        write_wav(root / "_background_noise_" / f"noise{index}.wav", noise)

    (root / "validation_list.txt").write_text("\n".join(validation) + "\n", encoding="utf-8")
    (root / "testing_list.txt").write_text("\n".join(testing) + "\n", encoding="utf-8")
    return root
