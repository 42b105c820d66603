from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Literal, Sequence

import numpy as np

from apps.engine.audio import (
    CLIP_SAMPLES,
    AugmentConfig,
    MfccConfig,
    PcmClip,
    audio_frames,
    augment,
    compute_mfcc,
    crop_noise,
    load_noise,
    load_wav,
)


logger = logging.getLogger(__name__)

KEYWORDS = ("yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go")
UNKNOWN_LABEL = 10
SILENCE_LABEL = 11
LABEL_NAMES = KEYWORDS + ("_unknown_", "_silence_")

NOISE_DIR = "_background_noise_"
VALIDATION_LIST = "validation_list.txt"
TESTING_LIST = "testing_list.txt"

Split = Literal["train", "validation", "test"]
SPLITS: tuple[Split, ...] = ("train", "validation", "test")


class LayoutError(ValueError):
    """Raised when a dataset directory does not have the Speech Commands layout."""


class EmptySplitError(RuntimeError):
    pass


def label_of(word: str, keywords: Sequence[str] = KEYWORDS) -> int:
    """Fixed class id of a folder word; anything outside the active keywords is unknown."""
    token = word.strip().lower()
    if token in keywords and token in KEYWORDS:
        return KEYWORDS.index(token)
    return UNKNOWN_LABEL


@dataclass(slots=True, frozen=True)
class IndexEntry:
    path: str
    label: int
    split: Split
    noise_offset: int | None = None
    noise_gain: float | None = None

    @property
    def is_silence(self) -> bool:
        return self.label == SILENCE_LABEL


@dataclass(slots=True)
class DatasetIndex:
    root: str
    entries: list[IndexEntry]
    noise_files: list[str] = field(default_factory=list)

    def split(self, split: Split) -> list[IndexEntry]:
        return [entry for entry in self.entries if entry.split == split]

    def resolve(self, relative: str) -> Path:
        return Path(self.root) / relative

    def summary(self) -> dict:
        sizes = {name: 0 for name in SPLITS}
        histogram = {name: {label: 0 for label in LABEL_NAMES} for name in SPLITS}
        for entry in self.entries:
            sizes[entry.split] += 1
            histogram[entry.split][LABEL_NAMES[entry.label]] += 1
        return {
            "root": self.root,
            "split_sizes": sizes,
            "histogram": histogram,
            "noise_files": len(self.noise_files),
        }


@dataclass(slots=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        if self.features.shape[0] < 1 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels must be aligned and non-empty")

    def __len__(self) -> int:
        return int(self.labels.shape[0])


def build_index(
    root: str | Path,
    *,
    seed: int = 0,
    keywords: Sequence[str] | None = None,
    unknown_fraction: float = 0.1,
    silence_fraction: float = 0.1,
) -> DatasetIndex:
    """Assign every utterance to its official split and add unknown and silence entries.

    Unknown and silence each amount to ``ceil(fraction * keyword entries)`` per
    split; both are drawn from a generator seeded by (seed, split).
    """
    base = Path(root)
    active = tuple(word.strip().lower() for word in (keywords or KEYWORDS))
    unsupported = [word for word in active if word not in KEYWORDS]
    if unsupported:
        raise ValueError(f"not a keyword of the 12-class task: {', '.join(unsupported)}")

    if not base.is_dir():
        raise LayoutError(f"dataset directory not found: {base}")
    noise_dir = base / NOISE_DIR
    missing = [name for name in (VALIDATION_LIST, TESTING_LIST) if not (base / name).is_file()]
    if missing:
        raise LayoutError(f"missing list file(s) in {base}: {', '.join(missing)}")
    if not noise_dir.is_dir():
        raise LayoutError(f"missing background noise folder: {noise_dir}")

    noise_files = sorted(f"{NOISE_DIR}/{item.name}" for item in noise_dir.glob("*.wav"))
    if not noise_files:
        raise LayoutError(f"no .wav files in {noise_dir}")

    validation = _read_list(base / VALIDATION_LIST)
    testing = _read_list(base / TESTING_LIST)
    orphans = sorted(name for name in validation | testing if not (base / name).is_file())
    if orphans:
        logger.warning("%d list entries have no matching file, e.g. %s", len(orphans), orphans[0])

    keyword_entries: dict[Split, list[IndexEntry]] = {name: [] for name in SPLITS}
    unknown_pool: dict[Split, list[str]] = {name: [] for name in SPLITS}
    for word_dir in sorted(item for item in base.iterdir() if item.is_dir() and item.name != NOISE_DIR):
        label = label_of(word_dir.name, active)
        for wav in sorted(word_dir.glob("*.wav")):
            relative = f"{word_dir.name}/{wav.name}"
            split: Split = "validation" if relative in validation else "test" if relative in testing else "train"
            if label == UNKNOWN_LABEL:
                unknown_pool[split].append(relative)
            else:
                keyword_entries[split].append(IndexEntry(relative, label, split))

    noise_lengths = [audio_frames(base / name) for name in noise_files]
    entries: list[IndexEntry] = []
    for split_id, split in enumerate(SPLITS):
        rng = np.random.default_rng([seed, split_id])
        nominal = len(keyword_entries[split])
        entries.extend(keyword_entries[split])

        pool = unknown_pool[split]
        wanted = min(len(pool), math.ceil(unknown_fraction * nominal))
        chosen = sorted(rng.choice(len(pool), size=wanted, replace=False).tolist()) if wanted else []
        entries.extend(IndexEntry(pool[i], UNKNOWN_LABEL, split) for i in chosen)

        for _ in range(math.ceil(silence_fraction * nominal)):
            which = int(rng.integers(len(noise_files)))
            span = max(noise_lengths[which], CLIP_SAMPLES) - CLIP_SAMPLES
            entries.append(
                IndexEntry(
                    noise_files[which],
                    SILENCE_LABEL,
                    split,
                    noise_offset=int(rng.integers(0, span + 1)),
                    noise_gain=float(rng.uniform(0.0, 1.0)),
                )
            )
        logger.debug("split %s: %d keyword, %d unknown entries", split, nominal, wanted)

    return DatasetIndex(root=str(base), entries=entries, noise_files=noise_files)


class ClipLoader:
    """Materializes index entries as clips; background recordings are read once."""

    def __init__(self, index: DatasetIndex) -> None:
        self.index = index
        self._noise: dict[str, np.ndarray] = {}

    def noise(self, relative: str) -> np.ndarray:
        if relative not in self._noise:
            self._noise[relative] = load_noise(self.index.resolve(relative))
        return self._noise[relative]

    def noise_pool(self) -> list[np.ndarray]:
        return [self.noise(name) for name in self.index.noise_files]

    def clip(self, entry: IndexEntry) -> PcmClip:
        if entry.is_silence:
            noise = self.noise(entry.path)
            crop = crop_noise(noise, entry.noise_offset or 0, entry.noise_gain or 0.0)
            return PcmClip(np.clip(crop, -1.0, 1.0))
        return load_wav(self.index.resolve(entry.path))


class FeatureCache:
    """Computes the MFCCs of a non-augmented split once and keeps them in memory."""

    def __init__(self, index: DatasetIndex, mfcc_cfg: MfccConfig | None = None) -> None:
        self.loader = ClipLoader(index)
        self.mfcc_cfg = mfcc_cfg or MfccConfig()
        self._features: dict[IndexEntry, np.ndarray] = {}

    def features(self, entry: IndexEntry) -> np.ndarray:
        if entry not in self._features:
            self._features[entry] = compute_mfcc(self.loader.clip(entry), self.mfcc_cfg)
        return self._features[entry]

    def split_arrays(self, split: Split) -> tuple[np.ndarray, np.ndarray]:
        entries = self.loader.index.split(split)
        if not entries:
            raise EmptySplitError(f"split {split!r} has no entries")
        features = np.stack([self.features(entry) for entry in entries])
        labels = np.array([entry.label for entry in entries], dtype=np.int64)
        return features, labels


def batches(
    index: DatasetIndex,
    split: Split,
    batch_size: int,
    *,
    shuffle: bool = False,
    seed: int = 0,
    augmenting: bool = False,
    epoch: int = 0,
    cache: FeatureCache | None = None,
    augment_cfg: AugmentConfig | None = None,
    mfcc_cfg: MfccConfig | None = None,
) -> Iterator[Batch]:
    """One epoch over ``split``; order and augmentation are deterministic per (seed, epoch)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    entries = index.split(split)
    if not entries:
        raise EmptySplitError(f"split {split!r} has no entries")

    order = np.arange(len(entries))
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(len(entries))

    mfcc_cfg = mfcc_cfg or MfccConfig()
    augment_cfg = augment_cfg or AugmentConfig()
    loader = cache.loader if cache is not None else ClipLoader(index)
    pool = loader.noise_pool() if augmenting else []

    for batch_no, start in enumerate(range(0, len(entries), batch_size)):
        chunk = [entries[i] for i in order[start : start + batch_size]]
        rng = np.random.default_rng([seed, epoch, batch_no, 1])
        rows = []
        for entry in chunk:
            if augmenting:
                clip = augment(loader.clip(entry), pool, augment_cfg, rng)
                rows.append(compute_mfcc(clip, mfcc_cfg))
            elif cache is not None:
                rows.append(cache.features(entry))
            else:
                rows.append(compute_mfcc(loader.clip(entry), mfcc_cfg))
        yield Batch(
            features=np.stack(rows),
            labels=np.array([entry.label for entry in chunk], dtype=np.int64),
        )


def _read_list(path: Path) -> set[str]:
    return {line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()}
