"""Training data: WAV directory manifests and the synthetic two-tone corpus."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ParameterError
from .wav import read_wav

log = logging.getLogger(__name__)

NORMALIZATIONS = ("peak", "none")


@dataclass
class DatasetManifest:
    """Readable files long enough for one segment, with their audio held in memory."""

    entries: list[tuple[str, float, int]]
    segment_length: int
    normalization: str = "peak"
    audio: list[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.normalization not in NORMALIZATIONS:
            raise ParameterError(f"normalization must be one of {NORMALIZATIONS}")
        if not self.entries:
            raise DataError("dataset is empty: no file holds a full segment")


def build_manifest(directory, segment_length: int, sample_rate: int,
                   normalization: str = "peak") -> DatasetManifest:
    """Scan ``directory`` for ``*.wav`` files at ``sample_rate`` holding at least one segment.

    Short, unreadable or wrongly sampled files are skipped with a warning.
    """
    entries, audio = [], []
    for path in sorted(Path(directory).glob("*.wav")):
        try:
            w = read_wav(path)
        except FormatError as exc:
            log.warning("skipping %s: %s", path, exc)
            continue
        if w.sample_rate != sample_rate:
            log.warning("skipping %s: sample rate %d != %d", path, w.sample_rate, sample_rate)
            continue
        if w.samples.shape[0] < segment_length:
            log.warning("skipping %s: %d samples is shorter than one segment (%d)",
                        path, w.samples.shape[0], segment_length)
            continue
        entries.append((str(path), w.duration, w.sample_rate))
        audio.append(w.mono())
    return DatasetManifest(entries, segment_length, normalization, audio)


def _normalise(seg, how):
    if how == "peak":
        peak = np.max(np.abs(seg))
        if peak > 0:
            return seg / peak
    return seg


def next_batch(manifest: DatasetManifest, rng: np.random.Generator, batch_size: int) -> np.ndarray:
    """``(batch_size, segment_length)`` segments: uniform file, then uniform offset."""
    n = manifest.segment_length
    out = np.empty((batch_size, n))
    for i in range(batch_size):
        audio = manifest.audio[rng.integers(len(manifest.audio))]
        start = rng.integers(audio.shape[0] - n + 1)
        out[i] = _normalise(audio[start:start + n], manifest.normalization)
    return out


def two_tone_corpus(num_segments: int, length: int, sample_rate: float, seed: int = 0,
                    freq_range: tuple[float, float] = (1200.0, 6000.0),
                    amplitude_range: tuple[float, float] = (0.35, 0.65)) -> np.ndarray:
    """Sums of two sinusoids with log-uniform frequencies, uniform amplitudes and phases.

    The default ranges keep both tones inside the toy transform's octaves and
    give a per-segment RMS near 0.5.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(length) / sample_rate
    lo, hi = np.log(freq_range[0]), np.log(freq_range[1])
    out = np.zeros((num_segments, length))
    for i in range(num_segments):
        for _ in range(2):
            f = np.exp(rng.uniform(lo, hi))
            a = rng.uniform(*amplitude_range)
            out[i] += a * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    return out


class ArrayDataset:
    """In-memory segments drawn uniformly with replacement."""

    def __init__(self, segments: np.ndarray):
        segments = np.asarray(segments, dtype=np.float64)
        if segments.ndim != 2 or segments.shape[0] == 0:
            raise DataError("dataset is empty")
        self.segments = segments

    def next_batch(self, rng: np.random.Generator, batch_size: int) -> np.ndarray:
        return self.segments[rng.integers(self.segments.shape[0], size=batch_size)]
