"""Fréchet distance evaluation with a hand-crafted spectral embedder.

The embedder stands in for a learned audio embedding at desk scale: absolute
scores are only meaningful relative to each other.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import NumericalError, ParameterError, SizeError

NUM_MEL = 32
EMBEDDING_DIM = 2 * NUM_MEL + 6
FLOOR_DB = -80.0
SHRINKAGE = 0.01


# -- embedder -------------------------------------------------------------------


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(n_fft: int, sample_rate: float, num_bands: int = NUM_MEL) -> np.ndarray:
    """Triangular filters on the HTK mel scale, ``(num_bands, n_fft // 2 + 1)``."""
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = _mel_to_hz(np.linspace(0.0, _hz_to_mel(sample_rate / 2), num_bands + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def _frame_size(sample_rate):
    return int(2 ** np.ceil(np.log2(0.064 * sample_rate)))


def embed_audio(signal, sample_rate: float) -> np.ndarray:
    """Fixed 70-dimensional descriptor of a mono signal.

    Entries: the mean and standard deviation over frames of 32 log-mel
    energies (dB, floored at -80), then mean and standard deviation of the
    spectral centroid and 85% rolloff (both as fractions of Nyquist) and of
    the spectral flatness.  Frames are Hann windowed, about 64 ms long, hop
    a quarter frame.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise SizeError("embed_audio expects a mono signal")
    if x.shape[0] < 0.5 * sample_rate:
        raise ParameterError(f"signal of {x.shape[0] / sample_rate:.3f} s is shorter than 0.5 s")
    n = _frame_size(sample_rate)
    hop = n // 4
    count = 1 + (x.shape[0] - n) // hop
    idx = np.arange(n)[None, :] + hop * np.arange(count)[:, None]
    frames = x[idx] * np.hanning(n + 1)[:-1]
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2 / n
    floor = 10.0 ** (FLOOR_DB / 10.0)
    mel = power @ mel_filterbank(n, float(sample_rate)).T
    log_mel = 10.0 * np.log10(np.maximum(mel, floor))

    freqs = np.arange(power.shape[1]) / (power.shape[1] - 1)
    total = power.sum(axis=1)
    live = total > floor
    safe = np.where(live, total, 1.0)
    centroid = np.where(live, (power * freqs).sum(axis=1) / safe, 0.0)
    cum = np.cumsum(power, axis=1)
    rolloff = np.where(live, freqs[np.argmax(cum >= 0.85 * cum[:, -1:], axis=1)], 0.0)
    p = np.maximum(power, floor)
    flatness = np.where(live, np.exp(np.mean(np.log(p), axis=1)) / np.mean(p, axis=1), 0.0)
    stats = [log_mel.mean(axis=0), log_mel.std(axis=0)]
    for feat in (centroid, rolloff, flatness):
        stats.append(np.array([feat.mean(), feat.std()]))
    return np.concatenate(stats)


def embed_batch(signals, sample_rate: float) -> np.ndarray:
    return np.stack([embed_audio(s, sample_rate) for s in signals])


# -- Gaussian fitting and Fréchet distance ----------------------------------------


@dataclass
class EmbeddingSet:
    vectors: np.ndarray
    labels: list = field(default_factory=list)

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        if not self.labels:
            self.labels = [str(i) for i in range(self.vectors.shape[0])]
        if len(self.labels) != self.vectors.shape[0]:
            raise SizeError("one label per embedding row is required")


@dataclass
class GaussianStats:
    mean: np.ndarray
    covariance: np.ndarray
    count: int = 0
    shrunk: bool = False


def fit_gaussian(vectors, shrinkage: float = SHRINKAGE, shrink: bool | None = None) -> GaussianStats:
    """Sample mean and unbiased covariance.

    With ``shrink=None`` the covariance is shrunk toward its diagonal,
    ``(1 - g) S + g diag(S)``, whenever ``N < 10 D`` or ``S`` is singular.
    """
    v = vectors.vectors if isinstance(vectors, EmbeddingSet) else np.atleast_2d(np.asarray(vectors, float))
    n, d = v.shape
    if n < 2:
        raise ParameterError(f"need at least 2 embeddings to fit a Gaussian, got {n}")
    mean = v.mean(axis=0)
    centred = v - mean
    cov = centred.T @ centred / (n - 1)
    cov = 0.5 * (cov + cov.T)
    if shrink is None:
        eig = np.linalg.eigvalsh(cov)
        shrink = n < 10 * d or eig[0] <= 1e-12 * max(eig[-1], 1e-300)
    if shrink:
        cov = (1.0 - shrinkage) * cov + shrinkage * np.diag(np.diag(cov))
    return GaussianStats(mean, cov, n, bool(shrink))


def _psd_sqrt(m):
    w, q = np.linalg.eigh(0.5 * (m + m.T))
    return (q * np.sqrt(np.clip(w, 0.0, None))) @ q.T, w


def product_sqrt(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """A square root ``M`` of ``A B`` for PSD ``A``, ``B``: ``A^1/2 (A^1/2 B A^1/2)^1/2 A^-1/2``.

    ``A^-1/2`` is a pseudo-inverse, so ``M M = A B`` requires ``A`` invertible.
    """
    ra, wa = _psd_sqrt(a)
    w, q = np.linalg.eigh(a)
    keep = w > 1e-12 * max(w[-1], 1e-300)
    inv = (q[:, keep] / np.sqrt(w[keep])) @ q[:, keep].T
    s, _ = _psd_sqrt(ra @ b @ ra)
    return ra @ s @ inv


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^1/2)``.

    The trace of the product square root is taken from the eigenvalues of
    the symmetric matrix ``S_a^1/2 S_b S_a^1/2`` with negatives clipped to 0.
    """
    if a.mean.shape != b.mean.shape:
        raise SizeError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    try:
        ra, wa = _psd_sqrt(a.covariance)
        mid = ra @ b.covariance @ ra
        w = np.linalg.eigvalsh(0.5 * (mid + mid.T))
    except np.linalg.LinAlgError as exc:
        cond = np.linalg.cond(a.covariance), np.linalg.cond(b.covariance)
        raise NumericalError(f"matrix square root failed ({exc}); condition numbers {cond}") from exc
    if not np.all(np.isfinite(w)):
        cond = np.linalg.cond(a.covariance), np.linalg.cond(b.covariance)
        raise NumericalError(f"non-finite eigenvalues in matrix square root; condition numbers {cond}")
    diff = a.mean - b.mean
    fd = diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * np.sqrt(np.clip(w, 0, None)).sum()
    return float(max(fd, 0.0))


def fad(generated, reference) -> float:
    """Global Fréchet distance between two embedding sets."""
    return frechet_distance(fit_gaussian(generated), fit_gaussian(reference))


@dataclass
class FadReport:
    global_fad: float
    per_example: list[tuple[str, float]]
    reference: str = ""

    def table(self) -> str:
        width = max([len("example")] + [len(k) for k, _ in self.per_example])
        lines = [f"reference: {self.reference}", f"global FAD: {self.global_fad:.6g}",
                 f"{'example':<{width}}  leave-one-out FAD"]
        lines += [f"{k:<{width}}  {v:.6g}" for k, v in self.per_example]
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps({
            "reference": self.reference,
            "global_fad": self.global_fad,
            "examples": [{"id": k, "score": v} for k, v in self.per_example],
        }, indent=2)


def per_example_fad(reference: GaussianStats, examples: EmbeddingSet, descriptor: str = "") -> FadReport:
    """Global FAD plus, per example, the FAD of the generated set with that example left out.

    A low leave-one-out score marks an example whose removal helps most,
    i.e. the least reference-like one.
    """
    v = examples.vectors
    if v.shape[0] < 3:
        raise ParameterError(f"per-example FAD needs at least 3 generated examples, got {v.shape[0]}")
    total = frechet_distance(reference, fit_gaussian(v))
    scores = []
    for i, label in enumerate(examples.labels):
        rest = np.delete(v, i, axis=0)
        scores.append((label, frechet_distance(reference, fit_gaussian(rest))))
    return FadReport(total, scores, descriptor)
