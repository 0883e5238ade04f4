"""FFT, window design and anti-aliased 2x resampling.

FFT scaling convention, used everywhere in the package: the forward transform
is unscaled and the inverse divides by ``N``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .errors import ParameterError, SizeError

HALFBAND_TAPS = 31


@dataclass(frozen=True)
class RealSignal:
    samples: np.ndarray
    sample_rate: float

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise SizeError("signal must be a non-empty 1-D array")
        if not np.all(np.isfinite(samples)):
            raise ParameterError("signal contains non-finite samples")
        if self.sample_rate <= 0:
            raise ParameterError("sample_rate must be positive")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class WindowSpec:
    length: int
    shape: str = "hann"


def is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def _check_pow2(n: int):
    if not is_power_of_two(n):
        raise SizeError(f"transform length {n} is not a power of two")


def fft_forward(x) -> np.ndarray:
    """Unscaled DFT along the last axis."""
    if isinstance(x, RealSignal):
        x = x.samples
    x = np.asarray(x)
    _check_pow2(x.shape[-1])
    return np.fft.fft(x, axis=-1)


def fft_inverse(spectrum) -> np.ndarray:
    """Inverse DFT along the last axis, scaled by ``1/N``."""
    spectrum = np.asarray(spectrum)
    _check_pow2(spectrum.shape[-1])
    return np.fft.ifft(spectrum, axis=-1)


def make_window(spec: WindowSpec) -> np.ndarray:
    """Periodic Hann window, ``w[i] = 0.5 - 0.5 cos(2 pi i / L)``."""
    if spec.shape.lower() != "hann":
        raise ParameterError(f"unsupported window shape {spec.shape!r}")
    if spec.length < 2:
        raise ParameterError("window length must be >= 2")
    i = np.arange(spec.length)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * i / spec.length)


@lru_cache(maxsize=None)
def halfband_filter(taps: int = HALFBAND_TAPS) -> np.ndarray:
    """Hann-windowed sinc low-pass with cutoff at a quarter of the sample rate.

    The centre tap is fixed to 1/2 and the odd-offset taps are normalised to
    sum to 1/2, so both polyphase branches have exactly unit DC gain.
    """
    if taps % 4 != 3:
        raise ParameterError("half-band filter length must be 4k + 3")
    n = np.arange(taps) - (taps - 1) // 2
    # symmetric Hann without the zero end points
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * (np.arange(taps) + 1) / (taps + 1))
    h = 0.5 * np.sinc(n / 2.0) * w
    odd = n % 2 == 1
    h[odd] *= 0.5 / h[odd].sum()
    h[n == 0] = 0.5
    h[(n % 2 == 0) & (n != 0)] = 0.0
    h.setflags(write=False)
    return h


def reflect_index(i: np.ndarray, length: int) -> np.ndarray:
    """Map arbitrary integer positions onto ``[0, length)`` by mirror reflection
    about the end samples (the end samples are not repeated)."""
    if length == 1:
        return np.zeros_like(i)
    period = 2 * (length - 1)
    i = np.mod(i, period)
    return np.where(i >= length, period - i, i)


@lru_cache(maxsize=64)
def _resample_matrix(length: int, kind: str) -> sp.csr_matrix:
    h = halfband_filter()
    half = (len(h) - 1) // 2
    offsets = np.arange(-half, half + 1)
    if kind == "halve":
        n_out = length // 2
        rows = np.repeat(np.arange(n_out), len(h))
        centre = 2 * np.arange(n_out)
        cols = reflect_index((centre[:, None] + offsets[None, :]).ravel(), length)
        vals = np.tile(h, n_out)
    else:
        # zero-stuffed input: out[m] = sum_j 2 h[j] x[(m - j) / 2] for even m - j
        n_out = 2 * length
        pos = np.arange(n_out)[:, None] - offsets[None, :]
        keep = (pos % 2 == 0) & (h[None, :] != 0)
        rows = np.broadcast_to(np.arange(n_out)[:, None], pos.shape)[keep]
        cols = reflect_index(pos[keep] // 2, length)
        vals = np.broadcast_to(2.0 * h[None, :], pos.shape)[keep]
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(n_out, length)).tocsr()
    mat.sum_duplicates()
    return mat


def _apply_along(mat: sp.spmatrix, x: np.ndarray, axis: int) -> np.ndarray:
    moved = np.moveaxis(np.asarray(x), axis, -1)
    lead = moved.shape[:-1]
    flat = moved.reshape(-1, moved.shape[-1])
    out = (mat @ flat.T).T.astype(np.result_type(x, np.float32), copy=False)
    return np.moveaxis(out.reshape(*lead, mat.shape[0]), -1, axis)


def resample_halve(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Anti-aliased decimation by two along ``axis``."""
    length = np.shape(x)[axis]
    if length % 2:
        raise SizeError(f"cannot halve odd axis length {length}")
    return _apply_along(_resample_matrix(length, "halve"), x, axis)


def resample_double(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Anti-imaged interpolation by two along ``axis``."""
    return _apply_along(_resample_matrix(np.shape(x)[axis], "double"), x, axis)


def resample_halve_adjoint(g: np.ndarray, axis: int = -1) -> np.ndarray:
    length = 2 * np.shape(g)[axis]
    return _apply_along(_resample_matrix(length, "halve").T.tocsr(), g, axis)


def resample_double_adjoint(g: np.ndarray, axis: int = -1) -> np.ndarray:
    length = np.shape(g)[axis]
    if length % 2:
        raise SizeError(f"odd cotangent length {length} for doubling")
    return _apply_along(_resample_matrix(length // 2, "double").T.tocsr(), g, axis)
