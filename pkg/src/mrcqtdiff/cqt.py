"""Invertible multi-resolution constant-Q transform on octave-based grids.

The transform is a painless nonstationary Gabor frame built from Hann-shaped
frequency windows.  Every window rises from the centre of its lower neighbour
and falls to the centre of its upper neighbour, so the windows (together with
a residual low-pass band and a residual high band) form a partition of unity
on ``[0, f_s / 2]``.  Each band is demodulation-free: its coefficients are the
band-passed analytic signal, scaled so that a unit-amplitude tone gives unit
magnitude, sampled at the hop of its octave.

Each octave shares one frame count. Within a constant-resolution range the
frame count halves with every lower octave; across a crossover where the
resolution halves the frame count is kept.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .errors import ConstructionError, ParameterError, SizeError
from .spectral import RealSignal, is_power_of_two

DUAL_NORM_RTOL = 1e-6


@dataclass(frozen=True)
class CQTSpec:
    f_min: float
    bins_per_octave: int
    num_octaves: int
    sample_rate: float

    def __post_init__(self):
        if self.f_min <= 0:
            raise ParameterError("f_min must be positive")
        if self.num_octaves < 1:
            raise ParameterError("num_octaves must be >= 1")
        if not is_power_of_two(self.bins_per_octave):
            raise ParameterError("bins_per_octave must be a power of two")
        if self.f_max > self.sample_rate / 2 * (1 + 1e-9):
            raise ParameterError(
                f"upper edge {self.f_max:.1f} Hz exceeds Nyquist {self.sample_rate / 2:.1f} Hz"
            )

    @property
    def num_bins(self) -> int:
        return self.bins_per_octave * self.num_octaves

    @property
    def f_max(self) -> float:
        """Upper edge of the covered range (one bin spacing above the last centre)."""
        return self.f_min * 2.0**self.num_octaves


@dataclass(frozen=True)
class OctaveSpec:
    octave_index: int
    f_lo: float
    f_hi: float
    bins_per_octave: int
    unet_level: int
    resampling: str  # "time", "freq" or "none": how this level is reduced to the next


@dataclass(frozen=True)
class MultiResSpec:
    sub_specs: tuple[CQTSpec, ...]

    def __post_init__(self):
        specs = tuple(self.sub_specs)
        if not specs:
            raise ParameterError("at least one sub-transform is required")
        object.__setattr__(self, "sub_specs", specs)
        for lo, hi in zip(specs, specs[1:]):
            if not math.isclose(lo.f_max, hi.f_min, rel_tol=1e-9):
                raise ParameterError(
                    f"sub-transform ranges do not abut: {lo.f_max} Hz vs {hi.f_min} Hz"
                )
            if lo.sample_rate != hi.sample_rate:
                raise ParameterError("sub-transforms disagree on sample rate")
            if hi.bins_per_octave not in (lo.bins_per_octave, 2 * lo.bins_per_octave):
                raise ParameterError("bins_per_octave may only double at a crossover")

    @property
    def sample_rate(self) -> float:
        return self.sub_specs[0].sample_rate

    @property
    def num_octaves(self) -> int:
        return sum(s.num_octaves for s in self.sub_specs)

    @property
    def octave_table(self) -> list[OctaveSpec]:
        rows = []
        for spec in self.sub_specs:
            for j in range(spec.num_octaves):
                f_lo = spec.f_min * 2.0**j
                rows.append([f_lo, 2 * f_lo, spec.bins_per_octave])
        n = len(rows)
        table = []
        for i, (f_lo, f_hi, b) in enumerate(rows):
            if i == 0:
                kind = "none"
            else:
                kind = "time" if rows[i - 1][2] == b else "freq"
            table.append(OctaveSpec(i + 1, f_lo, f_hi, b, n - i, kind))
        return table

    @property
    def bins(self) -> list[int]:
        """Bins per octave, lowest octave first."""
        return [row.bins_per_octave for row in self.octave_table]


def paper_multires_spec(sample_rate: float = 44100.0) -> MultiResSpec:
    """Three sub-transforms with 8, 16 and 32 bins per octave over nine octaves."""
    nyq = sample_rate / 2
    return MultiResSpec((
        CQTSpec(nyq / 2**9, 8, 3, sample_rate),
        CQTSpec(nyq / 2**6, 16, 4, sample_rate),
        CQTSpec(nyq / 2**2, 32, 2, sample_rate),
    ))


def center_frequencies(spec: CQTSpec) -> np.ndarray:
    """``f_k = f_min 2^((k-1)/b)`` for ``k = 1..K``."""
    k = np.arange(spec.num_bins)
    return spec.f_min * 2.0 ** (k / spec.bins_per_octave)


@dataclass(frozen=True)
class BandBlock:
    """Bands sharing one frame count (an octave or a residual band)."""

    name: str
    num_bands: int
    frames: int
    scale: float
    row_offset: int

    @property
    def size(self) -> int:
        return self.num_bands * self.frames


@dataclass(eq=False)
class FilterBank:
    """Realised frequency-domain filters for a fixed signal length.

    ``analysis`` maps the one-sided spectrum (``N/2 + 1`` bins) to the stacked
    per-band frequency buffers of all blocks.  Every band occupies a buffer of
    ``frames`` entries where spectrum bin ``nu`` lands at ``nu mod frames``.
    """

    signal_length: int
    sample_rate: float
    centers: np.ndarray
    octave_of_band: np.ndarray
    octave_bins: list[int]
    blocks: list[BandBlock]
    analysis: sp.csr_matrix
    synthesis: sp.csr_matrix
    dual_norm: np.ndarray
    supports: list[tuple[int, int]] = field(repr=False)
    windows: list[np.ndarray] = field(repr=False)

    @property
    def num_octaves(self) -> int:
        return len(self.octave_bins)

    @property
    def octave_blocks(self) -> list[BandBlock]:
        return self.blocks[1:-1]

    @property
    def frame_counts(self) -> list[int]:
        return [b.frames for b in self.octave_blocks]

    @property
    def hops(self) -> list[int]:
        return [self.signal_length // b.frames for b in self.octave_blocks]

    @property
    def grid_shapes(self) -> list[tuple[int, int]]:
        return [(b.num_bands, b.frames) for b in self.octave_blocks]

    @property
    def num_filters(self) -> int:
        return int(self.centers.size)

    @property
    def num_coefficients(self) -> int:
        return sum(b.size for b in self.blocks)


@dataclass
class OctaveGridCoefficients:
    """Complex coefficients; ``octaves[o]`` has shape ``(..., bins, frames)``.

    ``octaves[0]`` is the lowest octave.  The residual bands have shape
    ``(..., frames)``.
    """

    octaves: list[np.ndarray]
    residual_low: np.ndarray
    residual_high: np.ndarray

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [tuple(g.shape[-2:]) for g in self.octaves]

    def blocks(self) -> list[np.ndarray]:
        return [self.residual_low[..., None, :], *self.octaves, self.residual_high[..., None, :]]

    @classmethod
    def from_blocks(cls, blocks):
        return cls(list(blocks[1:-1]), blocks[0][..., 0, :], blocks[-1][..., 0, :])

    def scaled(self, a):
        return OctaveGridCoefficients.from_blocks([a * b for b in self.blocks()])

    def __add__(self, other):
        return OctaveGridCoefficients.from_blocks(
            [a + b for a, b in zip(self.blocks(), other.blocks())]
        )

    def zeros_like(self):
        return OctaveGridCoefficients.from_blocks([np.zeros_like(b) for b in self.blocks()])


def _hann_band(freqs, lo, center, hi):
    g = np.zeros_like(freqs)
    rise = (freqs > lo) & (freqs <= center)
    fall = (freqs > center) & (freqs < hi)
    g[rise] = 0.5 - 0.5 * np.cos(np.pi * (freqs[rise] - lo) / (center - lo))
    g[fall] = 0.5 + 0.5 * np.cos(np.pi * (freqs[fall] - center) / (hi - center))
    return g


def _frame_count(support: int) -> int:
    return 1 << max(0, math.ceil(math.log2(max(support, 1))))


def _build(specs: tuple[CQTSpec, ...], signal_length: int) -> FilterBank:
    n = signal_length
    fs = specs[0].sample_rate
    if not is_power_of_two(n):
        raise SizeError(f"signal length {n} is not a power of two")
    total_oct = sum(s.num_octaves for s in specs)
    if n % 2**total_oct:
        raise SizeError(f"signal length {n} must be a multiple of 2^{total_oct}")
    freqs = np.arange(n // 2 + 1) * fs / n

    centers, octave_of_band, octave_bins = [], [], []
    for spec in specs:
        for j in range(spec.num_octaves):
            octave_bins.append(spec.bins_per_octave)
        c = center_frequencies(spec)
        centers.append(c)
        octave_of_band.append(len(octave_bins) - spec.num_octaves
                              + np.arange(spec.num_bins) // spec.bins_per_octave)
    centers = np.concatenate(centers)
    octave_of_band = np.concatenate(octave_of_band)
    lower_edge = centers[0] * 2.0 ** (-1.0 / specs[0].bins_per_octave)
    upper_edge = specs[-1].f_max
    knots = np.concatenate([[lower_edge], centers, [upper_edge]])
    if np.any(np.diff(knots) * n / fs < 1.0):
        raise ConstructionError(
            "adjacent centre frequencies are closer than one FFT bin; use a longer signal"
        )

    windows = []
    low = np.where(freqs <= lower_edge, 1.0, _hann_band(freqs, -1.0, lower_edge, centers[0]))
    windows.append(low)
    for k in range(centers.size):
        windows.append(_hann_band(freqs, knots[k], knots[k + 1], knots[k + 2]))
    high = np.where(freqs >= upper_edge, 1.0, _hann_band(freqs, centers[-1], upper_edge, np.inf))
    windows.append(high)

    supports = []
    for w in windows:
        nz = np.flatnonzero(w > 0)
        if nz.size == 0:
            raise ConstructionError("a filter has empty support; use a longer signal")
        supports.append((int(nz[0]), int(nz[-1]) + 1))
    widths = np.array([hi - lo for lo, hi in supports])

    # frame counts: octave o carries rel[o] units of a common power-of-two base
    rel = [1]
    for o in range(1, total_oct):
        rel.append(rel[-1] * (2 if octave_bins[o] == octave_bins[o - 1] else 1))
    need = np.zeros(total_oct)
    for k in range(centers.size):
        o = octave_of_band[k]
        need[o] = max(need[o], widths[k + 1] / rel[o])
    base = _frame_count(int(math.ceil(need.max())))
    frames = [base * r for r in rel]
    if max(frames) > n:
        raise ConstructionError("signal too short for the painless condition at the top octave")

    blocks_spec = [("residual_low", 1, _frame_count(widths[0]))]
    for o in range(total_oct):
        blocks_spec.append((f"octave_{o + 1}", octave_bins[o], frames[o]))
    blocks_spec.append(("residual_high", 1, _frame_count(widths[-1])))

    blocks, offset = [], 0
    for name, nb, m in blocks_spec:
        blocks.append(BandBlock(name, nb, m, 2.0 * m / n, offset))
        offset += nb * m

    rows, cols, vals = [], [], []
    band = 0
    for blk in blocks:
        for j in range(blk.num_bands):
            lo, hi = supports[band]
            nu = np.arange(lo, hi)
            if hi - lo > blk.frames:
                raise ConstructionError(f"painless condition violated in {blk.name}")
            rows.append(blk.row_offset + j * blk.frames + nu % blk.frames)
            cols.append(nu)
            vals.append(windows[band][lo:hi])
            band += 1
    rows, cols, vals = map(np.concatenate, (rows, cols, vals))
    analysis = sp.csr_matrix((vals, (rows, cols)), shape=(offset, n // 2 + 1))

    dual = np.sum(np.stack(windows) ** 2, axis=0)
    if dual.min() < DUAL_NORM_RTOL * dual.max():
        raise ConstructionError(f"coverage gap: min dual norm {dual.min():.3e}")
    synthesis = sp.csr_matrix(analysis.T.multiply(1.0 / dual[:, None]))

    return FilterBank(
        signal_length=n,
        sample_rate=fs,
        centers=centers,
        octave_of_band=octave_of_band,
        octave_bins=octave_bins,
        blocks=blocks,
        analysis=analysis,
        synthesis=synthesis,
        dual_norm=dual,
        supports=supports,
        windows=windows,
    )


@lru_cache(maxsize=16)
def build_filterbank(spec: CQTSpec, signal_length: int) -> FilterBank:
    """Filter bank for a single constant-resolution transform."""
    return _build((spec,), signal_length)


@lru_cache(maxsize=16)
def build_multires_filterbank(spec: MultiResSpec, signal_length: int) -> FilterBank:
    """Merged filter bank of all sub-transforms; centres are neighbours across crossovers."""
    return _build(spec.sub_specs, signal_length)


# -- linear maps --------------------------------------------------------------


def _signal_array(signal, bank):
    x = signal.samples if isinstance(signal, RealSignal) else np.asarray(signal)
    if x.shape[-1] != bank.signal_length:
        raise SizeError(f"signal length {x.shape[-1]} != bank length {bank.signal_length}")
    return x


def _spmm(mat, x):
    """``mat @ x`` over the last axis of an arbitrarily batched complex array."""
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1])
    return (mat @ flat.T).T.reshape(*lead, mat.shape[0])


def _split_blocks(flat, bank):
    lead = flat.shape[:-1]
    return [
        flat[..., b.row_offset:b.row_offset + b.size].reshape(*lead, b.num_bands, b.frames)
        for b in bank.blocks
    ]


def _check_coeffs(coeffs, bank):
    blocks = coeffs.blocks()
    if len(blocks) != len(bank.blocks):
        raise SizeError(f"expected {len(bank.blocks) - 2} octave grids, got {len(blocks) - 2}")
    for arr, blk in zip(blocks, bank.blocks):
        if arr.shape[-2:] != (blk.num_bands, blk.frames):
            raise SizeError(f"{blk.name}: expected {(blk.num_bands, blk.frames)}, got {arr.shape[-2:]}")
    return blocks


def cqt_forward(signal, bank: FilterBank) -> OctaveGridCoefficients:
    """Analyse a real signal (any leading batch axes) into octave grids."""
    x = _signal_array(signal, bank)
    spec = np.fft.rfft(x, axis=-1)
    buffers = _split_blocks(_spmm(bank.analysis, spec), bank)
    out = [blk.scale * np.fft.ifft(buf, axis=-1) for blk, buf in zip(bank.blocks, buffers)]
    return OctaveGridCoefficients.from_blocks(out)


def cqt_inverse(coeffs: OctaveGridCoefficients, bank: FilterBank) -> np.ndarray:
    """Synthesise the real signal from octave grids (canonical dual frame)."""
    blocks = _check_coeffs(coeffs, bank)
    lead = blocks[0].shape[:-2]
    flat = np.concatenate(
        [(np.fft.fft(c, axis=-1) / blk.scale).reshape(*lead, -1) for blk, c in zip(bank.blocks, blocks)],
        axis=-1,
    )
    spec = _spmm(bank.synthesis, flat)
    return np.fft.irfft(spec, n=bank.signal_length, axis=-1)


def cqt_forward_vjp(cotangent: OctaveGridCoefficients, bank: FilterBank) -> np.ndarray:
    """Adjoint of :func:`cqt_forward` under the real inner product ``Re <a, b>``."""
    blocks = _check_coeffs(cotangent, bank)
    lead = blocks[0].shape[:-2]
    flat = np.concatenate(
        [(blk.scale / blk.frames * np.fft.fft(c, axis=-1)).reshape(*lead, -1)
         for blk, c in zip(bank.blocks, blocks)],
        axis=-1,
    )
    spec_bar = _spmm(bank.analysis.T.tocsr(), flat)
    n = bank.signal_length
    spec_bar[..., 1:n // 2] *= 0.5
    return n * np.fft.irfft(spec_bar, n=n, axis=-1)


def cqt_inverse_vjp(cotangent, bank: FilterBank) -> OctaveGridCoefficients:
    """Adjoint of :func:`cqt_inverse` under the real inner product."""
    g = _signal_array(cotangent, bank)
    n = bank.signal_length
    spec_bar = np.fft.rfft(g, axis=-1) / n
    spec_bar[..., 1:n // 2] *= 2.0
    buffers = _split_blocks(_spmm(bank.synthesis.T.tocsr(), spec_bar), bank)
    out = [blk.frames / blk.scale * np.fft.ifft(buf, axis=-1) for blk, buf in zip(bank.blocks, buffers)]
    return OctaveGridCoefficients.from_blocks(out)


def mr_forward(signal, spec: MultiResSpec) -> OctaveGridCoefficients:
    x = signal.samples if isinstance(signal, RealSignal) else np.asarray(signal)
    return cqt_forward(x, build_multires_filterbank(spec, x.shape[-1]))


def mr_inverse(coeffs: OctaveGridCoefficients, spec: MultiResSpec, signal_length: int) -> np.ndarray:
    return cqt_inverse(coeffs, build_multires_filterbank(spec, signal_length))


def mr_forward_vjp(cotangent: OctaveGridCoefficients, spec: MultiResSpec, signal_length: int) -> np.ndarray:
    return cqt_forward_vjp(cotangent, build_multires_filterbank(spec, signal_length))


def mr_inverse_vjp(cotangent, spec: MultiResSpec) -> OctaveGridCoefficients:
    cotangent = np.asarray(cotangent)
    return cqt_inverse_vjp(cotangent, build_multires_filterbank(spec, cotangent.shape[-1]))


def relative_error_db(x: np.ndarray, y: np.ndarray) -> float:
    """``20 log10(||x - y|| / ||x||)``."""
    num = np.linalg.norm(np.asarray(x) - np.asarray(y))
    den = np.linalg.norm(x)
    if num == 0:
        return -np.inf
    return 20.0 * math.log10(num / den)
