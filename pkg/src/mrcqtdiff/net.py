"""Octave-routed U-Net on multi-resolution CQT grids, and the waveform denoiser.

Level ``l`` (1-based, shallowest first) is fed octave ``N_oct - l + 1``.  In
the encoder each level concatenates its octave's In-block features with the
resampled latent of the level above along the frequency axis (lower octave
first), and adds a projection of the equally resampled raw input pyramid.  In
the decoder each level drops its own octave from the main path through an
Out-block; the outer path hands those grids straight to the inverse transform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cqt import (
    FilterBank,
    MultiResSpec,
    OctaveGridCoefficients,
    build_multires_filterbank,
    cqt_forward,
    cqt_forward_vjp,
    cqt_inverse,
    cqt_inverse_vjp,
)
from .errors import ConfigError, ParameterError

AXIS = {"time": 3, "freq": 2}


@dataclass(frozen=True)
class NetConfig:
    """Hyperparameters of the U-Net; per-level lists start at the shallowest level."""

    channels: tuple[int, ...]
    dilated_convs: tuple[int, ...]
    embedding_dim: int = 64
    rff_dim: int = 32
    rff_scale: float = 16.0
    kernel_size: int = 3
    max_groups: int = 8
    zero_init: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "dilated_convs", tuple(int(d) for d in self.dilated_convs))
        if len(self.channels) != len(self.dilated_convs):
            raise ConfigError("channels and dilated_convs need one entry per level")
        if any(b < a for a, b in zip(self.channels, self.channels[1:])):
            raise ConfigError("channels must be non-decreasing toward the bottleneck")
        if self.kernel_size % 2 != 1:
            raise ConfigError("kernel_size must be odd")

    @property
    def num_levels(self) -> int:
        return len(self.channels)


@dataclass
class LevelPlan:
    level: int
    octave: int  # 1-based octave index
    bins: int  # bins of this level's own octave
    freq_size: int  # frequency-axis size of the concatenated latent
    frames: int
    resampling: str  # to the next level


def plan_levels(spec: MultiResSpec, bank: FilterBank) -> list[LevelPlan]:
    table = spec.octave_table
    n = len(table)
    plans = []
    freq = 0
    for level in range(1, n + 1):
        row = table[n - level]
        if level > 1:
            prev = plans[-1]
            freq = prev.freq_size // 2 if prev.resampling == "freq" else prev.freq_size
        freq += row.bins_per_octave
        frames = bank.frame_counts[row.octave_index - 1]
        plans.append(LevelPlan(level, row.octave_index, row.bins_per_octave, freq, frames, row.resampling))
    for a, b in zip(plans, plans[1:]):
        expect = a.frames // 2 if a.resampling == "time" else a.frames
        if b.frames != expect:
            raise ConfigError(
                f"level {b.level}: octave {b.octave} has {b.frames} frames, routing expects {expect}"
            )
    return plans


def _kaiming(rng, shape, fan_in, dtype):
    bound = math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class MRCQTNet:
    """Parameters plus forward functions of the denoiser ``ICQT o U o CQT``.

    ``params`` maps block paths to trainable leaf tensors; ``buffers`` holds
    frozen arrays (the random Fourier feature frequencies).
    """

    def __init__(self, config: NetConfig, spec: MultiResSpec, signal_length: int,
                 seed: int = 0, dtype=np.float32):
        self.config = config
        self.spec = spec
        self.signal_length = signal_length
        self.bank = build_multires_filterbank(spec, signal_length)
        self.plans = plan_levels(spec, self.bank)
        if config.num_levels != len(self.plans):
            raise ConfigError(
                f"net has {config.num_levels} levels but the transform has {len(self.plans)} octaves"
            )
        for plan, ndil in zip(self.plans, config.dilated_convs):
            reach = 2 ** (ndil - 1) * (config.kernel_size - 1) // 2
            if ndil < 1 or reach >= plan.freq_size:
                raise ConfigError(
                    f"level {plan.level}: {ndil} dilated convs reach {reach} bins "
                    f"but the level has only {plan.freq_size}"
                )
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.buffers = {
            "rff": (rng.standard_normal(config.rff_dim) * config.rff_scale).astype(np.float64)
        }
        self.params: dict[str, Tensor] = {}
        self._init_params(rng)

    # -- parameters --------------------------------------------------------

    def _add(self, name, array):
        self.params[name] = Tensor(np.ascontiguousarray(array, dtype=self.dtype), requires_grad=True, name=name)

    def _dense(self, rng, name, shape, fan_in, zero=False):
        self._add(name, np.zeros(shape) if zero else _kaiming(rng, shape, fan_in, self.dtype))

    def _film(self, rng, prefix, channels):
        e = self.config.embedding_dim
        self._dense(rng, f"{prefix}.film.w", (channels, e), e)
        self._add(f"{prefix}.film.b", np.zeros(channels))

    def _init_params(self, rng):
        cfg = self.config
        e, k = cfg.embedding_dim, cfg.kernel_size
        zero = cfg.zero_init
        dims = [2 * cfg.rff_dim, e, e, e]
        for i in range(3):
            self._dense(rng, f"emb.l{i + 1}.w", (dims[i + 1], dims[i]), dims[i])
            self._add(f"emb.l{i + 1}.b", np.zeros(dims[i + 1]))
        L = cfg.num_levels
        for plan, c, ndil in zip(self.plans, cfg.channels, cfg.dilated_convs):
            lv = plan.level
            p = f"enc{lv}.in"
            self._dense(rng, f"{p}.conv", (c, 2), 2)
            self._add(f"{p}.gain", np.ones(c))
            self._film(rng, p, c)
            self._dense(rng, f"{p}.lin.w", (c, c), c)
            self._add(f"{p}.lin.b", np.zeros(c))
            self._dense(rng, f"enc{lv}.inskip", (c, 2), 2)
            self._res_params(rng, f"enc{lv}.res", c, ndil, k, zero)
            if lv < L:
                c_next = cfg.channels[lv]
                self._dense(rng, f"enc{lv}.down", (c_next, c), c)
                self._dense(rng, f"dec{lv}.up", (c, c_next), c_next)
                self._dense(rng, f"dec{lv}.merge", (c, 2 * c), 2 * c)
                self._res_params(rng, f"dec{lv}.res", c, ndil, k, zero)
            p = f"out{lv}"
            self._dense(rng, f"{p}.lin.w", (c, c), c)
            self._add(f"{p}.lin.b", np.zeros(c))
            self._add(f"{p}.gain", np.ones(c))
            self._film(rng, p, c)
            self._dense(rng, f"{p}.conv", (2, c), c, zero=zero)

    def _res_params(self, rng, prefix, c, ndil, k, zero):
        self._add(f"{prefix}.gain", np.ones(c))
        self._dense(rng, f"{prefix}.time", (c, c, k), c * k)
        for j in range(ndil):
            last = j == ndil - 1
            self._dense(rng, f"{prefix}.freq{j}", (c, c, k), c * k, zero=zero and last)
        self._film(rng, prefix, c)

    @property
    def parameter_count(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def astype(self, dtype):
        """Copy of the model with parameters cast to ``dtype`` (e.g. float64 for gradcheck)."""
        other = object.__new__(MRCQTNet)
        other.__dict__.update(self.__dict__)
        other.dtype = np.dtype(dtype)
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        other.params = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k)
                        for k, v in self.params.items()}
        return other

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "MRCQTNet":
        """Copy sharing structure and buffers but holding ``arrays`` as parameters."""
        other = self.astype(self.dtype)
        other.load_arrays(arrays)
        return other

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        if set(arrays) != set(self.params):
            missing = set(self.params) ^ set(arrays)
            raise ConfigError(f"parameter tree mismatch: {sorted(missing)[:5]}")
        for k, v in arrays.items():
            if v.shape != self.params[k].shape:
                raise ConfigError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=self.dtype)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    # -- blocks --------------------------------------------------------------

    def _groups(self, c):
        return math.gcd(c, self.config.max_groups)

    def _film_scale(self, prefix, emb):
        p = self.params
        return ad.linear(emb, p[f"{prefix}.film.w"], p[f"{prefix}.film.b"]) + 1.0

    def noise_embed(self, sigma) -> Tensor:
        """Random Fourier features of ``log(sigma) / 4`` followed by a three-layer MLP."""
        sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
        if np.any(~(sigma > 0)):
            raise ParameterError("sigma must be positive")
        c_noise = np.log(sigma) / 4.0
        phase = 2.0 * np.pi * c_noise[:, None] * self.buffers["rff"][None, :]
        h = Tensor(np.concatenate([np.cos(phase), np.sin(phase)], axis=1).astype(self.dtype))
        p = self.params
        h = ad.gelu(ad.linear(h, p["emb.l1.w"], p["emb.l1.b"]))
        h = ad.gelu(ad.linear(h, p["emb.l2.w"], p["emb.l2.b"]))
        return ad.linear(h, p["emb.l3.w"], p["emb.l3.b"])

    def in_block(self, level: int, x: Tensor, emb: Tensor) -> Tensor:
        """2 channels -> latent: 1x1 conv, shift-free GroupNorm, FiLM, GELU, linear."""
        p, pre = self.params, f"enc{level}.in"
        c = p[f"{pre}.gain"].shape[0]
        h = ad.conv1x1(x, p[f"{pre}.conv"])
        h = ad.group_norm_shift_free(h, self._groups(c), p[f"{pre}.gain"])
        h = ad.gelu(ad.film_scale(h, self._film_scale(pre, emb)))
        h = ad.conv1x1(h, p[f"{pre}.lin.w"])
        return ad.add_channel_bias(h, p[f"{pre}.lin.b"])

    def res_block(self, prefix: str, x: Tensor, emb: Tensor, ndil: int) -> Tensor:
        """x + FiLM(freq-dilated stack(time conv(GELU(GN(x)))))."""
        p = self.params
        c = x.shape[1]
        h = ad.gelu(ad.group_norm_shift_free(x, self._groups(c), p[f"{prefix}.gain"]))
        h = ad.conv_time(h, p[f"{prefix}.time"])
        for j in range(ndil):
            h = ad.conv_freq_dilated(ad.gelu(h), p[f"{prefix}.freq{j}"], 2**j)
        h = ad.film_scale(h, self._film_scale(prefix, emb))
        return x + h

    def out_block(self, level: int, h: Tensor, emb: Tensor) -> Tensor:
        """latent -> 2 channels: linear, shift-free GroupNorm, FiLM, GELU, 1x1 conv."""
        p, pre = self.params, f"out{level}"
        c = h.shape[1]
        h = ad.add_channel_bias(ad.conv1x1(h, p[f"{pre}.lin.w"]), p[f"{pre}.lin.b"])
        h = ad.group_norm_shift_free(h, self._groups(c), p[f"{pre}.gain"])
        h = ad.gelu(ad.film_scale(h, self._film_scale(pre, emb)))
        return ad.conv1x1(h, p[f"{pre}.conv"])

    # -- composition -----------------------------------------------------------

    def unet(self, grids: list[Tensor], emb: Tensor) -> list[Tensor]:
        """Map octave grids ``(B, 2, bins, frames)``, lowest octave first, to grids of
        identical shapes."""
        p = self.params
        plans, cfg = self.plans, self.config
        L = len(plans)
        if len(grids) != L:
            raise ConfigError(f"expected {L} octave grids, got {len(grids)}")
        for plan in plans:
            g = grids[plan.octave - 1]
            if g.shape[1:] != (2, plan.bins, plan.frames):
                raise ConfigError(
                    f"level {plan.level} (octave {plan.octave}): grid shape {g.shape[1:]} "
                    f"!= {(2, plan.bins, plan.frames)}"
                )
        skips = {}
        h = pyr = None
        for plan in plans:
            lv = plan.level
            g = grids[plan.octave - 1]
            inp = self.in_block(lv, g, emb)
            if h is None:
                h, pyr = inp, g
            else:
                h = ad.concat([inp, h], axis=2)
                pyr = ad.concat([g, pyr], axis=2)
            h = h + ad.conv1x1(pyr, p[f"enc{lv}.inskip"])
            h = self.res_block(f"enc{lv}.res", h, emb, cfg.dilated_convs[lv - 1])
            if lv < L:
                skips[lv] = h
                axis = AXIS[plan.resampling]
                h = ad.conv1x1(ad.downsample(h, axis), p[f"enc{lv}.down"])
                pyr = ad.downsample(pyr, axis)

        outs: list[Tensor | None] = [None] * L
        for plan in reversed(plans):
            lv = plan.level
            if lv < L:
                h = ad.conv1x1(ad.upsample(h, AXIS[plan.resampling]), p[f"dec{lv}.up"])
                h = ad.conv1x1(ad.concat([h, skips[lv]], axis=1), p[f"dec{lv}.merge"])
                h = self.res_block(f"dec{lv}.res", h, emb, cfg.dilated_convs[lv - 1])
            low, rest = ad.split(h, 2, [plan.bins, h.shape[2] - plan.bins])
            outs[plan.octave - 1] = self.out_block(lv, low, emb)
            h = rest
        return outs

    def analysis(self, x: Tensor) -> list[Tensor]:
        """Differentiable CQT of ``(B, N)`` signals into real ``(B, 2, bins, frames)`` grids."""
        bank = self.bank
        shapes = bank.grid_shapes

        def fwd(d):
            c = cqt_forward(d, bank)
            return np.concatenate(
                [np.stack([g.real, g.imag], axis=1).reshape(d.shape[0], -1) for g in c.octaves], axis=1
            )

        def adj(g):
            c = _unpack(g, shapes, bank)
            return cqt_forward_vjp(c, bank)

        packed = ad.linear_map(x, fwd, adj)
        sizes = [2 * b * m for b, m in shapes]
        parts = ad.split(packed, 1, sizes)
        return [ad.reshape(t, (x.shape[0], 2, b, m)) for t, (b, m) in zip(parts, shapes)]

    def synthesis(self, grids: list[Tensor]) -> Tensor:
        """Differentiable inverse CQT; residual bands are synthesised as zero."""
        bank = self.bank
        shapes = bank.grid_shapes
        b_sz = grids[0].shape[0]
        packed = ad.concat([ad.reshape(g, (b_sz, -1)) for g in grids], axis=1)

        def fwd(d):
            return cqt_inverse(_unpack(d, shapes, bank), bank)

        def adj(g):
            c = cqt_inverse_vjp(g, bank)
            return np.concatenate(
                [np.stack([o.real, o.imag], axis=1).reshape(g.shape[0], -1) for o in c.octaves], axis=1
            )

        return ad.linear_map(packed, fwd, adj)

    def __call__(self, x, sigma) -> Tensor:
        """Denoiser network ``F(x, sigma)`` on a ``(B, N)`` batch of waveforms."""
        x = ad.as_tensor(x, self.dtype)
        if x.ndim == 1:
            x = ad.reshape(x, (1, -1))
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (x.shape[0],))
        emb = self.noise_embed(sigma)
        return self.synthesis(self.unet(self.analysis(x), emb))

    def unet_forward(self, grids: OctaveGridCoefficients, sigma) -> OctaveGridCoefficients:
        """Array-level convenience: complex grids in, complex grids out (no tape)."""
        with ad.no_grad():
            tensors = [Tensor(np.stack([g.real, g.imag], axis=-3).astype(self.dtype)) for g in grids.octaves]
            squeeze = tensors[0].ndim == 3
            if squeeze:
                tensors = [Tensor(t.data[None]) for t in tensors]
            sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (tensors[0].shape[0],))
            outs = self.unet(tensors, self.noise_embed(sig))
        octs = [o.data[:, 0] + 1j * o.data[:, 1] for o in outs]
        if squeeze:
            octs = [o[0] for o in octs]
        return OctaveGridCoefficients(octs, np.zeros_like(grids.residual_low), np.zeros_like(grids.residual_high))

    def denoiser_forward(self, x, sigma) -> np.ndarray:
        with ad.no_grad():
            return self(x, sigma).data


def _unpack(flat, shapes, bank):
    b = flat.shape[0]
    octs, off = [], 0
    for nb, m in shapes:
        size = 2 * nb * m
        blk = flat[:, off:off + size].reshape(b, 2, nb, m)
        octs.append(blk[:, 0] + 1j * blk[:, 1])
        off += size
    low = np.zeros((b, bank.blocks[0].frames), dtype=complex)
    high = np.zeros((b, bank.blocks[-1].frames), dtype=complex)
    return OctaveGridCoefficients(octs, low, high)

