"""Gradient verification suites shared by the CLI and the tests.

Each operator is checked in float64 against central differences on small
random shapes (every dimension at most 8) for several seeds; the scalar
objective is ``sum(op(inputs) * w)`` with a fixed random ``w`` so the check
covers a generic vector-Jacobian product.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import GradcheckReport, Tensor, gradcheck
from .cqt import (
    CQTSpec,
    MultiResSpec,
    OctaveGridCoefficients,
    build_multires_filterbank,
    cqt_forward,
    cqt_forward_vjp,
    cqt_inverse,
    cqt_inverse_vjp,
)
from .net import MRCQTNet, NetConfig


def _rand_shape(rng, ndim, lo=2, hi=8):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=ndim))


def _op_cases():
    """name -> ``case(rng)`` returning ``(fn, input_shapes)``."""
    g = ad
    cases = {}

    def pointwise(fn):
        return lambda rng: (fn, [_rand_shape(rng, 4)])

    cases["add"] = lambda rng: ((lambda a, b: a + b), [(2, 3, 4, 5), (1, 3, 1, 5)])
    cases["mul"] = lambda rng: ((lambda a, b: a * b), [(2, 3, 4, 5), (2, 1, 4, 1)])
    cases["neg"] = pointwise(lambda a: -a)
    cases["scale"] = pointwise(lambda a: g.scale(a, 1.7))
    cases["square"] = pointwise(g.square)
    cases["gelu"] = pointwise(g.gelu)
    cases["sum_axis"] = pointwise(lambda a: g.sum(a, axis=2))
    cases["mean"] = pointwise(lambda a: g.mean(a, axis=1, keepdims=True))
    cases["reshape"] = lambda rng: ((lambda a: g.reshape(a, (-1, 4))), [(2, 3, 4, 2)])

    def linear(rng):
        i, o = rng.integers(2, 9, size=2)
        return (lambda x, w, b: g.linear(x, w, b)), [(3, int(i)), (int(o), int(i)), (int(o),)]

    def conv1x1(rng):
        b, ci, co, f, t = _rand_shape(rng, 5)
        return g.conv1x1, [(b, ci, f, t), (co, ci)]

    def conv_time(rng):
        b, ci, co, f = _rand_shape(rng, 4)
        t = int(rng.integers(4, 9))
        return (lambda x, w: g.conv_time(x, w)), [(b, ci, f, t), (co, ci, 3)]

    def conv_freq(rng):
        b, ci, co, t = _rand_shape(rng, 4)
        return (lambda x, w: g.conv_freq_dilated(x, w, 2)), [(b, ci, 8, t), (co, ci, 3)]

    def group_norm(rng):
        b, f, t = _rand_shape(rng, 3)
        return (lambda x, gain: g.group_norm_shift_free(x, 2, gain)), [(b, 4, f, t), (4,)]

    def film(rng):
        b, c, f, t = _rand_shape(rng, 4)
        return g.film_scale, [(b, c, f, t), (b, c)]

    def concat(rng):
        b, f, t = _rand_shape(rng, 3)
        return (lambda x, y: g.concat([x, y], axis=2)), [(b, 2, f, t), (b, 2, 3, t)]

    def split(rng):
        b, c, t = _rand_shape(rng, 3)
        return (lambda x: g.split(x, 2, [3, 5])[1]), [(b, c, 8, t)]

    def down_time(rng):
        b, c, f = _rand_shape(rng, 3)
        return (lambda x: g.downsample(x, 3)), [(b, c, f, 8)]

    def down_freq(rng):
        b, c, t = _rand_shape(rng, 3)
        return (lambda x: g.downsample(x, 2)), [(b, c, 8, t)]

    def up_time(rng):
        b, c, f = _rand_shape(rng, 3)
        return (lambda x: g.upsample(x, 3)), [(b, c, f, 4)]

    def up_freq(rng):
        b, c, t = _rand_shape(rng, 3)
        return (lambda x: g.upsample(x, 2)), [(b, c, 4, t)]

    cases.update(linear=linear, conv1x1=conv1x1, conv_time=conv_time, conv_freq_dilated=conv_freq,
                 group_norm_shift_free=group_norm, film_scale=film, concat=concat, split=split,
                 downsample_time=down_time, downsample_freq=down_freq, upsample_time=up_time,
                 upsample_freq=up_freq)
    return cases


def op_gradchecks(seeds=range(5), tol: float = 1e-4) -> list[GradcheckReport]:
    """One report per (operator, seed)."""
    reports = []
    for name, case in _op_cases().items():
        for seed in seeds:
            rng = np.random.default_rng(seed)
            fn, shapes = case(rng)
            inputs = [Tensor(rng.standard_normal(s)) for s in shapes]
            out_shape = fn(*inputs).shape
            w = rng.standard_normal(out_shape)
            rep = gradcheck(lambda *xs: ad.sum(fn(*xs) * w), inputs, tol=tol, name=f"{name}[seed {seed}]")
            reports.append(rep)
    return reports


def toy_spec() -> MultiResSpec:
    return MultiResSpec((CQTSpec(1024.0, 4, 1, 16384.0), CQTSpec(2048.0, 8, 2, 16384.0)))


def toy_net_config(zero_init: bool = False) -> NetConfig:
    return NetConfig(channels=(8, 16, 32), dilated_convs=(2, 2, 2), zero_init=zero_init)


def end_to_end_gradcheck(spec: MultiResSpec | None = None, config: NetConfig | None = None,
                         signal_length: int = 16384, num_entries: int = 10, seed: int = 0,
                         tol: float = 1e-3) -> list[GradcheckReport]:
    """Waveform -> ICQT o U o CQT -> scalar loss, checked w.r.t. the input waveform and a
    random subset of parameters (float64, non-zero initialisation so every path is live)."""
    spec = spec or toy_spec()
    config = config or toy_net_config()
    net = MRCQTNet(config, spec, signal_length, seed=seed).astype(np.float64)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((1, signal_length)))
    target = rng.standard_normal((1, signal_length))
    sigma = np.array([0.7])

    def loss(*_):
        return ad.mse(net(x, sigma), target)

    reports = [gradcheck(loss, [x], max_entries=num_entries, rng=rng, tol=tol, name="end-to-end input")]
    names = sorted(net.params)
    chosen = [names[i] for i in rng.choice(len(names), num_entries, replace=False)]
    params = [net.params[k] for k in chosen]
    rep = gradcheck(loss, params, max_entries=1, rng=rng, tol=tol, name="end-to-end parameters")
    rep.details["parameters"] = chosen
    reports.append(rep)
    return reports


def adjoint_checks(spec: MultiResSpec | None = None, signal_length: int = 16384,
                   seed: int = 0) -> dict[str, float]:
    """Relative inner-product mismatch ``|<Ax, y> - <x, A*y>| / max(|<Ax, y>|, |<x, A*y>|)``
    for the forward and inverse transforms (real inner product on complex coefficients)."""
    spec = spec or toy_spec()
    bank = build_multires_filterbank(spec, signal_length)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(signal_length)
    ax = cqt_forward(x, bank)
    y = OctaveGridCoefficients.from_blocks(
        [rng.standard_normal(b.shape) + 1j * rng.standard_normal(b.shape) for b in ax.blocks()])

    def inner(a, b):
        return sum(float(np.sum(p.real * q.real + p.imag * q.imag)) for p, q in zip(a.blocks(), b.blocks()))

    def rel(a, b):
        return abs(a - b) / max(abs(a), abs(b), 1e-300)

    fwd = rel(inner(ax, y), float(np.dot(x, cqt_forward_vjp(y, bank))))
    inv = rel(float(np.dot(cqt_inverse(y, bank), x)), inner(y, cqt_inverse_vjp(x, bank)))
    return {"forward": fwd, "inverse": inv}
