"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .checkpoint import load_checkpoint
from .config import describe, load_config
from .cqt import build_multires_filterbank, cqt_forward, cqt_inverse, relative_error_db
from .diffusion import schedule_times
from .errors import ConfigError, DataError, FormatError, GradcheckError, NumericalError, ParameterError, SizeError
from .metrics import EmbeddingSet, embed_audio, fit_gaussian, per_example_fad
from .wav import load_wav, save_wav

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
FIXTURES = ("white", "tone", "chirp", "clicks")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def fixture_signal(kind: str, n: int, fs: float, seed: int = 0) -> np.ndarray:
    """Deterministic test signals: white noise, a tone, a linear chirp or a click train."""
    rng = np.random.default_rng(seed)
    t = np.arange(n) / fs
    if kind == "white":
        return rng.standard_normal(n)
    if kind == "tone":
        return np.sin(2 * np.pi * (0.1 + 0.2 * rng.random()) * fs * t)
    if kind == "chirp":
        f0, f1 = 0.01 * fs, 0.45 * fs
        return np.sin(2 * np.pi * (f0 * t + 0.5 * (f1 - f0) / t[-1] * t**2))
    if kind == "clicks":
        x = np.zeros(n)
        x[int(rng.integers(0, 64))::max(n // 16, 1)] = 1.0
        return x
    raise ParameterError(f"unknown fixture {kind!r}; choose from {FIXTURES}")


def _config(args):
    return load_config(args.config, overrides=args.set or ())


def cmd_roundtrip(args) -> int:
    cfg = _config(args)
    fs = cfg["transform"]["sample_rate"]
    n = cfg["transform"]["segment_length"]
    if args.input:
        x, rate = load_wav(args.input)
        if rate != int(fs):
            raise DataError(f"{args.input}: sample rate {rate} != configured {fs:g}")
        if x.shape[0] < n:
            raise DataError(f"{args.input}: {x.shape[0]} samples is shorter than one segment ({n})")
        x = x[:n]
        label = str(args.input)
    else:
        x = fixture_signal(args.fixture, n, fs, args.seed)
        label = f"fixture:{args.fixture}"
    bank = build_multires_filterbank(cfg.multires_spec(), n)
    coeffs = cqt_forward(x, bank)
    y = cqt_inverse(coeffs, bank)
    err = relative_error_db(x, y)
    print(f"signal {label}: {n} samples at {fs:g} Hz")
    table = cfg.multires_spec().octave_table
    print("octave  f_lo(Hz)   f_hi(Hz)   bins  frames  hop  level  resampling")
    for row, (bins, frames), hop in zip(table, bank.grid_shapes, bank.hops):
        print(f"{row.octave_index:>6}  {row.f_lo:>8.1f}  {row.f_hi:>9.1f}  {bins:>4}  {frames:>6}  "
              f"{hop:>4}  {row.unet_level:>5}  {row.resampling}")
    print(f"reconstruction error: {err:.1f} dB")
    if err >= args.max_error_db:
        print(f"error exceeds {args.max_error_db} dB", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_train(args) -> int:
    from .runner import train_run

    cfg = _config(args)
    out = Path(args.out or cfg["paths"]["output_dir"])
    result = train_run(cfg, out, resume=args.resume, log=lambda s: print(s, file=sys.stderr, flush=True))
    L = result.losses
    if L:
        print(f"trained {len(L)} iterations in {result.seconds:.1f} s; final loss {L[-1]:.6g}")
    print(f"loss log: {out / 'loss.log'}")
    return EXIT_OK


def cmd_generate(args) -> int:
    from .runner import generate, restore

    cfg = _config(args)
    params = None
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        cfg, _, ema, _ = restore(ckpt)
        params = ema
    steps = args.steps or cfg["diffusion"]["num_steps"]
    taus = schedule_times(cfg.schedule(steps))
    num = args.num or cfg["sampler"]["num_samples"]
    seed = cfg["sampler"]["seed"] if args.seed is None else args.seed
    print(f"schedule: T = {steps}, rho = {cfg['diffusion']['rho']:g}, "
          f"tau_0 = {taus[0]:g}, tau_{steps - 1} = {taus[-1]:g}")
    print(f"weights: {'EMA from ' + str(args.checkpoint) if params is not None else 'fresh initialisation'}")
    if args.dry_run:
        return EXIT_OK
    x = generate(cfg, params, num, seed, steps)
    out = Path(args.out or Path(cfg["paths"]["output_dir"]) / "generated")
    out.mkdir(parents=True, exist_ok=True)
    fs = int(cfg["transform"]["sample_rate"])
    for i, sig in enumerate(x):
        save_wav(out / f"sample_{i:04d}.wav", sig, fs, cfg["sampler"]["format"])
    print(f"wrote {num} files to {out}")
    return EXIT_OK


def _embed_dir(path, fs):
    files = sorted(Path(path).glob("*.wav"))
    if not files:
        raise DataError(f"{path}: no .wav files")
    vecs, labels = [], []
    for f in files:
        x, rate = load_wav(f)
        if rate != int(fs):
            raise DataError(f"{f}: sample rate {rate} != configured {fs:g}")
        vecs.append(embed_audio(x, rate))
        labels.append(f.name)
    return EmbeddingSet(np.stack(vecs), labels)


def cmd_fad(args) -> int:
    cfg = _config(args)
    fs = cfg["transform"]["sample_rate"]
    ref = _embed_dir(args.reference, fs)
    gen = _embed_dir(args.generated, fs)
    report = per_example_fad(fit_gaussian(ref), gen, descriptor=f"{args.reference} ({len(ref.labels)} files)")
    print(report.table())
    if args.json:
        Path(args.json).write_text(report.to_json())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradsuite

    ok = True
    for rep in gradsuite.op_gradchecks(seeds=range(args.seeds)):
        ok &= rep.passed
        if args.verbose or not rep.passed:
            print(rep.line())
    print(f"operator checks: {'PASS' if ok else 'FAIL'}")
    for rep in gradsuite.end_to_end_gradcheck():
        ok &= rep.passed
        print(rep.line())
    adj = gradsuite.adjoint_checks()
    for name, err in adj.items():
        passed = err < 1e-8
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} transform adjoint ({name}): rel err {err:.3e} (tol 1e-08)")
    if not ok:
        raise GradcheckError("gradient checks failed")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .runner import synthetic_corpus

    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fs = int(cfg["transform"]["sample_rate"])
    corpus = synthetic_corpus(cfg)
    for i, seg in enumerate(corpus):
        save_wav(out / f"tones_{i:04d}.wav", seg, fs, "float32")
    print(f"wrote {len(corpus)} files to {out}")
    return EXIT_OK


def cmd_config(args) -> int:
    if args.config:
        print(_config(args).dumps(), end="")
    else:
        print(describe())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mrcqtdiff", description="Multi-resolution CQT diffusion toolkit")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(name, help_, optional=False):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config", nargs="?" if optional else None,
                        help="config file, or 'toy' / 'paper' for the shipped profiles")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one key")
        return sp

    sp = with_config("roundtrip", "analyse and resynthesise a signal, report error and grid shapes")
    sp.add_argument("--input", help="WAV file (first segment is used)")
    sp.add_argument("--fixture", choices=FIXTURES, default="white")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--max-error-db", type=float, default=-80.0)
    sp.set_defaults(func=cmd_roundtrip)

    sp = with_config("train", "train the denoiser")
    sp.add_argument("--out", help="output directory (default: paths.output_dir)")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(func=cmd_train)

    sp = with_config("generate", "sample waveforms with the Heun sampler")
    sp.add_argument("--checkpoint", help="checkpoint whose EMA weights are used")
    sp.add_argument("--num", type=int)
    sp.add_argument("--steps", type=int, help="schedule points T (default: diffusion.num_steps)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.add_argument("--dry-run", action="store_true", help="print the header only")
    sp.set_defaults(func=cmd_generate)

    sp = with_config("fad", "Fréchet distance of a generated folder against a reference folder")
    sp.add_argument("--generated", required=True)
    sp.add_argument("--reference", required=True)
    sp.add_argument("--json", help="write the per-example report as JSON")
    sp.set_defaults(func=cmd_fad)

    sp = sub.add_parser("gradcheck", help="run the gradient verification suites")
    sp.add_argument("--seeds", type=int, default=5)
    sp.set_defaults(func=cmd_gradcheck)

    sp = with_config("synth", "write the synthetic two-tone corpus as WAV files")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = with_config("config", "print the schema, or a resolved config", optional=True)
    sp.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.verbose = getattr(args, "verbose", False)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(1):
            return args.func(args)
    except (ConfigError, ParameterError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, SizeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, GradcheckError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
