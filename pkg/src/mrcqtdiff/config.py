"""Run configuration: an INI-style file checked against a strict schema.

Every tunable lives here with its default.  Unknown sections or keys are
rejected, and the error names the offending key.  ``describe()`` prints the
documented schema.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .cqt import CQTSpec, MultiResSpec
from .diffusion import NoiseScheduleConfig, Preconditioner, SigmaSampling, TrainerConfig
from .errors import ConfigError, MRCQTError
from .net import NetConfig


def _ints(text):
    return tuple(int(v) for v in str(text).replace(",", " ").split())


def _bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class Key:
    kind: object
    default: object
    doc: str


SCHEMA: dict[str, dict[str, Key]] = {
    "transform": {
        "sample_rate": Key(float, 16384.0, "sampling rate in Hz"),
        "segment_length": Key(int, 16384, "samples per training segment; a power of two"),
        "f_min": Key(float, 1024.0, "lowest centre frequency in Hz; sub-transforms follow contiguously"),
        "bins_per_octave": Key(_ints, (4, 8), "bins per octave of each sub-transform, lowest first"),
        "octaves": Key(_ints, (1, 2), "octaves covered by each sub-transform"),
    },
    "net": {
        "channels": Key(_ints, (8, 16, 32), "latent channels per U-Net level, shallowest first"),
        "dilated_convs": Key(_ints, (2, 2, 2), "dilated frequency convolutions per residual block"),
        "embedding_dim": Key(int, 64, "noise embedding width"),
        "rff_dim": Key(int, 32, "number of random Fourier frequencies"),
        "rff_scale": Key(float, 16.0, "standard deviation of the random Fourier frequencies"),
        "kernel_size": Key(int, 3, "time and frequency kernel length"),
        "max_groups": Key(int, 8, "GroupNorm uses min(max_groups, channels) groups"),
        "zero_init": Key(_bool, True, "zero-initialise Out-block and residual branch output layers"),
        "seed": Key(int, 0, "parameter initialisation seed"),
    },
    "diffusion": {
        "sigma_data": Key(float, 0.5, "data standard deviation used by the preconditioner"),
        "sigma_max": Key(float, 8.0, "largest noise level of the sampling schedule"),
        "sigma_min": Key(float, 1e-5, "smallest noise level of the sampling schedule"),
        "rho": Key(float, 10.0, "schedule warping exponent"),
        "num_steps": Key(int, 51, "number of schedule points T"),
    },
    "train": {
        "learning_rate": Key(float, 1e-4, "Adam step size"),
        "batch_size": Key(int, 2, "segments per iteration"),
        "ema_decay": Key(float, 0.9999, "EMA decay rate"),
        "ema_warmup": Key(_bool, True, "use min(decay, (1+n)/(10+n)) during early iterations"),
        "num_iterations": Key(int, 2000, "training iterations"),
        "sigma_log_mean": Key(float, -1.2, "mean of log sigma for training noise levels"),
        "sigma_log_std": Key(float, 1.2, "standard deviation of log sigma"),
        "lambda_weighting": Key(str, "unit_target", "unit_target (sigma^4/c_out^2) or inverse_c_out_sq"),
        "adam_beta1": Key(float, 0.9, "Adam first-moment decay"),
        "adam_beta2": Key(float, 0.999, "Adam second-moment decay"),
        "adam_eps": Key(float, 1e-8, "Adam denominator offset"),
        "rng_seed": Key(int, 0, "seed for data and noise draws"),
        "checkpoint_every": Key(int, 500, "iterations between checkpoints (0 disables)"),
        "log_every": Key(int, 100, "iterations between progress lines on stderr (0 disables)"),
    },
    "sampler": {
        "num_samples": Key(int, 4, "waveforms written by generate"),
        "seed": Key(int, 0, "initial-noise seed"),
        "chunk": Key(int, 8, "examples per network call"),
        "format": Key(str, "float32", "output WAV encoding: float32, pcm16 or pcm24"),
    },
    "eval": {
        "num_samples": Key(int, 64, "generated examples per evaluation"),
        "num_steps": Key(int, 51, "schedule points T for evaluation sampling"),
        "seed": Key(int, 1, "evaluation sampler seed"),
    },
    "data": {
        "directory": Key(str, "", "folder of WAV files; empty selects the synthetic corpus"),
        "normalization": Key(str, "peak", "per-segment normalisation: peak or none"),
        "num_segments": Key(int, 64, "synthetic corpus size"),
        "synth_seed": Key(int, 1234, "synthetic corpus seed"),
        "tone_min_hz": Key(float, 1200.0, "lowest synthetic tone frequency"),
        "tone_max_hz": Key(float, 6000.0, "highest synthetic tone frequency"),
    },
    "paths": {
        "output_dir": Key(str, "runs/default", "checkpoints, logs and generated audio"),
    },
}


class RunConfig:
    """Resolved values, ``cfg[section][key]``, plus builders for the typed configs."""

    def __init__(self, values: dict[str, dict[str, object]], source: str = "<defaults>"):
        self.values = values
        self.source = source
        self._validate()

    def __getitem__(self, section):
        return self.values[section]

    def _validate(self):
        try:
            self.multires_spec()
            self.net_config()
            self.trainer_config()
            self.schedule()
            self.preconditioner()
            NoiseScheduleConfig(self["diffusion"]["sigma_max"], self["diffusion"]["sigma_min"],
                                self["diffusion"]["rho"], self["eval"]["num_steps"])
        except ConfigError:
            raise
        except (MRCQTError, ValueError) as exc:
            raise ConfigError(f"{self.source}: {exc}") from exc
        n = self["transform"]["segment_length"]
        if n <= 0 or n & (n - 1):
            raise ConfigError(f"{self.source}: transform.segment_length {n} is not a power of two")
        if self["data"]["normalization"] not in ("peak", "none"):
            raise ConfigError(f"{self.source}: data.normalization must be peak or none")
        if self["sampler"]["format"] not in ("float32", "pcm16", "pcm24"):
            raise ConfigError(f"{self.source}: sampler.format must be float32, pcm16 or pcm24")

    # -- typed views ---------------------------------------------------------

    def multires_spec(self) -> MultiResSpec:
        t = self["transform"]
        if len(t["bins_per_octave"]) != len(t["octaves"]):
            raise ConfigError("transform.bins_per_octave and transform.octaves differ in length")
        subs, f = [], t["f_min"]
        for b, n in zip(t["bins_per_octave"], t["octaves"]):
            subs.append(CQTSpec(f, b, n, t["sample_rate"]))
            f *= 2.0**n
        return MultiResSpec(tuple(subs))

    def net_config(self) -> NetConfig:
        n = self["net"]
        return NetConfig(n["channels"], n["dilated_convs"], n["embedding_dim"], n["rff_dim"],
                         n["rff_scale"], n["kernel_size"], n["max_groups"], n["zero_init"])

    def trainer_config(self, **overrides) -> TrainerConfig:
        t, d = self["train"], self["diffusion"]
        kwargs = dict(
            learning_rate=t["learning_rate"], batch_size=t["batch_size"], ema_decay=t["ema_decay"],
            num_iterations=t["num_iterations"],
            sigma_sampling=SigmaSampling(t["sigma_log_mean"], t["sigma_log_std"], d["sigma_min"], d["sigma_max"]),
            lambda_weighting=t["lambda_weighting"], rng_seed=t["rng_seed"],
            adam_betas=(t["adam_beta1"], t["adam_beta2"]), adam_eps=t["adam_eps"], ema_warmup=t["ema_warmup"],
            checkpoint_every=t["checkpoint_every"], log_every=t["log_every"],
        )
        kwargs.update(overrides)
        return TrainerConfig(**kwargs)

    def schedule(self, num_steps: int | None = None) -> NoiseScheduleConfig:
        d = self["diffusion"]
        return NoiseScheduleConfig(d["sigma_max"], d["sigma_min"], d["rho"],
                                   d["num_steps"] if num_steps is None else num_steps)

    def preconditioner(self) -> Preconditioner:
        return Preconditioner(self["diffusion"]["sigma_data"])

    # -- text form -----------------------------------------------------------

    def dumps(self) -> str:
        """Canonical text with every key, in schema order."""
        out = io.StringIO()
        for section, keys in SCHEMA.items():
            out.write(f"[{section}]\n")
            for key in keys:
                out.write(f"{key} = {_fmt(self.values[section][key])}\n")
            out.write("\n")
        return out.getvalue()


def _defaults():
    return {s: {k: spec.default for k, spec in keys.items()} for s, keys in SCHEMA.items()}


def _coerce(section, key, text, source):
    spec = SCHEMA[section][key]
    try:
        return spec.kind(text)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {section}.{key} = {text!r}: {exc}") from exc


def parse_config(text: str, source: str = "<string>", overrides=()) -> RunConfig:
    """Parse INI text over the defaults; ``overrides`` are ``section.key=value`` strings."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    values = _defaults()
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key {section}.{key}")
            values[section][key] = _coerce(section, key, raw, source)
    for item in overrides:
        name, sep, raw = item.partition("=")
        section, _, key = name.strip().partition(".")
        if not sep or section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"override {item!r}: unknown key {name.strip()}")
        values[section][key] = _coerce(section, key, raw.strip(), "override")
    return RunConfig(values, source)


def load_config(path, overrides=()) -> RunConfig:
    """Load a config file; the names ``paper`` and ``toy`` select the shipped profiles."""
    name = str(path)
    if name in ("paper", "toy"):
        text = resources.files("mrcqtdiff").joinpath("configs", f"{name}.cfg").read_text()
        return parse_config(text, f"{name}.cfg", overrides)
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    return parse_config(p.read_text(), str(p), overrides)


def describe() -> str:
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, spec in keys.items():
            lines.append(f"  {key} = {_fmt(spec.default)}    # {spec.doc}")
    return "\n".join(lines)
