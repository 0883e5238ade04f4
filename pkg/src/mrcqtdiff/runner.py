"""End-to-end procedures driven by a RunConfig: training, sampling and evaluation."""

from __future__ import annotations

from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, parse_config
from .data import ArrayDataset, build_manifest, next_batch, two_tone_corpus
from .diffusion import AdamState, ScoreModel, TrainResult, heun_sample, train
from .metrics import embed_batch, fad
from .net import MRCQTNet


def build_net(cfg: RunConfig) -> MRCQTNet:
    return MRCQTNet(cfg.net_config(), cfg.multires_spec(), cfg["transform"]["segment_length"],
                    seed=cfg["net"]["seed"])


def synthetic_corpus(cfg: RunConfig) -> np.ndarray:
    d, t = cfg["data"], cfg["transform"]
    return two_tone_corpus(d["num_segments"], t["segment_length"], t["sample_rate"], d["synth_seed"],
                           (d["tone_min_hz"], d["tone_max_hz"]))


def batch_source(cfg: RunConfig) -> Callable[[np.random.Generator], np.ndarray]:
    """Training batches from ``data.directory``, or from the synthetic corpus when it is empty."""
    d, t = cfg["data"], cfg["transform"]
    bs = cfg["train"]["batch_size"]
    if d["directory"]:
        manifest = build_manifest(d["directory"], t["segment_length"], int(t["sample_rate"]), d["normalization"])
        return lambda rng: next_batch(manifest, rng, bs)
    ds = ArrayDataset(synthetic_corpus(cfg))
    return lambda rng: ds.next_batch(rng, bs)


def make_checkpoint(cfg: RunConfig, net: MRCQTNet, ema: dict, adam: AdamState, iteration: int) -> Checkpoint:
    meta = {"rng": {"rng_seed": cfg["train"]["rng_seed"], "next_iteration": iteration,
                    "scheme": "numpy default_rng([rng_seed, iteration, stream])"}}
    return Checkpoint(cfg.dumps(), iteration, net.param_arrays(), dict(ema), adam.step,
                      dict(adam.m), dict(adam.v), meta)


def restore(ckpt: Checkpoint) -> tuple[RunConfig, MRCQTNet, dict, AdamState]:
    cfg = parse_config(ckpt.config_text, "<checkpoint>")
    net = build_net(cfg)
    net.load_arrays(ckpt.raw)
    return cfg, net, ckpt.ema, AdamState(ckpt.adam_step, ckpt.adam_m, ckpt.adam_v)


def checkpoint_name(iteration: int) -> str:
    return f"ckpt_{iteration:08d}.bin"


def train_run(cfg: RunConfig, out_dir, resume=None, log: Callable[[str], None] | None = None,
              num_iterations: int | None = None) -> TrainResult:
    """Train from scratch (or from ``resume``), writing ``loss.log`` and checkpoints to ``out_dir``.

    The loss log gets one ``iter loss sigma_mean grad_norm`` line per
    iteration; a checkpoint is written at the configured cadence and after
    the last iteration.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        cfg, net, ema, adam = restore(ckpt)
        start = ckpt.iteration
    else:
        net, ema, adam, start = build_net(cfg), None, None, 0
    total = cfg["train"]["num_iterations"] if num_iterations is None else num_iterations
    tcfg = cfg.trainer_config(num_iterations=max(total - start, 0))
    log_path = out / "loss.log"
    mode = "a" if resume is not None else "w"

    with open(log_path, mode) as fh:
        def on_ckpt(n, net_, ema_, adam_, records):
            save_checkpoint(out / checkpoint_name(n), make_checkpoint(cfg, net_, ema_, adam_, n))

        result = train(net, batch_source(cfg), tcfg, cfg.preconditioner(), ema=ema, adam=adam,
                       start_iteration=start, on_checkpoint=on_ckpt, log=log)
        for rec in result.records:
            fh.write(rec.line() + "\n")
    end = start + tcfg.num_iterations
    if end not in result.checkpoints:
        save_checkpoint(out / checkpoint_name(end), make_checkpoint(cfg, net, result.ema, result.adam, end))
    return result


def generate(cfg: RunConfig, params: dict | None, num_samples: int, seed: int,
             num_steps: int | None = None, chunk: int | None = None) -> np.ndarray:
    """Heun samples from the network holding ``params`` (fresh initialisation if ``None``)."""
    net = build_net(cfg)
    if params is not None:
        net = net.with_arrays(params)
    model = ScoreModel(net, cfg.preconditioner(), chunk or cfg["sampler"]["chunk"])
    return heun_sample(model.score, cfg.schedule(num_steps), np.random.default_rng(seed), num_samples,
                       cfg["transform"]["segment_length"])


def evaluate_fad(cfg: RunConfig, params: dict | None, reference: np.ndarray, seed: int | None = None) -> float:
    """FAD of ``eval.num_samples`` generated waveforms against ``reference`` waveforms."""
    e = cfg["eval"]
    samples = generate(cfg, params, e["num_samples"], e["seed"] if seed is None else seed, e["num_steps"])
    fs = cfg["transform"]["sample_rate"]
    return fad(embed_batch(samples, fs), embed_batch(reference, fs))
