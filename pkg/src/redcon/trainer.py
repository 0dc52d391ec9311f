"""End-to-end training on synthetic paired corpora.

One step encodes a batch with both towers, assembles the combined
objective, backpropagates, and applies a decoupled-weight-decay Adam
update under a linear-warmup-then-constant learning rate. Everything is
seeded: batch order, parameter init, and the corpus itself, so a rerun
with the same configs reproduces the trajectory bit for bit.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .datasynth import BatchArrays, SyntheticPairRecord, stack_records
from .encoders import (
    EncoderConfig,
    bind,
    encode_text_batch,
    encode_video_batch,
    init_params,
    save_checkpoint,
)
from .errors import ConfigError, NumericFaultError
from .losses import DIRECTIONS, BatchFeatures, total_loss

# checkpoint key of the trainable log-temperature (when enabled)
TEMPERATURE_PARAM = "loss.log_tau"


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 20
    peak_lr: float = 3e-4
    warmup_steps: int = 100
    warmup_start_div: float = 300.0   # warmup ramps from peak_lr / this
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    temperature: float = 0.07
    learn_temperature: bool = False    # train log-temperature, starting at `temperature`
    lam: float = 1.0
    direction: str = "both"
    weight_floor: float = 1e-6
    stop_weight_grad: bool = True
    include_global: bool = True
    frames_used: Optional[int] = None  # train on the first K' frames only
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 0          # 0 disables periodic checkpoints

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ConfigError(
                f"batch_size must be >= 2 (contrastive losses need in-batch "
                f"negatives), got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not self.peak_lr > 0.0:
            raise ConfigError(f"peak_lr must be positive, got {self.peak_lr}")
        if self.warmup_steps < 0:
            raise ConfigError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        if not self.warmup_start_div >= 1.0:
            raise ConfigError(
                f"warmup_start_div must be >= 1, got {self.warmup_start_div}")
        if self.weight_decay < 0.0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {b}")
        if not self.adam_eps > 0.0:
            raise ConfigError(f"adam_eps must be positive, got {self.adam_eps}")
        if not self.temperature > 0.0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.lam < 0.0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.direction not in DIRECTIONS:
            raise ConfigError(
                f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.weight_floor < 0.0:
            raise ConfigError(f"weight_floor must be >= 0, got {self.weight_floor}")
        if self.frames_used is not None and self.frames_used < 1:
            raise ConfigError(f"frames_used must be >= 1, got {self.frames_used}")
        if self.log_every < 1:
            raise ConfigError(f"log_every must be >= 1, got {self.log_every}")
        if self.checkpoint_every < 0:
            raise ConfigError(
                f"checkpoint_every must be >= 0, got {self.checkpoint_every}")


def train_config_from_dict(d: dict) -> TrainConfig:
    unknown = set(d) - set(TrainConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
    cfg = TrainConfig(**d)
    cfg.validate()
    return cfg


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear ramp for the first warmup_steps updates, constant after."""
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        start = cfg.peak_lr / cfg.warmup_start_div
        return start + (cfg.peak_lr - start) * (step / cfg.warmup_steps)
    return cfg.peak_lr


class AdamW:
    """Adam with decoupled weight decay, updating parameters in place.

    Decay applies to matrices and higher-rank tensors only; bias and gain
    vectors are left unregularized.
    """

    def __init__(self, params: Dict[str, np.ndarray], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: Dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c = self.cfg
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            if c.weight_decay > 0.0 and p.ndim >= 2:
                p -= lr * c.weight_decay * p
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)


def train_step(
    params: Dict[str, np.ndarray],
    opt: AdamW,
    batch: BatchArrays,
    enc_cfg: EncoderConfig,
    tcfg: TrainConfig,
    step: int,
) -> dict:
    """One optimization step; returns the per-term loss record."""
    frames = batch.frames
    if tcfg.frames_used is not None:
        if tcfg.frames_used > frames.shape[1]:
            raise ConfigError(
                f"frames_used={tcfg.frames_used} exceeds the {frames.shape[1]} "
                f"frames in the batch")
        frames = frames[:, :tcfg.frames_used]

    tape = T.Tape()
    bound = bind(params, tape)
    if tcfg.learn_temperature:
        if TEMPERATURE_PARAM not in bound:
            raise ConfigError(
                f"learn_temperature needs a {TEMPERATURE_PARAM!r} parameter; "
                f"train through run_training or seed it yourself")
        temperature = bound[TEMPERATURE_PARAM]
    else:
        temperature = tcfg.temperature
    v_cls, v_loc = encode_video_batch(frames, bound, enc_cfg)
    t_cls, t_loc = encode_text_batch(batch.token_ids, bound, enc_cfg)
    out = total_loss(
        BatchFeatures(v_cls, v_loc, t_cls, t_loc),
        temperature=temperature,
        lam=tcfg.lam,
        direction=tcfg.direction,
        weight_floor=tcfg.weight_floor,
        stop_weight_grad=tcfg.stop_weight_grad,
        include_global=tcfg.include_global,
    )
    record = out.as_floats()
    for term, value in record.items():
        if not np.isfinite(value):
            raise NumericFaultError(f"non-finite loss term {term} at step {step}")

    T.backward(out.total)
    lr = lr_at(step, tcfg)
    opt.step({name: bound[name].grad for name in params}, lr)
    record["step"] = step
    record["lr"] = lr
    if tcfg.learn_temperature:
        record["temperature"] = float(np.exp(params[TEMPERATURE_PARAM][0]))
    return record


@dataclass
class TrainResult:
    params: Dict[str, np.ndarray]
    steps: int
    log_path: Path
    final_checkpoint: Path
    last_record: dict


def run_training(
    records: Sequence[SyntheticPairRecord],
    enc_cfg: EncoderConfig,
    tcfg: TrainConfig,
    out_dir,
    initial_params: Optional[Dict[str, np.ndarray]] = None,
) -> TrainResult:
    """Train over `records` for the configured epochs, logging to JSONL.

    Writes `checkpoint_init.ckpt` before the first step, optional
    periodic `checkpoint_step*.ckpt` files, and `checkpoint_final.ckpt`
    at the end. Batch order reshuffles per epoch from the run seed;
    trailing records that do not fill a batch are dropped.
    """
    enc_cfg.validate()
    tcfg.validate()
    records = list(records)
    if len(records) < tcfg.batch_size:
        raise ConfigError(
            f"{len(records)} records cannot fill one batch of {tcfg.batch_size}")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    source = initial_params if initial_params is not None else init_params(enc_cfg)
    params = {k: v.copy() for k, v in source.items()}
    if tcfg.learn_temperature and TEMPERATURE_PARAM not in params:
        params[TEMPERATURE_PARAM] = np.array([np.log(tcfg.temperature)])

    config_blob = json.dumps({"encoder": asdict(enc_cfg), "train": asdict(tcfg)},
                             sort_keys=True)
    config_hash = hashlib.sha256(config_blob.encode()).hexdigest()

    def meta_at(step: int, epoch: int, last: dict) -> dict:
        return {
            "step": step,
            "epoch": epoch,
            "encoder": asdict(enc_cfg),
            "train": asdict(tcfg),
            "config_sha256": config_hash,
            "last_loss": last.get("total"),
        }

    save_checkpoint(out_dir / "checkpoint_init.ckpt", params, meta_at(0, 0, {}))
    opt = AdamW(params, tcfg)
    log_path = out_dir / "train_log.jsonl"
    batches_per_epoch = len(records) // tcfg.batch_size

    step = 0
    last: dict = {}
    started = time.monotonic()
    with open(log_path, "w") as log:
        for epoch in range(tcfg.epochs):
            order = np.random.default_rng([tcfg.seed, 3, epoch]).permutation(len(records))
            for bi in range(batches_per_epoch):
                chosen = order[bi * tcfg.batch_size:(bi + 1) * tcfg.batch_size]
                batch = stack_records([records[j] for j in chosen])
                last = train_step(params, opt, batch, enc_cfg, tcfg, step)
                last["epoch"] = epoch
                last["elapsed_s"] = round(time.monotonic() - started, 3)
                if step % tcfg.log_every == 0:
                    log.write(json.dumps(last, sort_keys=True) + "\n")
                step += 1
                if tcfg.checkpoint_every and step % tcfg.checkpoint_every == 0:
                    save_checkpoint(out_dir / f"checkpoint_step{step}.ckpt",
                                    params, meta_at(step, epoch, last))

    final = out_dir / "checkpoint_final.ckpt"
    save_checkpoint(final, params, meta_at(step, max(tcfg.epochs - 1, 0), last))
    return TrainResult(params, step, log_path, final, last)
