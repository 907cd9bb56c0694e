"""Pretraining, fine-tuning and from-scratch loops.

An epoch is one pass over every training window in a freshly shuffled order,
each window contributing a segment at a fresh random offset; masks are
redrawn per batch.  The last short batch is kept unless it holds a single
sample (batch norm cannot train on it), in which case it is skipped with a
warning.  All randomness comes from named substreams of ``plan.seed``.
"""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from .dataset import substream
from .model import (build_model, classification_loss, predict_labels, pretrain_loss, sample_mask,
                    strip_decoder)
from .nn.checkpoint import load_archive, save_archive
from .nn.optim import Adam

log = logging.getLogger(__name__)

STAGES = ("pretrain", "finetune", "fullscratch")


class NumericError(FloatingPointError):
    pass


@dataclass
class TrainPlan:
    stage: str
    epochs: int
    batch_size: int = 48
    lr: float = 0.003
    seed: int = 42
    teacher_kind: str = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if self.stage == "pretrain" and self.teacher_kind is None:
            raise ValueError("pretraining needs a teacher kind")
        if self.stage == "fullscratch" and self.teacher_kind is not None:
            raise ValueError("fullscratch does not use a teacher")


@dataclass
class TrainResult:
    model: object
    log: list
    optimizer: object
    rng_state: dict = None


def _batches(n, size, rng):
    order = rng.permutation(n)
    for i in range(0, n, size):
        yield order[i:i + size]


def _loop(model, plan, dataset, metrics_path=None, pretraining=False):
    cfg = model.cfg
    rng_shuffle = substream(plan.seed, "shuffle")
    rng_offsets = substream(plan.seed, "offsets")
    rng_mask = substream(plan.seed, "mask")
    rng_enc, rng_dec = substream(plan.seed, "dropout.encoder"), substream(plan.seed, "dropout.decoder")
    model.set_dropout_rngs(rng_enc, rng_dec)
    opt = Adam(model.named_parameters(), lr=plan.lr)
    history = []
    if metrics_path:
        os.makedirs(os.path.dirname(metrics_path) or ".", exist_ok=True)
        open(metrics_path, "w").close()
    model.train()
    for epoch in range(plan.epochs):
        t_start = time.perf_counter()
        sums, count, correct = {}, 0, 0
        for idx in _batches(len(dataset), plan.batch_size, rng_shuffle):
            if len(idx) < 2:
                log.warning("skipping a batch of %d sample(s): batch norm needs >= 2", len(idx))
                continue
            b = dataset.batch(idx, "train", rng_offsets)
            opt.zero_grad()
            if pretraining:
                mask = sample_mask(cfg.teacher_len, cfg.mask_ratio, rng_mask, batch=len(idx))
                out = model(b["x"], b["teacher_raw"], mask)
                loss, parts = pretrain_loss(out, b["y"], b["teacher_disc"], mask, cfg.w_class, cfg.w_mask)
            else:
                out = model(b["x"])
                loss, parts = classification_loss(out, b["y"])
            if not math.isfinite(parts["loss"]):
                raise NumericError(f"non-finite loss at epoch {epoch}: {parts}")
            if epoch == 0 and count == 0:
                first = dict(parts)
            loss.backward()
            opt.step()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
            correct += int((predict_labels(out["class_logits"]) == b["y"]).sum())
            count += len(idx)
        entry = {"epoch": epoch, **{k: v / count for k, v in sums.items()},
                 "train_acc": correct / count, "step": opt.t}
        if epoch == 0:
            entry["first_batch"] = first
        history.append(entry)
        if metrics_path:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps({**entry, "wall_s": round(time.perf_counter() - t_start, 4)}) + "\n")
        log.info("%s epoch %d: %s", plan.stage, epoch, entry)
    streams = {"shuffle": rng_shuffle, "offsets": rng_offsets, "mask": rng_mask,
               "dropout.encoder": rng_enc, "dropout.decoder": rng_dec}
    return TrainResult(model, history, opt, {k: g.bit_generator.state for k, g in streams.items()})


def run_pretrain(plan, cfg, dataset, out_dir=None):
    if dataset.store is None:
        raise ValueError("pretraining dataset has no teacher store attached")
    model = build_model(cfg, substream(plan.seed, "init"), with_decoder=True)
    res = _loop(model, plan, dataset, _metrics(out_dir), pretraining=True)
    if out_dir:
        save_checkpoint(out_dir, res, plan)
    return res


def run_finetune(plan, cfg, dataset, pretrained_state, out_dir=None):
    """Encoder and classifier start from the pretrained weights; the decoder is discarded."""
    model = build_model(cfg, substream(plan.seed, "init"), with_decoder=False)
    model.load_state_dict(strip_decoder(pretrained_state), strict=True)
    res = _loop(model, plan, dataset, _metrics(out_dir))
    if out_dir:
        save_checkpoint(out_dir, res, plan)
    return res


def run_fullscratch(plan, cfg, dataset, out_dir=None):
    model = build_model(cfg, substream(plan.seed, "init"), with_decoder=False)
    res = _loop(model, plan, dataset, _metrics(out_dir))
    if out_dir:
        save_checkpoint(out_dir, res, plan)
    return res


def _metrics(out_dir):
    return os.path.join(out_dir, "metrics.jsonl") if out_dir else None


def save_checkpoint(out_dir, result, plan):
    model, opt = result.model, result.optimizer
    tensors = model.state_dict()
    opt_state = opt.state_dict()
    for k, v in opt_state.items():
        if k != "t":
            tensors[f"optim.{k}"] = v
    meta = {"model_config": model.cfg.to_dict(), "plan": asdict(plan), "step": opt.t,
            "epochs_done": len(result.log),
            "final_loss": result.log[-1]["loss"] if result.log else None,
            "rng_state": result.rng_state}
    save_archive(os.path.join(out_dir, "checkpoint"), tensors, meta)


def load_checkpoint(path):
    """Return (model_state, meta) with optimizer tensors split off."""
    if os.path.isdir(os.path.join(path, "checkpoint")):
        path = os.path.join(path, "checkpoint")
    tensors, meta = load_archive(path)
    state = {k: v for k, v in tensors.items() if not k.startswith("optim.")}
    return state, meta
