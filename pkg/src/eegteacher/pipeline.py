"""Stage functions behind the command line.

Directory layout under a work dir::

    prep/split.json                      excerpt-level train/val split
    features/{muq,surprisal,entropy}/    teacher blocks, codebook, bins
    runs/{stage}-{kind}-s{seed}/         checkpoint/, metrics.jsonl
    caches/{run}.jsonl                   validation logits
    reports/                             ensembles and comparison tables

Every stage directory gets a ``manifest.json`` naming the config hash,
the full config, the seed and the inputs it read.
"""
from __future__ import annotations

import json
import os

from .dataset import SegmentDataset, substream
from .evaluation import (comparison_report, ensemble, evaluate_model, read_cache, write_cache,
                         write_report)
from .features import TeacherSettings, load_store, markov_providers, run_features
from .model import build_model, config_from_dict
from .signal_prep import (load_recordings, make_excerpts, read_split, stratified_split,
                          truncate_recording, write_split)
from .synthetic import generate_synthetic, read_stimuli, write_synthetic
from .teacher_features import FileLogitProvider
from .training import TrainPlan, load_checkpoint, run_finetune, run_fullscratch, run_pretrain


class DataError(RuntimeError):
    pass


def write_manifest(directory, doc):
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _manifest(cfg, stage, **extra):
    return {"stage": stage, "config_hash": cfg.hash(), "config": cfg.to_dict(), **extra}


def _require(path, what):
    if not os.path.exists(path):
        raise DataError(f"missing {what}: {path}")
    return path


# ------------------------------------------------------------------ stages
def stage_synth(cfg, out_dir):
    data = generate_synthetic(cfg.synth)
    write_synthetic(out_dir, data)
    write_manifest(out_dir, _manifest(cfg, "synth", seed=cfg.synth.seed,
                                      recordings=len(data.recordings), songs=cfg.synth.songs))
    return data


def load_truncated(cfg, data_dir):
    rec_dir = _require(os.path.join(data_dir, "recordings"), "recordings directory")
    recs = load_recordings(rec_dir)
    if not recs:
        raise DataError(f"no recordings in {rec_dir}")
    for r in recs:
        if r.sample_rate != cfg.data.sample_rate:
            raise DataError(f"recording {r.key} is at {r.sample_rate} Hz, config expects {cfg.data.sample_rate}")
    return [truncate_recording(r, cfg.data.max_s) for r in recs]


def stage_prep(cfg, data_dir, work_dir):
    recs = load_truncated(cfg, data_dir)
    excerpts = [e for r in recs for e in make_excerpts(r, cfg.data.excerpt_s)]
    if not excerpts:
        raise DataError("recordings are shorter than one excerpt")
    split = stratified_split(excerpts, cfg.data.split_ratio, cfg.data.split_seed)
    out = os.path.join(work_dir, "prep")
    os.makedirs(out, exist_ok=True)
    write_split(os.path.join(out, "split.json"), split)
    write_manifest(out, _manifest(cfg, "prep", seed=cfg.data.split_seed, data_dir=data_dir,
                                  recordings=[r.key for r in recs], per_song=split.per_song,
                                  train=len(split.train_excerpts), val=len(split.val_excerpts)))
    return split


def _providers(cfg, stim_dir, stimuli):
    if cfg.teacher.provider == "markov":
        missing = [s for s, (_, _, p) in stimuli.items() if p is None]
        if missing:
            raise DataError(f"songs {missing} have no transition matrix for the markov provider")
        return markov_providers({s: p for s, (_, _, p) in stimuli.items()})
    out = {}
    for song in stimuli:
        prefix = os.path.join(stim_dir, f"song{song}.logits")
        _require(prefix + ".f32", "logit file")
        out[song] = FileLogitProvider.from_file(prefix)
    return out


def stage_features(cfg, data_dir, work_dir):
    stim_dir = _require(os.path.join(data_dir, "stimuli"), "stimuli directory")
    stimuli = read_stimuli(stim_dir)
    if not stimuli:
        raise DataError(f"no stimuli in {stim_dir}")
    t = cfg.teacher
    settings = TeacherSettings(tuple(t.kinds), t.context, t.n_bins, t.k, t.kmeans_seed,
                               t.kmeans_restarts, cfg.data.max_s)
    providers = _providers(cfg, stim_dir, stimuli) if {"surprisal", "entropy"} & set(t.kinds) else {}
    out = os.path.join(work_dir, "features")
    feats = run_features(out, {s: v[0] for s, v in stimuli.items()}, {s: v[1] for s, v in stimuli.items()},
                         providers, settings)
    write_manifest(out, _manifest(cfg, "features", seed=t.kmeans_seed, data_dir=data_dir,
                                  kinds=feats["kinds"], context=t.context))
    return feats


def datasets(cfg, data_dir, work_dir, kind=None):
    """(train, val) datasets; the train set carries the ``kind`` teacher store if given."""
    recs = load_truncated(cfg, data_dir)
    split = read_split(_require(os.path.join(work_dir, "prep", "split.json"), "split (run prep first)"))
    store = None
    if kind is not None:
        _require(os.path.join(work_dir, "features", "features.json"), "features (run features first)")
        store = load_store(os.path.join(work_dir, "features"), kind)
    d = cfg.data
    common = dict(window_s=d.window_s, stride_s=d.stride_s, segment_s=d.segment_s, delay_ms=d.delay_ms)
    return (SegmentDataset(recs, split.train_excerpts, store, **common),
            SegmentDataset(recs, split.val_excerpts, None, **common))


def run_name(stage, kind, seed):
    return f"{stage}-{kind}-s{seed}" if kind else f"{stage}-s{seed}"


def stage_train(cfg, data_dir, work_dir, stage, kind=None, seed=None):
    """Run one training stage; returns the run directory."""
    seed = cfg.train.seed if seed is None else seed
    tr = cfg.train
    epochs = {"pretrain": tr.pretrain_epochs, "finetune": tr.finetune_epochs,
              "fullscratch": tr.fullscratch_epochs}[stage]
    if stage in ("pretrain", "finetune") and kind is None:
        raise ValueError(f"{stage} needs a teacher kind")
    plan = TrainPlan(stage, epochs, tr.batch_size, tr.lr, seed, kind if stage == "pretrain" else None)
    run_dir = os.path.join(work_dir, "runs", run_name(stage, kind if stage != "fullscratch" else None, seed))
    if stage == "pretrain":
        train, _ = datasets(cfg, data_dir, work_dir, kind)
        model_cfg = cfg.model_for(kind, train.store.raw_dim)
        run_pretrain(plan, model_cfg, train, run_dir)
        inputs = {"features": os.path.join(work_dir, "features")}
    elif stage == "finetune":
        src = _require(os.path.join(work_dir, "runs", run_name("pretrain", kind, seed)), "pretrained run")
        state, meta = load_checkpoint(src)
        model_cfg = config_from_dict(meta["model_config"])
        train, _ = datasets(cfg, data_dir, work_dir)
        run_finetune(plan, model_cfg, train, state, run_dir)
        inputs = {"pretrained": src}
    else:
        train, _ = datasets(cfg, data_dir, work_dir)
        run_fullscratch(plan, cfg.model_for(), train, run_dir)
        inputs = {}
    write_manifest(run_dir, _manifest(cfg, stage, seed=seed, plan=plan.__dict__, inputs=inputs,
                                      metric_log=os.path.join(run_dir, "metrics.jsonl")))
    return run_dir


def load_model(run_dir):
    state, meta = load_checkpoint(run_dir)
    model_cfg = config_from_dict(meta["model_config"])
    model = build_model(model_cfg, 0, with_decoder=any(k.startswith("decoder.") for k in state))
    model.load_state_dict(state, strict=True)
    return model


def stage_evaluate(cfg, data_dir, work_dir, run_dir):
    """Validation logits of one run -> ``caches/{run}.jsonl``."""
    model = load_model(_require(run_dir, "run directory"))
    _, val = datasets(cfg, data_dir, work_dir)
    tag = os.path.basename(os.path.normpath(run_dir))
    cache = evaluate_model(model, val, tag, cfg.hash())
    out = os.path.join(work_dir, "caches")
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, tag + ".jsonl")
    write_cache(path, cache)
    return path


def stage_untrained(cfg, data_dir, work_dir, seed):
    """Cache of a freshly initialised classifier (chance-level reference)."""
    model = build_model(cfg.model_for(), substream(seed, "init"), with_decoder=False)
    _, val = datasets(cfg, data_dir, work_dir)
    tag = f"untrained-s{seed}"
    cache = evaluate_model(model, val, tag, cfg.hash())
    out = os.path.join(work_dir, "caches")
    os.makedirs(out, exist_ok=True)
    write_cache(os.path.join(out, tag + ".jsonl"), cache)
    return cache


def stage_ensemble(cache_paths, out_path, tag=None):
    if len(cache_paths) < 2:
        raise ValueError("ensemble needs at least two caches")
    caches = [read_cache(_require(p, "cache")) for p in cache_paths]
    ens = ensemble(caches, tag)
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    write_cache(out_path, ens)
    return ens


def compare_caches(cache_paths, out_prefix=None, pairs=None):
    """Pairwise comparison report of cache files; written to ``out_prefix`` if given."""
    caches = {}
    for p in cache_paths:
        c = read_cache(_require(p, "cache"))
        caches[c.model_tag] = c
    tags = list(caches)
    if pairs is None:
        pairs = [(a, b) for i, a in enumerate(tags) for b in tags[i + 1:]]
    report = comparison_report(caches, pairs)
    if out_prefix:
        os.makedirs(os.path.dirname(out_prefix) or ".", exist_ok=True)
        write_report(out_prefix, report)
    return report


def run_chain(cfg, data_dir, work_dir, seed=None, kinds=None):
    """prep -> features -> pretrain/finetune per kind -> fullscratch -> caches -> ensemble -> report."""
    seed = cfg.train.seed if seed is None else seed
    kinds = list(kinds or cfg.teacher.kinds)
    stage_prep(cfg, data_dir, work_dir)
    stage_features(cfg, data_dir, work_dir)
    caches = []
    for kind in kinds:
        stage_train(cfg, data_dir, work_dir, "pretrain", kind, seed)
        run = stage_train(cfg, data_dir, work_dir, "finetune", kind, seed)
        caches.append(stage_evaluate(cfg, data_dir, work_dir, run))
    base = stage_evaluate(cfg, data_dir, work_dir, stage_train(cfg, data_dir, work_dir, "fullscratch", None, seed))
    reports = os.path.join(work_dir, "reports")
    all_caches = caches + [base]
    if len(caches) >= 2:
        ens_path = os.path.join(reports, "ensemble.jsonl")
        stage_ensemble(caches, ens_path, f"ensemble-s{seed}")
        all_caches.append(ens_path)
    return compare_caches(all_caches, os.path.join(reports, "comparison"))


__all__ = ["DataError", "stage_synth", "stage_prep", "stage_features", "stage_train", "stage_evaluate",
           "stage_untrained", "stage_ensemble", "compare_caches", "run_chain", "datasets", "load_model",
           "run_name", "write_manifest"]
