"""Feature stage: stimulus tokens/embeddings -> teacher files -> lookup stores.

Chunk ``c`` of a song is the stimulus span [30c, 30c + 30) s, which is also
excerpt ``c`` of every recording of that song.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .alignment import ChunkArrayStore, SegmentStore
from .teacher_features import (CHUNK_S, MUQ_RATE, SEGMENT_FRAMES, TOKEN_RATE, MarkovLogitProvider,
                               assign_tokens, block_prefix, chunk_based_features, discretize_quantile,
                               discretize_segments, fit_kmeans, fit_quantile_bins, read_teacher_block,
                               save_bins, save_codebook, sliding_window_features, write_teacher_block)

MUQ_FRAMES = 75


@dataclass
class TeacherSettings:
    kinds: tuple = ("muq", "surprisal", "entropy")
    context: object = 16        # 8 | 16 | 32 seconds, or "chunk"
    n_bins: int = 128
    k: int = 128
    kmeans_seed: int = 0
    kmeans_restarts: int = 10
    max_s: float = 240.0


def n_chunks(n_frames, rate):
    return n_frames // (CHUNK_S * rate)


def build_muq(embeddings, settings):
    """k-means over every full-chunk frame of every song; returns (arrays, codebook)."""
    per = CHUNK_S * MUQ_RATE
    limit = int(settings.max_s * MUQ_RATE)
    chunks = {}
    for song in sorted(embeddings):
        emb = embeddings[song][:limit]
        for c in range(n_chunks(len(emb), MUQ_RATE)):
            chunks[(song, c)] = emb[c * per:(c + 1) * per]
    pooled = np.concatenate([chunks[k] for k in sorted(chunks)])
    cb = fit_kmeans(pooled, settings.k, settings.kmeans_seed, settings.kmeans_restarts)
    return {k: (v, assign_tokens(cb, v)) for k, v in chunks.items()}, cb


def build_predictive(tokens, providers, settings):
    """Surprisal and entropy blocks for every song.

    Sliding mode returns per-(song, chunk) lists of segment starts/raw/disc for
    the segments wholly inside the chunk; chunk mode returns whole-chunk arrays.
    Returns ``({kind: blocks}, {kind: bins})``.
    """
    per = CHUNK_S * TOKEN_RATE
    limit = int(settings.max_s * TOKEN_RATE)
    if settings.context == "chunk":
        per_chunk = {}
        for song in sorted(tokens):
            tok = tokens[song][:limit]
            tok = tok[:n_chunks(len(tok), TOKEN_RATE) * per]
            for c, (s, h) in enumerate(chunk_based_features(tok, providers[song], per)):
                per_chunk[(song, c)] = (s, h)
        keys = sorted(per_chunk)
        bins = {"surprisal": fit_quantile_bins(np.concatenate([per_chunk[k][0] for k in keys]),
                                               settings.n_bins, "surprisal"),
                "entropy": fit_quantile_bins(np.concatenate([per_chunk[k][1] for k in keys]),
                                             settings.n_bins, "entropy")}
        out = {"surprisal": {}, "entropy": {}}
        for k in keys:
            for i, kind in enumerate(("surprisal", "entropy")):
                raw = per_chunk[k][i]
                out[kind][k] = (raw, discretize_quantile(raw, bins[kind]))
        return out, bins

    segs = {}
    for song in sorted(tokens):
        tok = tokens[song][:limit]
        segs[song] = sliding_window_features(tok, providers[song], settings.context)
    s_bins, h_bins = discretize_segments([g for song in sorted(segs) for g in segs[song]], settings.n_bins)
    out = {"surprisal": {}, "entropy": {}}
    for song, items in segs.items():
        for c in range(n_chunks(len(tokens[song][:limit]), TOKEN_RATE)):
            inside = [g for g in items
                      if g.segment_start_s >= c * CHUNK_S - 1e-9
                      and g.segment_start_s + SEGMENT_FRAMES / TOKEN_RATE <= (c + 1) * CHUNK_S + 1e-9]
            starts = np.array([g.segment_start_s for g in inside])
            out["surprisal"][(song, c)] = (starts, np.stack([g.surprisal_raw for g in inside]),
                                           np.stack([g.surprisal_disc for g in inside]))
            out["entropy"][(song, c)] = (starts, np.stack([g.entropy_raw for g in inside]),
                                         np.stack([g.entropy_disc for g in inside]))
    return out, {"surprisal": s_bins, "entropy": h_bins}


def markov_providers(transitions):
    return {song: MarkovLogitProvider(p) for song, p in transitions.items()}


def run_features(out_dir, tokens, embeddings, providers, settings):
    """Compute and write every requested teacher kind; returns the feature manifest."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = {"kinds": list(settings.kinds), "context": settings.context,
                "n_bins": settings.n_bins, "k": settings.k, "blocks": {}}
    if "muq" in settings.kinds:
        arrays, cb = build_muq(embeddings, settings)
        save_codebook(os.path.join(out_dir, "codebook"), cb)
        for (song, c), (raw, disc) in sorted(arrays.items()):
            write_teacher_block(block_prefix(out_dir, "muq", song, c), raw, disc,
                                {"kind": "muq", "frame_rate_hz": MUQ_RATE, "segment_start_s": c * CHUNK_S,
                                 "context_window_s": None, "vocab_size": settings.k, "layout": "chunk"})
        manifest["blocks"]["muq"] = [[s, c] for s, c in sorted(arrays)]
    wanted = [k for k in ("surprisal", "entropy") if k in settings.kinds]
    if wanted:
        blocks, bins = build_predictive(tokens, providers, settings)
        vocab = next(iter(providers.values())).vocab_size
        for kind in wanted:
            save_bins(os.path.join(out_dir, f"bins_{kind}"), bins[kind])
            for (song, c), item in sorted(blocks[kind].items()):
                meta = {"kind": kind, "frame_rate_hz": TOKEN_RATE, "context_window_s": settings.context,
                        "vocab_size": vocab}
                if settings.context == "chunk":
                    raw, disc = item
                    meta.update(layout="chunk", segment_start_s=c * CHUNK_S)
                else:
                    starts, raw, disc = item
                    meta.update(layout="segments", segment_start_s=[float(s) for s in starts])
                write_teacher_block(block_prefix(out_dir, kind, song, c), raw, disc, meta)
            manifest["blocks"][kind] = [[s, c] for s, c in sorted(blocks[kind])]
    with open(os.path.join(out_dir, "features.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def load_store(feature_dir, kind):
    """Rebuild the lookup store of one teacher kind from its files."""
    with open(os.path.join(feature_dir, "features.json")) as fh:
        manifest = json.load(fh)
    if kind not in manifest["blocks"]:
        raise FileNotFoundError(f"no {kind!r} features in {feature_dir}")
    blocks = {}
    for song, c in manifest["blocks"][kind]:
        blocks[(song, c)] = read_teacher_block(block_prefix(feature_dir, kind, song, c))
    layout = next(iter(blocks.values()))[2]["layout"]
    if layout == "chunk":
        rate = MUQ_RATE if kind == "muq" else TOKEN_RATE
        length = MUQ_FRAMES if kind == "muq" else SEGMENT_FRAMES
        return ChunkArrayStore(kind, {k: (raw, disc) for k, (raw, disc, _) in blocks.items()}, rate, length)
    per_song = {}
    for song in sorted({s for s, _ in blocks}):
        keys = sorted(k for k in blocks if k[0] == song)
        starts = np.concatenate([np.asarray(blocks[k][2]["segment_start_s"], dtype=np.float64) for k in keys])
        raw = np.concatenate([blocks[k][0] for k in keys])
        disc = np.concatenate([blocks[k][1] for k in keys])
        per_song[song] = (starts, raw, disc)
    return SegmentStore(kind, per_song)


def teacher_shape(kind, embed_dim=None):
    """(teacher_len, teacher_dim) for the model config."""
    if kind == "muq":
        if embed_dim is None:
            raise ValueError("muq teacher needs the embedding dimension")
        return MUQ_FRAMES, embed_dim
    return SEGMENT_FRAMES, 1
