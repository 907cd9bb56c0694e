"""Synthetic stand-in for EEG recordings, audio embeddings and token chains.

Each song owns a first-order Markov chain over ``vocab`` tokens (50 Hz) and
an embedding trajectory (25 Hz) built from a codebook shared by all songs,
so k-means can recover the token classes.  The EEG of one subject hearing
one song is

    coupling * teacher_part + (1 - coupling) * song_part + noise * N(0, 1)

where ``teacher_part`` is a fixed channel mixture of the song's surprisal,
entropy and embedding streams (identical across subjects, delayed by
``delay_ms``) and ``song_part`` mixes a few song-specific latent waveforms
through subject-specific weights.  Both parts are scaled to unit variance
per channel before mixing.
"""
from __future__ import annotations

import json
import os
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import substream
from .signal_prep import Recording, write_recording
from .teacher_features import MUQ_RATE, TOKEN_RATE


@dataclass
class SyntheticSpec:
    songs: int = 10
    subjects: int = 1
    channels: int = 8
    duration_s: float = 120.0
    coupling: float = 0.8
    noise: float = 0.3
    seed: int = 0
    vocab: int = 32
    embed_dim: int = 16
    sample_rate: float = 125.0
    delay_ms: float = 200.0
    latents: int = 3
    dirichlet_alpha: float = 0.3
    stay: float = 0.9            # self-transition weight; runs last ~1/(1-stay) frames
    song_tokens: int = 8         # size of each song's preferred token subset

    def __post_init__(self):
        if self.songs < 2:
            raise ValueError("need at least 2 songs")
        if not 0.0 <= self.coupling <= 1.0:
            raise ValueError("coupling must lie in [0, 1]")
        if self.subjects < 1 or self.channels < 1 or self.vocab < 2:
            raise ValueError("subjects, channels must be >= 1 and vocab >= 2")
        if not 0.0 <= self.stay < 1.0:
            raise ValueError("stay must lie in [0, 1)")
        if self.duration_s <= 0 or self.noise < 0:
            raise ValueError("duration must be positive and noise non-negative")


@dataclass
class SyntheticData:
    spec: SyntheticSpec
    recordings: list
    tokens: dict = field(default_factory=dict)       # song -> (T50,) int
    embeddings: dict = field(default_factory=dict)   # song -> (T25, D) float
    transitions: dict = field(default_factory=dict)  # song -> (V, V)


def _chain(p, n, rng):
    v = p.shape[0]
    cum = np.cumsum(p, axis=1)
    u = rng.random(n)
    z = np.empty(n, dtype=np.int64)
    z[0] = rng.integers(v)
    for t in range(1, n):
        z[t] = min(int(np.searchsorted(cum[z[t - 1]], u[t], side="right")), v - 1)
    return z


def _song_chain(spec, rng):
    """Sticky chain whose jumps favour a song-specific subset of tokens."""
    alpha = np.full(spec.vocab, 0.02)
    alpha[rng.choice(spec.vocab, size=min(spec.song_tokens, spec.vocab), replace=False)] = spec.dirichlet_alpha
    jumps = rng.dirichlet(alpha, size=spec.vocab)
    return spec.stay * np.eye(spec.vocab) + (1 - spec.stay) * jumps


def _zscore(x, axis=0):
    sd = x.std(axis=axis, keepdims=True)
    return (x - x.mean(axis=axis, keepdims=True)) / np.where(sd > 0, sd, 1.0)


def _teacher_drive(tokens, p, codebook):
    """(T50, 2 + D) stream: surprisal, entropy and embedding of each token."""
    prev = np.concatenate([[tokens[0]], tokens[:-1]])
    with np.errstate(divide="ignore"):
        logp = np.log(np.where(p > 0, p, 1e-300))
    s = -logp[prev, tokens]
    h = -(p * logp).sum(axis=1)[prev]
    return np.column_stack([_zscore(s), _zscore(h), codebook[tokens]])


def generate_synthetic(spec):
    rng = substream(spec.seed, "synth")
    rate = spec.sample_rate
    n_eeg = int(round(spec.duration_s * rate))
    n_tok = int(round(spec.duration_s * TOKEN_RATE))
    n_emb = int(round(spec.duration_s * MUQ_RATE))
    shift = int(round(spec.delay_ms / 1000.0 * rate))

    codebook = rng.normal(size=(spec.vocab, spec.embed_dim))
    mix_teacher = rng.normal(size=(spec.channels, 2 + spec.embed_dim))
    mix_subject = rng.normal(size=(spec.subjects, spec.channels, spec.latents))
    t_eeg = np.arange(n_eeg + shift) / rate
    t_tok = np.arange(n_tok) / TOKEN_RATE

    data = SyntheticData(spec, [])
    for song in range(spec.songs):
        p = _song_chain(spec, rng)
        tokens = _chain(p, n_tok, rng)
        emb = codebook[tokens[::2][:n_emb]] + 0.1 * rng.normal(size=(n_emb, spec.embed_dim))
        data.transitions[song] = p
        data.tokens[song] = tokens
        data.embeddings[song] = emb

        drive = _teacher_drive(tokens, p, codebook)
        up = np.column_stack([np.interp(t_eeg, t_tok, drive[:, k]) for k in range(drive.shape[1])])
        # the brain responds delay_ms after the stimulus: EEG sample n sees stimulus n - shift
        teacher = _zscore((mix_teacher @ up.T)[:, :n_eeg], axis=1)
        teacher = np.concatenate([np.zeros((spec.channels, shift)), teacher], axis=1)[:, :n_eeg]

        freqs = rng.uniform(2.0, 20.0, size=spec.latents)
        phases = rng.uniform(0, 2 * np.pi, size=spec.latents)
        envelope = 1.0 + 0.5 * np.sin(2 * np.pi * rng.uniform(0.05, 0.3, size=(spec.latents, 1))
                                      * t_eeg[None, :n_eeg])
        latents = envelope * np.sin(2 * np.pi * freqs[:, None] * t_eeg[None, :n_eeg] + phases[:, None])

        for subj in range(spec.subjects):
            song_part = _zscore(mix_subject[subj] @ latents, axis=1)
            noise = rng.normal(size=(spec.channels, n_eeg))
            eeg = spec.coupling * teacher + (1 - spec.coupling) * song_part + spec.noise * noise
            data.recordings.append(Recording(eeg.astype(np.float32), rate, song, subj))
    return data


# ------------------------------------------------------------------ files
def write_synthetic(root, data):
    """``recordings/``, ``stimuli/song{k}.{tokens.i32,emb.f32,transition.f64}`` and ``synth.json``."""
    rec_dir = os.path.join(root, "recordings")
    stim_dir = os.path.join(root, "stimuli")
    os.makedirs(rec_dir, exist_ok=True)
    os.makedirs(stim_dir, exist_ok=True)
    for rec in data.recordings:
        write_recording(os.path.join(rec_dir, f"sub{rec.subject_id:02d}_song{rec.song_id:02d}"), rec)
    for song in sorted(data.tokens):
        write_stimulus(os.path.join(stim_dir, f"song{song}"), data.tokens[song],
                       data.embeddings[song], data.transitions.get(song))
    with open(os.path.join(root, "synth.json"), "w") as fh:
        json.dump(asdict(data.spec), fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_stimulus(prefix, tokens, embeddings, transition=None):
    np.asarray(tokens, dtype="<i4").tofile(prefix + ".tokens.i32")
    np.ascontiguousarray(embeddings, dtype="<f4").tofile(prefix + ".emb.f32")
    meta = {"n_tokens": int(len(tokens)), "embedding_shape": list(np.shape(embeddings)),
            "token_rate_hz": TOKEN_RATE, "embedding_rate_hz": MUQ_RATE}
    if transition is not None:
        np.ascontiguousarray(transition, dtype="<f8").tofile(prefix + ".transition.f64")
        meta["vocab_size"] = int(np.shape(transition)[0])
    with open(prefix + ".json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_stimulus(prefix):
    """Returns (tokens, embeddings, transition or None)."""
    with open(prefix + ".json") as fh:
        meta = json.load(fh)
    tokens = np.fromfile(prefix + ".tokens.i32", dtype="<i4").astype(np.int64)
    emb = np.fromfile(prefix + ".emb.f32", dtype="<f4").reshape(meta["embedding_shape"]).astype(np.float64)
    transition = None
    if os.path.exists(prefix + ".transition.f64"):
        v = meta["vocab_size"]
        transition = np.fromfile(prefix + ".transition.f64", dtype="<f8").reshape(v, v)
    return tokens, emb, transition


def read_stimuli(directory):
    out = {}
    for name in sorted(os.listdir(directory)):
        m = re.fullmatch(r"song(\d+)\.json", name)
        if m:
            out[int(m.group(1))] = read_stimulus(os.path.join(directory, name[:-5]))
    return dict(sorted(out.items()))
