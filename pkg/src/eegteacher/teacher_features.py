"""Teacher sequences from stimulus representations.

Two families:

* acoustic: frame embeddings (25 Hz) tokenised by a k-means codebook;
* predictive: per-frame surprisal and entropy (50 Hz) of an autoregressive
  token model, discretised into equal-frequency bins.

The autoregressive model is abstracted as a *logit provider*: given a
context of tokens it returns one row of next-token logits per position,
row ``i`` being the prediction for ``context[i]`` from ``context[:i]``.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

MUQ_RATE = 25
TOKEN_RATE = 50
SEGMENT_FRAMES = 150
SEGMENT_STRIDE = 5
CHUNK_S = 30
CONTEXT_WINDOWS = (8, 16, 32)
MIN_LOGIT = -1e9


# ------------------------------------------------------------------ k-means
@dataclass
class KMeansCodebook:
    centroids: np.ndarray
    inertia: float
    meta: dict = field(default_factory=dict)

    @property
    def k(self):
        return self.centroids.shape[0]


def _sq_dists(x, c):
    # expansion form; fast, used only inside Lloyd iterations
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x, k, rng):
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = ((x - centers[0]) ** 2).sum(1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[i] = x[idx]
        closest = np.minimum(closest, ((x - centers[i]) ** 2).sum(1))
    return centers


def _lloyd(x, centers, tol, max_iter):
    for it in range(max_iter):
        d = _sq_dists(x, centers)
        labels = d.argmin(1)
        new = np.empty_like(centers)
        counts = np.bincount(labels, minlength=len(centers))
        for j in range(len(centers)):
            if counts[j]:
                new[j] = x[labels == j].mean(0)
            else:
                # reseed an empty cluster at the worst-represented point
                far = int(d[np.arange(len(x)), labels].argmax())
                new[j] = x[far]
                labels[far] = j
                d[far, labels[far]] = 0.0
        shift = np.sqrt(((new - centers) ** 2).sum(1)).max()
        centers = new
        if shift < tol:
            break
    d = _sq_dists(x, centers)
    labels = d.argmin(1)
    inertia = float(((x - centers[labels]) ** 2).sum())
    return centers, inertia, it + 1


def fit_kmeans(pooled, k=128, seed=0, restarts=10, tol=1e-6, max_iter=300):
    """k-means++ seeded Lloyd iterations; keeps the lowest-inertia restart."""
    x = np.asarray(pooled, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("pooled embeddings must be 2-D (N, D)")
    if x.shape[0] < k:
        raise ValueError(f"need at least k={k} points, got {x.shape[0]}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        centers, inertia, iters = _lloyd(x, _kmeans_pp(x, k, rng), tol, max_iter)
        if best is None or inertia < best[1]:
            best = (centers, inertia, iters)
    meta = {"init": "k-means++", "restarts": restarts, "seed": seed, "tol": tol,
            "max_iter": max_iter, "iterations": best[2]}
    return KMeansCodebook(best[0], best[1], meta)


def assign_tokens(codebook, frames, block=4_000_000):
    """Nearest-centroid index per frame (exact differences; ties -> lowest index)."""
    c = np.asarray(codebook.centroids if isinstance(codebook, KMeansCodebook) else codebook,
                   dtype=np.float64)
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != c.shape[1]:
        raise ValueError(f"frame dim {x.shape[-1]} does not match codebook dim {c.shape[1]}")
    step = max(1, block // (c.shape[0] * c.shape[1]))
    out = np.empty(len(x), dtype=np.int64)
    for i in range(0, len(x), step):
        diff = x[i:i + step, None, :] - c[None, :, :]
        out[i:i + step] = (diff * diff).sum(-1).argmin(1)
    return out


# --------------------------------------------------------- segment geometry
def enumerate_segments(n_frames, length=SEGMENT_FRAMES, stride=SEGMENT_STRIDE):
    """Half-open frame ranges [s_j, e_j) = [stride*j, stride*j + length)."""
    if n_frames < length:
        return []
    count = (n_frames - length) // stride + 1
    return [(j * stride, j * stride + length) for j in range(count)]


def build_context(tokens, end, window_s, pad_token, frame_rate=TOKEN_RATE):
    """Context ``tokens[end - W_f : end]`` left-padded to exactly W_f frames.

    Returns ``(context, positions)``; padded slots have position -1.
    """
    tokens = np.asarray(tokens)
    if end > len(tokens):
        raise ValueError("context end beyond token sequence")
    wf = int(round(frame_rate * window_s))
    start = end - wf
    lo = max(start, 0)
    ctx = np.full(wf, pad_token, dtype=np.int64)
    pos = np.full(wf, -1, dtype=np.int64)
    ctx[lo - start:] = tokens[lo:end]
    pos[lo - start:] = np.arange(lo, end)
    return ctx, pos


# ------------------------------------------------------- surprisal/entropy
def surprisal_entropy(logits, observed):
    """Frame-wise surprisal -log p(observed) and entropy of softmax(logits), in nats."""
    z = np.asarray(logits, dtype=np.float64)
    obs = np.asarray(observed, dtype=np.int64)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logits")
    if z.ndim != 2 or obs.shape != (z.shape[0],):
        raise ValueError(f"logits {z.shape} / observed {obs.shape} mismatch")
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    p = np.exp(logp)
    s = -logp[np.arange(len(obs)), obs]
    h = -(p * logp).sum(axis=1)
    v = z.shape[1]
    return np.maximum(s, 0.0), np.clip(h, 0.0, np.log(v))


@dataclass
class PredictiveSegment:
    index: int
    segment_start_s: float
    surprisal_raw: np.ndarray
    entropy_raw: np.ndarray
    surprisal_disc: np.ndarray = None
    entropy_disc: np.ndarray = None


class MarkovLogitProvider:
    """First-order Markov chain standing in for the autoregressive model.

    Row i of the logits is ``log P[context[i-1]]``; when the predecessor is
    missing or the pad token the stationary distribution is used instead.
    """

    def __init__(self, transition, atol=1e-6):
        p = np.asarray(transition, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] != p.shape[1]:
            raise ValueError("transition matrix must be square")
        if np.any(p < 0) or not np.allclose(p.sum(1), 1.0, atol=atol):
            raise ValueError("transition matrix must be row-stochastic")
        self.transition = p
        self.vocab_size = p.shape[0]
        self.pad_token = self.vocab_size
        self.stationary = stationary_distribution(p)
        table = np.vstack([p, self.stationary[None, :]])
        with np.errstate(divide="ignore"):
            self._log_table = np.where(table > 0, np.log(np.where(table > 0, table, 1.0)), MIN_LOGIT)

    def logits(self, context, positions=None):
        context = np.asarray(context, dtype=np.int64)
        prev = np.empty_like(context)
        prev[0] = self.pad_token
        prev[1:] = context[:-1]
        return self._log_table[prev]


def stationary_distribution(p):
    w, vecs = np.linalg.eig(p.T)
    i = int(np.argmin(np.abs(w - 1.0)))
    pi = np.abs(np.real(vecs[:, i]))
    return pi / pi.sum()


class FileLogitProvider:
    """Serves externally computed per-frame logits (T, V) by absolute position."""

    def __init__(self, logits):
        self.table = np.asarray(logits, dtype=np.float64)
        self.vocab_size = self.table.shape[1]
        self.pad_token = self.vocab_size

    @classmethod
    def from_file(cls, prefix):
        with open(prefix + ".json") as fh:
            meta = json.load(fh)
        flat = np.fromfile(prefix + ".f32", dtype="<f4")
        return cls(flat.reshape(-1, int(meta["vocab_size"])))

    def logits(self, context, positions=None):
        if positions is None:
            raise ValueError("file-backed logits need absolute positions")
        positions = np.asarray(positions)
        out = np.zeros((len(positions), self.vocab_size))
        real = positions >= 0
        out[real] = self.table[positions[real]]
        return out


class TracingProvider:
    """Wraps a provider and records every context it is shown."""

    def __init__(self, inner):
        self.inner = inner
        self.vocab_size = inner.vocab_size
        self.pad_token = inner.pad_token
        self.calls = []

    def logits(self, context, positions=None):
        self.calls.append((np.array(context), None if positions is None else np.array(positions)))
        return self.inner.logits(context, positions)


class UniformLogitProvider:
    def __init__(self, vocab_size):
        self.vocab_size = vocab_size
        self.pad_token = vocab_size

    def logits(self, context, positions=None):
        return np.zeros((len(context), self.vocab_size))


def sliding_window_features(tokens, provider, window_s=16, length=SEGMENT_FRAMES,
                            stride=SEGMENT_STRIDE, frame_rate=TOKEN_RATE):
    """Default mode: one provider call per 3-s segment with W seconds of history."""
    if window_s not in CONTEXT_WINDOWS:
        raise ValueError(f"context window must be one of {CONTEXT_WINDOWS}, got {window_s}")
    tokens = np.asarray(tokens, dtype=np.int64)
    out = []
    for j, (s, e) in enumerate(enumerate_segments(len(tokens), length, stride)):
        ctx, pos = build_context(tokens, e, window_s, provider.pad_token, frame_rate)
        z = provider.logits(ctx, pos)[-length:]
        surp, ent = surprisal_entropy(z, tokens[s:e])
        out.append(PredictiveSegment(j, s / frame_rate, surp, ent))
    return out


def chunk_based_features(tokens, provider, chunk_frames=CHUNK_S * TOKEN_RATE):
    """Conservative mode: every chunk is scored with context confined to itself.

    Returns a list of (surprisal, entropy) arrays, one per chunk; a short
    final chunk yields shorter arrays.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    out = []
    for c0 in range(0, len(tokens), chunk_frames):
        chunk = tokens[c0:c0 + chunk_frames]
        z = provider.logits(chunk, np.arange(c0, c0 + len(chunk)))
        out.append(surprisal_entropy(z, chunk))
    return out


# ---------------------------------------------------------- quantile bins
@dataclass
class QuantileBins:
    edges: np.ndarray
    kind: str = ""

    @property
    def n_bins(self):
        return len(self.edges) - 1


def fit_quantile_bins(values, n_bins=128, kind=""):
    """Edges e_k = Quantile(u, k / n_bins), k = 0..n_bins, linear interpolation."""
    u = np.asarray(values, dtype=np.float64).ravel()
    if u.size == 0:
        raise ValueError("cannot fit quantile bins on an empty pool")
    edges = np.quantile(u, np.arange(n_bins + 1) / n_bins, method="linear")
    return QuantileBins(edges, kind)


def discretize_quantile(values, bins):
    """Largest b with e_b <= value, clamped to [0, B-1]."""
    edges = bins.edges if isinstance(bins, QuantileBins) else np.asarray(bins)
    b = np.searchsorted(edges, np.asarray(values, dtype=np.float64), side="right") - 1
    return np.clip(b, 0, len(edges) - 2)


def discretize_segments(segments, n_bins=128):
    """Fit global surprisal/entropy bins on every segment and fill the disc fields."""
    s_bins = fit_quantile_bins(np.concatenate([g.surprisal_raw for g in segments]), n_bins, "surprisal")
    h_bins = fit_quantile_bins(np.concatenate([g.entropy_raw for g in segments]), n_bins, "entropy")
    for g in segments:
        g.surprisal_disc = discretize_quantile(g.surprisal_raw, s_bins)
        g.entropy_disc = discretize_quantile(g.entropy_raw, h_bins)
    return s_bins, h_bins


# -------------------------------------------------------- teacher sequence
@dataclass
class TeacherSequence:
    kind: str              # muq | surprisal | entropy
    raw: np.ndarray        # (N,) or (N, D)
    disc: np.ndarray       # (N,)
    frame_rate_hz: float
    start_s: float = 0.0

    def __post_init__(self):
        if len(self.raw) != len(self.disc):
            raise ValueError("raw and discrete teacher sequences differ in length")


# -------------------------------------------------------------- file I/O
def write_teacher_block(prefix, raw, disc, meta):
    """``prefix.raw.f32`` + ``prefix.disc.u8`` + ``prefix.json``."""
    raw = np.ascontiguousarray(raw, dtype="<f4")
    disc = np.asarray(disc)
    if disc.size and (disc.min() < 0 or disc.max() > 255):
        raise ValueError("discrete tokens do not fit in u8")
    raw.tofile(prefix + ".raw.f32")
    disc.astype(np.uint8).tofile(prefix + ".disc.u8")
    doc = dict(meta)
    doc["raw_shape"] = list(raw.shape)
    with open(prefix + ".json", "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_teacher_block(prefix):
    with open(prefix + ".json") as fh:
        meta = json.load(fh)
    raw = np.fromfile(prefix + ".raw.f32", dtype="<f4").reshape(meta["raw_shape"])
    disc = np.fromfile(prefix + ".disc.u8", dtype=np.uint8).astype(np.int64)
    return raw, disc.reshape(raw.shape[:-1] if meta.get("kind") == "muq" else raw.shape), meta


def save_codebook(prefix, codebook):
    np.ascontiguousarray(codebook.centroids, dtype="<f4").tofile(prefix + ".f32")
    meta = dict(codebook.meta, k=codebook.k, dim=int(codebook.centroids.shape[1]),
                inertia=codebook.inertia)
    with open(prefix + ".json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_codebook(prefix):
    with open(prefix + ".json") as fh:
        meta = json.load(fh)
    c = np.fromfile(prefix + ".f32", dtype="<f4").reshape(meta["k"], meta["dim"]).astype(np.float64)
    return KMeansCodebook(c, meta["inertia"], meta)


def save_bins(prefix, bins):
    np.ascontiguousarray(bins.edges, dtype="<f4").tofile(prefix + ".f32")
    with open(prefix + ".json", "w") as fh:
        json.dump({"kind": bins.kind, "n_bins": bins.n_bins,
                   "edges": [float(e) for e in bins.edges]}, fh, indent=1)
        fh.write("\n")


def load_bins(prefix):
    with open(prefix + ".json") as fh:
        meta = json.load(fh)
    # JSON keeps full float64 precision; the f32 file is for external tools
    return QuantileBins(np.asarray(meta["edges"], dtype=np.float64), meta["kind"])


def block_prefix(root, kind, song_id, chunk):
    d = os.path.join(root, kind, f"song{song_id}")
    os.makedirs(d, exist_ok=True)
    return os.path.join(d, f"chunk{chunk}")
