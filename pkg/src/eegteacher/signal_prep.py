"""Recording -> excerpts -> windows -> normalised 3-s EEG segments.

All positions are handled in integer samples internally; seconds appear only
at the API boundary.  At 125 Hz the defaults are: 30 s excerpts (3750
samples), 8 s windows (1000) with 1.6 s stride (200), 3 s segments (375),
and a 200 ms stimulus delay (25).
"""
from __future__ import annotations

import json
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

CLAMP = 20.0


@dataclass
class Recording:
    samples: np.ndarray  # (channels, time)
    sample_rate: float
    song_id: int
    subject_id: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 2 or self.samples.shape[0] == 0:
            raise ValueError(f"recording samples must be (channels>0, time), got {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def channels(self):
        return self.samples.shape[0]

    @property
    def n_samples(self):
        return self.samples.shape[1]

    @property
    def duration_s(self):
        return self.n_samples / self.sample_rate

    @property
    def key(self):
        return f"{self.subject_id}_{self.song_id}"


@dataclass(frozen=True)
class Excerpt:
    subject_id: int
    song_id: int
    excerpt_index: int
    start_s: float
    duration_s: float

    @property
    def ref(self):
        return f"{self.subject_id}_{self.song_id}_{self.excerpt_index}"

    @property
    def recording_key(self):
        return f"{self.subject_id}_{self.song_id}"


@dataclass
class EegSegment:
    values: np.ndarray  # (channels, window samples), normalised
    t0_s: float         # start within the excerpt on the stimulus clock
    song_id: int
    excerpt_ref: str
    sample_id: str


@dataclass
class SplitAssignment:
    train_excerpts: list
    val_excerpts: list
    split_seed: int
    ratio: float = 0.75
    per_song: dict = field(default_factory=dict)


def seconds_to_samples(seconds, rate):
    """Round half away from zero (positive inputs: half up)."""
    x = seconds * rate
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def truncate_recording(rec, max_s=240.0):
    if max_s <= 0:
        raise ValueError("max_s must be positive")
    n = min(rec.n_samples, seconds_to_samples(max_s, rec.sample_rate))
    return Recording(rec.samples[:, :n], rec.sample_rate, rec.song_id, rec.subject_id)


def make_excerpts(rec, len_s=30.0):
    """Contiguous non-overlapping excerpts; the trailing remainder is dropped."""
    if len_s <= 0:
        raise ValueError("len_s must be positive")
    step = seconds_to_samples(len_s, rec.sample_rate)
    count = rec.n_samples // step
    return [Excerpt(rec.subject_id, rec.song_id, k, k * step / rec.sample_rate, len_s)
            for k in range(count)]


def stratified_split(excerpts, ratio=0.75, seed=42):
    """Song-stratified train/validation split of excerpt units.

    Each song contributes round(n_song * (1 - ratio)) validation excerpts
    (half rounds up, capped so at least one training excerpt remains when the
    song has two or more).  Which excerpts are chosen is a seeded permutation
    of that song's excerpts in ref order.
    """
    by_song = defaultdict(list)
    for ex in excerpts:
        by_song[ex.song_id].append(ex)
    if not by_song:
        raise ValueError("no excerpts to split")
    rng = np.random.default_rng(seed)
    train, val, per_song = [], [], {}
    for song in sorted(by_song):
        items = sorted(by_song[song], key=lambda e: (e.subject_id, e.excerpt_index))
        n = len(items)
        if n == 0:
            raise ValueError(f"song {song} has no excerpts")
        n_val = math.floor(n * (1.0 - ratio) + 0.5)
        if n >= 2:
            n_val = min(max(n_val, 1), n - 1)
        order = rng.permutation(n)
        val_idx = set(order[:n_val].tolist())
        for i, ex in enumerate(items):
            (val if i in val_idx else train).append(ex)
        per_song[song] = {"train": n - n_val, "val": n_val}
    return SplitAssignment(train, val, seed, ratio, per_song)


def delay_samples(delay_ms, rate):
    return seconds_to_samples(delay_ms / 1000.0, rate)


def apply_stimulus_delay(samples, delay_ms, rate):
    """View of ``samples`` (channels, time) whose origin is advanced by the delay."""
    shift = delay_samples(delay_ms, rate)
    if shift > samples.shape[-1]:
        raise ValueError(f"delay of {shift} samples exceeds {samples.shape[-1]} available")
    return samples[..., shift:]


def make_windows(duration_s, window_s=8.0, stride_s=1.6, rate=125.0):
    """Start times (s) of all windows with start + window_s <= duration_s."""
    total = seconds_to_samples(duration_s, rate)
    win = seconds_to_samples(window_s, rate)
    stride = seconds_to_samples(stride_s, rate)
    if total < win:
        return []
    count = (total - win) // stride + 1
    return [k * stride / rate for k in range(count)]


def segment_offset(mode, window_s=8.0, segment_s=3.0, rate=125.0, rng=None):
    """Offset of the segment inside its window, in (possibly half) samples.

    eval: exactly centred, which can fall between samples (625 / 2 at the
    defaults); train: a uniformly drawn integer from every valid offset.
    """
    slack = seconds_to_samples(window_s, rate) - seconds_to_samples(segment_s, rate)
    if slack < 0:
        raise ValueError("segment longer than window")
    if mode == "eval":
        return slack / 2
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode extraction needs an rng")
        return int(rng.integers(0, slack + 1))
    raise ValueError(f"unknown mode {mode!r}")


def extract_segment(excerpt_samples, window_start_s, mode, rng=None, rate=125.0,
                    window_s=8.0, segment_s=3.0, delay_ms=200.0):
    """Cut one raw segment from an excerpt.

    Returns ``(raw, t0_s)``.  ``t0_s`` is the segment start on the stimulus
    clock; the EEG is read from the delayed view, and a half-sample centre
    offset rounds up to the next sample.
    """
    offset = segment_offset(mode, window_s, segment_s, rate, rng)
    window_start = seconds_to_samples(window_start_s, rate)
    start = window_start + seconds_to_samples(offset / rate, rate)
    width = seconds_to_samples(segment_s, rate)
    shifted = apply_stimulus_delay(excerpt_samples, delay_ms, rate)
    if start + width > shifted.shape[-1]:
        raise ValueError("segment runs past the end of the delayed excerpt")
    return shifted[:, start:start + width], (window_start + offset) / rate


def robust_scale(x):
    """Per-row (x - median) / IQR using linear-interpolation quantiles; IQR 0 -> 1."""
    x = np.asarray(x, dtype=np.float64)
    q1, med, q3 = np.percentile(x, [25.0, 50.0, 75.0], axis=-1, keepdims=True)
    iqr = q3 - q1
    iqr = np.where(iqr == 0, 1.0, iqr)
    return (x - med) / iqr


def normalize_segment(raw):
    """Robust-scale each channel of one segment and clamp to [-20, 20]."""
    raw = np.asarray(raw)
    if raw.shape[-1] < 2:
        raise ValueError("need at least 2 samples per channel")
    return np.clip(robust_scale(raw), -CLAMP, CLAMP).astype(np.float32)


def sample_id(subject_id, song_id, excerpt_index, window_index):
    return f"{subject_id}_{song_id}_{excerpt_index}_{window_index}"


def excerpt_samples(rec, ex):
    start = seconds_to_samples(ex.start_s, rec.sample_rate)
    n = seconds_to_samples(ex.duration_s, rec.sample_rate)
    return rec.samples[:, start:start + n]


def segments_for_excerpt(rec, ex, mode="eval", rng=None, window_s=8.0, stride_s=1.6,
                         segment_s=3.0, delay_ms=200.0):
    """All normalised segments (one per window) of an excerpt."""
    data = excerpt_samples(rec, ex)
    out = []
    for w, start in enumerate(make_windows(ex.duration_s, window_s, stride_s, rec.sample_rate)):
        raw, t0 = extract_segment(data, start, mode, rng, rec.sample_rate, window_s, segment_s, delay_ms)
        out.append(EegSegment(normalize_segment(raw), t0, rec.song_id, ex.ref,
                              sample_id(rec.subject_id, rec.song_id, ex.excerpt_index, w)))
    return out


# ------------------------------------------------------------------ file I/O
def write_recording(prefix, rec):
    """``prefix.f32`` (channel-major little-endian float32) + ``prefix.json``."""
    np.ascontiguousarray(rec.samples, dtype="<f4").tofile(prefix + ".f32")
    meta = {"channels": rec.channels, "sample_rate": rec.sample_rate,
            "song_id": rec.song_id, "subject_id": rec.subject_id}
    with open(prefix + ".json", "w") as fh:
        json.dump(meta, fh, sort_keys=True)
        fh.write("\n")


def read_recording(prefix):
    with open(prefix + ".json") as fh:
        meta = json.load(fh)
    for key in ("channels", "sample_rate", "song_id", "subject_id"):
        if key not in meta:
            raise ValueError(f"{prefix}.json lacks {key!r}")
    flat = np.fromfile(prefix + ".f32", dtype="<f4")
    channels = int(meta["channels"])
    if flat.size % channels:
        raise ValueError(f"{prefix}.f32 size {flat.size} is not a multiple of {channels} channels")
    return Recording(flat.reshape(channels, -1), float(meta["sample_rate"]),
                     int(meta["song_id"]), int(meta["subject_id"]))


def load_recordings(directory):
    """Dataset adapter: every ``*.json``/``*.f32`` pair in ``directory``, sorted by name."""
    names = sorted(f[:-5] for f in os.listdir(directory)
                   if f.endswith(".json") and os.path.exists(os.path.join(directory, f[:-5] + ".f32")))
    return [read_recording(os.path.join(directory, n)) for n in names]


def write_split(path, split):
    doc = {"split_seed": split.split_seed, "ratio": split.ratio,
           "train": [_excerpt_doc(e) for e in split.train_excerpts],
           "val": [_excerpt_doc(e) for e in split.val_excerpts]}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_split(path):
    with open(path) as fh:
        doc = json.load(fh)
    return SplitAssignment([Excerpt(**e) for e in doc["train"]], [Excerpt(**e) for e in doc["val"]],
                           doc["split_seed"], doc.get("ratio", 0.75))


def _excerpt_doc(e):
    return {"subject_id": e.subject_id, "song_id": e.song_id, "excerpt_index": e.excerpt_index,
            "start_s": e.start_s, "duration_s": e.duration_s}
