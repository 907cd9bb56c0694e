"""Frame-level matching of 3-s EEG segments to teacher sequences.

Indices are 0-based and half-open: the teacher slice for a segment starting
at ``t0`` seconds is ``[floor(rate * t0), floor(rate * t0) + n)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .teacher_features import CHUNK_S, MUQ_RATE, SEGMENT_FRAMES, TOKEN_RATE

# t0 values come from sample grids (k / 125 s) and carry float error of a few ulp
_FLOOR_EPS = 1e-9
_TIE_EPS = 1e-9


def frame_index(t0_s, rate):
    if t0_s < 0:
        raise ValueError("t0 must be non-negative")
    return int(math.floor(rate * t0_s + _FLOOR_EPS))


def _slice(t0_s, rate, length, n_frames, snap_frames):
    i0 = frame_index(t0_s, rate)
    if n_frames is not None and i0 + length > n_frames:
        if i0 + length - n_frames <= snap_frames:
            i0 = n_frames - length
        else:
            raise ValueError(f"slice [{i0}, {i0 + length}) leaves the {n_frames}-frame chunk")
    return i0, i0 + length


def surp_ent_slice(t0_s, n_frames=None, length=SEGMENT_FRAMES, rate=TOKEN_RATE):
    """Frame range of the surprisal/entropy slice (50 Hz, 150 frames)."""
    return _slice(t0_s, rate, length, n_frames, snap_frames=int(round(0.1 * rate)))


def muq_slice(t0_s, n_frames=None, length=75, rate=MUQ_RATE):
    """Frame range of the acoustic-embedding slice (25 Hz, 75 frames)."""
    return _slice(t0_s, rate, length, n_frames, snap_frames=int(round(0.1 * rate)))


def select_predictive_segment(t0_s, starts, chunk_start_s, chunk_end_s, segment_s=3.0):
    """Index of the stored segment whose start is closest to ``t0_s``.

    Only segments lying wholly inside [chunk_start_s, chunk_end_s) compete;
    ties go to the earlier start.
    """
    starts = np.asarray(starts, dtype=np.float64)
    inside = (starts >= chunk_start_s - _TIE_EPS) & (starts + segment_s <= chunk_end_s + _TIE_EPS)
    cand = np.flatnonzero(inside)
    if cand.size == 0:
        raise ValueError(f"no stored segment inside chunk [{chunk_start_s}, {chunk_end_s})")
    dist = np.abs(starts[cand] - t0_s)
    best = dist.min()
    tied = cand[dist <= best + _TIE_EPS]
    return int(tied[np.argmin(starts[tied])])


@dataclass
class AlignedExample:
    eeg: object            # EegSegment
    kind: str
    teacher_raw: np.ndarray  # (N_M, dim)
    teacher_disc: np.ndarray  # (N_M,)


class ChunkArrayStore:
    """Teacher values held as whole 30-s chunk arrays; slices are index math."""

    def __init__(self, kind, arrays, rate, length):
        self.kind = kind
        self.arrays = arrays  # (song, chunk) -> (raw (n,) or (n, D), disc (n,))
        self.rate = rate
        self.length = length

    @property
    def raw_dim(self):
        raw = next(iter(self.arrays.values()))[0]
        return 1 if raw.ndim == 1 else raw.shape[1]

    def lookup(self, song_id, chunk, t0_s):
        raw, disc = self.arrays[(song_id, chunk)]
        lo, hi = _slice(t0_s, self.rate, self.length, len(disc), int(round(0.1 * self.rate)))
        r = raw[lo:hi]
        return (r[:, None] if r.ndim == 1 else r), disc[lo:hi]


class SegmentStore:
    """Default predictive store: 3-s segments every 0.1 s with absolute start times."""

    def __init__(self, kind, per_song, chunk_s=CHUNK_S):
        self.kind = kind
        self.per_song = per_song  # song -> (starts (n,), raw (n, 150), disc (n, 150))
        self.chunk_s = chunk_s
        self.length = SEGMENT_FRAMES
        self.rate = TOKEN_RATE

    raw_dim = 1

    def lookup(self, song_id, chunk, t0_s):
        starts, raw, disc = self.per_song[song_id]
        c0 = chunk * self.chunk_s
        j = select_predictive_segment(c0 + t0_s, starts, c0, c0 + self.chunk_s)
        return raw[j][:, None], disc[j]


def align(eeg_segment, chunk, store):
    raw, disc = store.lookup(eeg_segment.song_id, chunk, eeg_segment.t0_s)
    return AlignedExample(eeg_segment, store.kind, raw, disc)
