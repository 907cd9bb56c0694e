"""Window index over recordings, batched segment extraction and teacher lookup."""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .signal_prep import (excerpt_samples, extract_segment, make_windows, normalize_segment,
                          sample_id)


def substream(seed, name):
    """Independent generator for a named purpose under one root seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass(frozen=True)
class WindowRef:
    sample_id: str
    recording_key: str
    excerpt: object
    window_index: int
    window_start_s: float
    label: int


class SegmentDataset:
    """All 8-s windows of the given excerpts.

    ``batch`` cuts one 3-s segment per window (centred in eval mode, random in
    train mode), normalises it and, when a teacher store is attached, looks up
    the aligned teacher slice.
    """

    def __init__(self, recordings, excerpts, store=None, window_s=8.0, stride_s=1.6,
                 segment_s=3.0, delay_ms=200.0, seconds=3):
        self.recordings = {r.key: r for r in recordings} if isinstance(recordings, list) else recordings
        self.store = store
        self.window_s = window_s
        self.segment_s = segment_s
        self.delay_ms = delay_ms
        self.seconds = seconds
        self.windows = []
        for ex in sorted(excerpts, key=lambda e: (e.song_id, e.subject_id, e.excerpt_index)):
            rec = self.recordings[ex.recording_key]
            for w, start in enumerate(make_windows(ex.duration_s, window_s, stride_s, rec.sample_rate)):
                self.windows.append(WindowRef(sample_id(ex.subject_id, ex.song_id, ex.excerpt_index, w),
                                              ex.recording_key, ex, w, start, ex.song_id))
        self._cache = {}

    def __len__(self):
        return len(self.windows)

    @property
    def labels(self):
        return np.array([w.label for w in self.windows])

    def _excerpt(self, win):
        key = (win.recording_key, win.excerpt.excerpt_index)
        if key not in self._cache:
            rec = self.recordings[win.recording_key]
            self._cache[key] = excerpt_samples(rec, win.excerpt)
        return self._cache[key]

    def batch(self, indices, mode="eval", rng=None):
        xs, ys, ids, t0s = [], [], [], []
        raws, discs = [], []
        for i in indices:
            win = self.windows[i]
            rate = self.recordings[win.recording_key].sample_rate
            raw, t0 = extract_segment(self._excerpt(win), win.window_start_s, mode, rng, rate,
                                      self.window_s, self.segment_s, self.delay_ms)
            xs.append(normalize_segment(raw))
            ys.append(win.label)
            ids.append(win.sample_id)
            t0s.append(t0)
            if self.store is not None:
                r, d = self.store.lookup(win.label, win.excerpt.excerpt_index, t0)
                raws.append(r)
                discs.append(d)
        out = {"x": np.stack(xs), "y": np.array(ys, dtype=np.int64), "sample_ids": ids,
               "t0_s": np.array(t0s)}
        if self.store is not None:
            out["teacher_raw"] = np.stack(raws).astype(np.float32)
            out["teacher_disc"] = np.stack(discs).astype(np.int64)
        return out
