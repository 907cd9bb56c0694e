"""Surprisal and entropy of a synthetic token chain, sliding-window vs chunk mode."""
import numpy as np

from eegteacher.synthetic import SyntheticSpec, generate_synthetic
from eegteacher.teacher_features import (MarkovLogitProvider, chunk_based_features, discretize_segments,
                                         sliding_window_features)

data = generate_synthetic(SyntheticSpec(songs=2, channels=2, duration_s=60))
tokens, p = data.tokens[0], data.transitions[0]
provider = MarkovLogitProvider(p)

segments = sliding_window_features(tokens, provider, window_s=16)
s_bins, h_bins = discretize_segments(segments, n_bins=16)
surp = np.concatenate([g.surprisal_raw for g in segments])
ent = np.concatenate([g.entropy_raw for g in segments])
print(f"{len(tokens)} tokens, {len(segments)} segments of 150 frames")
print(f"surprisal mean {surp.mean():.3f} nats, entropy mean {ent.mean():.3f} nats (ln V = {np.log(p.shape[0]):.3f})")
print("surprisal bin edges:", np.round(s_bins.edges[::4], 3))

chunks = chunk_based_features(tokens, provider)
print("chunk mode:", [f"{s.mean():.3f}" for s, _ in chunks], "mean surprisal per 30-s chunk")
