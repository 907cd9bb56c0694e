"""Deterministic validation inference, logit caches, ensembles and McNemar tests."""
from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binom

from .nn.tensor import no_grad


@dataclass
class PredictionCache:
    """sample_id -> (class logits, true label), in insertion order."""

    model_tag: str
    config_hash: str = ""
    entries: OrderedDict = field(default_factory=OrderedDict)

    def __len__(self):
        return len(self.entries)

    def ids(self):
        return list(self.entries)

    def logits(self):
        return np.stack([v[0] for v in self.entries.values()])

    def labels(self):
        return np.array([v[1] for v in self.entries.values()], dtype=np.int64)

    def predictions(self):
        return self.logits().argmax(axis=1)


@dataclass
class ContingencyTable:
    a: int  # both correct
    b: int  # only A correct
    c: int  # only B correct
    d: int  # both wrong

    @property
    def n(self):
        return self.a + self.b + self.c + self.d


def evaluate_model(model, dataset, model_tag="model", config_hash="", batch_size=64):
    """Centre-extracted segments, eval-mode forward, logits keyed by sample id."""
    cache = PredictionCache(model_tag, config_hash)
    model.eval()
    with no_grad():
        for i in range(0, len(dataset), batch_size):
            b = dataset.batch(range(i, min(i + batch_size, len(dataset))), "eval")
            z = model(b["x"])["class_logits"].data
            for sid, row, y in zip(b["sample_ids"], z, b["y"]):
                cache.entries[sid] = (np.asarray(row, dtype=np.float32), int(y))
    return cache


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def ensemble_probs(caches):
    ids = caches[0].ids()
    for c in caches[1:]:
        if set(c.ids()) != set(ids):
            raise ValueError(f"sample ids of {c.model_tag!r} differ from {caches[0].model_tag!r}")
    probs = np.mean([softmax(np.stack([c.entries[i][0] for i in ids])) for c in caches], axis=0)
    return ids, probs


def ensemble(caches, tag=None):
    """Equal-weight average of per-model softmax probabilities.

    The returned cache stores log of the averaged probabilities as its
    logits, so its softmax is the ensemble distribution and argmax is the
    ensemble prediction.
    """
    if len(caches) < 1:
        raise ValueError("ensemble needs at least one cache")
    ids, probs = ensemble_probs(caches)
    tag = tag or "ens(" + "+".join(c.model_tag for c in caches) + ")"
    out = PredictionCache(tag, "+".join(c.config_hash for c in caches))
    with np.errstate(divide="ignore"):
        logp = np.log(probs)
    for i, sid in enumerate(ids):
        out.entries[sid] = (logp[i], caches[0].entries[sid][1])
    return out


def accuracy(cache):
    if len(cache) == 0:
        raise ValueError("empty cache")
    return float((cache.predictions() == cache.labels()).mean())


def contingency(cache_a, cache_b):
    shared = [i for i in cache_a.entries if i in cache_b.entries]
    ca = np.array([int(np.argmax(cache_a.entries[i][0])) == cache_a.entries[i][1] for i in shared])
    cb = np.array([int(np.argmax(cache_b.entries[i][0])) == cache_b.entries[i][1] for i in shared])
    if not shared:
        return ContingencyTable(0, 0, 0, 0)
    return ContingencyTable(int((ca & cb).sum()), int((ca & ~cb).sum()),
                            int((~ca & cb).sum()), int((~ca & ~cb).sum()))


def mcnemar_exact(b, c):
    """Exact two-sided McNemar p-value: doubled smaller binomial tail, capped at 1."""
    if b < 0 or c < 0:
        raise ValueError("discordant counts must be non-negative")
    n = b + c
    if n == 0:
        return 1.0
    lo, hi = min(b, c), max(b, c)
    tail = min(binom.cdf(lo, n, 0.5), binom.sf(hi - 1, n, 0.5))
    return float(min(1.0, 2.0 * tail))


def stars(p):
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


def comparison_report(caches, pairs):
    """Rows of accuracy difference and McNemar p for each (A, B) pair of cache tags."""
    accs = {tag: accuracy(c) for tag, c in caches.items()}
    rows = []
    for a, b in pairs:
        t = contingency(caches[a], caches[b])
        p = mcnemar_exact(t.b, t.c)
        rows.append({"a": a, "b": b, "acc_a": accs[a], "acc_b": accs[b],
                     "delta": accs[a] - accs[b], "table": [t.a, t.b, t.c, t.d],
                     "p": p, "stars": stars(p), "significant": p < 0.05})
    return {"accuracy": accs, "comparisons": rows}


def format_report(report):
    tags = list(report["accuracy"])
    w = max([len("model")] + [len(t) for t in tags])
    lines = [f"{'model':<{w}}  accuracy"]
    for tag, acc in report["accuracy"].items():
        lines.append(f"{tag:<{w}}  {acc:8.4f}")
    if report["comparisons"]:
        lines.append("")
        lines.append(f"{'A':<{w}}  {'B':<{w}}  {'dAcc':>8} {'b':>5} {'c':>5} {'p':>11}")
        for r in report["comparisons"]:
            _, b, c, _ = r["table"]
            lines.append(f"{r['a']:<{w}}  {r['b']:<{w}}  {r['delta']:+8.4f} {b:5d} {c:5d} "
                         f"{r['p']:11.4g} {r['stars']}".rstrip())
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------- cache files
def write_cache(path, cache):
    with open(path, "w") as fh:
        fh.write(json.dumps({"model_tag": cache.model_tag, "config_hash": cache.config_hash}) + "\n")
        for sid, (z, y) in cache.entries.items():
            fh.write(json.dumps({"sample_id": sid, "label": int(y),
                                 "logits": [float(v) for v in np.asarray(z)]}) + "\n")


def read_cache(path):
    with open(path) as fh:
        header = json.loads(fh.readline())
        cache = PredictionCache(header["model_tag"], header.get("config_hash", ""))
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                cache.entries[rec["sample_id"]] = (np.asarray(rec["logits"], dtype=np.float64), rec["label"])
    return cache


def write_report(prefix, report):
    with open(prefix + ".txt", "w") as fh:
        fh.write(format_report(report))
    with open(prefix + ".json", "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
