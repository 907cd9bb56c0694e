"""Acceptance suite: one PASS/FAIL line per criterion (printed in the terminal summary).

The toy-reproduction and determinism criteria train the full toy chain four
times (seeds 0, 1, 42 and a repeat of 42), which takes several minutes on
one core.
"""
import itertools
import math
import os
import time
from fractions import Fraction

import numpy as np
import pytest

from eegteacher import pipeline
from eegteacher.alignment import muq_slice, surp_ent_slice
from eegteacher.config import toy_config
from eegteacher.evaluation import accuracy, ensemble, mcnemar_exact, read_cache
from eegteacher.features import TeacherSettings, run_features
from eegteacher.model import ModelConfig, build_model, pretrain_loss, sample_mask
from eegteacher.nn import functional as F
from eegteacher.nn import MultiHeadAttention, TransformerBlock
from eegteacher.nn.gradcheck import check_gradients, leaf, relative_error
from eegteacher.nn.tensor import Tensor, concat, precision, stack
from eegteacher.signal_prep import make_windows
from eegteacher.teacher_features import (MarkovLogitProvider, TracingProvider, UniformLogitProvider,
                                         discretize_quantile, enumerate_segments, fit_kmeans,
                                         fit_quantile_bins, stationary_distribution, surprisal_entropy)

SEEDS = (0, 1, 42)
KINDS = ("muq", "surprisal", "entropy")


# ------------------------------------------------------------ gradient suite
def _op_cases(rng):
    """name -> (scalar function, leaves) for every differentiable op."""
    L = lambda *shape: leaf(shape, rng)  # noqa: E731
    cases = {}

    def case(name, leaves, fn):
        w = {}

        def scalar():
            out = fn()
            if name not in w:
                w[name] = Tensor(rng.standard_normal(out.shape))
            return (out * w[name]).sum()

        cases[name] = (scalar, leaves)

    a, b, c = L(3, 4), L(4), leaf(rng.uniform(0.5, 2, (3, 4)))
    case("add/sub/mul/div", {"a": a, "b": b, "c": c}, lambda: (a + b) * c - a / c)
    m1, m2 = L(2, 3, 4), L(4, 5)
    case("matmul", {"m1": m1, "m2": m2}, lambda: m1 @ m2)
    t = L(2, 3, 4)
    case("reshape/transpose/getitem", {"t": t}, lambda: t.transpose(2, 0, 1).reshape(4, 6)[1:, ::2])
    case("sum/mean", {"t": t}, lambda: t.sum(axis=1) + t.mean(axis=(0, 2), keepdims=True).sum())
    p, q = L(2, 3), L(2, 3)
    case("concat/stack", {"p": p, "q": q}, lambda: concat([p, stack([p, q], 0).sum(0)], 1))
    x = L(4, 6)
    case("relu", {"x": x}, lambda: F.relu(x))
    case("gelu", {"x": x}, lambda: F.gelu(x))
    case("softmax", {"x": x}, lambda: F.softmax(x))
    case("log_softmax", {"x": x}, lambda: F.log_softmax(x))
    target = rng.integers(0, 6, 4)
    cases["cross_entropy"] = (lambda: F.cross_entropy(x, target), {"x": x})
    g, bb = leaf(rng.uniform(0.5, 1.5, 6)), L(6)
    case("layer_norm", {"x": x, "g": g, "b": bb}, lambda: F.layer_norm(x, g, bb))
    xg, gg, bg = L(2, 4, 5), leaf(rng.uniform(0.5, 1.5, 4)), L(4)
    case("group_norm", {"x": xg, "g": gg, "b": bg}, lambda: F.group_norm(xg, 2, gg, bg))
    xb = L(5, 6)
    case("batch_norm", {"x": xb, "g": g, "b": bb},
         lambda: F.batch_norm(xb, g, bb, np.zeros(6), np.ones(6), True))
    xc, wc, bc = L(2, 2, 11), L(3, 2, 3), L(3)
    case("conv1d", {"x": xc, "w": wc, "b": bc}, lambda: F.conv1d(xc, wc, bc, stride=2))
    emb = L(5, 3)
    case("embedding", {"w": emb}, lambda: F.embedding(emb, np.array([0, 3, 3, 1])))
    me, rows = L(3), L(2, 4, 3)
    mask = np.array([[True, False, True, False], [False, False, True, True]])
    case("where_rows", {"m": me, "r": rows}, lambda: F.where_rows(mask, me, rows))
    xd = L(3, 5)
    case("dropout", {"x": xd}, lambda: F.dropout(xd, 0.3, np.random.default_rng(0), True))
    wl, bl = L(2, 6), L(2)
    case("linear", {"x": x, "w": wl, "b": bl}, lambda: F.linear(x, wl, bl))
    att = MultiHeadAttention(4, 2, np.random.default_rng(1))
    xa = L(2, 3, 4)
    case("attention", {"x": xa, **dict(att.named_parameters())}, lambda: att(xa))
    blk = TransformerBlock(4, 2, 2.0, np.random.default_rng(2))
    case("transformer block", {"x": xa, **dict(blk.named_parameters())}, lambda: blk(xa))
    return cases


def _end_to_end_error():
    rng = np.random.default_rng(0)
    cfg = ModelConfig(channels=4, seconds=1, embed_dim=16, heads=2, classifier_hidden=8, teacher_len=10,
                      vocab=8, conv_channels=(4, 4, 4), groups=2, dropout=0.0)
    model = build_model(cfg, 0)
    model.train()
    x, teacher = rng.standard_normal((3, 4, 125)), rng.standard_normal((3, 10, 1))
    disc, labels = rng.integers(0, 8, (3, 10)), np.array([0, 4, 9])
    mask = sample_mask(10, 0.5, rng, batch=3)

    def loss():
        return pretrain_loss(model(x, teacher, mask), labels, disc, mask)[0]

    model.zero_grad()
    loss().backward()
    worst = 0.0
    for _, p in model.named_parameters():
        flat = p.data.reshape(-1)
        idx = rng.choice(flat.size, size=min(4, flat.size), replace=False)
        num = []
        for i in idx:
            old = flat[i]
            flat[i] = old + 1e-5
            fp = float(loss().data)
            flat[i] = old - 1e-5
            fm = float(loss().data)
            flat[i] = old
            num.append((fp - fm) / 2e-5)
        worst = max(worst, relative_error(p.grad.reshape(-1)[idx], num))
    return worst


def test_gradient_suite(verdict):
    t0 = time.perf_counter()
    with precision(np.float64):
        errors = {}
        for name, (fn, leaves) in _op_cases(np.random.default_rng(0)).items():
            errors[name] = max(check_gradients(fn, leaves, h=1e-3).values())
        e2e = _end_to_end_error()
    elapsed = time.perf_counter() - t0
    worst_op = max(errors, key=errors.get)
    ok = max(errors.values()) < 1e-4 and e2e < 1e-3 and elapsed < 120
    verdict("gradient suite", ok, f"{len(errors)} ops, worst {worst_op} {errors[worst_op]:.1e} (< 1e-4); "
            f"end-to-end {e2e:.1e} (< 1e-3); {elapsed:.0f} s (< 120 s)")
    assert ok, errors


# ------------------------------------------------------------ feature oracles
def _exhaustive_inertia(x, k):
    best = math.inf
    for labels in itertools.product(range(k), repeat=len(x)):
        labels = np.array(labels)
        if len(set(labels.tolist())) < k:
            continue
        best = min(best, sum(((x[labels == j] - x[labels == j].mean(0)) ** 2).sum() for j in range(k)))
    return best


def _oracle_populations(u, n_bins):
    order = np.sort(u)
    n = len(u)
    edges = []
    for k in range(n_bins + 1):
        pos = k * (n - 1) / n_bins
        lo = int(math.floor(pos))
        edges.append(order[lo] + (pos - lo) * (order[min(lo + 1, n - 1)] - order[lo]))
    pops = np.zeros(n_bins, dtype=int)
    for v in u:
        pops[min(max(i for i in range(n_bins + 1) if edges[i] <= v), n_bins - 1)] += 1
    return pops


def test_feature_oracles(verdict):
    errs = []
    s, h = surprisal_entropy(np.zeros((10, 2048)), np.arange(10))
    errs += [np.abs(s - math.log(2048)).max(), np.abs(h - math.log(2048)).max()]
    z = np.full((4, 6), -80.0)
    z[np.arange(4), [0, 5, 2, 2]] = 80.0
    s, h = surprisal_entropy(z, np.array([0, 5, 2, 2]))
    errs += [s.max(), h.max()]
    p = np.array([[0.5, 0.5, 0.0], [0.1, 0.6, 0.3], [0.2, 0.2, 0.6]])
    tokens = np.array([1, 1, 2, 0, 1, 2, 2])
    s, h = surprisal_entropy(MarkovLogitProvider(p).logits(tokens), tokens)
    pi = stationary_distribution(p)
    want_s = [-math.log(pi[1])] + [-math.log(p[a, b]) for a, b in zip(tokens[:-1], tokens[1:])]
    ent = lambda row: -sum(v * math.log(v) for v in row if v > 0)  # noqa: E731
    want_h = [ent(pi)] + [ent(p[a]) for a in tokens[:-1]]
    errs += [np.abs(s - want_s).max(), np.abs(h - want_h).max()]
    hand_err = max(errs)

    rng = np.random.default_rng(0)
    frames, bound_ok = 0, True
    for vocab in (2, 7, 128, 2048):
        zz = rng.normal(scale=rng.uniform(0.1, 50), size=(2500, vocab))
        _, hh = surprisal_entropy(zz, rng.integers(0, vocab, 2500))
        bound_ok &= bool(np.all(hh <= math.log(vocab)))
        frames += len(hh)

    pop_dev, oracle_match = 0.0, True
    for n, n_bins in ((1000, 128), (777, 16), (5000, 128)):
        u = rng.normal(size=n)
        pops = np.bincount(discretize_quantile(u, fit_quantile_bins(u, n_bins)), minlength=n_bins)
        oracle = _oracle_populations(u, n_bins)
        oracle_match &= bool(np.abs(pops - oracle).max() <= 1)
        pop_dev = max(pop_dev, float(np.abs(pops - n / n_bins).max()))

    km_ok = True
    for seed in range(6):
        r = np.random.default_rng(100 + seed)
        x = r.normal(size=(int(r.integers(4, 9)), 2))
        k = 2 if seed % 2 else 3
        km_ok &= math.isclose(fit_kmeans(x, k, seed=0, restarts=10).inertia, _exhaustive_inertia(x, k),
                              rel_tol=1e-9, abs_tol=1e-12)

    ok = hand_err < 1e-9 and bound_ok and frames >= 10_000 and oracle_match and pop_dev <= 1 + 1e-9 and km_ok
    verdict("feature oracles", ok, f"hand cases max err {hand_err:.1e} (< 1e-9); entropy <= ln V on {frames} "
            f"frames: {bound_ok}; quantile populations vs oracle within 1: {oracle_match} "
            f"(max |pop - N/B| {pop_dev:.2f}); k-means = exhaustive: {km_ok}")
    assert ok


# ------------------------------------------------------------ index math
def test_index_math(verdict):
    seg_ok = all(
        enumerate_segments(T) == [(s, s + 150) for s in range(0, T) if s % 5 == 0 and s + 150 <= T]
        for T in range(150, 3001))
    rng = np.random.default_rng(0)
    slice_ok = True
    for t0 in rng.integers(0, 27 * 125 + 1, 1000) / 125.0:
        i0 = next(i for i in range(1501) if i <= 50 * t0 + 1e-9 < i + 1)
        j0 = next(j for j in range(751) if j <= 25 * t0 + 1e-9 < j + 1)
        slice_ok &= surp_ent_slice(t0, 1500) == (min(i0, 1350), min(i0, 1350) + 150)
        slice_ok &= muq_slice(t0, 750) == (min(j0, 675), min(j0, 675) + 75)
    windows = len(make_windows(30.0))
    ok = seg_ok and slice_ok and windows == 14
    verdict("index math", ok, f"segments T in [150, 3000]: {seg_ok}; 1000 random t0 slices: {slice_ok}; "
            f"windows per 30-s excerpt: {windows}")
    assert ok


# ------------------------------------------------------------ statistics
def _binomial_oracle(b, c):
    n = b + c
    if n == 0:
        return Fraction(1)
    tail = sum(Fraction(math.comb(n, i), 2 ** n) for i in range(min(b, c) + 1))
    return min(Fraction(1), 2 * tail)


def test_statistics(verdict):
    worst, symmetric = 0.0, True
    for b in range(61):
        for c in range(61 - b):
            worst = max(worst, abs(mcnemar_exact(b, c) - float(_binomial_oracle(b, c))))
            symmetric &= mcnemar_exact(b, c) == mcnemar_exact(c, b)
    p50 = mcnemar_exact(5, 0)
    ok = worst < 1e-12 and symmetric and p50 == 0.0625
    verdict("statistics", ok, f"max |p - oracle| over b+c <= 60: {worst:.1e} (< 1e-12); symmetric: {symmetric}; "
            f"b=5,c=0 -> {p50!r}")
    assert ok


# ------------------------------------------------------------ losses
def test_losses(verdict):
    with precision(np.float64):
        mask = np.zeros((4, 150), bool)
        mask[:, ::2] = True
        out = {"class_logits": Tensor(np.zeros((4, 10))), "teacher_logits": Tensor(np.zeros((4, 150, 128)))}
        total, parts = pretrain_loss(out, [0, 1, 2, 9], np.zeros((4, 150), int), mask, 1.0, 0.1)
    e_c = abs(parts["loss_class"] - math.log(10))
    e_m = abs(parts["loss_mask"] - math.log(128))
    e_t = abs(float(total.data) - (math.log(10) + 0.1 * math.log(128)))
    ok = max(e_c, e_m, e_t) < 1e-9
    verdict("losses", ok, f"|L_C - ln 10| {e_c:.1e}, |L_M - ln 128| {e_m:.1e}, combined {e_t:.1e} (< 1e-9); "
            f"combined = {float(total.data):.4f}")
    assert ok


# ------------------------------------------------------------ toy chains
@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    cfg = toy_config()
    data = str(root / "data")
    pipeline.stage_synth(cfg, data)
    out = {"cfg": cfg, "data": data, "root": root, "reports": {}, "times": {}}
    for seed in SEEDS:
        t0 = time.perf_counter()
        out["reports"][seed] = pipeline.run_chain(cfg, data, str(root / f"work-s{seed}"), seed=seed)
        out["times"][seed] = time.perf_counter() - t0
    return out


def _artifacts(work):
    """Relative path -> bytes for checkpoints, caches and reports."""
    files = {}
    for top in ("runs", "caches", "reports"):
        for dirpath, _, names in os.walk(os.path.join(work, top)):
            for name in names:
                path = os.path.join(dirpath, name)
                rel = os.path.relpath(path, work)
                if top == "runs" and os.sep + "checkpoint" + os.sep not in os.sep + rel:
                    continue
                with open(path, "rb") as fh:
                    files[rel] = fh.read()
    return files


def test_determinism(toy, verdict):
    t0 = time.perf_counter()
    work = str(toy["root"] / "work-s42-repeat")
    pipeline.run_chain(toy["cfg"], toy["data"], work, seed=42)
    repeat_s = time.perf_counter() - t0
    a, b = _artifacts(str(toy["root"] / "work-s42")), _artifacts(work)
    differing = sorted(k for k in a if a[k] != b.get(k))
    budget = toy["times"][42] + repeat_s
    ok = bool(a) and a.keys() == b.keys() and not differing and budget < 15 * 60
    verdict("determinism", ok, f"{len(a)} checkpoint/cache/report files, {len(differing)} differ; two runs took "
            f"{budget / 60:.1f} min (< 15 min)")
    assert ok, differing[:5]


def test_toy_untrained_chance(toy, verdict):
    cache = pipeline.stage_untrained(toy["cfg"], toy["data"], str(toy["root"] / "work-s42"), 42)
    acc = accuracy(cache)
    ok = 0.05 <= acc <= 0.15
    verdict("toy (a) untrained accuracy", ok, f"{acc:.3f} in [0.05, 0.15]")
    assert ok


def test_toy_pretraining_helps(toy, verdict):
    rows, wins = [], {k: 0 for k in KINDS}
    for seed in SEEDS:
        acc = toy["reports"][seed]["accuracy"]
        base = acc[f"fullscratch-s{seed}"]
        parts = []
        for kind in KINDS:
            ft = acc[f"finetune-{kind}-s{seed}"]
            wins[kind] += ft >= base
            parts.append(f"{kind} {ft:.3f}")
        rows.append(f"s{seed}: fullscratch {base:.3f} vs " + ", ".join(parts))
    ok = all(w >= 2 for w in wins.values())
    verdict("toy (b) pretrain+finetune >= fullscratch on >= 2/3 seeds", ok,
            "wins " + ", ".join(f"{k} {w}/3" for k, w in wins.items()) + "; " + "; ".join(rows))
    assert ok


def test_toy_ensemble_beats_members(toy, verdict):
    acc = toy["reports"][42]["accuracy"]
    best = max(acc[f"finetune-{k}-s42"] for k in KINDS)
    ens = acc["ensemble-s42"]
    ok = ens >= best
    others = []
    for seed in SEEDS[:2]:
        a = toy["reports"][seed]["accuracy"]
        others.append(f"s{seed} {a[f'ensemble-s{seed}']:.3f} vs {max(a[f'finetune-{k}-s{seed}'] for k in KINDS):.3f}")
    verdict("toy (c) 3-teacher ensemble >= best single teacher", ok,
            f"seed 42: ensemble {ens:.3f} vs best {best:.3f} (other seeds: {', '.join(others)})")
    assert ok


def test_toy_identical_ensemble(toy, verdict):
    changed, total = 0, 0
    for seed in SEEDS:
        for kind in KINDS:
            c = read_cache(str(toy["root"] / f"work-s{seed}" / "caches" / f"finetune-{kind}-s{seed}.jsonl"))
            e = ensemble([c, c, c])
            changed += int((e.predictions() != c.predictions()).sum())
            total += len(c)
    ok = changed == 0
    verdict("toy (d) ensemble of identical caches", ok, f"{changed} of {total} predictions changed")
    assert ok


# ------------------------------------------------------------ chunk isolation
def test_chunk_isolation(tmp_path, verdict):
    songs = {s: np.arange(240 * 50) for s in range(3)}  # token value = absolute frame index
    providers = {s: TracingProvider(UniformLogitProvider(len(t))) for s, t in songs.items()}
    settings = TeacherSettings(("surprisal", "entropy"), "chunk", 16, 16, 0, 1, 240)
    run_features(str(tmp_path), songs, {}, providers, settings)
    calls = violations = tokens = 0
    for prov in providers.values():
        for ctx, pos in prov.calls:
            calls += 1
            real = ctx[ctx != prov.pad_token]
            tokens += real.size
            violations += int(np.sum(real // 1500 != real[0] // 1500))
            violations += int(np.sum((pos >= 0) & (pos // 1500 != real[0] // 1500)))
    ok = calls > 0 and violations == 0
    verdict("chunk-mode isolation", ok, f"{calls} provider calls, {tokens} tokens read, {violations} violations")
    assert ok
