import logging
import math

import numpy as np
import pytest

from eegteacher import training
from eegteacher.alignment import ChunkArrayStore
from eegteacher.dataset import SegmentDataset, substream
from eegteacher.model import ModelConfig, build_model, classification_loss
from eegteacher.signal_prep import Recording, make_excerpts
from eegteacher.training import (NumericError, TrainPlan, load_checkpoint, run_finetune,
                                 run_fullscratch, run_pretrain)


def tiny_cfg(**kw):
    base = dict(channels=4, embed_dim=16, heads=2, classifier_hidden=8, vocab=8, classes=3,
                conv_channels=(4, 4, 4), groups=2, encoder_layers=1, decoder_layers=1)
    base.update(kw)
    return ModelConfig(**base)


def tiny_data(songs=3, seconds=30, with_store=True):
    rng = np.random.default_rng(0)
    recs = [Recording(rng.standard_normal((4, seconds * 125)).astype(np.float32), 125.0, s, 0)
            for s in range(songs)]
    excerpts = [e for r in recs for e in make_excerpts(r)]
    store = None
    if with_store:
        arrays = {(s, 0): (rng.standard_normal(1500), rng.integers(0, 8, 1500)) for s in range(songs)}
        store = ChunkArrayStore("surprisal", arrays, 50, 150)
    return SegmentDataset(recs, excerpts, store)


def test_plan_validation():
    with pytest.raises(ValueError):
        TrainPlan("pretrain", 1)
    with pytest.raises(ValueError):
        TrainPlan("fullscratch", 1, teacher_kind="muq")
    with pytest.raises(ValueError):
        TrainPlan("finetune", 0)
    with pytest.raises(ValueError):
        TrainPlan("distill", 1)


def test_pretrain_deterministic(tmp_path):
    ds = tiny_data()
    plan = TrainPlan("pretrain", 1, batch_size=16, seed=3, teacher_kind="surprisal")
    run_pretrain(plan, tiny_cfg(), ds, str(tmp_path / "a"))
    run_pretrain(plan, tiny_cfg(), tiny_data(), str(tmp_path / "b"))
    a = (tmp_path / "a" / "checkpoint" / "tensors.bin").read_bytes()
    b = (tmp_path / "b" / "checkpoint" / "tensors.bin").read_bytes()
    assert a == b
    _, meta = load_checkpoint(str(tmp_path / "a"))
    assert meta["step"] == 3  # 42 windows at batch 16
    assert set(meta["rng_state"]) == {"shuffle", "offsets", "mask", "dropout.encoder", "dropout.decoder"}


def test_pretrain_logs_both_losses():
    res = run_pretrain(TrainPlan("pretrain", 2, batch_size=16, teacher_kind="surprisal"), tiny_cfg(), tiny_data())
    assert len(res.log) == 2
    for entry in res.log:
        assert entry["loss"] == pytest.approx(entry["loss_class"] + 0.1 * entry["loss_mask"], rel=1e-5)
    assert res.log[0]["first_batch"]["loss_mask"] == pytest.approx(math.log(8), abs=0.5)


def test_pretrain_needs_store():
    with pytest.raises(ValueError):
        run_pretrain(TrainPlan("pretrain", 1, teacher_kind="surprisal"), tiny_cfg(), tiny_data(with_store=False))


def test_finetune_starts_from_pretrained_weights():
    ds = tiny_data()
    pre = run_pretrain(TrainPlan("pretrain", 1, batch_size=16, seed=1, teacher_kind="surprisal"), tiny_cfg(), ds)
    state = pre.model.state_dict()
    plan = TrainPlan("finetune", 1, batch_size=16, seed=1)
    res = run_finetune(plan, tiny_cfg(), tiny_data(with_store=False), state)
    # replay the first batch under the same substreams on a model loaded from the checkpoint
    ref = build_model(tiny_cfg(), 0, with_decoder=False)
    ref.load_state_dict(training.strip_decoder(state))
    ref.train()
    ref.set_dropout_rngs(substream(1, "dropout.encoder"))
    idx = substream(1, "shuffle").permutation(len(ds))[:16]
    b = tiny_data(with_store=False).batch(idx, "train", substream(1, "offsets"))
    loss, _ = classification_loss(ref(b["x"]), b["y"])
    assert res.log[0]["first_batch"]["loss_class"] == pytest.approx(float(loss.data), rel=1e-6)
    assert "decoder.out.weight" not in res.model.state_dict()


def test_fullscratch_seeds_differ():
    ds = tiny_data(with_store=False)
    a = run_fullscratch(TrainPlan("fullscratch", 1, batch_size=16, seed=0), tiny_cfg(), ds)
    b = run_fullscratch(TrainPlan("fullscratch", 1, batch_size=16, seed=1), tiny_cfg(), ds)
    sa, sb = a.model.state_dict(), b.model.state_dict()
    assert any(not np.array_equal(sa[k], sb[k]) for k in sa)


def test_single_sample_batch_skipped(caplog):
    ds = tiny_data(with_store=False)  # 42 windows
    with caplog.at_level(logging.WARNING, logger="eegteacher.training"):
        res = run_fullscratch(TrainPlan("fullscratch", 1, batch_size=41), tiny_cfg(), ds)
    assert res.optimizer.t == 1
    assert any("batch of 1" in r.message for r in caplog.records)


def test_metrics_file(tmp_path):
    run_fullscratch(TrainPlan("fullscratch", 2, batch_size=16), tiny_cfg(), tiny_data(with_store=False),
                    str(tmp_path))
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2


def test_non_finite_loss_raises(monkeypatch):
    def broken(out, labels):
        loss, parts = classification_loss(out, labels)
        return loss, {**parts, "loss": float("nan")}

    monkeypatch.setattr(training, "classification_loss", broken)
    with pytest.raises(NumericError):
        run_fullscratch(TrainPlan("fullscratch", 1, batch_size=16), tiny_cfg(), tiny_data(with_store=False))
