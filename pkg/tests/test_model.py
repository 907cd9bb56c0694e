import math

import numpy as np
import pytest

from eegteacher.model import (ModelConfig, build_model, classification_loss, predict_labels,
                              pretrain_loss, sample_mask, strip_decoder)
from eegteacher.nn.gradcheck import relative_error
from eegteacher.nn.tensor import Tensor, no_grad, precision


def tiny_cfg(**kw):
    base = dict(channels=4, seconds=1, embed_dim=16, heads=2, classifier_hidden=8, teacher_len=10,
                teacher_dim=1, vocab=8, conv_channels=(4, 4, 4), groups=2, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def test_default_shapes():
    cfg = ModelConfig()
    model = build_model(cfg, 0)
    model.eval()
    x = np.random.default_rng(0).standard_normal((2, 128, 375)).astype(np.float32)
    with no_grad():
        tokens = model.embed_patches(x)
        assert tokens.shape == (2, 384, 512)
        seq = model.assemble(tokens)
        assert seq.shape == (2, 385, 512)
        mask = sample_mask(150, 0.5, np.random.default_rng(0), batch=2)
        out = model(x, np.zeros((2, 150, 1), dtype=np.float32), mask)
    assert out["class_logits"].shape == (2, 10)
    assert out["h_cls"].shape == (2, 512)
    assert out["teacher_logits"].shape == (2, 150, 128)


def test_muq_teacher_shape():
    cfg = tiny_cfg(teacher_kind="muq", teacher_len=75, teacher_dim=6)
    model = build_model(cfg, 0)
    out = model(np.zeros((3, 4, 125)), np.zeros((3, 75, 6)), sample_mask(75, 0.5, np.random.default_rng(1), 3))
    assert out["teacher_logits"].shape == (3, 75, 8)
    with pytest.raises(ValueError):
        model(np.zeros((3, 4, 125)), np.zeros((3, 74, 6)), np.zeros((3, 74), bool))


def test_input_shape_validation():
    model = build_model(tiny_cfg(), 0)
    with pytest.raises(ValueError):
        model(np.zeros((2, 5, 125)))
    with pytest.raises(ValueError):
        tiny_cfg(embed_dim=15)
    with pytest.raises(ValueError):
        tiny_cfg(teacher_kind="pitch")


def test_mask_sizes():
    rng = np.random.default_rng(0)
    assert sample_mask(150, 0.5, rng).sum() == 75
    assert sample_mask(75, 0.5, rng).sum() == 38
    m = sample_mask(75, 0.5, rng, batch=4)
    assert (m.sum(1) == 38).all()
    assert len({r.tobytes() for r in m}) > 1
    assert sample_mask(10, 0.0, rng).sum() == 0
    assert sample_mask(10, 1.0, rng).sum() == 10


def _zero_outputs(batch, n, vocab):
    return {"class_logits": Tensor(np.zeros((batch, 10))),
            "teacher_logits": Tensor(np.zeros((batch, n, vocab)))}


def test_loss_values_uniform_logits():
    mask = np.zeros((2, 150), bool)
    mask[:, :75] = True
    out = _zero_outputs(2, 150, 128)
    total, parts = pretrain_loss(out, [0, 3], np.zeros((2, 150), int), mask)
    assert parts["loss_class"] == pytest.approx(math.log(10), abs=1e-6)
    assert parts["loss_mask"] == pytest.approx(math.log(128), abs=1e-6)
    assert float(total.data) == pytest.approx(2.788, abs=1e-3)
    assert float(total.data) == pytest.approx(math.log(10) + 0.1 * math.log(128), abs=1e-6)


def test_loss_empty_mask_and_classification_only():
    out = _zero_outputs(2, 150, 128)
    _, parts = pretrain_loss(out, [0, 1], np.zeros((2, 150), int), np.zeros((2, 150), bool))
    assert "loss_mask" not in parts
    _, parts = classification_loss(out, [0, 1])
    assert parts["loss"] == pytest.approx(math.log(10), abs=1e-6)


def test_predict_labels_lowest_tie():
    assert list(predict_labels(np.array([[1.0, 3.0, 3.0], [0.0, 0.0, 0.0]]))) == [1, 0]


def test_strip_decoder_and_reload():
    cfg = tiny_cfg()
    full = build_model(cfg, 0)
    state = full.state_dict()
    enc = strip_decoder(state)
    assert any(k.startswith("decoder.") for k in state)
    assert not any(k.startswith("decoder.") for k in enc)
    assert len(enc) < len(state)
    bare = build_model(cfg, 1, with_decoder=False)
    bare.load_state_dict(enc)
    for k, v in bare.state_dict().items():
        np.testing.assert_array_equal(v, state[k])
    x = np.random.default_rng(0).standard_normal((2, 4, 125))
    full.eval()
    bare.eval()
    with no_grad():
        np.testing.assert_allclose(full(x)["class_logits"].data, bare(x)["class_logits"].data)
    with pytest.raises(ValueError):
        bare(x, np.zeros((2, 10)), np.zeros((2, 10), bool))


def test_build_is_seeded():
    a = build_model(tiny_cfg(), 5).state_dict()
    b = build_model(tiny_cfg(), 5).state_dict()
    c = build_model(tiny_cfg(), 6).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def _sampled_numerical(fn, tensor, idx, h):
    flat = tensor.data.reshape(-1)
    out = []
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = float(fn().data)
        flat[i] = old - h
        fm = float(fn().data)
        flat[i] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def test_end_to_end_gradcheck():
    """Full pretraining loss, float64, sampled elements of every parameter."""
    rng = np.random.default_rng(0)
    with precision(np.float64):
        cfg = tiny_cfg()
        model = build_model(cfg, 0)
        model.train()
        x = rng.standard_normal((3, 4, 125))
        teacher = rng.standard_normal((3, 10, 1))
        disc = rng.integers(0, 8, (3, 10))
        mask = sample_mask(10, 0.5, rng, batch=3)
        labels = np.array([0, 4, 9])

        def loss():
            return pretrain_loss(model(x, teacher, mask), labels, disc, mask, 1.0, 0.1)[0]

        model.zero_grad()
        loss().backward()
        worst = {}
        for name, p in model.named_parameters():
            assert p.data.dtype == np.float64
            idx = rng.choice(p.data.size, size=min(4, p.data.size), replace=False)
            num = _sampled_numerical(loss, p, idx, 1e-5)
            ana = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)[idx]
            worst[name] = relative_error(ana, num)
    bad = {k: v for k, v in worst.items() if not v < 1e-3}
    assert not bad, bad


def test_zero_mask_weight_matches_classification():
    rng = np.random.default_rng(1)
    with precision(np.float64):
        model = build_model(tiny_cfg(), 0)
        model.train()
        x = rng.standard_normal((4, 4, 125))
        teacher = rng.standard_normal((4, 10, 1))
        disc = rng.integers(0, 8, (4, 10))
        mask = sample_mask(10, 0.5, rng, batch=4)
        labels = np.array([1, 2, 3, 4])
        model.zero_grad()
        total, _ = pretrain_loss(model(x, teacher, mask), labels, disc, mask, 1.0, 0.0)
        total.backward()
        g_pre = {k: p.grad.copy() for k, p in model.named_parameters()
                 if not k.startswith("decoder.") and p.grad is not None}
        model.zero_grad()
        ref, _ = classification_loss(model(x), labels)
        ref.backward()
        assert float(total.data) == pytest.approx(float(ref.data), abs=1e-12)
        for k, p in model.named_parameters():
            if not k.startswith("decoder."):
                np.testing.assert_allclose(g_pre[k], p.grad, atol=1e-12)
